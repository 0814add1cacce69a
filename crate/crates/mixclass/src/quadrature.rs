//! Adaptive Gauss-Kronrod integration with a CDF change of variables, used by
//! the efficiency engine for expectations over the response distribution.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};

// 15-point Kronrod abscissae (positive half) and weights, with the embedded
// 7-point Gauss weights on the odd-indexed abscissae.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_69,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_94,
    0.417_959_183_673_469_4,
];

/// Tolerances and budget for the adaptive rule.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { abs_tol: 1e-10, rel_tol: 1e-8, max_subdivisions: 200 }
    }
}

impl QuadratureConfig {
    fn validate(&self) -> Result<()> {
        if self.abs_tol <= 0.0 || self.rel_tol <= 0.0 || self.max_subdivisions < 1 {
            return Err(Error::Config(format!(
                "quadrature config needs positive tolerances and max_subdivisions >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One evaluated subinterval: Kronrod value plus the Kronrod-Gauss discrepancy.
#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let f_center = f(center);

    let mut kronrod = f_center * WGK[7];
    let mut gauss = f_center * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let fsum = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * fsum;
        if j % 2 == 1 {
            gauss += WG[j / 2] * fsum;
        }
    }
    Segment { a, b, value: kronrod * half, err: ((kronrod - gauss) * half).abs() }
}

/// Integrate `f` over the finite interval `[a, b]`.
///
/// Bisects the subinterval with the largest Kronrod-Gauss discrepancy until
/// the accumulated discrepancy meets `max(abs_tol, rel_tol * |value|)` or the
/// subdivision budget runs out (an error carrying the best estimate).
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    cfg: &QuadratureConfig,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::Config(format!("integration bounds must be finite with a < b, got [{a}, {b}]")));
    }

    let mut heap = BinaryHeap::new();
    let first = gk15(&f, a, b);
    if !first.value.is_finite() {
        return Err(Error::Domain(format!("integrand non-finite on [{a}, {b}]")));
    }
    let mut total_value = first.value;
    let mut total_err = first.err;
    heap.push(first);

    for _ in 0..cfg.max_subdivisions {
        if total_err <= cfg.abs_tol.max(cfg.rel_tol * total_value.abs()) {
            return Ok((total_value, total_err));
        }
        let worst = heap.pop().expect("heap holds at least one segment");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval at floating-point resolution; cannot refine further
            heap.push(worst);
            break;
        }
        let left = gk15(&f, worst.a, mid);
        let right = gk15(&f, mid, worst.b);
        if !(left.value.is_finite() && right.value.is_finite()) {
            return Err(Error::Domain(format!(
                "integrand non-finite on [{}, {}]",
                worst.a, worst.b
            )));
        }
        total_value += left.value + right.value - worst.value;
        total_err += left.err + right.err - worst.err;
        heap.push(left);
        heap.push(right);
    }

    if total_err <= cfg.abs_tol.max(cfg.rel_tol * total_value.abs()) {
        Ok((total_value, total_err))
    } else {
        Err(Error::QuadratureBudget { estimate: total_value, err_est: total_err })
    }
}

/// A continuous response distribution exposed through its CDF/quantile pair.
pub trait ContinuousResponse {
    fn cdf(&self, y: f64) -> f64;
    fn quantile(&self, u: f64) -> f64;
}

/// Normal response distribution backed by the statrs CDF/quantile.
#[derive(Debug, Clone, Copy)]
pub struct NormalResponse {
    inner: statrs::distribution::Normal,
}

impl NormalResponse {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        statrs::distribution::Normal::new(mean, sd)
            .map(|inner| NormalResponse { inner })
            .map_err(|e| Error::Config(format!("normal response: {e}")))
    }
}

impl ContinuousResponse for NormalResponse {
    fn cdf(&self, y: f64) -> f64 {
        self.inner.cdf(y)
    }
    fn quantile(&self, u: f64) -> f64 {
        self.inner.inverse_cdf(u)
    }
}

/// Endpoint clipping for the CDF-transformed unit interval.
const QUANTILE_EPS: f64 = 1e-12;

/// Expectation `E[g(Y)]` via the change of variables `u = F(y)`:
/// `int_0^1 g(F^{-1}(u)) du`, integrated on `(eps, 1 - eps)`.
pub fn integrate_expectation<G, D>(g: G, dist: &D, cfg: &QuadratureConfig) -> Result<f64>
where
    G: Fn(f64) -> f64,
    D: ContinuousResponse + ?Sized,
{
    let (value, _) = integrate(
        |u| g(dist.quantile(u)),
        QUANTILE_EPS,
        1.0 - QUANTILE_EPS,
        cfg,
    )?;
    Ok(value)
}

/// Expectation `E[g(Y)]` for a non-negative integer response, summed from 0
/// upward and truncated once the remaining pmf tail mass drops below
/// `tail_tol`.
pub fn sum_expectation<G, P>(g: G, pmf: P, tail_tol: f64) -> f64
where
    G: Fn(u64) -> f64,
    P: Fn(u64) -> f64,
{
    let mut total = 0.0;
    let mut mass = 0.0;
    let mut y = 0u64;
    // hard cap keeps a malformed pmf from spinning forever
    while mass < 1.0 - tail_tol && y < 100_000_000 {
        let p = pmf(y);
        total += g(y) * p;
        mass += p;
        y += 1;
    }
    total
}
