//! Bjøntegaard-Delta comparison of two rate-accuracy curves.
//!
//! Each curve is fitted with a least-squares cubic, accuracy (percent) as a
//! function of `log10(rate)` and the inverse. The fitted polynomials are
//! integrated in closed form over the interval where both curves have
//! samples; the mean gap is the BD metric. BD-rate is reported as a percent
//! change of rate, BD-accuracy in accuracy points, both of the test curve
//! against the anchor.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::RaPoint;
use crate::error::{Error, Result};

/// Minimum number of samples per curve for a cubic fit.
pub const MIN_POINTS: usize = 4;

/// Least-squares polynomial `c[0] + c[1]·x + …` of the given degree.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() || x.len() <= degree {
        return Err(Error::Undefined(format!(
            "a degree-{degree} fit needs more than {degree} samples, got {}",
            x.len()
        )));
    }
    // Centered and scaled abscissa keeps the Vandermonde matrix conditioned.
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mid = 0.5 * (lo + hi);
    let half = (0.5 * (hi - lo)).max(f64::EPSILON);
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| ((x[i] - mid) / half).powi(j as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    if svd.singular_values.min() <= 1e-12 * svd.singular_values.max() {
        return Err(Error::Undefined("fit samples are degenerate (too few distinct values)".into()));
    }
    let scaled = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::Undefined(format!("least squares failed: {e}")))?;
    // Expand p((x - mid) / half) back to powers of x.
    let mut coeffs = vec![0.0; degree + 1];
    let mut basis = vec![1.0]; // coefficients of ((x - mid) / half)^j
    for j in 0..=degree {
        for (k, &c) in basis.iter().enumerate() {
            coeffs[k] += scaled[j] * c;
        }
        let mut next = vec![0.0; basis.len() + 1];
        for (k, &c) in basis.iter().enumerate() {
            next[k + 1] += c / half;
            next[k] -= c * mid / half;
        }
        basis = next;
    }
    Ok(coeffs)
}

/// `∫_a^b p(x) dx`.
pub fn poly_integral(coeffs: &[f64], a: f64, b: f64) -> f64 {
    let prim = |x: f64| {
        coeffs
            .iter()
            .enumerate()
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * x + c / (k + 1) as f64)
            * x
    };
    prim(b) - prim(a)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BdReport {
    /// Percent change of rate at equal accuracy; `None` without overlap.
    pub bd_rate: Option<f64>,
    /// Accuracy-point change at equal rate; `None` without overlap.
    pub bd_acc: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)))
}

/// Mean of `f_test − f_anchor` over the overlap of the sample ranges.
fn mean_gap(x_test: &[f64], y_test: &[f64], x_anchor: &[f64], y_anchor: &[f64], what: &str) -> Result<f64> {
    let (lt, ht) = range(x_test);
    let (la, ha) = range(x_anchor);
    let (lo, hi) = (lt.max(la), ht.min(ha));
    if hi - lo <= 0.0 {
        return Err(Error::Undefined(format!(
            "{what} ranges [{lt}, {ht}] and [{la}, {ha}] do not overlap"
        )));
    }
    let pt = polyfit(x_test, y_test, 3)?;
    let pa = polyfit(x_anchor, y_anchor, 3)?;
    Ok((poly_integral(&pt, lo, hi) - poly_integral(&pa, lo, hi)) / (hi - lo))
}

pub fn bd_metrics(test: &[RaPoint], anchor: &[RaPoint]) -> Result<BdReport> {
    for (name, c) in [("test", test), ("anchor", anchor)] {
        if c.len() < MIN_POINTS {
            return Err(Error::Undefined(format!(
                "{name} curve has {} points, at least {MIN_POINTS} are needed",
                c.len()
            )));
        }
        if let Some(p) = c.iter().find(|p| !(p.rate_bits > 0.0) || !p.top1.is_finite()) {
            return Err(Error::Undefined(format!(
                "{name} curve has a non-positive or non-finite sample ({}, {})",
                p.rate_bits, p.top1
            )));
        }
    }
    let split = |c: &[RaPoint]| -> (Vec<f64>, Vec<f64>) {
        c.iter().map(|p| (p.rate_bits.log10(), p.top1)).unzip()
    };
    let (rt, at) = split(test);
    let (ra, aa) = split(anchor);
    let mut diagnostics = Vec::new();
    let mut keep = |r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            diagnostics.push(e.to_string());
            None
        }
    };
    let bd_rate = keep(mean_gap(&at, &rt, &aa, &ra, "accuracy")).map(|d| (10f64.powf(d) - 1.0) * 100.0);
    let bd_acc = keep(mean_gap(&rt, &at, &ra, &aa, "log-rate"));
    Ok(BdReport {
        bd_rate,
        bd_acc,
        diagnostics,
    })
}
