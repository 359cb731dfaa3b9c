use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One rate-accuracy sample: a trained model evaluated on a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaPoint {
    pub config: String,
    #[serde(rename = "P")]
    pub points: usize,
    pub lambda: f64,
    /// Mean payload bits per cloud.
    pub rate_bits: f64,
    /// Top-1 accuracy in percent.
    pub top1: f64,
}

impl RaPoint {
    fn dominates(&self, other: &RaPoint) -> bool {
        self.rate_bits <= other.rate_bits
            && self.top1 >= other.top1
            && (self.rate_bits < other.rate_bits || self.top1 > other.top1)
    }
}

fn order(a: &RaPoint, b: &RaPoint) -> Ordering {
    a.rate_bits
        .total_cmp(&b.rate_bits)
        .then(b.top1.total_cmp(&a.top1))
        .then(a.lambda.total_cmp(&b.lambda))
        .then(a.points.cmp(&b.points))
        .then(a.config.cmp(&b.config))
}

/// Points not dominated by any other point, sorted by rate. Of several
/// points with equal rate and accuracy, only the first in a fixed
/// (λ, P, config) order is kept, so the result does not depend on input
/// order. Accuracy strictly increases along the front.
pub fn pareto_front(points: &[RaPoint]) -> Vec<RaPoint> {
    let mut sorted: Vec<&RaPoint> = points.iter().collect();
    sorted.sort_by(|a, b| order(a, b));
    let mut front: Vec<RaPoint> = Vec::new();
    for p in sorted {
        if front.last().map_or(true, |best| p.top1 > best.top1) {
            front.push(p.clone());
        }
    }
    debug_assert!(front.iter().all(|p| !points.iter().any(|q| q.dominates(p))));
    front
}

pub fn write_ra_csv<W: Write>(w: W, points: &[RaPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(p).map_err(|e| Error::format(format!("csv: {e}")))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ra_csv<R: Read>(r: R) -> Result<Vec<RaPoint>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Parse {
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}
