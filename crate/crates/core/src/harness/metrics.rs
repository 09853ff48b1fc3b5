//! Path-frame deviation between a driven trajectory and a reference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spacing used to resample both trajectories by arc length.
pub const RESAMPLE_STEP_M: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("reference needs at least two distinct points")]
    ShortReference,
    #[error("actual trajectory is empty")]
    EmptyActual,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviationMetrics {
    /// Mean absolute offset along the reference tangent (m).
    pub mae_x: f64,
    /// Mean absolute offset along the reference normal (m).
    pub mae_y: f64,
    pub nav_time: f64,
    pub manip_time: f64,
    pub total_time: f64,
    pub path_length: f64,
    pub collisions: u32,
}

/// Points spaced `step` apart along the polyline, starting at its first
/// point and always including the last one.
pub fn resample(points: &[(f64, f64)], step: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let Some(&first) = points.first() else {
        return out;
    };
    out.push(first);
    let mut carry = 0.0; // distance travelled since the last emitted point
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let seg = (b.0 - a.0).hypot(b.1 - a.1);
        if seg == 0.0 {
            continue;
        }
        let mut s = step - carry;
        while s <= seg {
            let t = s / seg;
            out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
            s += step;
        }
        carry = seg - (s - step);
    }
    let last = points[points.len() - 1];
    let tail = out[out.len() - 1];
    if (tail.0 - last.0).hypot(tail.1 - last.1) > 1e-9 {
        out.push(last);
    }
    out
}

pub fn polyline_length(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).sum()
}

/// Mean absolute tangential and normal offsets of `actual` from `reference`.
/// Both are resampled at 1 cm of arc so the result does not depend on how
/// long the vehicle dwelt anywhere.
pub fn deviation_mae(actual: &[(f64, f64)], reference: &[(f64, f64)]) -> Result<(f64, f64), MetricError> {
    if actual.is_empty() {
        return Err(MetricError::EmptyActual);
    }
    let r = resample(reference, RESAMPLE_STEP_M);
    if r.len() < 2 {
        return Err(MetricError::ShortReference);
    }
    let a = resample(actual, RESAMPLE_STEP_M);
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in &a {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, q) in r.iter().enumerate() {
            let d = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let (i0, i1) = if best + 1 < r.len() { (best, best + 1) } else { (best - 1, best) };
        let (tx, ty) = (r[i1].0 - r[i0].0, r[i1].1 - r[i0].1);
        let n = tx.hypot(ty);
        let (tx, ty) = (tx / n, ty / n);
        let (dx, dy) = (p.0 - r[best].0, p.1 - r[best].1);
        sx += (dx * tx + dy * ty).abs();
        sy += (-dx * ty + dy * tx).abs();
    }
    let n = a.len() as f64;
    Ok((sx / n, sy / n))
}
