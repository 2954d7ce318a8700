//! The alignment criterion between a proposed update and the anticipated displacement.

use crate::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `live - anchor` for every group.
pub fn total_displacement(live: &[Vec<f64>], anchor: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if live.len() != anchor.len() {
        return Err(Error::shape("live and anchor group counts differ"));
    }
    live.iter()
        .zip(anchor)
        .enumerate()
        .map(|(g, (l, a))| {
            if l.len() != a.len() {
                return Err(Error::shape(format!("group {g}: live and anchor lengths differ")));
            }
            Ok(l.iter().zip(a).map(|(x, y)| x - y).collect())
        })
        .collect()
}

/// Cosine between `u` and `u + td`.
///
/// `None` when `|u| < eps` or `|u + td| < eps`. The result is clamped to `[-1, 1]`.
pub fn cosine_alignment(u: &[f64], td: &[f64], eps: f64) -> Option<f64> {
    debug_assert_eq!(u.len(), td.len());
    let mut uu = 0.0;
    let mut u_sum = 0.0;
    let mut ss = 0.0;
    for (&a, &t) in u.iter().zip(td) {
        let s = a + t;
        uu += a * a;
        u_sum += a * s;
        ss += s * s;
    }
    let (nu, ns) = (uu.sqrt(), ss.sqrt());
    if nu < eps || ns < eps {
        return None;
    }
    Some((u_sum / (nu * ns)).clamp(-1.0, 1.0))
}

/// Same quantity written through `T = |td|`, `u = |u|` and the angle `beta` between them:
/// `(T cos b + u) / sqrt((T + u cos b)^2 + (u sin b)^2)`.
pub fn cosine_via_decomposition(t: f64, u: f64, beta: f64) -> Option<f64> {
    let (sin, cos) = beta.sin_cos();
    let denom = ((t + u * cos).powi(2) + (u * sin).powi(2)).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    Some((t * cos + u) / denom)
}

/// Angle in `[0, pi]` between two nonzero vectors.
pub fn angle_between(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0).acos())
}
