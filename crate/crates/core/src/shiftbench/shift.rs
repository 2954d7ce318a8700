use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::seeded_rng;
use crate::nn::Batch;
use crate::{Error, Result};

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Rotation,
    Translation,
    FeatureScale,
    AdditiveNoise,
    LabelConditionalNoise,
}

/// A graded corruption. Severity 0 is the identity; magnitudes grow linearly with it.
///
/// Kind-specific knobs are optional and rejected when they do not apply to `kind`:
///
/// | kind | knobs (defaults) |
/// |---|---|
/// | rotation | `plane` ([0, 1]), `degrees_per_level` (15) |
/// | translation | `distance_per_level` (0.5), `direction_seed` (0) |
/// | feature_scale | `factor_per_level` (0.2): inputs scaled by `1 + factor * severity` |
/// | additive_noise | `std_per_level` (0.1), `noise_seed` (0) |
/// | label_conditional_noise | `class` (0), `std_per_level` (0.25), `distance_per_level` (0.5), `direction_seed` (0), `noise_seed` (0) |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrees_per_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_per_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_per_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_per_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, severity: u8) -> Self {
        Self {
            kind,
            severity,
            plane: None,
            degrees_per_level: None,
            distance_per_level: None,
            direction_seed: None,
            factor_per_level: None,
            std_per_level: None,
            noise_seed: None,
            class: None,
        }
    }

    pub fn rotation(severity: u8, degrees_per_level: f64) -> Self {
        Self {
            degrees_per_level: Some(degrees_per_level),
            ..Self::new(ShiftKind::Rotation, severity)
        }
    }

    pub fn label_conditional(severity: u8, class: usize) -> Self {
        Self {
            class: Some(class),
            ..Self::new(ShiftKind::LabelConditionalNoise, severity)
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.severity > MAX_SEVERITY {
            return Err(Error::config(format!(
                "severity {} above {MAX_SEVERITY}",
                self.severity
            )));
        }
        let allowed: &[&str] = match self.kind {
            ShiftKind::Rotation => &["plane", "degrees_per_level"],
            ShiftKind::Translation => &["distance_per_level", "direction_seed"],
            ShiftKind::FeatureScale => &["factor_per_level"],
            ShiftKind::AdditiveNoise => &["std_per_level", "noise_seed"],
            ShiftKind::LabelConditionalNoise => &[
                "class",
                "std_per_level",
                "distance_per_level",
                "direction_seed",
                "noise_seed",
            ],
        };
        for (name, set) in [
            ("plane", self.plane.is_some()),
            ("degrees_per_level", self.degrees_per_level.is_some()),
            ("distance_per_level", self.distance_per_level.is_some()),
            ("direction_seed", self.direction_seed.is_some()),
            ("factor_per_level", self.factor_per_level.is_some()),
            ("std_per_level", self.std_per_level.is_some()),
            ("noise_seed", self.noise_seed.is_some()),
            ("class", self.class.is_some()),
        ] {
            if set && !allowed.contains(&name) {
                return Err(Error::config(format!(
                    "{name} does not apply to {:?} shifts",
                    self.kind
                )));
            }
        }
        for v in [
            self.degrees_per_level,
            self.distance_per_level,
            self.factor_per_level,
            self.std_per_level,
        ]
        .into_iter()
        .flatten()
        {
            if !v.is_finite() {
                return Err(Error::config("shift magnitudes must be finite"));
            }
        }
        if self.std_per_level.is_some_and(|s| s < 0.0) {
            return Err(Error::config("std_per_level must be nonnegative"));
        }
        if self.kind == ShiftKind::Rotation {
            let [a, b] = self.plane();
            if a == b || a >= input_dim || b >= input_dim {
                return Err(Error::config(format!(
                    "rotation plane [{a}, {b}] is not a plane of {input_dim}-dimensional inputs"
                )));
            }
        }
        Ok(())
    }

    fn plane(&self) -> [usize; 2] {
        self.plane.unwrap_or([0, 1])
    }

    /// Rotation angle in radians at this severity.
    pub fn angle(&self) -> f64 {
        (self.degrees_per_level.unwrap_or(15.0) * self.severity as f64).to_radians()
    }

    fn noise_std(&self) -> f64 {
        let per_level = self.std_per_level.unwrap_or(match self.kind {
            ShiftKind::LabelConditionalNoise => 0.25,
            _ => 0.1,
        });
        per_level * self.severity as f64
    }

    fn distance(&self) -> f64 {
        self.distance_per_level.unwrap_or(0.5) * self.severity as f64
    }

    fn direction(&self, dim: usize) -> Vec<f64> {
        let mut rng = seeded_rng(self.direction_seed.unwrap_or(0), 0x5d1f);
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

/// Applies `shift` with randomness drawn from its own `noise_seed`.
pub fn apply_shift(batch: &Batch, shift: &ShiftSpec) -> Result<Batch> {
    let mut rng = seeded_rng(shift.noise_seed.unwrap_or(0), 0x7e57);
    apply_shift_with_rng(batch, shift, &mut rng)
}

/// Applies `shift` drawing any noise from `rng`. Labels are never modified.
pub fn apply_shift_with_rng(batch: &Batch, shift: &ShiftSpec, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let dim = batch.input_dim();
    shift.validate(dim)?;
    let mut out = batch.clone();
    if shift.severity == 0 {
        return Ok(out);
    }
    match shift.kind {
        ShiftKind::Rotation => {
            let [a, b] = shift.plane();
            let (sin, cos) = shift.angle().sin_cos();
            for row in out.inputs_mut().chunks_exact_mut(dim) {
                let (x, y) = (row[a], row[b]);
                row[a] = cos * x - sin * y;
                row[b] = sin * x + cos * y;
            }
        }
        ShiftKind::Translation => {
            let dir = shift.direction(dim);
            let d = shift.distance();
            for row in out.inputs_mut().chunks_exact_mut(dim) {
                row.iter_mut().zip(&dir).for_each(|(v, u)| *v += d * u);
            }
        }
        ShiftKind::FeatureScale => {
            let f = 1.0 + shift.factor_per_level.unwrap_or(0.2) * shift.severity as f64;
            out.inputs_mut().iter_mut().for_each(|v| *v *= f);
        }
        ShiftKind::AdditiveNoise => {
            let noise = Normal::new(0.0, shift.noise_std()).map_err(|e| Error::config(e.to_string()))?;
            out.inputs_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        ShiftKind::LabelConditionalNoise => {
            let labels = batch
                .labels()
                .ok_or_else(|| Error::precondition("label-conditional shifts need labels"))?
                .to_vec();
            let class = shift.class.unwrap_or(0);
            let noise = Normal::new(0.0, shift.noise_std()).map_err(|e| Error::config(e.to_string()))?;
            let dir = shift.direction(dim);
            let d = shift.distance();
            for (row, &y) in out.inputs_mut().chunks_exact_mut(dim).zip(&labels) {
                if y != class {
                    continue;
                }
                for (v, u) in row.iter_mut().zip(&dir) {
                    *v += d * u + noise.sample(rng);
                }
            }
        }
    }
    Ok(out)
}
