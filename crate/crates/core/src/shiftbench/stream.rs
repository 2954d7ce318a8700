use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::seeded_rng;
use super::shift::{apply_shift_with_rng, ShiftSpec};
use super::task::{generate_task, sample_domain, TaskSpec};
use crate::nn::Batch;
use crate::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
/// Fraction of each shifted domain used for online adaptation; the rest is held out.
pub const ADAPT_FRACTION: f64 = 0.8;

const TARGET_STREAM_BASE: u64 = 1_000;
const NOISE_STREAM_BASE: u64 = 2_000;
const SPLIT_STREAM_BASE: u64 = 3_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// One shift over the whole stream.
    Single,
    /// Shifts concatenated in order with no model reset between them.
    Continual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub shifts: Vec<ShiftSpec>,
    pub mode: StreamMode,
    pub batch_size: usize,
    pub seed: u64,
}

/// One shifted domain: its adaptation batches and its held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub shift: ShiftSpec,
    pub adapt: Vec<Batch>,
    pub holdout: Batch,
    pub adapt_indices: Vec<usize>,
    pub holdout_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftStream {
    pub task: TaskSpec,
    pub spec: StreamSpec,
    pub segments: Vec<Segment>,
    pub source_holdout: Batch,
}

impl ShiftStream {
    /// All adaptation batches in presentation order.
    pub fn adapt_batches(&self) -> Vec<Batch> {
        self.segments.iter().flat_map(|s| s.adapt.iter().cloned()).collect()
    }

    pub fn adapt_len(&self) -> usize {
        self.segments.iter().map(|s| s.adapt_indices.len()).sum()
    }

    pub fn holdout_len(&self) -> usize {
        self.segments.iter().map(|s| s.holdout_indices.len()).sum()
    }

    /// Union of every segment's held-out split.
    pub fn target_holdout(&self) -> Result<Batch> {
        let parts: Vec<Batch> = self.segments.iter().map(|s| s.holdout.clone()).collect();
        Batch::concat(&parts)
    }

    pub fn manifest(&self) -> StreamManifest {
        StreamManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            task: self.task,
            stream: self.spec.clone(),
            splits: self
                .segments
                .iter()
                .map(|s| SplitIndices {
                    adapt: s.adapt_indices.clone(),
                    holdout: s.holdout_indices.clone(),
                })
                .collect(),
        }
    }

    /// Delimited text dump: `segment,split,index,label,x0,...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let dim = self.task.input_dim;
        let mut header = vec!["segment".to_string(), "split".into(), "index".into(), "label".into()];
        header.extend((0..dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        let mut write = |seg: usize, split: &str, idx: &[usize], batch: &Batch| -> Result<()> {
            let labels = batch.labels().expect("stream batches are labeled");
            for (r, (&i, &y)) in idx.iter().zip(labels).enumerate() {
                let mut rec = vec![seg.to_string(), split.to_string(), i.to_string(), y.to_string()];
                rec.extend(batch.row(r).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            Ok(())
        };
        for (s, seg) in self.segments.iter().enumerate() {
            let adapt = Batch::concat(&seg.adapt)?;
            write(s, "adapt", &seg.adapt_indices, &adapt)?;
            write(s, "target_holdout", &seg.holdout_indices, &seg.holdout)?;
        }
        let src: Vec<usize> = (0..self.source_holdout.len()).collect();
        write(usize::MAX, "source_holdout", &src, &self.source_holdout)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIndices {
    pub adapt: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Everything needed to regenerate a stream exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub format_version: u32,
    pub task: TaskSpec,
    pub stream: StreamSpec,
    pub splits: Vec<SplitIndices>,
}

impl StreamManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: StreamManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                m.format_version
            )));
        }
        Ok(m)
    }

    /// Rebuilds the stream and checks the recorded splits still match.
    pub fn regenerate(&self) -> Result<ShiftStream> {
        let stream = build_stream(&self.task, &self.stream)?;
        if stream.manifest().splits != self.splits {
            return Err(Error::Format("regenerated splits differ from the manifest".into()));
        }
        Ok(stream)
    }
}

/// Draws a fresh target domain per shift, applies the shift, shuffles, and splits it
/// 80/20 into adaptation batches and a held-out set.
pub fn build_stream(task: &TaskSpec, spec: &StreamSpec) -> Result<ShiftStream> {
    task.validate()?;
    if spec.shifts.is_empty() {
        return Err(Error::config("a stream needs at least one shift"));
    }
    if spec.mode == StreamMode::Single && spec.shifts.len() != 1 {
        return Err(Error::config("single mode takes exactly one shift"));
    }
    for s in &spec.shifts {
        s.validate(task.input_dim)?;
    }
    let n = task.samples_per_domain;
    let n_adapt = (n as f64 * ADAPT_FRACTION).round() as usize;
    if spec.batch_size == 0 || spec.batch_size > n_adapt {
        return Err(Error::config(format!(
            "batch_size {} must be in 1..={n_adapt} for {n} samples per domain",
            spec.batch_size
        )));
    }

    let source_holdout = generate_task(task)?.holdout;
    let mut segments = Vec::with_capacity(spec.shifts.len());
    for (j, shift) in spec.shifts.iter().enumerate() {
        let j = j as u64;
        let clean = sample_domain(task, n, &mut seeded_rng(spec.seed, TARGET_STREAM_BASE + j))?;
        let shifted = apply_shift_with_rng(&clean, shift, &mut seeded_rng(spec.seed, NOISE_STREAM_BASE + j))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(spec.seed, SPLIT_STREAM_BASE + j));
        let (adapt_idx, holdout_idx) = order.split_at(n_adapt);
        let adapt = adapt_idx.chunks(spec.batch_size).map(|c| shifted.select(c)).collect();
        segments.push(Segment {
            shift: *shift,
            adapt,
            holdout: shifted.select(holdout_idx),
            adapt_indices: adapt_idx.to_vec(),
            holdout_indices: holdout_idx.to_vec(),
        });
    }
    Ok(ShiftStream {
        task: *task,
        spec: spec.clone(),
        segments,
        source_holdout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shiftbench::{Geometry, ShiftKind};

    fn task() -> TaskSpec {
        TaskSpec {
            num_classes: 3,
            input_dim: 2,
            class_geometry: Geometry::GaussianBlobs,
            samples_per_domain: 100,
            seed: 1,
        }
    }

    fn spec(mode: StreamMode, shifts: Vec<ShiftSpec>, batch_size: usize) -> StreamSpec {
        StreamSpec {
            shifts,
            mode,
            batch_size,
            seed: 42,
        }
    }

    #[test]
    fn continual_split_arithmetic() {
        let shifts = vec![
            ShiftSpec::new(ShiftKind::Rotation, 2),
            ShiftSpec::new(ShiftKind::AdditiveNoise, 3),
            ShiftSpec::new(ShiftKind::Translation, 1),
        ];
        let s = build_stream(&task(), &spec(StreamMode::Continual, shifts, 8)).unwrap();
        assert_eq!(s.adapt_len(), 240);
        assert_eq!(s.holdout_len(), 60);
        assert_eq!(s.adapt_batches().iter().map(Batch::len).sum::<usize>(), 240);
    }

    #[test]
    fn adapt_and_holdout_are_disjoint() {
        let s = build_stream(
            &task(),
            &spec(StreamMode::Single, vec![ShiftSpec::new(ShiftKind::Rotation, 1)], 4),
        )
        .unwrap();
        let seg = &s.segments[0];
        let mut all: Vec<usize> = seg.adapt_indices.iter().chain(&seg.holdout_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_order() {
        let sp = spec(StreamMode::Single, vec![ShiftSpec::new(ShiftKind::AdditiveNoise, 2)], 5);
        assert_eq!(build_stream(&task(), &sp).unwrap(), build_stream(&task(), &sp).unwrap());
        let other = StreamSpec { seed: 43, ..sp.clone() };
        assert_ne!(
            build_stream(&task(), &sp).unwrap().segments[0].adapt_indices,
            build_stream(&task(), &other).unwrap().segments[0].adapt_indices
        );
    }

    #[test]
    fn config_errors() {
        let one = vec![ShiftSpec::new(ShiftKind::Rotation, 1)];
        assert!(build_stream(&task(), &spec(StreamMode::Single, one.clone(), 81)).is_err());
        assert!(build_stream(&task(), &spec(StreamMode::Single, vec![], 4)).is_err());
        assert!(build_stream(&task(), &spec(StreamMode::Single, [one.clone(), one].concat(), 4)).is_err());
    }

    #[test]
    fn manifest_regenerates_stream() {
        let sp = spec(
            StreamMode::Continual,
            vec![
                ShiftSpec::label_conditional(2, 1),
                ShiftSpec::new(ShiftKind::FeatureScale, 4),
            ],
            10,
        );
        let s = build_stream(&task(), &sp).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.json");
        s.manifest().save(&path).unwrap();
        let back = StreamManifest::load(&path).unwrap().regenerate().unwrap();
        assert_eq!(back, s);
        s.write_csv(&dir.path().join("stream.csv")).unwrap();
        let text = fs::read_to_string(dir.path().join("stream.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 200 + s.source_holdout.len());
    }
}
