//! Synthetic source tasks, graded covariate shifts, and online target streams.

mod shift;
mod stream;
mod task;

pub use shift::{apply_shift, apply_shift_with_rng, ShiftKind, ShiftSpec, MAX_SEVERITY};
pub use stream::{
    build_stream, Segment, ShiftStream, SplitIndices, StreamManifest, StreamMode, StreamSpec, ADAPT_FRACTION,
    MANIFEST_FORMAT_VERSION,
};
pub use task::{generate_task, sample_domain, Geometry, SourceData, TaskSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic generator for `(seed, stream)`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
