//! Seeded random streams. Each concern in a run draws from its own
//! ChaCha stream so that adding draws in one place never perturbs another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Mat;

pub type LabRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Timestep = 2,
    Noise = 3,
    Shift = 4,
    Adapter = 5,
    Condition = 6,
    Render = 7,
    Data = 8,
    Training = 9,
    Analysis = 10,
    Classifier = 11,
}

pub fn stream(seed: u64, s: Stream) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Independent child stream, e.g. one per Monte-Carlo chunk.
pub fn substream(seed: u64, s: Stream, index: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(s as u64);
    rng
}

pub fn normal_mat(rng: &mut (impl Rng + ?Sized), rows: usize, cols: usize) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

pub fn normal(rng: &mut (impl Rng + ?Sized)) -> f64 {
    rng.sample(StandardNormal)
}
