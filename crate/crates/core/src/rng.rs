//! Seeded randomness.
//!
//! Every random stream in the crate is a [`ChaCha8Rng`] seeded from a 64-bit
//! value. Stage seeds are derived from the run's root seed with 64-bit FNV-1a
//! over the byte string
//!
//! ```text
//! root_seed.to_le_bytes() ++ stage_label.as_bytes() ++ [0xff] ++ index.to_le_bytes()
//! ```
//!
//! using offset basis `0xcbf29ce484222325` and prime `0x100000001b3`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn derive_seed(root: u64, stage: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(8 + stage.len() + 1 + 8);
    bytes.extend_from_slice(&root.to_le_bytes());
    bytes.extend_from_slice(stage.as_bytes());
    bytes.push(0xff);
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&bytes)
}

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage_rng(root: u64, stage: &str, index: u64) -> SeededRng {
    let seed = derive_seed(root, stage, index);
    log::debug!("sub-seed {stage}[{index}] = {seed:#018x} (root {root})");
    rng_from_seed(seed)
}

/// `rows x cols` matrix of independent standard normals, drawn in row-major order.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data)
}
