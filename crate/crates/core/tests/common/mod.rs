#![allow(dead_code, clippy::needless_range_loop)]

pub mod gradcases;
pub mod oracle;
pub mod reference;

use notecode::rng::{indexed_stream, StreamRng};

pub fn rng(seed: u64) -> StreamRng {
    indexed_stream(seed, "tests", 0)
}
