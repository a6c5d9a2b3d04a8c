//! Shared fixtures for the benchmarks.

use diffuse_core::synth::{self, SynthConfig};
use diffuse_core::{pair_space, DifferenceSpace, SpaceMode};

/// Difference space of the first synthetic pair.
pub fn space(pool: usize, dim: usize) -> DifferenceSpace {
    let corpus = synth::generate(&SynthConfig {
        pairs: 1,
        pool,
        dim,
        ..SynthConfig::default()
    });
    let p = &corpus.pairs[0];
    pair_space(
        &corpus.embeddings[&p.model_a],
        &corpus.embeddings[&p.model_b],
        SpaceMode::Subtract,
    )
    .expect("synthetic pair aligns")
}
