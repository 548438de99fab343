//! Shared inputs for the benchmark targets.

use qwha_core::synth::SynthConfig;
use qwha_core::Matrix;

/// Deterministic pseudo-random test vector.
pub fn test_vector(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919 + 13) % 1009) as f64 / 1009.0 - 0.5).collect()
}

/// Heavy-tailed synthetic layer of the given shape.
pub fn synthetic_layer(d: usize, seed: u64) -> (Matrix, Matrix) {
    let layer = SynthConfig {
        d_out: d,
        d_in: d,
        samples: 2 * d,
        seed,
        ..SynthConfig::default()
    }
    .generate()
    .expect("valid synthetic config");
    (layer.weights, layer.activations)
}
