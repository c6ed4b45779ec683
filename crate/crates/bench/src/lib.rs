//! Shared fixtures for the benchmarks.

use metro_core::model::{EncoderConfig, MetroModel, ModelInput};
use metro_core::synth::{SynthConfig, Synthesizer};
use metro_core::Tensor;

/// Deterministic `rows×cols` matrix with entries in `[-1, 1)`.
pub fn filled(rows: usize, cols: usize, salt: u64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| {
            let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Freshly initialized model for `preset` with one layer per block, plus one input.
pub fn model_and_input(preset: metro_core::synth::Preset, layers: usize) -> (MetroModel, ModelInput) {
    let synth = Synthesizer::new(SynthConfig {
        preset,
        n: 1,
        ..SynthConfig::default()
    })
    .expect("default config");
    let mut enc = EncoderConfig::default_for(synth.config.feature_dim);
    for b in &mut enc.blocks {
        b.layers = layers;
    }
    let cfg = synth.model_config(enc);
    let model = MetroModel::init(cfg, &synth.assets.mesh, &synth.assets.regressor, 0).expect("init");
    let input = synth.generate().expect("sample").samples[0].model_input();
    (model, input)
}
