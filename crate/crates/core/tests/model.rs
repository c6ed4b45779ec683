use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metro_core::autodiff::Graph;
use metro_core::gradsuite::micro_fixture;
use metro_core::losses::total_loss;
use metro_core::model::{
    decode_checkpoint, encode_checkpoint, sample_mask, EncoderConfig, FeatureExtractor, MetroModel, ModelConfig, Retain,
};
use metro_core::synth::{Preset, SynthConfig, Synthesizer};
use metro_core::Tensor;

fn hand(feature_dim: usize) -> (Synthesizer, MetroModel) {
    let s = Synthesizer::new(SynthConfig {
        preset: Preset::Hand,
        n: 2,
        feature_dim,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut cfg =
        s.model_config(EncoderConfig::from_widths(feature_dim, &[(feature_dim + 3) * 2 / 3, 6], 2, 2).unwrap());
    cfg.upsampler_hidden = 6;
    let model = MetroModel::init(cfg, &s.assets.mesh, &s.assets.regressor, 1).unwrap();
    (s, model)
}

#[test]
fn output_shapes_follow_the_config() {
    let (s, model) = hand(16);
    let sample = &s.generate().unwrap().samples[0];
    let out = model.infer(&sample.model_input(), Retain::All).unwrap();
    assert_eq!(out.joints3d.len(), 21);
    assert_eq!(out.coarse_vertices3d.len(), 195);
    assert_eq!(out.full_vertices3d.len(), s.assets.num_full());
    assert_eq!(out.attention.len(), 2);
    assert!(out
        .attention
        .iter()
        .all(|a| a.tokens == 216 && a.data.len() == a.heads * 216 * 216));
    let last = model.infer(&sample.model_input(), Retain::LastLayer).unwrap();
    assert_eq!(last.attention, out.attention[1..]);
    assert!(model
        .infer(&sample.model_input(), Retain::None)
        .unwrap()
        .attention
        .is_empty());
}

#[test]
fn fresh_upsampler_copies_the_nearest_coarse_vertex() {
    let (s, model) = hand(16);
    let sample = &s.generate().unwrap().samples[0];
    let out = model.infer(&sample.model_input(), Retain::None).unwrap();
    let nearest = s.assets.mesh.nearest_coarse();
    for (v, &c) in out.full_vertices3d.iter().zip(&nearest) {
        assert_eq!(*v, out.coarse_vertices3d[c]);
    }
}

#[test]
fn fresh_camera_is_unit_scale_and_centered() {
    let (s, model) = hand(16);
    for sample in &s.generate().unwrap().samples {
        let cam = model.infer(&sample.model_input(), Retain::None).unwrap().camera;
        assert!((cam.scale - 1.0).abs() < 1e-6, "{}", cam.scale);
        assert_eq!(cam.translation, [0.0, 0.0]);
    }
}

#[test]
fn mask_token_gets_gradient_only_when_used() {
    let fx = micro_fixture(2, FeatureExtractor::Precomputed).unwrap();
    let model = &fx.model;
    let id = model.params().id("mask_token").unwrap();
    let grad = |masked: &[usize]| {
        let mut g = Graph::new();
        let pv = model.params().bind(&mut g);
        let fv = model.forward(&mut g, &pv, &fx.input, masked).unwrap();
        let lv = total_loss(&mut g, &fv, &fx.regressor, &fx.targets).unwrap();
        g.backward(lv.total).unwrap();
        g.grad_data(pv.get(id))
            .map(|d| d.iter().map(|x| x.abs()).sum::<f64>())
            .unwrap_or(0.0)
    };
    assert_eq!(grad(&[]), 0.0);
    assert!(grad(&[0, 3]) > 0.0);
}

#[test]
fn zero_queries_and_keys_give_uniform_attention() {
    let (s, mut model) = hand(16);
    for id in model.params().ids().collect::<Vec<_>>() {
        let name = &model.params().entry(id).name;
        if name.contains(".attn.q.") || name.contains(".attn.k.") {
            let shape = model.params().get(id).shape().to_vec();
            model.params_mut().set(id, Tensor::zeros(shape)).unwrap();
        }
    }
    let sample = &s.generate().unwrap().samples[0];
    let out = model.infer(&sample.model_input(), Retain::All).unwrap();
    for layer in &out.attention {
        assert!(layer.data.iter().all(|&p| (p - 1.0 / 216.0).abs() < 1e-15));
    }
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let fx = micro_fixture(3, FeatureExtractor::Precomputed).unwrap();
    let mut model = fx.model.clone();
    model.params_mut().round_to_f32();
    let cfg = model.config().clone();
    let bytes = encode_checkpoint(&cfg, model.params());
    assert_eq!(&bytes[..4], b"MTRO");
    let back = decode_checkpoint(&bytes, &cfg).unwrap();
    assert_eq!(&back, model.params());
    assert_eq!(encode_checkpoint(&cfg, &back), bytes);

    let mut other = cfg.clone();
    other.upsampler_hidden += 1;
    let err = decode_checkpoint(&bytes, &other).unwrap_err().to_string();
    assert!(err.contains("different model config"), "{err}");
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1], &cfg).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long, &cfg).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad, &cfg).is_err());
}

#[test]
fn directory_round_trip_restores_the_model() {
    let (_, model) = hand(8);
    let dir = tempfile::tempdir().unwrap();
    model.save_dir(dir.path()).unwrap();
    assert_eq!(MetroModel::load_dir(dir.path()).unwrap(), model);
    let missing = MetroModel::load_dir(dir.path().join("nope")).unwrap_err();
    assert_eq!(missing.exit_code(), 3);
}

#[test]
fn initialization_is_seeded() {
    let s = Synthesizer::new(SynthConfig {
        preset: Preset::Hand,
        n: 1,
        feature_dim: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg: ModelConfig = s.model_config(EncoderConfig::from_widths(8, &[6], 1, 1).unwrap());
    let init = |seed| MetroModel::init(cfg.clone(), &s.assets.mesh, &s.assets.regressor, seed).unwrap();
    assert_eq!(init(4), init(4));
    assert_ne!(init(4).params().checksum(), init(5).params().checksum());
}

#[test]
fn empty_mask_forward_is_bitwise_plain_inference() {
    let (s, model) = hand(16);
    let sample = &s.generate().unwrap().samples[1];
    let masked = sample_mask(&mut ChaCha8Rng::seed_from_u64(0), 216, 0.0);
    assert!(masked.is_empty());
    let mut g = Graph::new();
    let pv = model.params().bind(&mut g);
    let fv = model.forward(&mut g, &pv, &sample.model_input(), &masked).unwrap();
    assert_eq!(
        model.extract(&g, &fv, Retain::All),
        model.infer(&sample.model_input(), Retain::All).unwrap()
    );
}

#[test]
fn mismatched_assets_are_a_config_error() {
    let (s, model) = hand(8);
    let body = Synthesizer::new(SynthConfig {
        preset: Preset::Body,
        n: 1,
        feature_dim: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let err = MetroModel::init(model.config().clone(), &body.assets.mesh, &s.assets.regressor, 0).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
