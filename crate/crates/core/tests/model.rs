mod common;

use stlight::model::{checkpoint, count_params, Model, ModelConfig, Preset};
use stlight::ops::Mode;
use stlight::tensor::Tensor;
use stlight::Tape;

use common::{random_config, rng, tiny_config, uniform64};

fn input(c: &ModelConfig, b: usize, seed: u64) -> Tensor<f32> {
    uniform64(&[b, c.t_in, c.channels, c.height, c.width], 0.0, 1.0, seed).cast()
}

#[test]
fn closed_form_matches_enumeration_on_random_configs() {
    let mut r = rng(2);
    for _ in 0..30 {
        let c = random_config(&mut r);
        let m = Model::<f32>::zeroed(c).unwrap();
        assert_eq!(m.num_parameters(), count_params(&c), "{c:?}");
    }
}

#[test]
fn forward_shape_on_random_configs() {
    let mut r = rng(3);
    for i in 0..15 {
        let c = random_config(&mut r);
        let m = Model::<f32>::build(c, i).unwrap();
        for b in [1, 2] {
            let y = m.predict(&input(&c, b, i)).unwrap();
            assert_eq!(y.dims(), &[b, c.t_out, c.channels, c.height, c.width]);
            assert!(y.all_finite());
        }
    }
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let c = tiny_config();
    let m = Model::<f32>::build(c, 0).unwrap();
    assert!(m.predict(&Tensor::zeros(&[1, c.t_in + 1, 1, 8, 8]).unwrap()).is_err());
    assert!(m.predict(&Tensor::zeros(&[1, c.t_in, 1, 8, 6]).unwrap()).is_err());
    assert!(m.predict(&Tensor::zeros(&[c.t_in, 1, 8, 8]).unwrap()).is_err());
}

#[test]
fn forward_is_deterministic() {
    let c = tiny_config();
    let x = input(&c, 2, 4);
    let a = Model::<f32>::build(c, 9).unwrap().predict(&x).unwrap();
    let b = Model::<f32>::build(c, 9).unwrap().predict(&x).unwrap();
    assert!(a.bitwise_eq(&b));
    let other = Model::<f32>::build(c, 10).unwrap().predict(&x).unwrap();
    assert!(!a.bitwise_eq(&other));
}

#[test]
fn every_parameter_receives_gradient() {
    let c = ModelConfig { depth: 4, ..tiny_config() };
    let mut m = Model::<f32>::build(c, 1).unwrap();
    let tape = Tape::new();
    let x = tape.constant(input(&c, 2, 5));
    let target: Tensor<f32> = uniform64(&[2, c.t_out, c.channels, c.height, c.width], 0.0, 1.0, 6).cast();
    let (y, params) = m.forward(&x, Mode::Train).unwrap();
    stlight::ops::mse(&y, &target).unwrap().backward().unwrap();
    let names: Vec<String> = m.named_parameters().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(&params) {
        assert!(p.grad_or_zeros().max_abs() > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn train_forward_updates_running_stats_only_in_train_mode() {
    let c = tiny_config();
    let mut m = Model::<f32>::build(c, 1).unwrap();
    let before: Vec<Tensor<f32>> = m.named_buffers().into_iter().map(|(_, t)| t.clone()).collect();
    let tape = Tape::new();
    m.forward(&tape.constant(input(&c, 2, 5)), Mode::Eval).unwrap();
    let same: Vec<Tensor<f32>> = m.named_buffers().into_iter().map(|(_, t)| t.clone()).collect();
    assert_eq!(before, same);
    m.forward(&tape.constant(input(&c, 2, 5)), Mode::Train).unwrap();
    let after: Vec<Tensor<f32>> = m.named_buffers().into_iter().map(|(_, t)| t.clone()).collect();
    assert_ne!(before, after);
}

#[test]
fn checkpoint_round_trip_gives_identical_forward() {
    let c = ModelConfig { overlap: 2, hidden: 12, ..tiny_config() };
    let mut m = Model::<f32>::build(c, 3).unwrap();
    // nontrivial buffers
    let tape = Tape::new();
    m.forward(&tape.constant(input(&c, 2, 1)), Mode::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stlw");
    checkpoint::save_checkpoint(&m, &path).unwrap();
    let loaded = checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config(), &c);
    let x = input(&c, 3, 2);
    assert!(m.predict(&x).unwrap().bitwise_eq(&loaded.predict(&x).unwrap()));
    assert_eq!(checkpoint::to_bytes(&m), checkpoint::to_bytes(&loaded));

    let other = ModelConfig { depth: 4, ..c };
    assert!(checkpoint::load_checkpoint_expecting(&path, &other).is_err());
}

#[test]
fn encoder_init_std_matches_fan_out() {
    let c = ModelConfig {
        t_in: 10,
        t_out: 10,
        channels: 1,
        height: 8,
        width: 8,
        hidden: 1400,
        depth: 1,
        patch: 2,
        overlap: 2,
        kernel_local: 3,
        kernel_global: 3,
        dilation: 1,
    };
    let m = Model::<f32>::build(c, 17).unwrap();
    let w = &m.encoder_conv.weight;
    assert_eq!(w.dims(), &[1400, 10, 4, 4]);
    let n = w.len() as f64;
    let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let want = (2.0 / (1400.0 * 16.0f64)).sqrt();
    assert!(n >= 1e5);
    assert!((var.sqrt() - want).abs() / want < 0.05, "std {} vs {want}", var.sqrt());
    assert!(mean.abs() < 0.05 * want);
}

#[test]
fn presets_match_reported_sizes() {
    for (preset, millions) in [
        (Preset::MmnistXs, 11.1),
        (Preset::MmnistS, 17.1),
        (Preset::MmnistM, 24.3),
        (Preset::MmnistL, 32.9),
    ] {
        let n = count_params(&preset.config()) as f64 / 1e6;
        assert!((n - millions).abs() / millions < 0.02, "{preset:?}: {n}M vs {millions}M");
    }
}

#[test]
fn taxibj_preset_forward_shape() {
    let c = Preset::TaxiBj.config();
    assert_eq!((c.t_in, c.t_out, c.channels, c.height, c.width), (4, 4, 2, 32, 32));
    let m = Model::<f32>::build(c, 0).unwrap();
    let y = m.predict(&input(&c, 1, 0)).unwrap();
    assert_eq!(y.dims(), &[1, 4, 2, 32, 32]);
}

#[test]
fn f64_and_f32_models_agree() {
    let c = tiny_config();
    let m = Model::<f32>::build(c, 4).unwrap();
    let x = input(&c, 2, 7);
    let a = m.predict(&x).unwrap();
    let b = m.cast::<f64>().predict(&x.cast()).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((*u as f64 - v).abs() < 1e-4);
    }
}
