use ndarray::Array1;

use pdnet_core::imaging::{degrade_image, extract_patches, synthetic_image, Blur, DegradationSpec, PatchPairSet};
use pdnet_core::io::{load_checkpoint, load_train_state, save_checkpoint, save_train_state};
use pdnet_core::trainer::{batch_gradient, init_network, train, train_from, train_step, TrainConfig, TrainState};
use pdnet_core::Error;

fn config(max_steps: usize) -> TrainConfig {
    TrainConfig {
        layers: 2,
        batch_size: 4,
        max_steps,
        feature_design: "f3s2n4+f5s5n2".into(),
        patch_side: 5,
        checkpoint_every: 5,
        eval_samples: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn patches() -> PatchPairSet {
    let img = synthetic_image((40, 40), 5);
    let deg = degrade_image(&img, &DegradationSpec::new(Blur::Uniform(3), 20.0, 6).unwrap()).unwrap();
    extract_patches(&img, &deg, 24, 5, 7).unwrap()
}

fn op() -> pdnet_core::CirculantOp {
    Blur::Uniform(3).operator((5, 5)).unwrap()
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let set = patches();
    let full = train(&config(20), &set, &op()).unwrap();

    let half = train(&config(10), &set, &op()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    save_train_state(&path, &half.state).unwrap();
    let mut resumed = load_train_state(&path).unwrap();
    assert_eq!(resumed.net.layers, half.state.net.layers);
    resumed.config.max_steps = 20;
    let rest = train_from(resumed, &set, |_| Ok(())).unwrap();

    assert_eq!(rest.state.net.layers, full.state.net.layers);
    assert_eq!(rest.state.loss_history, full.state.loss_history);
}

#[test]
fn checkpoint_hook_runs_on_schedule() {
    let set = patches();
    let state = TrainState::init(config(12), &op()).unwrap();
    let mut seen = Vec::new();
    train_from(state, &set, |s| {
        seen.push(s.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![5, 10]);
}

#[test]
fn non_finite_batch_leaves_state_untouched() {
    let mut set = patches().select(&[0, 1, 2, 3]);
    set.degraded[2][4] = f64::NAN;
    let mut state = TrainState::init(config(1), &op()).unwrap();
    let before = state.net.layers.clone();
    let err = train_step(&mut state, &set).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { .. }), "{err}");
    assert_eq!(state.net.layers, before);
    assert_eq!(state.step, 0);
}

#[test]
fn step_sizes_stay_above_the_floor_and_mask_holds() {
    let set = patches();
    let cfg = TrainConfig {
        learning_rate: 0.5,
        ..config(30)
    };
    let out = train(&cfg, &set, &op()).unwrap();
    for layer in &out.state.net.layers {
        assert!(layer.tau >= cfg.positivity_floor && layer.sigma >= cfg.positivity_floor);
        let mask = layer.mask.as_ref().unwrap();
        assert!(layer.l.iter().zip(mask).all(|(&v, &m)| m || v == 0.0));
    }
}

#[test]
fn initialisation_satisfies_the_step_constraint() {
    let cfg = config(0);
    let net = init_network(&cfg, &cfg.design().unwrap(), &op()).unwrap();
    for layer in &net.layers {
        let product = layer.step_product();
        assert!(product < 1.0 && (product - 0.81).abs() < 1e-3, "{product}");
        assert_eq!(layer, &net.layers[0]);
    }
}

#[test]
fn batch_gradient_is_the_sum_of_sample_gradients() {
    let set = patches().select(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
    let cfg = config(0);
    let net = init_network(&cfg, &cfg.design().unwrap(), &op()).unwrap();
    let (loss, grads) = batch_gradient(&net, &set).unwrap();
    let mut total = 0.0;
    let mut d_tau = 0.0;
    for i in 0..set.len() {
        let (l, g) =
            pdnet_core::backprop::sample_gradient(&net, set.degraded[i].view(), set.clean[i].view(), set.len())
                .unwrap();
        total += l;
        d_tau += g.layers[0].d_tau;
    }
    assert!((loss - total).abs() <= 1e-9 * total.abs());
    assert!((grads.layers[0].d_tau - d_tau).abs() <= 1e-9 * d_tau.abs().max(1.0));
}

#[test]
fn zero_steps_emit_the_initial_checkpoint() {
    let set = patches();
    let out = train(&config(0), &set, &op()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&path, &out.best, serde_json::json!({"steps": 0})).unwrap();
    let (net, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(net.layers, out.state.net.layers);
    assert_eq!(meta["steps"], 0);
    let p = Array1::from(vec![0.0; 25]);
    assert!(pdnet_core::pdnet::predict(&net, p.view())
        .unwrap()
        .iter()
        .all(|v| v.is_finite()));
}
