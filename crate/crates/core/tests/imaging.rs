use ndarray::{Array1, Array2};

use pdnet_core::imaging::{
    degrade_image, extract_patches, extract_patches_per_patch, psnr, restore, synthetic_image, Blur, DegradationSpec,
    ImageTensor, Stitching,
};
use pdnet_core::linops::CirculantOp;
use pdnet_core::pdnet::{FeatureDesign, LayerParams, NetworkParams};

fn data(name: &str) -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

#[test]
fn pgm_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::load(data("coins.png")).unwrap();
    let first = dir.path().join("a.pgm");
    let second = dir.path().join("b.pgm");
    img.save(&first).unwrap();
    let back = ImageTensor::load(&first).unwrap();
    assert_eq!(back, img);
    back.save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn noiseless_identity_degradation_round_trips() {
    let img = ImageTensor::load(data("text.png")).unwrap();
    let out = degrade_image(&img, &DegradationSpec::new(Blur::Uniform(1), 0.0, 0).unwrap()).unwrap();
    assert_eq!(out.clipped().to_u8(), img.to_u8());
}

#[test]
fn degradation_is_reproducible_per_seed() {
    let img = synthetic_image((32, 32), 1);
    let spec = DegradationSpec::new(Blur::Uniform(5), 30.0, 11).unwrap();
    assert_eq!(degrade_image(&img, &spec).unwrap(), degrade_image(&img, &spec).unwrap());
    let other = DegradationSpec {
        seed: 12,
        ..spec.clone()
    };
    assert_ne!(
        degrade_image(&img, &spec).unwrap(),
        degrade_image(&img, &other).unwrap()
    );
}

#[test]
fn psnr_hand_values() {
    let a = ImageTensor::new(Array2::zeros((3, 3)));
    let b = ImageTensor::new(Array2::from_elem((3, 3), 255.0));
    assert!(psnr(&a, &b).unwrap().abs() < 1e-12);
    let c = ImageTensor::new(Array2::from_elem((3, 3), 25.5));
    assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-12);
    assert_eq!(psnr(&a, &a).unwrap(), 99.0);
}

/// Tiny `tau` with no blur: every layer returns its input.
fn pass_through_net() -> NetworkParams {
    let design = FeatureDesign::parse("f5s5n1", 5).unwrap();
    let layer = LayerParams::new(1e-12, 1.0, Array2::zeros((4, 25)));
    NetworkParams::tied(layer, 2, CirculantOp::identity((5, 5)).unwrap(), design).unwrap()
}

#[test]
fn pass_through_network_restores_the_input() {
    let clean = synthetic_image((23, 31), 3);
    let z = degrade_image(&clean, &DegradationSpec::new(Blur::Uniform(1), 20.0, 4).unwrap()).unwrap();
    let net = pass_through_net();
    for (mode, stride) in [
        (Stitching::Independent, 0),
        (Stitching::Averaged, 1),
        (Stitching::Averaged, 3),
    ] {
        let out = restore(&net, &z, mode, stride).unwrap();
        let d = out
            .pixels
            .iter()
            .zip(&z.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-6, "{mode:?} {d}");
        assert!((psnr(&clean, &out).unwrap() - psnr(&clean, &z).unwrap()).abs() < 1e-6);
    }
    assert!(restore(&net, &z, Stitching::Averaged, 0).is_err());
    assert!(restore(
        &net,
        &ImageTensor::new(Array2::zeros((4, 40))),
        Stitching::Independent,
        1
    )
    .is_err());
}

#[test]
fn crop_patches_align_with_their_sources() {
    let clean = synthetic_image((30, 30), 8);
    let z = degrade_image(&clean, &DegradationSpec::new(Blur::Uniform(3), 10.0, 9).unwrap()).unwrap();
    let set = extract_patches(&clean, &z, 15, 6, 10).unwrap();
    assert_eq!(set.len(), 15);
    for (c, d) in set.clean.iter().zip(&set.degraded) {
        // Flat regions can repeat, so any location matching both will do.
        let aligned = (0..=24)
            .flat_map(|r| (0..=24).map(move |col| (r, col)))
            .any(|(r, col)| {
                (0..36).all(|i| {
                    clean.pixels[[r + i / 6, col + i % 6]] == c[i] && z.pixels[[r + i / 6, col + i % 6]] == d[i]
                })
            });
        assert!(aligned);
    }
}

#[test]
fn per_patch_degradation_uses_the_patch_operator() {
    let clean = synthetic_image((30, 30), 8);
    let spec = DegradationSpec::new(Blur::Uniform(3), 0.0, 1).unwrap();
    let op = Blur::Uniform(3).operator((6, 6)).unwrap();
    let set = extract_patches_per_patch(&clean, &spec, &op, 5, 2).unwrap();
    for (c, d) in set.clean.iter().zip(&set.degraded) {
        let expected = op.apply(c.view()).unwrap();
        assert!(expected.iter().zip(d).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}

#[test]
fn averaged_pixels_lie_within_their_window_outputs() {
    use pdnet_core::imaging::window_origins;
    use pdnet_core::pdnet::predict;
    use pdnet_core::trainer::{init_network, TrainConfig};

    let config = TrainConfig {
        layers: 2,
        feature_design: "f3s2n4+f5s5n2".into(),
        patch_side: 5,
        init: pdnet_core::trainer::InitParams {
            l_std: 1.0,
            step_factor: 0.9,
        },
        ..TrainConfig::default()
    };
    let op = Blur::Uniform(3).operator((5, 5)).unwrap();
    let net = init_network(&config, &config.design().unwrap(), &op).unwrap();
    let z = degrade_image(
        &synthetic_image((17, 13), 2),
        &DegradationSpec::new(Blur::Uniform(3), 30.0, 3).unwrap(),
    )
    .unwrap();
    let stride = 2;
    let out = restore(&net, &z, Stitching::Averaged, stride).unwrap();

    let mut lo = Array2::from_elem((17, 13), f64::INFINITY);
    let mut hi = Array2::from_elem((17, 13), f64::NEG_INFINITY);
    for &r in &window_origins(17, 5, stride) {
        for &c in &window_origins(13, 5, stride) {
            let patch = Array1::from_iter(z.pixels.slice(ndarray::s![r..r + 5, c..c + 5]).iter().copied());
            let y = predict(&net, patch.view()).unwrap();
            for i in 0..25 {
                let (pr, pc) = (r + i / 5, c + i % 5);
                lo[[pr, pc]] = lo[[pr, pc]].min(y[i]);
                hi[[pr, pc]] = hi[[pr, pc]].max(y[i]);
            }
        }
    }
    for ((v, a), b) in out.pixels.iter().zip(&lo).zip(&hi) {
        assert!(*a - 1e-9 <= *v && *v <= *b + 1e-9, "{a} <= {v} <= {b}");
    }
}
