//! RED-CNN contract: shapes, the zero-weight identity, whole-network
//! gradients and the binary model format.

use aide_core::redcnn::{
    build, forward, from_bytes, infer, load, save, to_bytes, ClusterSlot, ModelError, RedCnnConfig,
};
use aide_core::tensor::{relu_forward, ParamSet, Tape, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn patch(seed: u64, n: usize, side: usize) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_vec(
        [n, 1, side, side],
        (0..n * side * side).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

#[test]
fn default_network_preserves_patch_shape_and_size() {
    let cfg = RedCnnConfig::default();
    assert_eq!((cfg.num_enc_layers, cfg.channels, cfg.kernel), (5, 96, 5));
    // conv1: 96*1*25 + 96; conv2-5 and deconv1-4: 96*96*25 + 96 each; deconv5: 96*1*25 + 1
    assert_eq!(cfg.param_count(), 2496 + 8 * 230_496 + 2401);
    let m = build(cfg, 0).unwrap();
    let y = infer(&m.config, &m.params, &patch(1, 1, 55)).unwrap();
    assert_eq!(y.shape(), [1, 1, 55, 55]);
}

#[test]
fn zero_weight_network_is_relu_of_input() {
    for cfg in [RedCnnConfig::default(), RedCnnConfig::desk()] {
        let mut m = build(cfg, 2).unwrap();
        for e in m.params.entries_mut() {
            e.weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor4::from_vec(
            [1, 1, 55, 55],
            (0..3025).map(|i| (i % 41) as f32 / 20.0 - 1.0).collect(),
        )
        .unwrap();
        assert_eq!(infer(&m.config, &m.params, &x).unwrap(), relu_forward(&x));
    }
}

#[test]
fn whole_network_gradients_match_central_differences() {
    let cfg = RedCnnConfig::with_layers(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params: ParamSet<f64> = build(cfg.clone(), 6).unwrap().params.cast();
    for e in params.entries_mut() {
        e.weights
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.4..0.4));
    }
    let side = cfg.min_input() + 2;
    let input = Tensor4::from_vec(
        [1, 1, side, side],
        (0..side * side).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap();
    let target = Tensor4::from_vec(
        [1, 1, side, side],
        (0..side * side).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap();
    let loss = |p: &ParamSet<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let t = tape.constant(target.clone());
        let y = forward(&cfg, p, &mut tape, x).unwrap();
        let l = tape.mse(y, t).unwrap();
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let t = tape.constant(target.clone());
    let y = forward(&cfg, &params, &mut tape, x).unwrap();
    let l = tape.mse(y, t).unwrap();
    params.zero_grad();
    tape.backward(l, &mut params).unwrap();

    let eps = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        let analytic = params.entry(k).grad.clone();
        let scale = analytic.data().iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        for i in 0..analytic.len() {
            let orig = params.entry(k).weights.data()[i];
            params.entry_mut(k).weights.data_mut()[i] = orig + eps;
            let up = loss(&params);
            params.entry_mut(k).weights.data_mut()[i] = orig - eps;
            let down = loss(&params);
            params.entry_mut(k).weights.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - analytic.data()[i]).abs() / scale);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn serialization_is_bit_exact() {
    let m = build(RedCnnConfig::desk(), 9)
        .unwrap()
        .with_slot(ClusterSlot::Cluster(2), "pelvis expert");
    let bytes = to_bytes(&m).unwrap();
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(to_bytes(&back).unwrap(), bytes);
    for (a, b) in back.params.entries().iter().zip(m.params.entries()) {
        let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.weights), bits(&b.weights));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("expert2.aide");
    save(&m, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load(&path).unwrap(), m);
}

#[test]
fn corrupted_files_are_rejected() {
    let m = build(RedCnnConfig::with_layers(2, 4), 1).unwrap();
    let bytes = to_bytes(&m).unwrap();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(from_bytes(&flipped), Err(ModelError::Checksum { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(from_bytes(&magic), Err(ModelError::BadMagic(_))));

    assert!(from_bytes(&bytes[..bytes.len() - 7]).is_err());
    assert!(from_bytes(&[]).is_err());
}

#[test]
fn denoise_clamps_and_validates() {
    let m = build(RedCnnConfig::with_layers(2, 4), 3).unwrap();
    let x = patch(4, 3, 55);
    let y = m.denoise(&x).unwrap();
    assert_eq!(y.shape(), [3, 1, 55, 55]);
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(m.denoise(&Tensor4::filled([1, 1, 55, 55], -0.5f32)).is_err());
    assert!(m.denoise(&Tensor4::filled([1, 2, 55, 55], 0.5f32)).is_err());
}
