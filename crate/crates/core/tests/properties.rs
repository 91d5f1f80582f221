use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fincflow::flow::{FlowModel, Init, ModelConfig};
use fincflow::invconv::{FincFlowUnit, MaskedKernel, PaddedConvBlock};
use fincflow::train::{self, bpd, nll, Dataset, TrainConfig, Trainer};
use fincflow::{Orientation, Tensor};

fn orientation() -> impl Strategy<Value = Orientation> {
    prop::sample::select(Orientation::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn block_inverse_undoes_forward(
        h in 1usize..12,
        w in 1usize..12,
        c in 1usize..5,
        k in 1usize..5,
        o in orientation(),
        workers in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = PaddedConvBlock::new(MaskedKernel::<f64>::random(c, k, o, &mut rng));
        let x = Tensor::from_fn([2, c, h, w], |_| rng.random_range(-1.0..1.0));
        let y = block.forward(&x).unwrap();
        let wave = block.invert_wavefront(&y, workers).unwrap();
        prop_assert!(wave.max_abs_diff(&x) <= 1e-10);
        prop_assert!(wave.max_abs_diff(&block.invert_reference(&y).unwrap()) <= 1e-12);
    }

    #[test]
    fn unit_inverse_undoes_forward(
        h in 1usize..10,
        w in 1usize..10,
        groups in 1usize..3,
        k in 2usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = FincFlowUnit::<f64>::random(4 * groups, k, &mut rng).unwrap();
        let x = Tensor::from_fn([1, 4 * groups, h, w], |_| rng.random_range(-1.0..1.0));
        let (y, ld) = unit.forward(&x).unwrap();
        prop_assert_eq!(ld, 0.0);
        prop_assert!(unit.invert(&y, 2).unwrap().max_abs_diff(&x) <= 1e-10);
        prop_assert!(unit.invert_reference(&y).unwrap().max_abs_diff(&x) <= 1e-10);
    }

    #[test]
    fn bpd_and_nll_are_consistent(value in -1e4f64..1e4, c in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let dims = [c, h, w];
        let back = bpd(value, dims) * (c * h * w) as f64 / std::f64::consts::LOG2_E;
        prop_assert!((back - value).abs() <= 1e-12 * value.abs().max(1.0));
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        height: 8,
        width: 8,
        levels: 2,
        steps: 2,
        kernel_size: 3,
        hidden: 8,
    }
}

#[test]
fn nll_matches_sum_of_layer_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = FlowModel::<f64>::new(small_config(), Init::Random, &mut rng).unwrap();
    let x = Tensor::from_fn([3, 4, 8, 8], |_| rng.random_range(0.0..1.0));
    model.data_init(&x).unwrap();
    let out = model.forward(&x).unwrap();
    let per_sample: Vec<f64> = (0..3)
        .map(|n| out.terms.iter().map(|t| t.values[n]).sum::<f64>())
        .collect();
    let brute = -per_sample.iter().sum::<f64>() / 3.0;
    assert_abs_diff_eq!(nll(&out, [4, 8, 8], false).unwrap(), brute, epsilon = 1e-6);
    let with_dequant = nll(&out, [4, 8, 8], true).unwrap();
    assert_abs_diff_eq!(with_dequant - brute, 256.0 * 256f64.ln(), epsilon = 1e-6);
}

#[test]
fn checkpoint_reload_gives_bitwise_identical_forward() {
    let data = Dataset::synthetic_blobs(16, [4, 8, 8], 4);
    let model = FlowModel::<f32>::new(small_config(), Init::Random, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut tr = Trainer::new(
        model,
        TrainConfig {
            batch_size: 8,
            ..Default::default()
        },
    )
    .unwrap();
    tr.train_epoch(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    train::save_checkpoint(&path, &mut tr.model, None, tr.step, tr.epoch).unwrap();
    let loaded = train::load_checkpoint::<f32>(&path).unwrap().model;
    let x = train::dequantize(&data.gather(&[0, 1]), [4, 8, 8], &mut ChaCha8Rng::seed_from_u64(0));
    let a = tr.model.forward(&x).unwrap();
    let b = loaded.forward(&x).unwrap();
    for (za, zb) in a.latents.0.iter().zip(&b.latents.0) {
        assert!(za.bit_eq(zb));
    }
    assert_eq!(a.logdet, b.logdet);
    assert_eq!(a.logp, b.logp);
}

#[test]
fn sampling_at_zero_temperature_is_deterministic_and_in_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = FlowModel::<f64>::new(small_config(), Init::Random, &mut rng).unwrap();
    let a = model.sample(3, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = model.sample(3, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.dims(), [3, 4, 8, 8]);
    assert!(a.bit_eq(&b));
}

#[test]
fn pgm_file_loads_as_single_channel_image() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    let mut bytes = b"P5\n16 16\n255\n".to_vec();
    bytes.extend((0..=255u8).collect::<Vec<_>>());
    std::fs::write(&path, bytes).unwrap();
    let d = Dataset::load(&path).unwrap();
    assert_eq!(d.dims(), [1, 16, 16]);
    assert_eq!(d.image(0).pixels[255], 255);
}
