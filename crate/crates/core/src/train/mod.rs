//! Maximum-likelihood training: uniform dequantization, the NLL and
//! bits-per-dimension objective, Adam with anchor-masked gradients,
//! datasets, and checkpoints.

pub mod checkpoint;
mod data;
pub mod pnm;

pub use checkpoint::{load_checkpoint, peek_checkpoint, save_checkpoint, Checkpoint, Loaded};
pub use data::{dequantize, quantize, Dataset};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{FlowModel, ForwardOutput};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// `ln 256`: the change of scale from `[0, 256)` integers to `[0, 1)`.
pub const LN_256: f64 = 5.545_177_444_479_562;

/// Mean negative log-likelihood per sample in nats.
///
/// With `dequantized` set, adds `D ln 256` per sample (D = C·H·W) so the
/// value is a density over the original 8-bit pixels.
pub fn nll<T: Scalar>(out: &ForwardOutput<T>, dims: [usize; 3], dequantized: bool) -> Result<f64> {
    let n = out.logp.len();
    if n == 0 {
        return Err(Error::NonFiniteLoss("empty batch".into()));
    }
    let total: f64 = out.logp.iter().zip(&out.logdet).map(|(a, b)| a.as_f64() + b.as_f64()).sum();
    let mut v = -total / n as f64;
    if dequantized {
        v += dims.iter().product::<usize>() as f64 * LN_256;
    }
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(format!("nll = {v}")));
    }
    Ok(v)
}

/// `nll * log2(e) / (C·H·W)`.
pub fn bpd(nll: f64, dims: [usize; 3]) -> f64 {
    nll * std::f64::consts::LOG2_E / dims.iter().product::<usize>() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied to the learning rate once per epoch (or per step
    /// with `decay_per_step`).
    pub decay: f64,
    pub decay_per_step: bool,
    /// Elementwise gradient clip to `[-bound, bound]`.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            decay: 0.99997,
            decay_per_step: false,
            grad_clip: None,
            batch_size: 64,
            epochs: 1,
            seed: 0,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("grad clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Adam with `beta = (0.9, 0.999)` and `eps = 1e-8`; moments are kept per
/// parameter in the model's visiting order.
#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    pub(crate) names: Vec<String>,
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
    pub(crate) t: u64,
}

impl<T: Scalar> Adam<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new() -> Self {
        Adam {
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter from its gradient buffer.
    pub fn step(&mut self, model: &mut FlowModel<T>, lr: f64) {
        if self.names.is_empty() {
            model.visit_params(&mut |name, v, _| {
                self.names.push(name.to_string());
                self.m.push(Tensor::zeros(v.dims()));
                self.v.push(Tensor::zeros(v.dims()));
            });
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(Self::BETA1), T::of(Self::BETA2));
        let bc1 = T::of(1.0 - Self::BETA1.powi(t));
        let bc2 = T::of(1.0 - Self::BETA2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(Self::EPS));
        let mut i = 0;
        model.visit_params(&mut |_, value, grad| {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), mv), vv) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * g;
                *vv = b2 * *vv + (T::one() - b2) * g * g;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// One CSV metrics row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub epoch: u64,
    pub step: u64,
    pub nll: f64,
    pub bpd: f64,
    /// L2 norm of the masked gradient before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "epoch,step,nll,bpd,grad_norm,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9e}",
            self.epoch, self.step, self.nll, self.bpd, self.grad_norm, self.lr
        )
    }
}

/// Training loop state: model, optimizer, counters.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: FlowModel<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    pub epoch: u64,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: FlowModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            optimizer: Adam::new(),
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        let n = if self.config.decay_per_step { self.step } else { self.epoch };
        self.config.lr * self.config.decay.powf(n as f64)
    }

    /// Dequantization noise is drawn from an RNG keyed by seed and step, so
    /// a resumed run sees the same noise as an uninterrupted one.
    pub fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ self.step)
    }

    /// Dequantize a batch of 8-bit images and take one optimizer step.
    pub fn train_batch(&mut self, images: &[&[u8]], dims: [usize; 3]) -> Result<Metrics> {
        let x: Tensor<T> = dequantize(images, dims, &mut self.step_rng());
        self.train_step(&x)
    }

    /// Forward, NLL, backward, mask anchor gradients, optional clip, Adam,
    /// re-mask the weights. `x` is already dequantized.
    pub fn train_step(&mut self, x: &Tensor<T>) -> Result<Metrics> {
        let dims = [x.c(), x.h(), x.w()];
        if !self.model.is_initialized() {
            self.model.data_init(x)?;
        }
        self.model.zero_grad();
        let (out, mut tape) = self.model.forward_train(x)?;
        let nll_v = nll(&out, dims, true)?;
        self.model.backward(&mut tape)?;
        self.model.mask_gradients();
        let mut sq = 0.0;
        let mut finite = true;
        self.model.visit_params(&mut |_, _, g| {
            for v in g.data() {
                let f = v.as_f64();
                finite &= f.is_finite();
                sq += f * f;
            }
        });
        if !finite {
            return Err(Error::NonFiniteLoss(format!("non-finite gradient at step {}", self.step)));
        }
        if let Some(bound) = self.config.grad_clip {
            let (lo, hi) = (T::of(-bound), T::of(bound));
            self.model.visit_params(&mut |_, _, g| {
                g.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
            });
        }
        let lr = self.current_lr();
        self.optimizer.step(&mut self.model, lr);
        self.model.apply_masks();
        let metrics = Metrics {
            epoch: self.epoch,
            step: self.step,
            nll: nll_v,
            bpd: bpd(nll_v, dims),
            grad_norm: sq.sqrt(),
            lr,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// One pass over `data`; returns a metrics row per step.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<Vec<Metrics>> {
        let model_dims = {
            let c = self.model.config();
            [c.channels, c.height, c.width]
        };
        if data.dims() != model_dims {
            return Err(Error::DimsMismatch(format!("dataset {:?}, model {model_dims:?}", data.dims())));
        }
        let batches = data.epoch_batches(self.config.batch_size, self.config.seed, self.epoch);
        let mut rows = Vec::with_capacity(batches.len());
        for b in batches {
            rows.push(self.train_batch(&data.gather(&b), data.dims())?);
        }
        self.epoch += 1;
        Ok(rows)
    }

    /// Mean NLL and BPD of `data` under the current model, with noise fixed
    /// by `seed`.
    pub fn evaluate(&self, data: &Dataset, seed: u64) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(self.config.batch_size) {
            let x: Tensor<T> = dequantize(&data.gather(chunk), data.dims(), &mut rng);
            let out = self.model.forward(&x)?;
            total += nll(&out, data.dims(), true)? * chunk.len() as f64;
        }
        let mean = total / data.len() as f64;
        Ok((mean, bpd(mean, data.dims())))
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::flow::{Init, LatentStack, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 4,
            height: 8,
            width: 8,
            levels: 2,
            steps: 1,
            kernel_size: 3,
            hidden: 8,
        }
    }

    #[test]
    fn bpd_conversions() {
        let d = [3, 4, 5];
        assert!((bpd(60.0 * 2f64.ln(), d) - 1.0).abs() < 1e-12);
        assert_eq!(bpd(0.0, d), 0.0);
        let n = 123.456;
        assert!((bpd(n, d) * 60.0 / std::f64::consts::LOG2_E - n).abs() < 1e-12);
    }

    #[test]
    fn nll_of_standard_normal_at_zero() {
        let out = ForwardOutput::<f64> {
            latents: LatentStack(vec![Tensor::zeros([1, 1, 1, 1])]),
            logdet: vec![0.0],
            logp: vec![-0.5 * (2.0 * std::f64::consts::PI).ln()],
            terms: vec![],
        };
        let v = nll(&out, [1, 1, 1], false).unwrap();
        assert!((v - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let out_bad = ForwardOutput::<f64> {
            logp: vec![f64::NEG_INFINITY],
            ..out
        };
        assert!(matches!(nll(&out_bad, [1, 1, 1], false), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn nll_drops_as_latents_approach_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = FlowModel::<f64>::new(small(), Init::Identity, &mut rng).unwrap();
        let far = Tensor::filled([1, 4, 8, 8], 0.9);
        let near = Tensor::filled([1, 4, 8, 8], 0.1);
        let a = nll(&m.forward(&far).unwrap(), [4, 8, 8], false).unwrap();
        let b = nll(&m.forward(&near).unwrap(), [4, 8, 8], false).unwrap();
        assert!(b < a);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = FlowModel::<f64>::new(small(), Init::Identity, &mut rng).unwrap();
        let before = snapshot(&mut m);
        m.visit_params(&mut |_, _, g| g.data_mut().fill(0.25));
        let mut adam = Adam::new();
        adam.step(&mut m, 1e-3);
        let after = snapshot(&mut m);
        for (a, b) in before.iter().zip(&after) {
            assert!(((a - b) - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = FlowModel::<f64>::new(small(), Init::Random, &mut rng).unwrap();
        let before = snapshot(&mut m);
        let mut adam = Adam::new();
        adam.step(&mut m, 1e-3);
        assert_eq!(before, snapshot(&mut m));
    }

    fn snapshot<T: Scalar>(m: &mut FlowModel<T>) -> Vec<f64> {
        let mut v = Vec::new();
        m.visit_params(&mut |_, p, _| v.extend(p.data().iter().map(|x| x.as_f64())));
        v
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = FlowModel::<f32>::new(small(), Init::Random, &mut rng).unwrap();
        let x: Tensor<f32> = Tensor::from_fn([4, 4, 8, 8], |_| rng.random_range(0.0..1.0));
        model.data_init(&x).unwrap();
        let mut tr = Trainer::new(model, TrainConfig { lr: 0.0, ..Default::default() }).unwrap();
        let before: Vec<u32> = snapshot(&mut tr.model).iter().map(|v| (*v as f32).to_bits()).collect();
        for _ in 0..3 {
            tr.train_step(&x).unwrap();
        }
        let after: Vec<u32> = snapshot(&mut tr.model).iter().map(|v| (*v as f32).to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_deterministic_and_keeps_anchors() {
        let data = Dataset::synthetic_blobs(16, [4, 8, 8], 7);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let model = FlowModel::<f32>::new(small(), Init::Random, &mut rng).unwrap();
            let cfg = TrainConfig {
                batch_size: 8,
                seed: 11,
                grad_clip: Some(1.0),
                ..Default::default()
            };
            let mut tr = Trainer::new(model, cfg).unwrap();
            let mut rows = tr.train_epoch(&data).unwrap();
            rows.extend(tr.train_epoch(&data).unwrap());
            assert!(tr.model.anchors_intact());
            rows
        };
        let a = run();
        assert_eq!(a.len(), 4);
        assert_eq!(a, run());
        assert!(a[1].lr < a[0].lr + 1e-18 && a[2].lr < a[1].lr);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig { lr: -1.0, ..Default::default() },
            TrainConfig { decay: 0.0, ..Default::default() },
            TrainConfig { decay: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
