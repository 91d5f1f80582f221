use rand::Rng;

use super::split::{gaussian_logp_grads, gaussian_sample};
use super::{gaussian_logp, squeeze, unsqueeze, ActNorm, Coupling, CouplingCache, Inv1x1, ParamVisitor, Split};
use crate::error::{Error, Result};
use crate::invconv::FincFlowUnit;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// Architecture of a [`FlowModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Image channels.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Scales `L`.
    pub levels: usize,
    /// Flow steps per scale `K`.
    pub steps: usize,
    /// Masked kernel size `k`.
    pub kernel_size: usize,
    /// Hidden channels of the coupling networks.
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 4,
            height: 8,
            width: 8,
            levels: 2,
            steps: 2,
            kernel_size: 3,
            hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image dims must be positive".into());
        }
        if self.levels == 0 || self.steps == 0 || self.hidden == 0 || self.kernel_size == 0 {
            return bad("levels, steps, hidden and kernel_size must be positive".into());
        }
        let f = 1usize.checked_shl(self.levels as u32).unwrap_or(0);
        if f == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return bad(format!(
                "{}x{} image is not divisible by 2^{} for {} levels",
                self.height, self.width, self.levels, self.levels
            ));
        }
        Ok(())
    }

    pub fn input_dims(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.height, self.width]
    }

    /// `(C, H, W)` of the tensor inside level `l` after its squeeze.
    pub fn level_dims(&self, l: usize) -> [usize; 3] {
        [self.channels << (l + 2), self.height >> (l + 1), self.width >> (l + 1)]
    }

    /// Per-sample dims of every latent, splits first, top last.
    pub fn latent_dims(&self) -> Vec<[usize; 3]> {
        (0..self.levels)
            .map(|l| {
                let [c, h, w] = self.level_dims(l);
                if l + 1 < self.levels { [c / 2, h, w] } else { [c, h, w] }
            })
            .collect()
    }
}

/// How parameters start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Every layer acts as the identity: identity kernels and 1x1 weights,
    /// unit actnorm (marked initialized), zero final coupling and prior
    /// layers.
    Identity,
    /// Random masked kernels and orthogonal 1x1 weights; actnorm waits for
    /// [`FlowModel::data_init`].
    Random,
}

/// Unit, actnorm, 1x1 convolution, coupling.
#[derive(Clone, Debug)]
pub struct FlowStep<T> {
    pub unit: FincFlowUnit<T>,
    pub(crate) unit_grads: [Tensor<T>; 4],
    pub actnorm: ActNorm<T>,
    pub inv1x1: Inv1x1<T>,
    pub coupling: Coupling<T>,
}

#[derive(Clone, Debug)]
struct StepTape<T> {
    x_unit: Tensor<T>,
    x_act: Tensor<T>,
    x_inv: Tensor<T>,
    coupling: CouplingCache<T>,
}

impl<T: Scalar> FlowStep<T> {
    fn new<R: Rng + ?Sized>(channels: usize, k: usize, hidden: usize, init: Init, rng: &mut R) -> Result<Self> {
        let unit = match init {
            Init::Identity => FincFlowUnit::identity(channels, k)?,
            Init::Random => FincFlowUnit::random(channels, k, rng)?,
        };
        let inv1x1 = match init {
            Init::Identity => Inv1x1::identity(channels),
            Init::Random => Inv1x1::random_orthogonal(channels, rng),
        };
        let mut actnorm = ActNorm::new(channels);
        actnorm.set_initialized(init == Init::Identity);
        let unit_grads = unit.blocks().clone().map(|b| Tensor::zeros(b.kernel().weights().dims()));
        Ok(FlowStep {
            unit,
            unit_grads,
            actnorm,
            inv1x1,
            coupling: Coupling::new(channels, hidden, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        self.forward_cached(x).map(|(y, ld, _)| (y, ld))
    }

    fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, StepTape<T>)> {
        let (a, ld_unit) = self.unit.forward(x)?;
        let (b, ld_act) = self.actnorm.forward(&a)?;
        let (c, ld_inv) = self.inv1x1.forward(&b)?;
        let (y, ld_cpl, cache) = self.coupling.forward_cached(&c)?;
        let fixed = ld_unit + ld_act + ld_inv;
        let logdet = ld_cpl.into_iter().map(|v| v + fixed).collect();
        let tape = StepTape {
            x_unit: x.clone(),
            x_act: a,
            x_inv: b,
            coupling: cache,
        };
        Ok((y, logdet, tape))
    }

    pub fn inverse(&self, y: &Tensor<T>, workers: usize) -> Result<Tensor<T>> {
        let c = self.coupling.inverse(y)?;
        let b = self.inv1x1.inverse(&c)?;
        let a = self.actnorm.inverse(&b)?;
        self.unit.invert(&a, workers)
    }

    fn backward(&mut self, tape: &StepTape<T>, dy: &Tensor<T>, ld_weight: T) -> Result<Tensor<T>> {
        let dc = self.coupling.backward(&tape.coupling, dy, ld_weight)?;
        let db = self.inv1x1.backward(&tape.x_inv, &dc, ld_weight)?;
        let da = self.actnorm.backward(&tape.x_act, &db, ld_weight);
        let (dx, dks) = self.unit.backward(&tape.x_unit, &da)?;
        for (g, d) in self.unit_grads.iter_mut().zip(dks) {
            for (a, b) in g.data_mut().iter_mut().zip(d.data()) {
                *a += *b;
            }
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (b, (block, grad)) in self.unit.blocks_mut().iter_mut().zip(self.unit_grads.iter_mut()).enumerate() {
            f(&format!("{prefix}.unit.block{b}"), block.kernel_mut().weights_mut(), grad);
        }
        f(&format!("{prefix}.actnorm.scale"), &mut self.actnorm.scale, &mut self.actnorm.scale_grad);
        f(&format!("{prefix}.actnorm.bias"), &mut self.actnorm.bias, &mut self.actnorm.bias_grad);
        f(&format!("{prefix}.inv1x1.weight"), &mut self.inv1x1.weight, &mut self.inv1x1.weight_grad);
        self.coupling.visit(&format!("{prefix}.coupling"), f);
    }
}

/// Learned per-channel Gaussian for the final latent, standard normal at init.
#[derive(Clone, Debug)]
pub struct TopPrior<T> {
    pub(crate) mean: Tensor<T>,
    pub(crate) log_scale: Tensor<T>,
    mean_grad: Tensor<T>,
    log_scale_grad: Tensor<T>,
}

impl<T: Scalar> TopPrior<T> {
    fn new(channels: usize) -> Self {
        let dims = [1, channels, 1, 1];
        TopPrior {
            mean: Tensor::zeros(dims),
            log_scale: Tensor::zeros(dims),
            mean_grad: Tensor::zeros(dims),
            log_scale_grad: Tensor::zeros(dims),
        }
    }

    fn expand(&self, dims: [usize; 4]) -> (Tensor<T>, Tensor<T>) {
        let m = Tensor::from_fn(dims, |[_, c, _, _]| self.mean.data()[c]);
        let s = Tensor::from_fn(dims, |[_, c, _, _]| self.log_scale.data()[c]);
        (m, s)
    }

    pub fn logp(&self, z: &Tensor<T>) -> Vec<T> {
        let (m, s) = self.expand(z.dims());
        gaussian_logp(z, &m, &s)
    }

    fn backward(&mut self, z: &Tensor<T>, lp_weight: T) -> Tensor<T> {
        let (m, s) = self.expand(z.dims());
        let (dz, dm, ds) = gaussian_logp_grads(z, &m, &s, lp_weight);
        let [n, c, h, w] = z.dims();
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        self.mean_grad.data_mut()[ci] += dm.at(ni, ci, i, j);
                        self.log_scale_grad.data_mut()[ci] += ds.at(ni, ci, i, j);
                    }
                }
            }
        }
        dz
    }
}

#[derive(Clone, Debug)]
struct Level<T> {
    steps: Vec<FlowStep<T>>,
    split: Option<Split<T>>,
}

/// Latents of one forward pass: one per split, then the top output.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack<T>(pub Vec<Tensor<T>>);

impl<T: Scalar> LatentStack<T> {
    pub fn total_len(&self) -> usize {
        self.0.iter().map(|z| z.len()).sum()
    }
}

/// One additive term of the log-likelihood, per sample.
#[derive(Clone, Debug)]
pub struct LayerTerm<T> {
    pub name: String,
    pub values: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub latents: LatentStack<T>,
    /// Per-sample sum of every layer's log-determinant.
    pub logdet: Vec<T>,
    /// Per-sample sum of the latents' Gaussian log-densities.
    pub logp: Vec<T>,
    /// The individual terms making up `logdet` and `logp`.
    pub terms: Vec<LayerTerm<T>>,
}

/// Activations recorded by [`FlowModel::forward_train`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    levels: Vec<(Vec<StepTape<T>>, Option<(Tensor<T>, Tensor<T>)>)>,
    top: Tensor<T>,
    batch: usize,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    /// Smallest |pre-activation| fed to any coupling ReLU in the pass.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|(steps, _)| steps)
            .map(|st| st.coupling.min_abs_preactivation())
            .fold(f64::INFINITY, f64::min)
    }

    /// Signs of every coupling ReLU input in the pass.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.levels
            .iter()
            .flat_map(|(steps, _)| steps)
            .flat_map(|st| st.coupling.relu_pattern())
            .collect()
    }
}

/// The multi-scale flow: `L - 1` times (squeeze, `K` steps, split), then
/// squeeze and `K` steps.
#[derive(Clone, Debug)]
pub struct FlowModel<T> {
    config: ModelConfig,
    levels: Vec<Level<T>>,
    prior: TopPrior<T>,
    workers: usize,
}

impl<T: Scalar> FlowModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, init: Init, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let [c, _, _] = config.level_dims(l);
            let steps = (0..config.steps)
                .map(|_| FlowStep::new(c, config.kernel_size, config.hidden, init, rng))
                .collect::<Result<Vec<_>>>()?;
            let split = if l + 1 < config.levels { Some(Split::new(c)?) } else { None };
            levels.push(Level { steps, split });
        }
        let top_c = config.level_dims(config.levels - 1)[0];
        Ok(FlowModel {
            config,
            levels,
            prior: TopPrior::new(top_c),
            workers: 1,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Worker threads used by the unit inversions.
    pub fn set_workers(&mut self, workers: usize) {
        self.workers = workers.max(1);
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn steps(&self) -> impl Iterator<Item = &FlowStep<T>> {
        self.levels.iter().flat_map(|l| l.steps.iter())
    }

    pub fn steps_mut(&mut self) -> impl Iterator<Item = &mut FlowStep<T>> {
        self.levels.iter_mut().flat_map(|l| l.steps.iter_mut())
    }

    pub fn is_initialized(&self) -> bool {
        self.steps().all(|s| s.actnorm.is_initialized())
    }

    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.steps().map(|s| s.actnorm.is_initialized()).collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        let count = self.steps().count();
        if flags.len() != count {
            return Err(Error::BadFormat(format!("{} actnorm flags for {count} layers", flags.len())));
        }
        for (s, &f) in self.steps_mut().zip(flags) {
            s.actnorm.set_initialized(f);
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.config.input_dims(x.n());
        if x.dims() != want {
            return Err(Error::ShapeMismatch(format!("model expects {want:?}, got {:?}", x.dims())));
        }
        Ok(())
    }

    /// Data-dependent actnorm initialization from one batch. Layers already
    /// initialized keep their parameters.
    pub fn data_init(&mut self, x: &Tensor<T>) -> Result<()> {
        self.check_input(x)?;
        let mut h = x.clone();
        for level in &mut self.levels {
            h = squeeze(&h)?;
            for step in &mut level.steps {
                let (a, _) = step.unit.forward(&h)?;
                if !step.actnorm.is_initialized() {
                    step.actnorm.data_init(&a)?;
                }
                h = step.forward(&h)?.0;
            }
            if let Some(split) = &level.split {
                h = split.forward(&h)?.0;
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.run_forward(x, false).map(|(out, _)| out)
    }

    /// Forward pass that also records what [`backward`](Self::backward) needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(ForwardOutput<T>, Tape<T>)> {
        let (out, tape) = self.run_forward(x, true)?;
        Ok((out, tape.expect("recorded")))
    }

    fn run_forward(&self, x: &Tensor<T>, record: bool) -> Result<(ForwardOutput<T>, Option<Tape<T>>)> {
        self.check_input(x)?;
        let n = x.n();
        let mut logdet = vec![T::zero(); n];
        let mut logp = vec![T::zero(); n];
        let mut terms = Vec::new();
        let mut latents = Vec::with_capacity(self.levels.len());
        let mut tapes = Vec::new();
        let mut h = x.clone();
        for (l, level) in self.levels.iter().enumerate() {
            h = squeeze(&h)?;
            let mut step_tapes = Vec::new();
            for (s, step) in level.steps.iter().enumerate() {
                let (y, ld, tape) = step.forward_cached(&h)?;
                for (a, b) in logdet.iter_mut().zip(&ld) {
                    *a += *b;
                }
                terms.push(LayerTerm {
                    name: format!("level{l}.step{s}.logdet"),
                    values: ld,
                });
                if record {
                    step_tapes.push(tape);
                }
                h = y;
            }
            let mut split_tape = None;
            if let Some(split) = &level.split {
                let (retained, z, lp) = split.forward(&h)?;
                for (a, b) in logp.iter_mut().zip(&lp) {
                    *a += *b;
                }
                terms.push(LayerTerm {
                    name: format!("level{l}.split.logp"),
                    values: lp,
                });
                if record {
                    split_tape = Some((retained.clone(), z.clone()));
                }
                latents.push(z);
                h = retained;
            }
            if record {
                tapes.push((step_tapes, split_tape));
            }
        }
        let lp = self.prior.logp(&h);
        for (a, b) in logp.iter_mut().zip(&lp) {
            *a += *b;
        }
        terms.push(LayerTerm {
            name: "prior.logp".into(),
            values: lp,
        });
        let tape = record.then(|| Tape {
            levels: tapes,
            top: h.clone(),
            batch: n,
            consumed: false,
        });
        latents.push(h);
        Ok((
            ForwardOutput {
                latents: LatentStack(latents),
                logdet,
                logp,
                terms,
            },
            tape,
        ))
    }

    /// Accumulate gradients of `-(1/N) sum_n (logp_n + logdet_n)` into the
    /// parameter buffers and return the gradient with respect to the input.
    /// Kernel anchor taps receive zero gradient.
    pub fn backward(&mut self, tape: &mut Tape<T>) -> Result<Tensor<T>> {
        if tape.consumed || tape.levels.len() != self.levels.len() {
            return Err(Error::MissingCache);
        }
        tape.consumed = true;
        let weight = -T::one() / T::of(tape.batch as f64);
        let mut dh = self.prior.backward(&tape.top, weight);
        for (level, (step_tapes, split_tape)) in self.levels.iter_mut().zip(&tape.levels).rev() {
            if let (Some(split), Some((retained, z))) = (&mut level.split, split_tape) {
                dh = split.backward(retained, z, &dh, weight)?;
            }
            if step_tapes.len() != level.steps.len() {
                return Err(Error::MissingCache);
            }
            for (step, st) in level.steps.iter_mut().zip(step_tapes).rev() {
                dh = step.backward(st, &dh, weight)?;
            }
            dh = unsqueeze(&dh)?;
        }
        Ok(dh)
    }

    pub fn inverse(&self, latents: &LatentStack<T>) -> Result<Tensor<T>> {
        let dims = self.config.latent_dims();
        let zs = &latents.0;
        if zs.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!("{} latents for {} levels", zs.len(), dims.len())));
        }
        let n = zs[0].n();
        for (z, d) in zs.iter().zip(&dims) {
            if z.dims() != [n, d[0], d[1], d[2]] {
                return Err(Error::ShapeMismatch(format!("latent {:?} where {d:?} expected", z.dims())));
            }
        }
        self.run_inverse(zs[zs.len() - 1].clone(), |l, _| Ok(zs[l].clone()))
    }

    fn run_inverse(
        &self,
        top: Tensor<T>,
        mut latent: impl FnMut(usize, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut h = top;
        for (l, level) in self.levels.iter().enumerate().rev() {
            if let Some(split) = &level.split {
                let z = latent(l, &h)?;
                h = split.inverse(&h, &z)?;
            }
            for step in level.steps.iter().rev() {
                h = step.inverse(&h, self.workers)?;
            }
            h = unsqueeze(&h)?;
        }
        Ok(h)
    }

    /// Draw `n` images with latent standard deviations scaled by
    /// `temperature`; zero gives the deterministic mean sample.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, temperature: f64, rng: &mut R) -> Result<Tensor<T>> {
        if !(temperature >= 0.0) || n == 0 {
            return Err(Error::InvalidConfig(format!("sample needs n > 0 and temperature >= 0, got {n}, {temperature}")));
        }
        let [c, h, w] = *self.config.latent_dims().last().expect("levels >= 1");
        let (m, s) = self.prior.expand([n, c, h, w]);
        let top = gaussian_sample(&m, &s, temperature, rng);
        self.run_inverse(top, |l, retained| {
            let split = self.levels[l].split.as_ref().expect("split level");
            Ok(split.sample(retained, temperature, rng))
        })
    }

    /// Visit every learnable tensor with its gradient buffer in a fixed order.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        for (l, level) in self.levels.iter_mut().enumerate() {
            for (s, step) in level.steps.iter_mut().enumerate() {
                step.visit(&format!("level{l}.step{s}"), f);
            }
            if let Some(split) = &mut level.split {
                split.visit(&format!("level{l}.split"), f);
            }
        }
        f("prior.mean", &mut self.prior.mean, &mut self.prior.mean_grad);
        f("prior.log_scale", &mut self.prior.log_scale, &mut self.prior.log_scale_grad);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, _, g| g.data_mut().fill(T::zero()));
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, v, _| n += v.len());
        n
    }

    /// Pin every kernel anchor back to the identity.
    pub fn apply_masks(&mut self) {
        for step in self.steps_mut() {
            for b in step.unit.blocks_mut() {
                b.kernel_mut().apply_anchor_mask();
            }
        }
    }

    /// Zero the anchor taps of every unit-kernel gradient.
    pub fn mask_gradients(&mut self) {
        for step in self.steps_mut() {
            for (b, g) in step.unit.blocks().iter().zip(step.unit_grads.iter_mut()) {
                b.kernel().mask_gradient(g);
            }
        }
    }

    pub fn anchors_intact(&self) -> bool {
        self.steps().all(|s| s.unit.blocks().iter().all(|b| b.kernel().anchor_is_identity()))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg(levels: usize, steps: usize) -> ModelConfig {
        ModelConfig {
            channels: 4,
            height: 8,
            width: 8,
            levels,
            steps,
            kernel_size: 3,
            hidden: 8,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(2, 1);
        c.height = 6;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        c.height = 8;
        c.levels = 4;
        assert!(c.validate().is_err());
        assert!(cfg(3, 1).validate().is_ok());
    }

    #[test]
    fn latent_dims_cover_input() {
        for l in 1..=3 {
            let c = cfg(l, 1);
            let total: usize = c.latent_dims().iter().map(|d| d.iter().product::<usize>()).sum();
            assert_eq!(total, 4 * 8 * 8);
        }
    }

    #[test]
    fn identity_model_forward_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = FlowModel::<f64>::new(cfg(2, 2), Init::Identity, &mut rng).unwrap();
        let x = Tensor::from_fn([2, 4, 8, 8], |_| rng.random_range(0.0..1.0));
        let out = m.forward(&x).unwrap();
        assert!(out.logdet.iter().all(|v| *v == 0.0));
        assert_eq!(out.latents.total_len(), x.len());
        assert!(m.inverse(&out.latents).unwrap().bit_eq(&x));
    }

    #[test]
    fn random_model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = FlowModel::<f64>::new(cfg(2, 2), Init::Random, &mut rng).unwrap();
        let x = Tensor::from_fn([2, 4, 8, 8], |_| rng.random_range(0.0..1.0));
        m.data_init(&x).unwrap();
        assert!(m.is_initialized());
        let out = m.forward(&x).unwrap();
        m.set_workers(3);
        assert!(m.inverse(&out.latents).unwrap().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn wrong_input_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = FlowModel::<f64>::new(cfg(1, 1), Init::Identity, &mut rng).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros([1, 4, 4, 8])), Err(Error::ShapeMismatch(_))));
        let bad = LatentStack(vec![Tensor::zeros([1, 1, 1, 1])]);
        assert!(matches!(m.inverse(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn sampling_is_seeded_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = FlowModel::<f32>::new(cfg(2, 1), Init::Random, &mut rng).unwrap();
        let a = m.sample(3, 0.7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.sample(3, 0.7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.dims(), [3, 4, 8, 8]);
        assert!(a.bit_eq(&b));
        let c = m.sample(1, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = m.sample(1, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(c.bit_eq(&d));
        assert!(m.sample(1, -1.0, &mut rng).is_err());
    }

    #[test]
    fn backward_needs_fresh_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = FlowModel::<f64>::new(cfg(1, 1), Init::Identity, &mut rng).unwrap();
        let x = Tensor::filled([1, 4, 8, 8], 0.5);
        let (_, mut tape) = m.forward_train(&x).unwrap();
        m.backward(&mut tape).unwrap();
        assert!(matches!(m.backward(&mut tape), Err(Error::MissingCache)));
    }

    #[test]
    fn anchor_grads_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = FlowModel::<f64>::new(cfg(1, 1), Init::Random, &mut rng).unwrap();
        let x = Tensor::from_fn([2, 4, 8, 8], |_| rng.random_range(0.0..1.0));
        m.data_init(&x).unwrap();
        let (_, mut tape) = m.forward_train(&x).unwrap();
        m.backward(&mut tape).unwrap();
        for step in m.steps() {
            for (b, g) in step.unit.blocks().iter().zip(&step.unit_grads) {
                let (p, q) = b.kernel().anchor();
                let c = b.kernel().channels();
                for o in 0..c {
                    for i in 0..c {
                        assert_eq!(g.at(o, i, p, q), 0.0);
                    }
                }
                assert!(g.max_abs() > 0.0);
            }
        }
    }
}
