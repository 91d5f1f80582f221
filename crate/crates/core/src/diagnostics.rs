//! Finite-difference checks of the flow: parameter gradients against central
//! differences of the NLL, and the accumulated log-determinant against the
//! Jacobian assembled column by column.

use rand::Rng;

use crate::error::Result;
use crate::flow::FlowModel;
use crate::linalg::Lu;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::nll;

/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Add `U(-scale, scale)` noise to every parameter, then re-pin the kernel
/// anchors. Makes zero-initialized layers contribute to every gradient.
pub fn perturb_params<T: Scalar, R: Rng + ?Sized>(model: &mut FlowModel<T>, scale: f64, rng: &mut R) {
    model.visit_params(&mut |_, v, _| {
        v.data_mut().iter_mut().for_each(|p| *p += T::of(rng.random_range(-scale..scale)));
    });
    model.apply_masks();
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: (String, usize),
    /// Entries compared; anchor taps are pinned and skipped.
    pub checked: usize,
    /// Entries skipped because the perturbation flipped a ReLU, so the
    /// loss is not differentiable across the stencil.
    pub kinks: usize,
    /// Smallest |pre-activation| at any coupling ReLU.
    pub min_preactivation: f64,
}

/// Loss and ReLU sign pattern.
fn loss(model: &FlowModel<f64>, x: &Tensor<f64>) -> Result<(f64, Vec<bool>)> {
    let (out, tape) = model.forward_train(x)?;
    Ok((nll(&out, [x.c(), x.h(), x.w()], false)?, tape.relu_pattern()))
}

/// Compare the analytic gradient of the per-sample NLL with central
/// differences of step `eps` for every parameter entry.
pub fn gradient_check(model: &mut FlowModel<f64>, x: &Tensor<f64>, eps: f64) -> Result<GradCheck> {
    model.zero_grad();
    let (_, mut tape) = model.forward_train(x)?;
    let min_preactivation = tape.min_abs_preactivation();
    let pattern = tape.relu_pattern();
    model.backward(&mut tape)?;

    let mut analytic = Vec::new();
    model.visit_params(&mut |name, _, g| analytic.push((name.to_string(), g.data().to_vec())));
    let pinned = anchor_flags(model);

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (String::new(), 0),
        checked: 0,
        kinks: 0,
        min_preactivation,
    };
    for (p, (name, grads)) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            if pinned[p].as_ref().is_some_and(|m| m[i]) {
                continue;
            }
            let (plus, pp) = with_param(model, p, i, eps, |m| loss(m, x))?;
            let (minus, pm) = with_param(model, p, i, -eps, |m| loss(m, x))?;
            if pp != pattern || pm != pattern {
                report.kinks += 1;
                continue;
            }
            let num = (plus - minus) / (2.0 * eps);
            let abs = (a - num).abs();
            let rel = abs / a.abs().max(num.abs()).max(GRAD_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = (name.clone(), i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Per parameter, which entries are anchor taps (`None` for non-kernels).
fn anchor_flags(model: &mut FlowModel<f64>) -> Vec<Option<Vec<bool>>> {
    let mut masks = Vec::new();
    for step in model.steps() {
        for b in step.unit.blocks() {
            let mut ones = Tensor::filled(b.kernel().weights().dims(), 1.0);
            b.kernel().mask_gradient(&mut ones);
            masks.push(ones.data().iter().map(|&v| v == 0.0).collect::<Vec<_>>());
        }
    }
    let mut masks = masks.into_iter();
    let mut flags = Vec::new();
    model.visit_params(&mut |name, _, _| flags.push(name.contains(".unit.block").then(|| masks.next().expect("one mask per block"))));
    flags
}

fn with_param<R, F>(model: &mut FlowModel<f64>, p: usize, i: usize, delta: f64, f: F) -> Result<R>
where
    F: FnOnce(&FlowModel<f64>) -> Result<R>,
{
    let shift = |model: &mut FlowModel<f64>, d: f64| {
        let mut k = 0;
        model.visit_params(&mut |_, v, _| {
            if k == p {
                v.data_mut()[i] += d;
            }
            k += 1;
        });
    };
    let original = {
        let mut v = 0.0;
        let mut k = 0;
        model.visit_params(&mut |_, t, _| {
            if k == p {
                v = t.data()[i];
            }
            k += 1;
        });
        v
    };
    shift(model, delta);
    let out = f(model);
    let mut k = 0;
    model.visit_params(&mut |_, v, _| {
        if k == p {
            v.data_mut()[i] = original;
        }
        k += 1;
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianCheck {
    /// `log|det J|` of the central-difference Jacobian.
    pub finite_difference: f64,
    /// Sum of the per-layer log-determinants reported by the model.
    pub accumulated: f64,
}

impl JacobianCheck {
    pub fn abs_err(&self) -> f64 {
        (self.finite_difference - self.accumulated).abs()
    }
}

fn flat_latents(model: &FlowModel<f64>, x: &Tensor<f64>) -> Result<(Vec<f64>, f64)> {
    let out = model.forward(x)?;
    let v = out.latents.0.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok((v, out.logdet[0]))
}

/// Assemble the Jacobian of the map from one input image to its
/// concatenated latents by central differences and compare log-determinants.
pub fn jacobian_check(model: &FlowModel<f64>, x: &Tensor<f64>, eps: f64) -> Result<JacobianCheck> {
    let x = x.sample(0);
    let d = x.len();
    let (_, accumulated) = flat_latents(model, &x)?;
    let mut jac = vec![0.0; d * d];
    let mut probe = x.clone();
    for col in 0..d {
        let orig = probe.data()[col];
        probe.data_mut()[col] = orig + eps;
        let (plus, _) = flat_latents(model, &probe)?;
        probe.data_mut()[col] = orig - eps;
        let (minus, _) = flat_latents(model, &probe)?;
        probe.data_mut()[col] = orig;
        for row in 0..d {
            jac[row * d + col] = (plus[row] - minus[row]) / (2.0 * eps);
        }
    }
    Ok(JacobianCheck {
        finite_difference: Lu::new(&jac, d).log_abs_det(),
        accumulated,
    })
}
