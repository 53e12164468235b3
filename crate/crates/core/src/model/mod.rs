//! Frozen proxy for the vision-language model: a linear "text encoder" that turns an
//! instance prompt into one unit text feature per class, cosine scoring against the
//! image feature, the CE + KL objective, its analytic gradient with respect to the
//! prompt experts, and the AdamW update.

mod head;
mod loss;
mod optim;

pub use head::FrozenTextHead;
pub use loss::{kl_divergence, loss, LossBreakdown, PROB_FLOOR};
pub use optim::{adamw_step, AdamWConfig, AdamWState};

use crate::clustering::TokenMatrix;
use crate::error::{Error, Result};
use crate::router::{ExpertSet, RoutedPrompt};
use crate::tensor::{dot, normalize, Mat};

/// Default softmax temperature (logit scale ≈ 14.29).
pub const DEFAULT_TAU: f64 = 0.07;

/// Image feature: the normalized mean of the image's tokens.
pub fn image_feature(tokens: &TokenMatrix) -> Result<Vec<f64>> {
    normalize(&tokens.mean_row())
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Class probabilities for `prompt` and image feature `f`.
pub fn predict(prompt: &Mat, head: &FrozenTextHead, f: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let f = normalize(f)?;
    let w = head.text_features(prompt)?;
    Ok(scores_to_probs(&w, &f, tau))
}

/// Predictions under the fixed all-zero reference prompt, i.e. the zero-shot model.
pub fn zero_shot_reference(head: &FrozenTextHead, f: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let f = normalize(f)?;
    Ok(scores_to_probs(head.reference_features(), &f, tau))
}

fn scores_to_probs(w: &Mat, f_unit: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = w.iter_rows().map(|wc| dot(wc, f_unit) / tau).collect();
    softmax(&logits)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config("tau", "temperature must be positive"))
    }
}

/// Per-expert gradients of the total loss, one `L × D` matrix per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGradients {
    pub grads: Vec<Mat>,
}

impl ExpertGradients {
    pub fn zeros_like(experts: &ExpertSet) -> Self {
        Self {
            grads: vec![Mat::zeros(experts.prompt_len(), experts.dim()); experts.len()],
        }
    }

    /// `self += a · other`.
    pub fn add_scaled(&mut self, a: f64, other: &ExpertGradients) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            g.add_scaled(a, o);
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(a));
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Mat::is_finite)
    }
}

/// Loss of one sample at a given instance prompt together with `∂loss/∂prompt`.
#[derive(Clone, Debug)]
pub struct PromptGradient {
    pub loss: LossBreakdown,
    pub probs: Vec<f64>,
    pub grad: Mat,
}

/// Forward and backward pass for a fixed prompt.
///
/// With logits `z_c = cos(w_c, f)/τ`: `∂ce/∂z = p − onehot`, `∂kl/∂z = p − p_ref`;
/// then through the cosine (`∂s_c/∂a_c = (f̂ − s_c w_c)/‖a_c‖`) and the frozen
/// linear map (`∂a_c/∂e = T_c`).
pub fn prompt_gradient(
    prompt: &Mat,
    head: &FrozenTextHead,
    f: &[f64],
    label: usize,
    probs_ref: &[f64],
    beta: f64,
    tau: f64,
) -> Result<PromptGradient> {
    check_tau(tau)?;
    if label >= head.classes() {
        return Err(Error::shape(format!(
            "label {label} out of range for {} classes",
            head.classes()
        )));
    }
    let f_unit = normalize(f)?;
    let fwd = head.forward(prompt)?;
    let probs = scores_to_probs(&fwd.features, &f_unit, tau);
    let loss = loss(&probs, probs_ref, label, beta)?;

    let mut grad_flat = vec![0.0; prompt.rows() * prompt.cols()];
    let mut ga = vec![0.0; head.dim()];
    for c in 0..head.classes() {
        let onehot = if c == label { 1.0 } else { 0.0 };
        let dz = (probs[c] - onehot) + beta * (probs[c] - probs_ref[c]);
        let ds = dz / tau;
        if ds == 0.0 {
            continue;
        }
        let w = fwd.features.row(c);
        let s = dot(w, &f_unit);
        let r = fwd.norms[c];
        for ((g, fk), wk) in ga.iter_mut().zip(&f_unit).zip(w) {
            *g = ds * (fk - s * wk) / r;
        }
        head.projection(c).tmatvec_add(&ga, &mut grad_flat);
    }
    let grad = Mat::from_vec(prompt.rows(), prompt.cols(), grad_flat)?;
    Ok(PromptGradient { loss, probs, grad })
}

/// Per-sample outcome of [`gradients`].
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub loss: LossBreakdown,
    pub probs: Vec<f64>,
    pub grads: ExpertGradients,
}

/// Gradient of the total loss for one routed sample with respect to every expert:
/// `∂loss/∂expert_m = π_m · ∂loss/∂prompt`, routing weights held constant.
pub fn gradients(
    tokens: &TokenMatrix,
    label: usize,
    experts: &ExpertSet,
    routed: &RoutedPrompt,
    head: &FrozenTextHead,
    beta: f64,
    tau: f64,
) -> Result<SampleOutcome> {
    if routed.weights.0.len() != experts.len() {
        return Err(Error::shape(format!(
            "{} mixture weights for {} experts",
            routed.weights.0.len(),
            experts.len()
        )));
    }
    if routed.prompt.shape() != (experts.prompt_len(), experts.dim()) {
        return Err(Error::shape("routed prompt does not match the expert shape"));
    }
    let f = image_feature(tokens)?;
    let reference = zero_shot_reference(head, &f, tau)?;
    let pg = prompt_gradient(&routed.prompt, head, &f, label, &reference, beta, tau)?;
    let grads = routed
        .weights
        .0
        .iter()
        .map(|&pi| {
            let mut g = Mat::zeros(experts.prompt_len(), experts.dim());
            if pi != 0.0 {
                g.add_scaled(pi, &pg.grad);
            }
            g
        })
        .collect();
    Ok(SampleOutcome {
        loss: pg.loss,
        probs: pg.probs,
        grads: ExpertGradients { grads },
    })
}
