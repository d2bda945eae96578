//! K-step projected-gradient augmentation of replay batches in embedding
//! space, with parameter gradients accumulated over every step.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::contrastive::{combined_losses, loss_cp, PastRepStore, Stage};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, LabeledBatch, Model, ModelGrads, ModelVars};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaInit {
    #[default]
    Zero,
    /// Entries uniform in `[-1, 1]`, scaled so each example starts inside the ball.
    Uniform,
}

impl std::fmt::Display for DeltaInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DeltaInit::Zero => "zero",
            DeltaInit::Uniform => "uniform",
        })
    }
}

impl std::str::FromStr for DeltaInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "zero" => Ok(DeltaInit::Zero),
            "uniform" => Ok(DeltaInit::Uniform),
            other => Err(format!("unknown perturbation init `{other}` (expected zero or uniform)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig<S> {
    pub steps: usize,
    pub radius: S,
    pub step_size: S,
    pub init: DeltaInit,
}

impl<S: Scalar> Default for AdvConfig<S> {
    fn default() -> Self {
        Self {
            steps: 2,
            radius: S::lit(0.3),
            step_size: S::lit(0.1),
            init: DeltaInit::Zero,
        }
    }
}

impl<S: Scalar> AdvConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("adversarial steps must be at least 1"));
        }
        if !(self.radius > S::zero()) {
            return Err(Error::config("adversarial radius must be positive"));
        }
        if self.step_size < S::zero() {
            return Err(Error::config("adversarial step size must be non-negative"));
        }
        Ok(())
    }
}

/// Scales `delta` back onto the ball of radius `radius` if it lies outside.
pub fn project<S: Scalar>(delta: &mut [S], radius: S) {
    let norm = delta.iter().map(|&v| v * v).sum::<S>().sqrt();
    if norm > radius {
        let s = radius / norm;
        delta.iter_mut().for_each(|v| *v *= s);
    }
}

/// One normalized ascent step followed by projection:
/// `delta <- project(delta + step_size * grad / |grad|)`. A zero gradient or a
/// zero step leaves `delta` unchanged.
pub fn ascent_step<S: Scalar>(delta: &mut [S], grad: &[S], step_size: S, radius: S) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adversarial gradient".into()));
    }
    let norm = grad.iter().map(|&g| g * g).sum::<S>().sqrt();
    if norm == S::zero() || step_size == S::zero() {
        return Ok(());
    }
    for (d, &g) in delta.iter_mut().zip(grad) {
        *d += step_size * g / norm;
    }
    project(delta, radius);
    Ok(())
}

/// Per-example perturbations of the embedding-lookup outputs, stacked as a
/// `total_tokens x embed` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<S> {
    pub delta: Tensor<S>,
    spans: Vec<(usize, usize)>,
}

impl<S: Scalar> Perturbation<S> {
    pub fn zeros(batch: &LabeledBatch<S>, embed: usize) -> Self {
        Self {
            delta: Tensor::zeros(vec![batch.pooled.total_tokens(), embed]),
            spans: batch.pooled.spans().to_vec(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(batch: &LabeledBatch<S>, embed: usize, radius: S, rng: &mut R) -> Self {
        let mut p = Self::zeros(batch, embed);
        let u = Uniform::new_inclusive(-1.0f64, 1.0).expect("valid range");
        for e in 0..p.spans.len() {
            let block = p.example_mut(e);
            let scale = radius / S::lit(block.len() as f64).sqrt();
            for v in block.iter_mut() {
                *v = S::lit(u.sample(rng)) * scale;
            }
            project(block, radius);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    fn range(&self, e: usize) -> std::ops::Range<usize> {
        let cols = self.delta.cols();
        let (start, len) = self.spans[e];
        start * cols..(start + len) * cols
    }

    /// The `tokens x embed` block of example `e`, flattened.
    pub fn example(&self, e: usize) -> &[S] {
        &self.delta.data()[self.range(e)]
    }

    pub fn example_mut(&mut self, e: usize) -> &mut [S] {
        let r = self.range(e);
        &mut self.delta.data_mut()[r]
    }

    /// Frobenius norm of each example's block.
    pub fn norms(&self) -> Vec<S> {
        (0..self.len())
            .map(|e| self.example(e).iter().map(|&v| v * v).sum::<S>().sqrt())
            .collect()
    }
}

/// The replay objective `L2 = ce + lambda_cp * cp`.
#[derive(Clone, Copy, Debug)]
pub struct ReplayObjective<'a, S> {
    pub past: &'a PastRepStore<S>,
    pub lambda_cp: S,
    pub tau_cp: S,
    pub use_cp: bool,
    /// Classifier columns allowed in the cross-entropy softmax; `None` = all.
    pub class_mask: Option<&'a [bool]>,
}

impl<'a, S: Scalar> ReplayObjective<'a, S> {
    /// Cross-entropy only, no past representations.
    pub fn ce_only(past: &'a PastRepStore<S>) -> Self {
        Self {
            past,
            lambda_cp: S::zero(),
            tau_cp: S::lit(0.05),
            use_cp: false,
            class_mask: None,
        }
    }

    /// Records the objective; returns the loss node and the model handles.
    pub fn build(
        &self,
        tape: &mut Tape<S>,
        model: &Model<S>,
        batch: &LabeledBatch<S>,
        perturbation: Option<NodeId>,
    ) -> Result<(NodeId, ModelVars)> {
        let vars = model.bind(tape)?;
        let z = vars.encoder.forward(tape, &batch.pooled, perturbation)?;
        let logits = vars.classifier.forward(tape, z)?;
        let ce = cross_entropy(tape, logits, batch, self.class_mask)?;
        let cp = if self.use_cp && !self.past.is_empty() {
            let zn = tape.row_normalize(z)?;
            Some(loss_cp(tape, zn, &batch.classes, self.past, self.tau_cp)?.loss)
        } else {
            None
        };
        let loss = combined_losses(tape, ce, None, cp, S::zero(), self.lambda_cp, Stage::Replay)?;
        Ok((loss, vars))
    }
}

/// Loss, parameter gradients and perturbation gradient at one point.
struct Pass<S> {
    loss: S,
    grads: ModelGrads<S>,
    delta_grad: Tensor<S>,
}

fn pass<S: Scalar>(
    model: &Model<S>,
    batch: &LabeledBatch<S>,
    delta: &Perturbation<S>,
    objective: &ReplayObjective<'_, S>,
) -> Result<Pass<S>> {
    let mut tape = Tape::new();
    let d = tape.leaf(delta.delta.clone())?;
    let (loss, vars) = objective.build(&mut tape, model, batch, Some(d))?;
    let grads = tape.backward(loss)?;
    Ok(Pass {
        loss: tape.value(loss).item()?,
        grads: vars.grads(&grads)?,
        delta_grad: grads.wrt(d)?.clone(),
    })
}

fn step_all<S: Scalar>(delta: &mut Perturbation<S>, grad: &Tensor<S>, config: &AdvConfig<S>) -> Result<()> {
    for e in 0..delta.len() {
        let r = delta.range(e);
        ascent_step(
            delta.example_mut(e),
            &grad.data()[r],
            config.step_size,
            config.radius,
        )?;
    }
    Ok(())
}

/// One adversarial ascent step on the replay objective, per example:
/// `delta_t = project(delta_{t-1} + alpha * g / |g|)` with
/// `g = d L2(F(x + delta_{t-1}), y) / d delta`.
pub fn adv_step<S: Scalar>(
    model: &Model<S>,
    batch: &LabeledBatch<S>,
    delta: &Perturbation<S>,
    config: &AdvConfig<S>,
    objective: &ReplayObjective<'_, S>,
) -> Result<Perturbation<S>> {
    config.validate()?;
    let p = pass(model, batch, delta, objective)?;
    let mut next = delta.clone();
    step_all(&mut next, &p.delta_grad, config)?;
    Ok(next)
}

#[derive(Clone, Debug)]
pub struct AdvOutcome<S> {
    /// Mean of the per-step objectives.
    pub objective: S,
    pub step_losses: Vec<S>,
    /// Parameter gradients averaged over the steps.
    pub grads: ModelGrads<S>,
    /// Perturbation used at the last step.
    pub last_delta: Perturbation<S>,
}

/// Runs `K` steps: evaluate L2 at the current perturbation, accumulate the
/// parameter gradients, then take one ascent step. The step after the last
/// evaluation is not taken since nothing consumes it.
pub fn adv_replay_loss<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    batch: &LabeledBatch<S>,
    config: &AdvConfig<S>,
    objective: &ReplayObjective<'_, S>,
    rng: &mut R,
) -> Result<AdvOutcome<S>> {
    config.validate()?;
    let embed = model.encoder.dims().embed;
    let mut delta = match config.init {
        DeltaInit::Zero => Perturbation::zeros(batch, embed),
        DeltaInit::Uniform => Perturbation::uniform(batch, embed, config.radius, rng),
    };
    let mut step_losses = Vec::with_capacity(config.steps);
    let mut total: Option<ModelGrads<S>> = None;
    for t in 0..config.steps {
        let p = pass(model, batch, &delta, objective)?;
        step_losses.push(p.loss);
        match total.as_mut() {
            Some(acc) => acc.add_assign(&p.grads)?,
            None => total = Some(p.grads),
        }
        if t + 1 < config.steps {
            step_all(&mut delta, &p.delta_grad, config)?;
        }
    }
    let mut grads = total.expect("at least one step");
    let k = S::lit(config.steps as f64);
    if config.steps > 1 {
        grads.scale(S::one() / k);
    }
    let objective = step_losses.iter().copied().sum::<S>() / k;
    Ok(AdvOutcome {
        objective,
        step_losses,
        grads,
        last_delta: delta,
    })
}

/// Replay objective and gradients without any perturbation.
pub fn clean_replay_loss<S: Scalar>(
    model: &Model<S>,
    batch: &LabeledBatch<S>,
    objective: &ReplayObjective<'_, S>,
) -> Result<(S, ModelGrads<S>)> {
    let mut tape = Tape::new();
    let (loss, vars) = objective.build(&mut tape, model, batch, None)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item()?, vars.grads(&grads)?))
}
