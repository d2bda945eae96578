//! Neural mutual-information estimation with the Donsker-Varadhan bound
//! `I(A; B) >= E_joint[T] - log E_marginal[exp T]`, where the statistics
//! network `T` is a two-layer ReLU MLP on concatenated `(a, b)` and marginal
//! pairs come from shuffling `b`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::optim::Adam;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of samples held out for evaluating the bound.
    pub holdout: f64,
    /// Number of trailing per-epoch evaluations averaged into the estimate.
    pub average_last: usize,
    /// Shuffles of the held-out set used to estimate the marginal term.
    pub eval_shuffles: usize,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 60,
            batch_size: 256,
            learning_rate: 2e-3,
            holdout: 0.2,
            average_last: 10,
            eval_shuffles: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// The held-out bound, which sampling noise can push below zero.
    pub raw: f64,
    /// `max(raw, 0)`.
    pub clamped: f64,
    /// True when one side was constant and no training happened.
    pub degenerate: bool,
    /// Held-out bound after every epoch.
    pub trace: Vec<f64>,
}

/// Two-layer statistics network `T(a, b)`.
#[derive(Clone, Debug)]
pub struct StatisticsNet<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> StatisticsNet<S> {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let init = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let dist = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("finite std");
            let data = (0..rows * cols).map(|_| S::lit(dist.sample(rng))).collect();
            Tensor::matrix(rows, cols, data).expect("shape")
        };
        Self {
            w1: init(rng, input, hidden),
            b1: Tensor::zeros(vec![1, hidden]),
            w2: init(rng, hidden, 1),
            b2: Tensor::zeros(vec![1, 1]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    /// `T` for every row of `x`.
    pub fn eval(&self, x: &Tensor<S>) -> Result<Vec<S>> {
        let h = x
            .matmul(&self.w1)?
            .add(&self.b1)?
            .map(|v| if v > S::zero() { v } else { S::zero() });
        Ok(h.matmul(&self.w2)?.add(&self.b2)?.into_data())
    }

    fn params_mut(&mut self) -> [&mut Tensor<S>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

fn standardize<S: Scalar>(rows: &[Vec<S>]) -> (Vec<Vec<S>>, bool) {
    let n = S::lit(rows.len() as f64);
    let d = rows[0].len();
    let mut out = rows.to_vec();
    let mut any_varies = false;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<S>() / n;
        let var = rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<S>() / n;
        let std = var.sqrt();
        let varies = std > S::lit(1e-12) * (S::one() + mean.abs());
        any_varies |= varies;
        for r in out.iter_mut() {
            r[j] = if varies { (r[j] - mean) / std } else { S::zero() };
        }
    }
    (out, any_varies)
}

fn pair_matrix<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>], idx: &[usize], partner: &[usize]) -> Result<Tensor<S>> {
    let rows: Vec<Vec<S>> = idx
        .iter()
        .zip(partner)
        .map(|(&i, &j)| a[i].iter().chain(&b[j]).copied().collect())
        .collect();
    Tensor::from_rows(&rows)
}

fn log_mean_exp<S: Scalar>(values: &[S]) -> S {
    let max = values.iter().copied().fold(S::neg_infinity(), S::max);
    let total: S = values.iter().map(|&v| (v - max).exp()).sum();
    max + (total / S::lit(values.len() as f64)).ln()
}

/// Held-out Donsker-Varadhan value of `net`.
fn held_out_bound<S: Scalar>(
    net: &StatisticsNet<S>,
    a: &[Vec<S>],
    b: &[Vec<S>],
    idx: &[usize],
    shuffles: &[Vec<usize>],
) -> Result<S> {
    let joint = net.eval(&pair_matrix(a, b, idx, idx)?)?;
    let joint_mean = joint.iter().copied().sum::<S>() / S::lit(joint.len() as f64);
    let mut marginal = Vec::with_capacity(idx.len() * shuffles.len());
    for partner in shuffles {
        marginal.extend(net.eval(&pair_matrix(a, b, idx, partner)?)?);
    }
    Ok(joint_mean - log_mean_exp(&marginal))
}

/// Trains a statistics network on paired samples and returns the held-out
/// bound averaged over the last `average_last` epochs.
///
/// Features are standardized per dimension first. If either side is
/// constant the estimate is zero and flagged degenerate.
pub fn mine_estimate<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>], config: &MineConfig) -> Result<MiEstimate> {
    if a.len() != b.len() {
        return Err(Error::contract("paired samples must have equal counts"));
    }
    if a.len() < 4 {
        return Err(Error::input("at least 4 samples are needed for an estimate"));
    }
    if config.epochs == 0 || config.batch_size < 2 || !(config.holdout > 0.0 && config.holdout < 1.0) {
        return Err(Error::config("invalid MI estimator configuration"));
    }
    for side in [a, b] {
        let d = side[0].len();
        if d == 0 || side.iter().any(|r| r.len() != d) {
            return Err(Error::contract("inconsistent feature widths"));
        }
    }
    let (a, a_varies) = standardize(a);
    let (b, b_varies) = standardize(b);
    if !a_varies || !b_varies {
        log::warn!("constant inputs to the MI estimator; reporting zero");
        return Ok(MiEstimate {
            raw: 0.0,
            clamped: 0.0,
            degenerate: true,
            trace: Vec::new(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((a.len() as f64 * config.holdout).round() as usize).clamp(2, a.len() - 2);
    let (held, train) = order.split_at(n_hold);
    let held = held.to_vec();
    let mut train = train.to_vec();
    let shuffles: Vec<Vec<usize>> = (0..config.eval_shuffles.max(1))
        .map(|_| {
            let mut p = held.clone();
            p.shuffle(&mut rng);
            p
        })
        .collect();

    let mut net = StatisticsNet::<S>::new(a[0].len() + b[0].len(), config.hidden, &mut rng);
    let mut opt = Adam::new(S::lit(config.learning_rate));
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut partner = chunk.to_vec();
            partner.shuffle(&mut rng);
            let joint_x = pair_matrix(&a, &b, chunk, chunk)?;
            let marg_x = pair_matrix(&a, &b, chunk, &partner)?;

            let mut tape = Tape::new();
            let w1 = tape.leaf(net.w1.clone())?;
            let b1 = tape.leaf(net.b1.clone())?;
            let w2 = tape.leaf(net.w2.clone())?;
            let b2 = tape.leaf(net.b2.clone())?;
            let forward = |tape: &mut Tape<S>, x: Tensor<S>| -> Result<_> {
                let x = tape.constant(x)?;
                let h = tape.matmul(x, w1)?;
                let h = tape.add(h, b1)?;
                let h = tape.relu(h)?;
                let t = tape.matmul(h, w2)?;
                tape.add(t, b2)
            };
            let tj = forward(&mut tape, joint_x)?;
            let tm = forward(&mut tape, marg_x)?;
            let shift = tape.value(tm).data().iter().copied().fold(S::neg_infinity(), S::max);
            let shift = tape.constant(Tensor::from_elem(tape.value(tm).shape().to_vec(), shift))?;
            let centered = tape.sub(tm, shift)?;
            let e = tape.exp(centered)?;
            let me = tape.mean(e)?;
            let lme = tape.log(me)?;
            let mj = tape.mean(tj)?;
            // minimize -(E_joint T - log E_marg e^T); the shift does not affect gradients
            let loss = tape.sub(lme, mj)?;
            let grads = tape.backward(loss)?;
            let g = [grads.wrt(w1)?, grads.wrt(b1)?, grads.wrt(w2)?, grads.wrt(b2)?];
            opt.step(&mut net.params_mut(), &g)?;
        }
        trace.push(held_out_bound(&net, &a, &b, &held, &shuffles)?.to_f64_lossy());
    }
    let tail = config.average_last.clamp(1, trace.len());
    let raw = trace[trace.len() - tail..].iter().sum::<f64>() / tail as f64;
    Ok(MiEstimate {
        raw,
        clamped: raw.max(0.0),
        degenerate: false,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiMode {
    /// `I(X; Z)`: frozen random bag-of-embeddings of the input against `z`.
    InputRepresentation,
    /// `I(Z; Y)`: `z` against the one-hot label.
    RepresentationLabel,
}

/// Width of the frozen input featurizer.
pub const INPUT_FEATURE_DIM: usize = 32;

/// Mean of frozen N(0, 1) token embeddings; the featurizer depends only on
/// `seed` and the vocabulary size.
pub fn input_features(examples: &[Example], vocab: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let table: Vec<f64> = (0..vocab * INPUT_FEATURE_DIM)
        .map(|_| rand_distr::StandardNormal.sample(&mut rng))
        .collect();
    examples
        .iter()
        .map(|e| {
            if e.tokens.is_empty() {
                return Err(Error::input(format!("example {} has no tokens", e.id)));
            }
            let mut f = vec![0.0; INPUT_FEATURE_DIM];
            for &t in &e.tokens {
                let t = t as usize;
                if t >= vocab {
                    return Err(Error::input(format!("token {t} outside vocabulary")));
                }
                for (o, &v) in f.iter_mut().zip(&table[t * INPUT_FEATURE_DIM..(t + 1) * INPUT_FEATURE_DIM]) {
                    *o += v;
                }
            }
            let n = e.tokens.len() as f64;
            Ok(f.into_iter().map(|v| v / n).collect())
        })
        .collect()
}

/// One-hot encoding over the sorted set of labels present.
pub fn one_hot_labels(labels: &[usize]) -> Vec<Vec<f64>> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    labels
        .iter()
        .map(|l| {
            let mut v = vec![0.0; classes.len()];
            v[classes.binary_search(l).expect("label present")] = 1.0;
            v
        })
        .collect()
}

/// Estimates `I(X; Z)` or `I(Z; Y)` for the encoder on `examples`.
pub fn measure_representation_mi(
    encoder: &Encoder<f64>,
    examples: &[Example],
    mode: MiMode,
    config: &MineConfig,
) -> Result<MiEstimate> {
    if examples.is_empty() {
        return Err(Error::input("no examples to measure"));
    }
    let tokens: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let z = encoder.encode_all(&tokens)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    match mode {
        MiMode::InputRepresentation => {
            let x = input_features(examples, encoder.dims().vocab, config.seed)?;
            mine_estimate(&x, &z, config)
        }
        MiMode::RepresentationLabel => mine_estimate(&z, &one_hot_labels(&labels), config),
    }
}

/// Estimate from precomputed representations (for example a representation dump).
pub fn measure_from_reps(
    reps: &[Vec<f64>],
    labels: &[usize],
    input: Option<&[Vec<f64>]>,
    mode: MiMode,
    config: &MineConfig,
) -> Result<MiEstimate> {
    if reps.is_empty() {
        return Err(Error::input("no representations to measure"));
    }
    match mode {
        MiMode::InputRepresentation => {
            let x = input.ok_or_else(|| Error::input("input features are required for I(X;Z)"))?;
            mine_estimate(x, reps, config)
        }
        MiMode::RepresentationLabel => mine_estimate(reps, &one_hot_labels(labels), config),
    }
}
