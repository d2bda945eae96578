//! The continual-learning procedure: new-task training with fast-slow
//! contrast, memory selection, adversarially augmented replay with
//! current-past contrast, snapshots, evaluation and the analyses built on top.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{adv_replay_loss, clean_replay_loss, AdvConfig, DeltaInit, ReplayObjective};
use crate::autodiff::{Tape, Tensor};
use crate::contrastive::{combined_losses, loss_fs, PastRepStore, RepresentationQueue, SlowEncoder, Stage};
use crate::data::{Dataset, Example, TaskSequence};
use crate::error::{Error, Result};
use crate::memory::{select_memory, MemoryBank};
use crate::mine::{measure_representation_mi, MiEstimate, MiMode, MineConfig};
use crate::model::{cross_entropy, EncoderDims, LabeledBatch, Model};
use crate::records::write_records;

/// Which classifier columns compete in the new-task cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CeScope {
    #[default]
    AllSeen,
    CurrentTask,
}

impl std::fmt::Display for CeScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CeScope::AllSeen => "all-seen",
            CeScope::CurrentTask => "current-task",
        })
    }
}

impl std::str::FromStr for CeScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all-seen" => Ok(CeScope::AllSeen),
            "current-task" => Ok(CeScope::CurrentTask),
            other => Err(format!("unknown cross-entropy scope `{other}` (expected all-seen or current-task)")),
        }
    }
}

/// Every knob of a run. Serialized flat, one JSON field per knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub momentum: f64,
    pub tau_fs: f64,
    pub tau_cp: f64,
    pub lambda_fs: f64,
    pub lambda_cp: f64,
    pub queue_capacity: usize,
    pub memory_budget: usize,
    pub adv_steps: usize,
    pub adv_radius: f64,
    pub adv_step_size: f64,
    pub adv_init: DeltaInit,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    pub epochs_new: usize,
    pub epochs_replay: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub no_fs: bool,
    pub no_cp: bool,
    pub no_adv: bool,
    pub finetune_only: bool,
    pub replay_only: bool,
    pub ce_scope: CeScope,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub rep_dim: usize,
    pub measure_mi: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            tau_fs: 0.05,
            tau_cp: 0.05,
            lambda_fs: 0.05,
            lambda_cp: 0.05,
            queue_capacity: 512,
            memory_budget: 10,
            adv_steps: 2,
            adv_radius: 0.3,
            adv_step_size: 0.1,
            adv_init: DeltaInit::Zero,
            lr_encoder: 1e-2,
            lr_classifier: 1e-1,
            epochs_new: 10,
            epochs_replay: 10,
            batch_size: 32,
            seed: 0,
            no_fs: false,
            no_cp: false,
            no_adv: false,
            finetune_only: false,
            replay_only: false,
            ce_scope: CeScope::AllSeen,
            embed_dim: 32,
            hidden_dim: 64,
            rep_dim: 32,
            measure_mi: false,
        }
    }
}

/// Named method variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoFs,
    NoCp,
    NoAdv,
    ReplayOnly,
    FinetuneOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoFs,
        Variant::NoCp,
        Variant::NoAdv,
        Variant::ReplayOnly,
        Variant::FinetuneOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFs => "no-fs",
            Variant::NoCp => "no-cp",
            Variant::NoAdv => "no-adv",
            Variant::ReplayOnly => "replay-only",
            Variant::FinetuneOnly => "finetune-only",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    /// `config` with this variant's flag switched on.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::NoFs => c.no_fs = true,
            Variant::NoCp => c.no_cp = true,
            Variant::NoAdv => c.no_adv = true,
            Variant::ReplayOnly => c.replay_only = true,
            Variant::FinetuneOnly => c.finetune_only = true,
        }
        c
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau_fs", self.tau_fs),
            ("tau_cp", self.tau_cp),
            ("lr_encoder", self.lr_encoder),
            ("lr_classifier", self.lr_classifier),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if !(self.lambda_fs >= 0.0 && self.lambda_cp >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.rep_dim == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        self.adv().validate()
    }

    pub fn adv(&self) -> AdvConfig<f64> {
        AdvConfig {
            steps: self.adv_steps,
            radius: self.adv_radius,
            step_size: self.adv_step_size,
            init: self.adv_init,
        }
    }

    pub fn use_replay(&self) -> bool {
        !self.finetune_only
    }

    pub fn use_fs(&self) -> bool {
        !(self.no_fs || self.replay_only || self.finetune_only)
    }

    pub fn use_cp(&self) -> bool {
        !(self.no_cp || self.replay_only || self.finetune_only)
    }

    pub fn use_adv(&self) -> bool {
        !(self.no_adv || self.replay_only || self.finetune_only)
    }

    pub fn dims(&self, vocab: usize) -> EncoderDims {
        EncoderDims {
            vocab,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            rep: self.rep_dim,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

/// Independent random streams so that skipping a stage never shifts the
/// randomness of another.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_INIT: u64 = 0;

fn task_stream(seed: u64, task: usize, slot: u64) -> ChaCha8Rng {
    stream(seed, 1 + 8 * task as u64 + slot)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 31;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 29)
}

/// Everything a run carries from one task to the next.
#[derive(Clone, Debug)]
pub struct RunState {
    pub model: Model<f64>,
    pub slow: SlowEncoder<f64>,
    pub queue: RepresentationQueue<f64>,
    pub memory: MemoryBank,
    pub past: PastRepStore<f64>,
    pub tasks_done: usize,
    vocab: usize,
}

impl RunState {
    pub fn new(config: &TrainConfig, vocab: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.dims(vocab), &mut stream(config.seed, STREAM_INIT));
        let slow = SlowEncoder::new(&model.encoder, config.momentum)?;
        Ok(Self {
            model,
            slow,
            queue: RepresentationQueue::new(config.queue_capacity),
            memory: MemoryBank::new(config.memory_budget),
            past: PastRepStore::new(),
            tasks_done: 0,
            vocab,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}

fn batch_of(model: &Model<f64>, examples: &[&Example], vocab: usize) -> Result<LabeledBatch<f64>> {
    let tokens: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    LabeledBatch::new(&tokens, &labels, &model.classifier, vocab)
}

fn ensure_finite_loss(loss: f64, what: &str, task: usize, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} loss is {loss} at task {} epoch {} step {}",
            task + 1,
            epoch + 1,
            step + 1
        )))
    }
}

/// Loss trajectory of one task, for logging and diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub new_task_loss: Vec<f64>,
    pub replay_loss: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Stage 1: new-task training on `L1 = ce + lambda_fs * fs`.
fn train_new_task(
    state: &mut RunState,
    task: usize,
    classes: &[usize],
    examples: &[&Example],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut rng = task_stream(config.seed, task, 1);
    let use_fs = config.use_fs();
    let mask: Option<Vec<bool>> = match config.ce_scope {
        CeScope::AllSeen => None,
        CeScope::CurrentTask => Some(
            state
                .model
                .classifier
                .class_ids
                .iter()
                .map(|c| classes.contains(c))
                .collect(),
        ),
    };
    state.queue.clear();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs_new);
    for epoch in 0..config.epochs_new {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let chunk: Vec<&Example> = idx.iter().map(|&i| examples[i]).collect();
            let batch = batch_of(&state.model, &chunk, state.vocab)?;
            let mut tape = Tape::new();
            let vars = state.model.bind(&mut tape)?;
            let z = vars.encoder.forward(&mut tape, &batch.pooled, None)?;
            let logits = vars.classifier.forward(&mut tape, z)?;
            let ce = cross_entropy(&mut tape, logits, &batch, mask.as_deref())?;
            let mut keys = None;
            let fs = if use_fs {
                let zn = tape.row_normalize(z)?;
                let (slow, _) = state.slow.encoder.encode_batch(&batch.pooled)?.row_normalize()?;
                let l = loss_fs(&mut tape, zn, &batch.classes, &slow, &state.queue, config.tau_fs)?;
                keys = Some(slow);
                Some(l.loss)
            } else {
                None
            };
            let loss = combined_losses(&mut tape, ce, fs, None, config.lambda_fs, config.lambda_cp, Stage::NewTask)?;
            let value = tape.value(loss).item()?;
            ensure_finite_loss(value, "new-task", task, epoch, step)?;
            let grads = tape.backward(loss)?;
            let grads = vars.grads(&grads)?;
            state.model.sgd_step(&grads, config.lr_encoder, config.lr_classifier)?;
            if let Some(keys) = keys {
                state.slow.update(&state.model.encoder)?;
                state.queue.push_rows(&keys, &batch.classes)?;
            }
            losses.push(value);
        }
        epoch_losses.push(mean(&losses));
    }
    Ok(epoch_losses)
}

/// Stage 2: K-means exemplars for every class of the task.
fn select_task_memory(
    state: &mut RunState,
    task: usize,
    classes: &[usize],
    examples: &[&Example],
    config: &TrainConfig,
) -> Result<()> {
    for &class in classes {
        let members: Vec<&Example> = examples.iter().copied().filter(|e| e.label == class).collect();
        let ids: Vec<u64> = members.iter().map(|e| e.id).collect();
        let tokens: Vec<&[u32]> = members.iter().map(|e| e.tokens.as_slice()).collect();
        let reps = state.model.encoder.encode_all(&tokens)?;
        let seed = mix(config.seed, task as u64, class as u64);
        let chosen = select_memory(&ids, &reps, config.memory_budget, seed)?;
        state.memory.set_class(class, chosen)?;
    }
    Ok(())
}

/// Stage 3: replay over the whole memory on `L2 = ce + lambda_cp * cp`,
/// adversarially augmented unless switched off.
fn replay(state: &mut RunState, task: usize, by_id: &HashMap<u64, &Example>, config: &TrainConfig) -> Result<Vec<f64>> {
    let mut memory: Vec<&Example> = Vec::with_capacity(state.memory.len());
    for (_, id) in state.memory.instances() {
        memory.push(
            by_id
                .get(&id)
                .copied()
                .ok_or_else(|| Error::contract(format!("memory instance {id} is not in the training set")))?,
        );
    }
    if memory.is_empty() {
        return Ok(Vec::new());
    }
    let mut order_rng = task_stream(config.seed, task, 2);
    let mut adv_rng = task_stream(config.seed, task, 3);
    let adv = config.adv();
    let past = std::mem::take(&mut state.past);
    let objective = ReplayObjective {
        past: &past,
        lambda_cp: config.lambda_cp,
        tau_cp: config.tau_cp,
        use_cp: config.use_cp(),
        class_mask: None,
    };
    let mut order: Vec<usize> = (0..memory.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs_replay);
    let result = (|| {
        for epoch in 0..config.epochs_replay {
            order.shuffle(&mut order_rng);
            let mut losses = Vec::new();
            for (step, idx) in order.chunks(config.batch_size).enumerate() {
                let chunk: Vec<&Example> = idx.iter().map(|&i| memory[i]).collect();
                let batch = batch_of(&state.model, &chunk, state.vocab)?;
                let (value, grads) = if config.use_adv() {
                    let out = adv_replay_loss(&state.model, &batch, &adv, &objective, &mut adv_rng)?;
                    (out.objective, out.grads)
                } else {
                    clean_replay_loss(&state.model, &batch, &objective)?
                };
                ensure_finite_loss(value, "replay", task, epoch, step)?;
                state.model.sgd_step(&grads, config.lr_encoder, config.lr_classifier)?;
                losses.push(value);
            }
            epoch_losses.push(mean(&losses));
        }
        Ok(())
    })();
    state.past = past;
    result.map(|()| epoch_losses)
}

/// Stage 4: unit-norm representations of every memory instance.
fn snapshot(state: &mut RunState, task: usize, by_id: &HashMap<u64, &Example>) -> Result<()> {
    let instances = state.memory.instances();
    let tokens: Vec<&[u32]> = instances
        .iter()
        .map(|(_, id)| by_id[id].tokens.as_slice())
        .collect();
    let reps = state.model.encoder.encode_all(&tokens)?;
    let mut records = Vec::with_capacity(reps.len());
    for ((class, id), rep) in instances.into_iter().zip(reps) {
        let (unit, _) = Tensor::matrix(1, rep.len(), rep)?.row_normalize()?;
        records.push((id, class, unit.into_data()));
    }
    state.past.snapshot(task, &state.memory, records)
}

/// Trains one task through all four stages. The classifier grows first.
pub fn train_task(state: &mut RunState, data: &Dataset, sequence: &TaskSequence, config: &TrainConfig) -> Result<TaskLog> {
    let task = state.tasks_done;
    let classes = sequence
        .tasks
        .get(task)
        .ok_or_else(|| Error::contract(format!("task {} is beyond the sequence", task + 1)))?;
    state
        .model
        .classifier
        .expand(classes, &mut task_stream(config.seed, task, 0))?;
    let examples = sequence.train_examples(data, task);
    if examples.is_empty() {
        return Err(Error::input(format!("task {} has no training examples", task + 1)));
    }
    let mut log = TaskLog {
        new_task_loss: train_new_task(state, task, classes, &examples, config)?,
        replay_loss: Vec::new(),
    };
    if config.use_replay() {
        let by_id: HashMap<u64, &Example> = data.train.iter().map(|e| (e.id, e)).collect();
        select_task_memory(state, task, classes, &examples, config)?;
        log.replay_loss = replay(state, task, &by_id, config)?;
        snapshot(state, task, &by_id)?;
    }
    state.tasks_done += 1;
    log::info!(
        "task {} done: new-task loss {:.4}, replay loss {:.4}",
        task + 1,
        log.new_task_loss.last().copied().unwrap_or(f64::NAN),
        log.replay_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(log)
}

/// Accuracy figures at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Accuracy on each seen task's test set, in task order.
    pub per_task: Vec<f64>,
    /// Accuracy over the union of all seen test sets.
    pub pooled: f64,
    pub per_class: BTreeMap<usize, f64>,
}

/// Argmax over every seen class, on the test sets of the first `seen` tasks.
pub fn evaluate(model: &Model<f64>, data: &Dataset, sequence: &TaskSequence, seen: usize) -> Result<Evaluation> {
    if seen == 0 || seen > sequence.len() {
        return Err(Error::contract(format!("cannot evaluate after {seen} tasks")));
    }
    let mut per_task = Vec::with_capacity(seen);
    let mut class_hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for task in 0..seen {
        let examples = sequence.test_examples(data, task);
        let tokens: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        let predicted = if tokens.is_empty() { Vec::new() } else { model.predict(&tokens)? };
        let mut task_hits = 0;
        for (e, p) in examples.iter().zip(&predicted) {
            let entry = class_hits.entry(e.label).or_insert((0, 0));
            entry.1 += 1;
            if *p == e.label {
                task_hits += 1;
                entry.0 += 1;
            }
        }
        hits += task_hits;
        total += examples.len();
        per_task.push(ratio(task_hits, examples.len()));
    }
    Ok(Evaluation {
        per_task,
        pooled: ratio(hits, total),
        per_class: class_hits.into_iter().map(|(c, (h, n))| (c, ratio(h, n))).collect(),
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Confusability of one class under the final model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub task: usize,
    /// Smallest cosine distance from this class mean to any other.
    pub score: f64,
    pub nearest: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogousReport {
    pub scores: Vec<ClassScore>,
    /// The lowest-scoring fraction of classes.
    pub selected: Vec<usize>,
    /// Selected classes whose task lies in the first half of the sequence.
    pub considered: Vec<usize>,
    pub acc_after: Option<f64>,
    pub acc_final: Option<f64>,
    /// `acc_after - acc_final`.
    pub drop: Option<f64>,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Class means of the final representations over each class's test
/// instances, scored by the smallest cosine distance to another class mean.
pub fn class_scores(model: &Model<f64>, data: &Dataset, sequence: &TaskSequence) -> Result<Vec<ClassScore>> {
    let classes: Vec<usize> = sequence.classes().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::input("analogous-class analysis needs at least two classes"));
    }
    let mut means = Vec::with_capacity(classes.len());
    for &c in &classes {
        let tokens: Vec<&[u32]> = data
            .test
            .iter()
            .filter(|e| e.label == c)
            .map(|e| e.tokens.as_slice())
            .collect();
        if tokens.is_empty() {
            return Err(Error::input(format!("class {c} has no test instances")));
        }
        let reps = model.encoder.encode_all(&tokens)?;
        let mut m = vec![0.0; reps[0].len()];
        for r in &reps {
            m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|v| *v /= reps.len() as f64);
        means.push(m);
    }
    let mut out = Vec::with_capacity(classes.len());
    for (i, &c) in classes.iter().enumerate() {
        let (nearest, score) = classes
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, &d)| (d, cosine_distance(&means[i], &means[j])))
            .fold((usize::MAX, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        out.push(ClassScore {
            class: c,
            task: sequence.task_of(c).expect("class from the sequence"),
            score,
            nearest,
        });
    }
    Ok(out)
}

/// Accuracy drop of the most confusable `fraction` of classes, restricted to
/// classes learned in the first half of the sequence.
pub fn analogous_analysis(
    model: &Model<f64>,
    data: &Dataset,
    sequence: &TaskSequence,
    checkpoints: &[Evaluation],
    fraction: f64,
) -> Result<AnalogousReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction must lie in (0, 1]"));
    }
    if checkpoints.len() != sequence.len() {
        return Err(Error::contract("one checkpoint per task is required"));
    }
    let scores = class_scores(model, data, sequence)?;
    let mut ranked: Vec<&ClassScore> = scores.iter().collect();
    ranked.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.class.cmp(&b.class)));
    let n = ((fraction * scores.len() as f64).round() as usize).clamp(1, scores.len());
    let selected: Vec<usize> = ranked[..n].iter().map(|s| s.class).collect();
    let half = sequence.len() / 2;
    let considered: Vec<usize> = ranked[..n]
        .iter()
        .filter(|s| s.task < half)
        .map(|s| s.class)
        .collect();
    let last = checkpoints.last().expect("non-empty");
    let (acc_after, acc_final, drop) = if considered.is_empty() {
        (None, None, None)
    } else {
        let after: Vec<f64> = considered
            .iter()
            .map(|c| checkpoints[sequence.task_of(*c).expect("class from the sequence")].per_class[c])
            .collect();
        let fin: Vec<f64> = considered.iter().map(|c| last.per_class[c]).collect();
        let (a, f) = (mean(&after), mean(&fin));
        (Some(a), Some(f), Some(a - f))
    };
    Ok(AnalogousReport {
        scores,
        selected,
        considered,
        acc_after,
        acc_final,
        drop,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiSummary {
    pub z_y: MiEstimate,
    pub x_z: MiEstimate,
}

/// Everything measured over one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `accuracy[j][i]`: accuracy on task `i` after finishing task `j`, `i <= j`.
    pub accuracy: Vec<Vec<f64>>,
    /// Pooled accuracy over all seen classes after each task.
    pub acc: Vec<f64>,
    pub per_class: Vec<BTreeMap<usize, f64>>,
    pub analogous: Option<AnalogousReport>,
    pub mi: Option<MiSummary>,
    pub logs: Vec<TaskLog>,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn final_acc(&self) -> f64 {
        self.acc.last().copied().unwrap_or(0.0)
    }

    /// One row per checkpoint: `task,acc,task_1,...,task_k`, blank cells for
    /// tasks not yet seen. Wall-clock time is left out so reruns compare
    /// byte for byte.
    pub fn to_csv(&self) -> String {
        let k = self.accuracy.len();
        let mut out = String::from("task,acc");
        for i in 1..=k {
            let _ = write!(out, ",task_{i}");
        }
        out.push('\n');
        for (j, row) in self.accuracy.iter().enumerate() {
            let _ = write!(out, "{},{}", j + 1, self.acc[j]);
            for i in 0..k {
                match row.get(i) {
                    Some(a) => {
                        let _ = write!(out, ",{a}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Parses the `acc` column of a metrics CSV.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or("");
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "task" || cols[1] != "acc" {
        return Err(Error::Parse {
            line: 1,
            message: "expected a task,acc,... header".into(),
        });
    }
    let mut acc = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let bad = |message: String| Error::Parse { line: n + 1, message };
        let task: usize = cells[0].parse().map_err(|e| bad(format!("task index: {e}")))?;
        if task != acc.len() + 1 {
            return Err(bad(format!("checkpoint {task} out of order")));
        }
        let value: f64 = cells
            .get(1)
            .ok_or_else(|| bad("missing acc".into()))?
            .parse()
            .map_err(|e| bad(format!("acc: {e}")))?;
        acc.push(value);
    }
    Ok(acc)
}

/// A finished run: the report and the final state.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub report: MetricsReport,
    pub state: RunState,
}

/// Trains every task in order, evaluating after each.
pub fn run_sequence(data: &Dataset, sequence: &TaskSequence, config: &TrainConfig) -> Result<RunResult> {
    run_sequence_with(data, sequence, config, &MineConfig { seed: config.seed, ..MineConfig::default() })
}

pub fn run_sequence_with(
    data: &Dataset,
    sequence: &TaskSequence,
    config: &TrainConfig,
    mine: &MineConfig,
) -> Result<RunResult> {
    config.validate()?;
    if sequence.is_empty() {
        return Err(Error::input("empty task sequence"));
    }
    sequence.check_covers(data)?;
    let started = Instant::now();
    let mut state = RunState::new(config, data.vocab_size)?;
    let mut checkpoints = Vec::with_capacity(sequence.len());
    let mut logs = Vec::with_capacity(sequence.len());
    for _ in 0..sequence.len() {
        logs.push(train_task(&mut state, data, sequence, config)?);
        let eval = evaluate(&state.model, data, sequence, state.tasks_done)?;
        log::info!("after task {}: acc {:.4}", state.tasks_done, eval.pooled);
        checkpoints.push(eval);
    }
    let analogous = if sequence.len() >= 2 && sequence.classes().len() >= 2 {
        Some(analogous_analysis(&state.model, data, sequence, &checkpoints, 0.2)?)
    } else {
        None
    };
    let mi = if config.measure_mi {
        Some(measure_mi(&state.model, data, mine)?)
    } else {
        None
    };
    let report = MetricsReport {
        accuracy: checkpoints.iter().map(|c| c.per_task.clone()).collect(),
        acc: checkpoints.iter().map(|c| c.pooled).collect(),
        per_class: checkpoints.into_iter().map(|c| c.per_class).collect(),
        analogous,
        mi,
        logs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunResult { report, state })
}

/// One point of a memory-size sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub budget: usize,
    pub acc: Vec<f64>,
}

impl SweepPoint {
    pub fn final_acc(&self) -> f64 {
        *self.acc.last().expect("non-empty sequence")
    }
}

/// Runs the same sequence once per memory budget, everything else fixed.
pub fn memory_sweep(
    data: &Dataset,
    sequence: &TaskSequence,
    config: &TrainConfig,
    budgets: &[usize],
) -> Result<Vec<SweepPoint>> {
    budgets
        .iter()
        .map(|&budget| {
            let config = TrainConfig { memory_budget: budget, ..config.clone() };
            let run = run_sequence(data, sequence, &config)?;
            Ok(SweepPoint { budget, acc: run.report.acc })
        })
        .collect()
}

/// `budget,final_acc` rows plus whether final accuracy never decreases with budget.
pub fn sweep_csv(points: &[SweepPoint]) -> (String, bool) {
    let mut out = String::from("budget,final_acc\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.budget, p.final_acc());
    }
    let mut sorted: Vec<&SweepPoint> = points.iter().collect();
    sorted.sort_by_key(|p| p.budget);
    let monotone = sorted.windows(2).all(|w| w[1].final_acc() >= w[0].final_acc());
    (out, monotone)
}

/// `I(Z;Y)` and `I(X;Z)` of the final encoder on the test set.
pub fn measure_mi(model: &Model<f64>, data: &Dataset, mine: &MineConfig) -> Result<MiSummary> {
    Ok(MiSummary {
        z_y: measure_representation_mi(&model.encoder, &data.test, MiMode::RepresentationLabel, mine)?,
        x_z: measure_representation_mi(&model.encoder, &data.test, MiMode::InputRepresentation, mine)?,
    })
}

/// Writes the per-run artifacts into `dir`.
pub fn write_run_outputs(dir: &Path, data: &Dataset, sequence: &TaskSequence, config: &TrainConfig, run: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    put("config.json", serde_json::to_string_pretty(config)?)?;
    put("metrics.csv", run.report.to_csv())?;
    put("report.json", serde_json::to_string_pretty(&run.report)?)?;
    put(
        "timing.json",
        serde_json::to_string_pretty(&serde_json::json!({ "wall_clock_secs": run.report.wall_clock_secs }))?,
    )?;
    if let Some(a) = &run.report.analogous {
        put("analogous.csv", analogous_csv(a, &run.report))?;
    }
    sequence.save(&dir.join("split.json"))?;
    run.state.memory.save(&dir.join("memory.tsv"))?;
    run.state.past.save(&dir.join("past_reps.tsv"))?;
    run.state.model.save_json(&dir.join("checkpoint.json"))?;
    let tokens: Vec<&[u32]> = data.test.iter().map(|e| e.tokens.as_slice()).collect();
    let reps = run.state.model.encoder.encode_all(&tokens)?;
    write_records(
        &dir.join("reps_final.tsv"),
        Some(&format!("test representations after task {}", run.state.tasks_done)),
        data.test.iter().zip(&reps).map(|(e, r)| (e.id, e.label, r.as_slice())),
    )
}

fn analogous_csv(a: &AnalogousReport, report: &MetricsReport) -> String {
    let selected: BTreeSet<usize> = a.selected.iter().copied().collect();
    let considered: BTreeSet<usize> = a.considered.iter().copied().collect();
    let mut out = String::from("class,task,score,nearest,selected,considered,acc_after,acc_final\n");
    for s in &a.scores {
        let after = report.per_class[s.task][&s.class];
        let fin = report.per_class.last().expect("non-empty")[&s.class];
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.class,
            s.task + 1,
            s.score,
            s.nearest,
            u8::from(selected.contains(&s.class)),
            u8::from(considered.contains(&s.class)),
            after,
            fin
        );
    }
    out
}

/// Mean and population standard deviation per position.
pub fn mean_std(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let Some(first) = rows.first() else {
        return Err(Error::input("nothing to aggregate"));
    };
    if rows.iter().any(|r| r.len() != first.len()) {
        return Err(Error::input("runs have different numbers of checkpoints"));
    }
    let n = rows.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let m = rows.iter().map(|r| r[i]).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / n;
            (m, v.sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_tasks, SyntheticSpec};

    fn small() -> (Dataset, TaskSequence) {
        let spec = SyntheticSpec {
            classes: 8,
            analogous_pairs: 2,
            vocab: 80,
            tokens_per_example: 10,
            train_per_class: 20,
            test_per_class: 10,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let seq = split_tasks(&data.classes(), 4, 1, &data.analogous_pairs).unwrap();
        (data, seq)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs_new: 2,
            epochs_replay: 2,
            queue_capacity: 16,
            memory_budget: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variants_compose() {
        let c = Variant::ReplayOnly.apply(&TrainConfig::default());
        assert!(!c.use_fs() && !c.use_cp() && !c.use_adv() && c.use_replay());
        let f = Variant::FinetuneOnly.apply(&TrainConfig::default());
        assert!(!f.use_fs() && !f.use_replay());
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
    }

    #[test]
    fn config_json_is_flat_and_strict() {
        let text = serde_json::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, TrainConfig::default());
        let partial: TrainConfig = serde_json::from_str(r#"{"memory_budget": 5}"#).unwrap();
        assert_eq!(partial.memory_budget, 5);
        assert_eq!(partial.momentum, 0.99);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"budget": 5}"#).is_err());
        let bad = TrainConfig {
            momentum: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn accuracy_matrix_shape_and_pooling() {
        let (data, seq) = small();
        let run = run_sequence(&data, &seq, &quick()).unwrap();
        let r = &run.report;
        assert_eq!(r.accuracy.len(), 4);
        for (j, row) in r.accuracy.iter().enumerate() {
            assert_eq!(row.len(), j + 1);
            let sizes: Vec<usize> = (0..=j).map(|i| seq.test_examples(&data, i).len()).collect();
            let total: usize = sizes.iter().sum();
            let pooled: f64 = row.iter().zip(&sizes).map(|(a, &n)| a * n as f64).sum::<f64>() / total as f64;
            assert!((pooled - r.acc[j]).abs() < 1e-12);
        }
        let csv = r.to_csv();
        assert_eq!(parse_metrics_csv(&csv).unwrap(), r.acc);
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn same_seed_same_report() {
        let (data, seq) = small();
        let a = run_sequence(&data, &seq, &quick()).unwrap();
        let b = run_sequence(&data, &seq, &quick()).unwrap();
        assert_eq!(a.report.to_csv(), b.report.to_csv());
        assert_eq!(a.state.model, b.state.model);
    }

    #[test]
    fn everything_off_with_empty_memory_is_finetuning() {
        let (data, seq) = small();
        let finetune = run_sequence(&data, &seq, &Variant::FinetuneOnly.apply(&quick())).unwrap();
        let stripped = TrainConfig {
            no_fs: true,
            no_cp: true,
            no_adv: true,
            replay_only: true,
            memory_budget: 0,
            ..quick()
        };
        let stripped = run_sequence(&data, &seq, &stripped).unwrap();
        assert_eq!(finetune.state.model, stripped.state.model);
        assert_eq!(finetune.report.to_csv(), stripped.report.to_csv());
        assert!(finetune.state.memory.is_empty());
    }

    #[test]
    fn single_task_run() {
        let (data, _) = small();
        let seq = split_tasks(&data.classes(), 1, 0, &data.analogous_pairs).unwrap();
        let run = run_sequence(&data, &seq, &quick()).unwrap();
        assert_eq!(run.report.acc.len(), 1);
        assert!(run.report.analogous.is_none());
        assert_eq!(run.state.memory.len(), 8 * 3);
        assert_eq!(run.state.past.len(), 8 * 3);
    }

    #[test]
    fn memory_sweep_completes_at_each_budget() {
        let (data, seq) = small();
        let points = memory_sweep(&data, &seq, &quick(), &[5, 10, 20]).unwrap();
        assert_eq!(points.iter().map(|p| p.budget).collect::<Vec<_>>(), vec![5, 10, 20]);
        assert!(points.iter().all(|p| p.acc.len() == 4));
        let (csv, monotone) = sweep_csv(&points);
        assert_eq!(csv.lines().count(), 4);
        eprintln!("{csv}monotone: {monotone}");
        let flat = [
            SweepPoint { budget: 10, acc: vec![0.5] },
            SweepPoint { budget: 5, acc: vec![0.6] },
        ];
        assert!(!sweep_csv(&flat).1);
    }

    #[test]
    fn cosine_distance_cases() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]), 1.0);
    }

    #[test]
    fn mean_std_cases() {
        let one = mean_std(&[vec![0.5, 0.7]]).unwrap();
        assert_eq!(one, vec![(0.5, 0.0), (0.7, 0.0)]);
        let two = mean_std(&[vec![0.2], vec![0.2]]).unwrap();
        assert_eq!(two, vec![(0.2, 0.0)]);
        assert!(mean_std(&[vec![0.1], vec![0.1, 0.2]]).is_err());
    }
}
