//! Fast-slow contrast (momentum encoder plus FIFO queue of slow
//! representations) and current-past contrast against snapshotted memory
//! representations.
//!
//! Both losses share one shape: for each anchor `i`,
//! `-sum_{p in P(i)} log(exp(z_i . c_p / tau) / sum_j exp(z_i . c_j / tau))`,
//! averaged over the batch, where `c` ranges over a constant candidate set
//! and `P(i)` holds the candidates carrying the anchor's label.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::model::Encoder;
use crate::records::{read_records, write_records};
use crate::scalar::Scalar;

/// `slow <- eta * slow + (1 - eta) * fast`, parameter by parameter.
pub fn momentum_update<S: Scalar>(slow: &mut Encoder<S>, fast: &Encoder<S>, eta: S) -> Result<()> {
    if !slow.same_layout(fast) {
        return Err(Error::contract("slow and fast encoders have different layouts"));
    }
    let keep = S::one() - eta;
    for (s, f) in slow.params_mut().into_iter().zip(fast.params()) {
        for (p, &q) in s.data_mut().iter_mut().zip(f.data()) {
            *p = eta * *p + keep * q;
        }
    }
    Ok(())
}

/// Momentum-averaged copy of the encoder. Never receives gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowEncoder<S> {
    pub encoder: Encoder<S>,
    momentum: S,
}

impl<S: Scalar> SlowEncoder<S> {
    pub fn new(fast: &Encoder<S>, momentum: S) -> Result<Self> {
        if !(momentum >= S::zero() && momentum <= S::one()) {
            return Err(Error::config(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            encoder: fast.clone(),
            momentum,
        })
    }

    pub fn momentum(&self) -> S {
        self.momentum
    }

    pub fn update(&mut self, fast: &Encoder<S>) -> Result<()> {
        momentum_update(&mut self.encoder, fast, self.momentum)
    }
}

fn is_unit<S: Scalar>(v: &[S]) -> bool {
    let norm: S = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    (norm - S::one()).abs() <= S::lit(1e-6)
}

/// Bounded FIFO of normalized slow representations with their labels.
#[derive(Clone, Debug)]
pub struct RepresentationQueue<S> {
    capacity: usize,
    entries: VecDeque<(Vec<S>, usize)>,
}

impl<S: Scalar> RepresentationQueue<S> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends one entry, evicting the oldest when full.
    pub fn push(&mut self, rep: Vec<S>, label: usize) -> Result<()> {
        if !is_unit(&rep) {
            return Err(Error::contract("queue entries must be unit norm"));
        }
        if let Some((first, _)) = self.entries.front() {
            if first.len() != rep.len() {
                return Err(Error::contract("queue entry width changed"));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((rep, label));
        Ok(())
    }

    /// Enqueues every row of `reps` in order.
    pub fn push_rows(&mut self, reps: &Tensor<S>, labels: &[usize]) -> Result<()> {
        for (r, &label) in labels.iter().enumerate() {
            self.push(reps.row(r).to_vec(), label)?;
        }
        Ok(())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = (&[S], usize)> {
        self.entries.iter().map(|(r, l)| (r.as_slice(), *l))
    }
}

/// Snapshotted representation of one memory instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PastRep<S> {
    pub rep: Vec<S>,
    pub label: usize,
}

/// Normalized representations of memory instances taken at the end of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct PastRepStore<S> {
    entries: BTreeMap<u64, PastRep<S>>,
    snapshot_task: Option<usize>,
}

impl<S: Scalar> Default for PastRepStore<S> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            snapshot_task: None,
        }
    }
}

impl<S: Scalar> PastRepStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn snapshot_task(&self) -> Option<usize> {
        self.snapshot_task
    }

    pub fn get(&self, id: u64) -> Option<&PastRep<S>> {
        self.entries.get(&id)
    }

    /// Ordered by instance id.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &PastRep<S>)> {
        self.entries.iter().map(|(&id, r)| (id, r))
    }

    /// Replaces the store with `records` (unit-norm representations of every
    /// instance in `bank`) taken after `task`.
    pub fn snapshot(
        &mut self,
        task: usize,
        bank: &MemoryBank,
        records: impl IntoIterator<Item = (u64, usize, Vec<S>)>,
    ) -> Result<()> {
        let mut entries = BTreeMap::new();
        for (id, label, rep) in records {
            if !bank.contains(label, id) {
                return Err(Error::contract(format!(
                    "instance {id} of class {label} is not in memory"
                )));
            }
            if !is_unit(&rep) {
                return Err(Error::contract("past representations must be unit norm"));
            }
            entries.insert(id, PastRep { rep, label });
        }
        self.entries = entries;
        self.snapshot_task = Some(task);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = self.snapshot_task.map(|t| format!("snapshot_task={t}"));
        write_records(
            path,
            header.as_deref(),
            self.entries.iter().map(|(&id, r)| (id, r.label, r.rep.as_slice())),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (comments, records) = read_records::<S>(path)?;
        let snapshot_task = comments
            .iter()
            .find_map(|c| c.strip_prefix("snapshot_task="))
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::input(format!("bad snapshot task {v:?}")))
            })
            .transpose()?;
        let entries = records
            .into_iter()
            .map(|r| (r.id, PastRep { rep: r.rep, label: r.label }))
            .collect();
        Ok(Self {
            entries,
            snapshot_task,
        })
    }
}

/// Loss node plus the constant candidate node it contrasted against.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLoss {
    pub loss: NodeId,
    pub candidates: Option<NodeId>,
}

/// Records the shared multi-positive InfoNCE form on the tape.
///
/// `anchors` is a `B x d` node of unit rows; `candidates` is `N x d` and held
/// constant. Anchors without any same-label candidate contribute nothing but
/// still count in the `1/B` normalization.
fn multi_positive_nce<S: Scalar>(
    tape: &mut Tape<S>,
    anchors: NodeId,
    labels: &[usize],
    candidates: &Tensor<S>,
    candidate_labels: &[usize],
    temperature: S,
) -> Result<ContrastiveLoss> {
    let b = tape.value(anchors).rows();
    if b == 0 || b != labels.len() {
        return Err(Error::contract(format!(
            "{} anchors with {} labels",
            b,
            labels.len()
        )));
    }
    if candidates.rows() == 0 {
        return Err(Error::contract("empty candidate set"));
    }
    if !(temperature > S::zero()) {
        return Err(Error::config("temperature must be positive"));
    }
    let cand_t = tape.constant(candidates.transpose()?)?;
    let sims = tape.matmul(anchors, cand_t)?;
    let logits = tape.scale(sims, S::one() / temperature)?;
    let share = S::one() / S::lit(b as f64);
    let mut weights = Tensor::zeros(vec![b, candidates.rows()]);
    for (i, &y) in labels.iter().enumerate() {
        for (w, &c) in weights.row_mut(i).iter_mut().zip(candidate_labels) {
            if c == y {
                *w = share;
            }
        }
    }
    let loss = tape.weighted_cross_entropy(logits, weights)?;
    Ok(ContrastiveLoss {
        loss,
        candidates: Some(cand_t),
    })
}

/// Fast-slow contrastive loss.
///
/// `fast` holds the unit-norm fast representations of the batch. The
/// candidate set is the batch's slow representations (in batch order)
/// followed by the queue (oldest first); the anchor's own slow
/// representation is one of its positives.
pub fn loss_fs<S: Scalar>(
    tape: &mut Tape<S>,
    fast: NodeId,
    labels: &[usize],
    slow: &Tensor<S>,
    queue: &RepresentationQueue<S>,
    temperature: S,
) -> Result<ContrastiveLoss> {
    if slow.rows() != labels.len() {
        return Err(Error::contract("slow representations do not match the batch"));
    }
    let mut rows: Vec<&[S]> = (0..slow.rows()).map(|r| slow.row(r)).collect();
    let mut cand_labels = labels.to_vec();
    for (rep, label) in queue.iter() {
        rows.push(rep);
        cand_labels.push(label);
    }
    let candidates = Tensor::from_rows(&rows)?;
    multi_positive_nce(tape, fast, labels, &candidates, &cand_labels, temperature)
}

/// Current-past contrastive loss against every stored past representation.
///
/// An empty store makes the loss a constant zero.
pub fn loss_cp<S: Scalar>(
    tape: &mut Tape<S>,
    current: NodeId,
    labels: &[usize],
    past: &PastRepStore<S>,
    temperature: S,
) -> Result<ContrastiveLoss> {
    if past.is_empty() {
        return Ok(ContrastiveLoss {
            loss: tape.constant(Tensor::scalar(S::zero()))?,
            candidates: None,
        });
    }
    let rows: Vec<&[S]> = past.iter().map(|(_, r)| r.rep.as_slice()).collect();
    let cand_labels: Vec<usize> = past.iter().map(|(_, r)| r.label).collect();
    let candidates = Tensor::from_rows(&rows)?;
    multi_positive_nce(tape, current, labels, &candidates, &cand_labels, temperature)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    NewTask,
    Replay,
}

/// `L1 = ce + lambda_fs * fs` for new-task training, `L2 = ce + lambda_cp * cp`
/// for replay. A missing term or a zero weight leaves `ce` untouched.
pub fn combined_losses<S: Scalar>(
    tape: &mut Tape<S>,
    ce: NodeId,
    fs: Option<NodeId>,
    cp: Option<NodeId>,
    lambda_fs: S,
    lambda_cp: S,
    stage: Stage,
) -> Result<NodeId> {
    if lambda_fs < S::zero() || lambda_cp < S::zero() {
        return Err(Error::config("loss weights must be non-negative"));
    }
    let (term, lambda) = match stage {
        Stage::NewTask => (fs, lambda_fs),
        Stage::Replay => (cp, lambda_cp),
    };
    match term {
        Some(t) if lambda != S::zero() => {
            let weighted = tape.scale(t, lambda)?;
            tape.add(ce, weighted)
        }
        _ => Ok(ce),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn momentum_edge_cases() {
        let dims = EncoderDims {
            vocab: 5,
            embed: 2,
            hidden: 3,
            rep: 2,
        };
        let fast = Encoder::<f64>::random(dims, &mut ChaCha8Rng::seed_from_u64(0));
        let slow0 = Encoder::<f64>::random(dims, &mut ChaCha8Rng::seed_from_u64(1));

        let mut s = slow0.clone();
        momentum_update(&mut s, &fast, 1.0).unwrap();
        assert_eq!(s, slow0);

        let mut s = slow0.clone();
        momentum_update(&mut s, &fast, 0.0).unwrap();
        assert_eq!(s, fast);

        let mut ones = Encoder::<f64>::zeros(dims);
        for p in ones.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        momentum_update(&mut ones, &Encoder::zeros(dims), 0.99).unwrap();
        assert!(ones.params().iter().all(|p| p.data().iter().all(|&v| v == 0.99)));

        let other = Encoder::<f64>::zeros(EncoderDims { rep: 3, ..dims });
        assert!(matches!(
            momentum_update(&mut ones, &other, 0.5),
            Err(Error::Contract(_))
        ));
        assert!(SlowEncoder::new(&fast, 1.5).is_err());
    }

    #[test]
    fn queue_evicts_oldest() {
        let mut q = RepresentationQueue::new(2);
        for label in 0..3 {
            q.push(vec![1.0f64, 0.0], label).unwrap();
        }
        let labels: Vec<usize> = q.iter().map(|(_, l)| l).collect();
        assert_eq!(labels, vec![1, 2]);
        assert!(q.push(vec![2.0, 0.0], 0).is_err());
    }

    #[test]
    fn fs_uniform_two_same_label() {
        // all dot products equal: each anchor has 2 positives of log-prob -ln 2
        let mut tape = Tape::new();
        let z = tape
            .leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let slow = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let q = RepresentationQueue::new(8);
        let l = loss_fs(&mut tape, z, &[3, 3], &slow, &q, 0.05).unwrap();
        let v = tape.value(l.loss).item().unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn fs_with_queue_uniform() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap()).unwrap();
        let slow = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let mut q = RepresentationQueue::new(8);
        q.push(vec![0.0, 1.0], 1).unwrap();
        q.push(vec![0.0, 1.0], 2).unwrap();
        let l = loss_fs(&mut tape, z, &[1], &slow, &q, 0.05).unwrap();
        let v = tape.value(l.loss).item().unwrap();
        assert!((v - 2.0 * 3f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn fs_self_positive_below_log_candidates() {
        let mut tape = Tape::new();
        let anchor = unit(&[1.0, 0.2]);
        let z = tape.leaf(Tensor::from_rows(&[anchor.clone()]).unwrap()).unwrap();
        let slow = Tensor::from_rows(&[anchor]).unwrap();
        let mut q = RepresentationQueue::new(8);
        q.push(unit(&[-1.0, 0.3]), 7).unwrap();
        q.push(unit(&[0.1, 1.0]), 8).unwrap();
        let l = loss_fs(&mut tape, z, &[0], &slow, &q, 0.05).unwrap();
        assert!(tape.value(l.loss).item().unwrap() < 3f64.ln());
    }

    #[test]
    fn fs_gives_no_gradient_to_slow_side() {
        let mut tape = Tape::new();
        let z = tape
            .leaf(Tensor::from_rows(&[unit(&[1.0, 2.0]), unit(&[-1.0, 0.5])]).unwrap())
            .unwrap();
        let slow = Tensor::from_rows(&[unit(&[1.0, 1.0]), unit(&[0.0, 1.0])]).unwrap();
        let mut q = RepresentationQueue::new(4);
        q.push(unit(&[2.0, -1.0]), 0).unwrap();
        let l = loss_fs(&mut tape, z, &[0, 1], &slow, &q, 0.05).unwrap();
        let g = tape.backward(l.loss).unwrap();
        let cg = g.wrt(l.candidates.unwrap()).unwrap();
        assert!(cg.data().iter().all(|&v| v == 0.0));
        assert!(g.wrt(z).unwrap().data().iter().any(|&v| v != 0.0));
    }

    fn store(entries: &[(u64, usize, Vec<f64>)]) -> PastRepStore<f64> {
        let mut bank = MemoryBank::new(10);
        for (id, label, _) in entries {
            bank.insert(*label, *id).unwrap();
        }
        let mut s = PastRepStore::new();
        s.snapshot(0, &bank, entries.iter().cloned()).unwrap();
        s
    }

    #[test]
    fn cp_empty_store_is_zero() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let l = loss_cp(&mut tape, z, &[0], &PastRepStore::new(), 0.05).unwrap();
        assert_eq!(tape.value(l.loss).item().unwrap(), 0.0);
    }

    #[test]
    fn cp_uniform_is_ln2() {
        let s = store(&[(1, 0, vec![1.0, 0.0]), (2, 1, vec![1.0, 0.0])]);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let l = loss_cp(&mut tape, z, &[0], &s, 0.05).unwrap();
        assert!((tape.value(l.loss).item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cp_aligned_is_nearly_zero() {
        let s = store(&[(1, 0, vec![1.0, 0.0]), (2, 1, vec![0.0, 1.0])]);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let l = loss_cp(&mut tape, z, &[0], &s, 0.05).unwrap();
        let v = tape.value(l.loss).item().unwrap();
        assert!(v < 1e-6 && v > 0.0, "{v}");
    }

    #[test]
    fn cp_skips_new_classes() {
        let s = store(&[(1, 0, vec![1.0, 0.0]), (2, 1, vec![1.0, 0.0])]);
        let mut tape = Tape::new();
        let z = tape
            .leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let l = loss_cp(&mut tape, z, &[0, 9], &s, 0.05).unwrap();
        // only the first anchor counts, divided by the full batch size
        assert!((tape.value(l.loss).item().unwrap() - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn snapshot_rejects_unknown_instances() {
        let bank = MemoryBank::new(10);
        let mut s = PastRepStore::<f64>::new();
        assert!(s.snapshot(0, &bank, vec![(1, 0, vec![1.0, 0.0])]).is_err());
    }

    #[test]
    fn snapshot_file_roundtrip() {
        let s = store(&[
            (4, 0, unit(&[0.1, 0.7])),
            (9, 2, unit(&[-0.3, 0.2])),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("past.tsv");
        s.save(&path).unwrap();
        assert_eq!(PastRepStore::<f64>::load(&path).unwrap(), s);
    }

    #[test]
    fn combined_loss_weights() {
        let mut tape = Tape::<f64>::new();
        let ce = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let fs = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let l1 = combined_losses(&mut tape, ce, Some(fs), None, 0.05, 0.05, Stage::NewTask).unwrap();
        assert!((tape.value(l1).item().unwrap() - 1.1).abs() < 1e-15);
        let l = combined_losses(&mut tape, ce, Some(fs), None, 0.0, 0.05, Stage::NewTask).unwrap();
        assert_eq!(l, ce);
        let l = combined_losses(&mut tape, ce, None, Some(fs), 0.05, 0.0, Stage::Replay).unwrap();
        assert_eq!(l, ce);
        assert!(matches!(
            combined_losses(&mut tape, ce, Some(fs), None, -0.1, 0.05, Stage::NewTask),
            Err(Error::Config(_))
        ));
    }
}
