//! Encoder `f` (token-embedding mean followed by a two-layer tanh MLP) and
//! the growing linear classifier over every class seen so far.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Layer widths of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub rep: usize,
}

impl EncoderDims {
    pub fn with_vocab(vocab: usize) -> Self {
        Self {
            vocab,
            embed: 32,
            hidden: 64,
            rep: 32,
        }
    }
}

/// Mean-pooling operators for a batch of token sequences.
///
/// `pooling` is `B x V` with `count(token) / len` entries so that
/// `pooling * embedding` is the per-example mean embedding. `token_mean` is
/// `B x T` (T = total tokens in the batch) and averages a per-token
/// perturbation into the same pooled space.
#[derive(Clone, Debug)]
pub struct PooledBatch<S> {
    pooling: Tensor<S>,
    token_mean: Tensor<S>,
    spans: Vec<(usize, usize)>,
}

impl<S: Scalar> PooledBatch<S> {
    pub fn new<T: AsRef<[u32]>>(examples: &[T], vocab: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let total: usize = examples.iter().map(|e| e.as_ref().len()).sum();
        let mut pooling = Tensor::zeros(vec![examples.len(), vocab]);
        let mut token_mean = Tensor::zeros(vec![examples.len(), total]);
        let mut spans = Vec::with_capacity(examples.len());
        let mut offset = 0;
        for (b, tokens) in examples.iter().enumerate() {
            let tokens = tokens.as_ref();
            if tokens.is_empty() {
                return Err(Error::input(format!("example {b} has no tokens")));
            }
            let share = S::one() / S::lit(tokens.len() as f64);
            for (k, &tok) in tokens.iter().enumerate() {
                if tok as usize >= vocab {
                    return Err(Error::input(format!(
                        "token id {tok} outside vocabulary of size {vocab}"
                    )));
                }
                pooling.row_mut(b)[tok as usize] += share;
                token_mean.row_mut(b)[offset + k] = share;
            }
            spans.push((offset, tokens.len()));
            offset += tokens.len();
        }
        Ok(Self {
            pooling,
            token_mean,
            spans,
        })
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.token_mean.cols()
    }

    /// `(first row, token count)` of each example within a stacked
    /// `total_tokens x embed` perturbation.
    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }
}

/// A pooled batch with its class ids and the matching classifier columns.
#[derive(Clone, Debug)]
pub struct LabeledBatch<S> {
    pub pooled: PooledBatch<S>,
    pub classes: Vec<usize>,
    pub columns: Vec<usize>,
}

impl<S: Scalar> LabeledBatch<S> {
    pub fn new<T: AsRef<[u32]>>(tokens: &[T], classes: &[usize], classifier: &Classifier<S>, vocab: usize) -> Result<Self> {
        if tokens.len() != classes.len() {
            return Err(Error::contract("one label per example is required"));
        }
        let columns = classes
            .iter()
            .map(|&c| {
                classifier
                    .index_of(c)
                    .ok_or_else(|| Error::input(format!("class {c} is not in the classifier")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pooled: PooledBatch::new(tokens, vocab)?,
            classes: classes.to_vec(),
            columns,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Mean cross-entropy of `logits` against the batch columns. With a mask,
/// only the masked-in classifier columns compete in the softmax.
pub fn cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    logits: NodeId,
    batch: &LabeledBatch<S>,
    allowed: Option<&[bool]>,
) -> Result<NodeId> {
    let logits = match allowed {
        Some(mask) => {
            if mask.len() != tape.value(logits).cols() {
                return Err(Error::contract("class mask width does not match the logits"));
            }
            let offsets = mask
                .iter()
                .map(|&keep| if keep { S::zero() } else { S::lit(-1e4) })
                .collect();
            let m = tape.constant(Tensor::matrix(1, mask.len(), offsets)?)?;
            tape.add(logits, m)?
        }
        None => logits,
    };
    tape.softmax_cross_entropy(logits, &batch.columns)
}

fn gaussian<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| S::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Parameters of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Encoder<S> {
    pub embedding: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> Encoder<S> {
    /// Gaussian embeddings (unit std), fan-in scaled weights, zero biases.
    pub fn random<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Self {
        Self {
            embedding: gaussian(rng, vec![dims.vocab, dims.embed], 1.0),
            w1: gaussian(rng, vec![dims.embed, dims.hidden], (dims.embed as f64).recip().sqrt()),
            b1: Tensor::zeros(vec![1, dims.hidden]),
            w2: gaussian(rng, vec![dims.hidden, dims.rep], (dims.hidden as f64).recip().sqrt()),
            b2: Tensor::zeros(vec![1, dims.rep]),
        }
    }

    pub fn zeros(dims: EncoderDims) -> Self {
        Self {
            embedding: Tensor::zeros(vec![dims.vocab, dims.embed]),
            w1: Tensor::zeros(vec![dims.embed, dims.hidden]),
            b1: Tensor::zeros(vec![1, dims.hidden]),
            w2: Tensor::zeros(vec![dims.hidden, dims.rep]),
            b2: Tensor::zeros(vec![1, dims.rep]),
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            vocab: self.embedding.rows(),
            embed: self.embedding.cols(),
            hidden: self.w1.cols(),
            rep: self.w2.cols(),
        }
    }

    pub fn params(&self) -> [&Tensor<S>; 5] {
        [&self.embedding, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<S>; 5] {
        [
            &mut self.embedding,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.params()
            .iter()
            .zip(other.params())
            .all(|(a, b)| a.shape() == b.shape())
    }

    /// Representations of a whole batch, `B x rep`, without recording a tape.
    pub fn encode_batch(&self, batch: &PooledBatch<S>) -> Result<Tensor<S>> {
        let pooled = batch.pooling.matmul(&self.embedding)?;
        let hidden = pooled.matmul(&self.w1)?.add(&self.b1)?.map(S::tanh);
        hidden.matmul(&self.w2)?.add(&self.b2)?.ensure_finite("encode")
    }

    /// `z = W2 tanh(W1 mean(embeddings) + b1) + b2` for one token sequence.
    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<S>> {
        let batch = PooledBatch::new(&[tokens], self.embedding.rows())?;
        Ok(self.encode_batch(&batch)?.into_data())
    }

    /// Encodes many examples in chunks, returning one row per example.
    pub fn encode_all<T: AsRef<[u32]>>(&self, examples: &[T]) -> Result<Vec<Vec<S>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(256) {
            let batch = PooledBatch::new(chunk, self.embedding.rows())?;
            let z = self.encode_batch(&batch)?;
            out.extend((0..z.rows()).map(|r| z.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Result<EncoderVars> {
        Ok(EncoderVars {
            embedding: tape.leaf(self.embedding.clone())?,
            w1: tape.leaf(self.w1.clone())?,
            b1: tape.leaf(self.b1.clone())?,
            w2: tape.leaf(self.w2.clone())?,
            b2: tape.leaf(self.b2.clone())?,
        })
    }
}

/// Tape handles for the encoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub embedding: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl EncoderVars {
    pub fn ids(&self) -> [NodeId; 5] {
        [self.embedding, self.w1, self.b1, self.w2, self.b2]
    }

    /// Records the encoder forward pass. `perturbation`, when given, is a
    /// `total_tokens x embed` node added to the embedding-lookup outputs
    /// before mean pooling.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        batch: &PooledBatch<S>,
        perturbation: Option<NodeId>,
    ) -> Result<NodeId> {
        let pooling = tape.constant(batch.pooling.clone())?;
        let mut pooled = tape.matmul(pooling, self.embedding)?;
        if let Some(delta) = perturbation {
            let averaging = tape.constant(batch.token_mean.clone())?;
            let shift = tape.matmul(averaging, delta)?;
            pooled = tape.add(pooled, shift)?;
        }
        let pre = tape.matmul(pooled, self.w1)?;
        let pre = tape.add(pre, self.b1)?;
        let hidden = tape.tanh(pre)?;
        let out = tape.matmul(hidden, self.w2)?;
        tape.add(out, self.b2)
    }
}

/// Linear classifier over every class seen so far. Row `i` belongs to
/// `class_ids[i]`; rows are only ever appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Classifier<S> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub class_ids: Vec<usize>,
}

impl<S: Scalar> Classifier<S> {
    pub fn new(rep_dim: usize) -> Self {
        Self {
            weights: Tensor::zeros(vec![0, rep_dim]),
            bias: Tensor::zeros(vec![1, 0]),
            class_ids: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn rep_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    /// Appends rows for `new_ids`: Gaussian weights with std 0.02, zero bias.
    pub fn expand<R: Rng + ?Sized>(&mut self, new_ids: &[usize], rng: &mut R) -> Result<()> {
        for (k, id) in new_ids.iter().enumerate() {
            if self.class_ids.contains(id) || new_ids[..k].contains(id) {
                return Err(Error::input(format!("class id {id} is already present")));
            }
        }
        let d = self.rep_dim();
        let fresh = gaussian::<S, R>(rng, vec![new_ids.len(), d], 0.02);
        self.weights = Tensor::concat_rows(&[&self.weights, &fresh])?;
        let mut bias = self.bias.data().to_vec();
        bias.extend(std::iter::repeat_n(S::zero(), new_ids.len()));
        self.bias = Tensor::matrix(1, bias.len(), bias)?;
        self.class_ids.extend_from_slice(new_ids);
        Ok(())
    }

    /// `weights * z + bias`, in class-id order.
    pub fn logits(&self, z: &[S]) -> Result<Vec<S>> {
        if self.num_classes() == 0 {
            return Err(Error::contract("classifier has no classes"));
        }
        let z = Tensor::matrix(1, z.len(), z.to_vec())?;
        Ok(self.logits_batch(&z)?.into_data())
    }

    pub fn logits_batch(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        if z.cols() != self.rep_dim() {
            return Err(Error::contract(format!(
                "representation width {} but classifier expects {}",
                z.cols(),
                self.rep_dim()
            )));
        }
        z.matmul(&self.weights.transpose()?)?.add(&self.bias)
    }

    /// Predicted class id for each row of `z`. Ties go to the earliest row.
    pub fn predict(&self, z: &Tensor<S>) -> Result<Vec<usize>> {
        if self.num_classes() == 0 {
            return Err(Error::contract("classifier has no classes"));
        }
        let scores = self.logits_batch(z)?;
        Ok((0..scores.rows())
            .map(|r| {
                let row = scores.row(r);
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                self.class_ids[best]
            })
            .collect())
    }

    /// The weight matrix enters the tape transposed (`rep x C`).
    pub fn bind(&self, tape: &mut Tape<S>) -> Result<ClassifierVars> {
        Ok(ClassifierVars {
            weights_t: tape.leaf(self.weights.transpose()?)?,
            bias: tape.leaf(self.bias.clone())?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub weights_t: NodeId,
    pub bias: NodeId,
}

impl ClassifierVars {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, z: NodeId) -> Result<NodeId> {
        let scores = tape.matmul(z, self.weights_t)?;
        tape.add(scores, self.bias)
    }
}

/// Encoder plus classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Model<S> {
    pub encoder: Encoder<S>,
    pub classifier: Classifier<S>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct Checkpoint<S> {
    version: u32,
    model: Model<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Self {
        Self {
            encoder: Encoder::random(dims, rng),
            classifier: Classifier::new(dims.rep),
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Result<ModelVars> {
        Ok(ModelVars {
            encoder: self.encoder.bind(tape)?,
            classifier: self.classifier.bind(tape)?,
        })
    }

    /// Predicted class ids for a batch of token sequences.
    pub fn predict<T: AsRef<[u32]>>(&self, examples: &[T]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(256) {
            let batch = PooledBatch::new(chunk, self.encoder.embedding.rows())?;
            let z = self.encoder.encode_batch(&batch)?;
            out.extend(self.classifier.predict(&z)?);
        }
        Ok(out)
    }

    /// Plain gradient descent with separate encoder and classifier rates.
    pub fn sgd_step(&mut self, grads: &ModelGrads<S>, lr_encoder: S, lr_classifier: S) -> Result<()> {
        let [e, w1, b1, w2, b2] = self.encoder.params_mut();
        let targets = [
            (e, lr_encoder),
            (w1, lr_encoder),
            (b1, lr_encoder),
            (w2, lr_encoder),
            (b2, lr_encoder),
            (&mut self.classifier.weights, lr_classifier),
            (&mut self.classifier.bias, lr_classifier),
        ];
        if grads.tensors.len() != targets.len() {
            return Err(Error::contract("gradient layout does not match the model"));
        }
        for ((param, lr), g) in targets.into_iter().zip(&grads.tensors) {
            if g.shape() != param.shape() {
                return Err(Error::contract("gradient layout does not match the model"));
            }
            for (p, &d) in param.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * d;
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint<S> = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::input(format!(
                "checkpoint version {} is not supported",
                ckpt.version
            )));
        }
        Ok(ckpt.model)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub classifier: ClassifierVars,
}

impl ModelVars {
    /// Gradients in parameter layout: the five encoder tensors, then the
    /// classifier weights (`C x rep`) and bias.
    pub fn grads<S: Scalar>(&self, grads: &Gradients<S>) -> Result<ModelGrads<S>> {
        let mut tensors = Vec::with_capacity(7);
        for id in self.encoder.ids() {
            tensors.push(grads.wrt(id)?.clone());
        }
        tensors.push(grads.wrt(self.classifier.weights_t)?.transpose()?);
        tensors.push(grads.wrt(self.classifier.bias)?.clone());
        Ok(ModelGrads { tensors })
    }
}

/// Parameter gradients in [`ModelVars::grads`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<S> {
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ModelGrads<S> {
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: S) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> EncoderDims {
        EncoderDims {
            vocab: 20,
            embed: 4,
            hidden: 6,
            rep: 3,
        }
    }

    #[test]
    fn zero_embeddings_ignore_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Encoder::<f64>::random(dims(), &mut rng);
        enc.embedding = Tensor::zeros(vec![20, 4]);
        let a = enc.encode(&[1, 2, 3]).unwrap();
        let b = enc.encode(&[19]).unwrap();
        assert_eq!(a, b);
        // W2 tanh(b1) + b2 with zero biases is zero
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_equals_repeated_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::<f64>::random(dims(), &mut rng);
        assert_eq!(enc.encode(&[7]).unwrap(), enc.encode(&[7, 7]).unwrap());
    }

    #[test]
    fn encode_is_deterministic_per_seed() {
        let a = Encoder::<f64>::random(dims(), &mut ChaCha8Rng::seed_from_u64(5));
        let b = Encoder::<f64>::random(dims(), &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.encode(&[1, 4, 9]).unwrap(), b.encode(&[1, 4, 9]).unwrap());
    }

    #[test]
    fn encode_input_errors() {
        let enc = Encoder::<f64>::zeros(dims());
        assert!(matches!(enc.encode(&[]), Err(Error::Input(_))));
        assert!(matches!(enc.encode(&[20]), Err(Error::Input(_))));
    }

    #[test]
    fn tape_forward_matches_direct_encode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::<f64>::random(dims(), &mut rng);
        let examples = vec![vec![1u32, 2, 3], vec![4, 4, 5, 6]];
        let batch = PooledBatch::new(&examples, 20).unwrap();
        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape).unwrap();
        let z = vars.forward(&mut tape, &batch, None).unwrap();
        assert_eq!(tape.value(z), &enc.encode_batch(&batch).unwrap());
    }

    #[test]
    fn logits_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cls = Classifier::<f64>::new(3);
        cls.expand(&[10], &mut rng).unwrap();
        let z = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.0, 0.5, -1.0]).unwrap();
        assert_eq!(cls.predict(&z).unwrap(), vec![10, 10]);

        let mut zero = Classifier::<f64>::new(3);
        zero.expand(&[0, 1], &mut rng).unwrap();
        zero.weights = Tensor::zeros(vec![2, 3]);
        assert_eq!(zero.logits(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let z1 = [0.3, -0.2, 0.9];
        let z2: Vec<f64> = z1.iter().map(|v| v * 2.0).collect();
        let l1 = cls.logits(&z1).unwrap();
        let l2 = cls.logits(&z2).unwrap();
        let b = cls.bias.data()[0];
        assert!(((l2[0] - b) - 2.0 * (l1[0] - b)).abs() < 1e-15);

        assert!(matches!(cls.logits(&[1.0, 2.0]), Err(Error::Contract(_))));
        assert!(Classifier::<f64>::new(3).logits(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn expand_preserves_old_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cls = Classifier::<f64>::new(3);
        cls.expand(&[0, 1, 2, 3], &mut rng).unwrap();
        let before = cls.clone();
        cls.expand(&[4, 5, 6, 7], &mut rng).unwrap();
        assert_eq!(cls.num_classes(), 8);
        assert_eq!(&cls.weights.data()[..12], before.weights.data());
        assert_eq!(&cls.bias.data()[..4], before.bias.data());
        assert_eq!(&cls.class_ids[..4], &before.class_ids[..]);

        let mut same = before.clone();
        same.expand(&[], &mut rng).unwrap();
        assert_eq!(same, before);

        assert!(matches!(cls.expand(&[3], &mut rng), Err(Error::Input(_))));
        assert!(matches!(cls.expand(&[9, 9], &mut rng), Err(Error::Input(_))));
    }

    #[test]
    fn expand_twice_matches_expand_once_on_old_rows() {
        let mut base = Classifier::<f64>::new(3);
        base.expand(&[0, 1], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut twice = base.clone();
        twice.expand(&[5], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        twice.expand(&[6], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut once = base.clone();
        once.expand(&[5, 6], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(&twice.weights.data()[..6], &once.weights.data()[..6]);
        assert_eq!(twice.class_ids, once.class_ids);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = Model::<f64>::new(dims(), &mut rng);
        model.classifier.expand(&[3, 1, 2], &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        model.save_json(&path).unwrap();
        let back = Model::<f64>::load_json(&path).unwrap();
        assert_eq!(back, model);
    }
}
