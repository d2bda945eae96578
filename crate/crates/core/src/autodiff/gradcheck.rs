//! Central finite-difference validation of the analytic gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{OpKind, Tape};
use super::tensor::Tensor;

/// Builds `sum(op(inputs) * R)` for a fixed projection `R`, which turns any
/// op output into a scalar whose gradient exercises every output element.
fn projected<S: Scalar>(kind: &OpKind<S>, inputs: &[Tensor<S>]) -> Result<(Tape<S>, Vec<super::NodeId>, super::NodeId)> {
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = tape.apply(kind, &ids)?;
    let shape = tape.value(out).shape().to_vec();
    let numel = tape.value(out).numel();
    let root = if numel == 1 {
        out
    } else {
        let weights = (0..numel)
            .map(|i| S::lit(((i as f64 + 1.0) * 0.7).sin()))
            .collect();
        let r = tape.constant(Tensor::new(shape, weights)?)?;
        let prod = tape.mul(out, r)?;
        tape.sum(prod)?
    };
    Ok((tape, ids, root))
}

fn evaluate<S: Scalar>(kind: &OpKind<S>, inputs: &[Tensor<S>]) -> Result<S> {
    let (tape, _, root) = projected(kind, inputs)?;
    tape.value(root).item()
}

/// Largest error between the analytic gradient and central differences
/// with the given step, over every element of every input.
///
/// The error of one element is `|analytic - numeric| / max(1, |analytic|, |numeric|)`:
/// relative for large gradients, absolute near zero.
pub fn grad_check<S: Scalar>(kind: &OpKind<S>, inputs: &[Tensor<S>], step: S) -> Result<S> {
    if !(step > S::zero()) {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let (tape, ids, root) = projected(kind, inputs)?;
    let grads = tape.backward(root)?;
    let two = S::lit(2.0);
    let mut worst = S::zero();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id)?;
        for e in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= step;
            let numeric = (evaluate(kind, &plus)? - evaluate(kind, &minus)?) / (two * step);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / S::one().max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Every op family the tape supports, for randomized gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpFamily {
    Add,
    AddBroadcast,
    Sub,
    Mul,
    Scale,
    MatMul,
    Tanh,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    RowNormalize,
    Dot,
    ConcatRows,
    SoftmaxCrossEntropy,
    WeightedCrossEntropy,
}

impl OpFamily {
    pub const ALL: [OpFamily; 17] = [
        OpFamily::Add,
        OpFamily::AddBroadcast,
        OpFamily::Sub,
        OpFamily::Mul,
        OpFamily::Scale,
        OpFamily::MatMul,
        OpFamily::Tanh,
        OpFamily::Relu,
        OpFamily::Exp,
        OpFamily::Log,
        OpFamily::Sum,
        OpFamily::Mean,
        OpFamily::RowNormalize,
        OpFamily::Dot,
        OpFamily::ConcatRows,
        OpFamily::SoftmaxCrossEntropy,
        OpFamily::WeightedCrossEntropy,
    ];

    /// A random point in the op's domain, away from the relu kink and from
    /// zero for log and normalization.
    pub fn sample<S: Scalar, R: Rng + ?Sized>(self, rng: &mut R) -> (OpKind<S>, Vec<Tensor<S>>) {
        let normal = |rng: &mut R, shape: Vec<usize>| -> Tensor<S> {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| S::lit(StandardNormal.sample(rng)))
                .collect();
            Tensor::new(shape, data).expect("shape matches")
        };
        match self {
            OpFamily::Add => (OpKind::Add, vec![normal(rng, vec![3, 4]), normal(rng, vec![3, 4])]),
            OpFamily::AddBroadcast => {
                (OpKind::Add, vec![normal(rng, vec![3, 4]), normal(rng, vec![1, 4])])
            }
            OpFamily::Sub => (OpKind::Sub, vec![normal(rng, vec![3, 4]), normal(rng, vec![3, 4])]),
            OpFamily::Mul => (OpKind::Mul, vec![normal(rng, vec![3, 4]), normal(rng, vec![3, 4])]),
            OpFamily::Scale => {
                let s = S::lit(StandardNormal.sample(rng));
                (OpKind::Scale(s), vec![normal(rng, vec![3, 4])])
            }
            OpFamily::MatMul => {
                (OpKind::MatMul, vec![normal(rng, vec![3, 3]), normal(rng, vec![3, 3])])
            }
            OpFamily::Tanh => (OpKind::Tanh, vec![normal(rng, vec![3, 4])]),
            OpFamily::Relu => {
                let mut x = normal(rng, vec![3, 4]);
                for v in x.data_mut() {
                    if v.abs() < S::lit(0.05) {
                        *v = S::lit(0.05).copysign(*v);
                    }
                }
                (OpKind::Relu, vec![x])
            }
            OpFamily::Exp => (OpKind::Exp, vec![normal(rng, vec![3, 4])]),
            OpFamily::Log => {
                let u = Uniform::new(0.5f64, 3.0).expect("valid range");
                let data = (0..12).map(|_| S::lit(u.sample(rng))).collect();
                (OpKind::Log, vec![Tensor::matrix(3, 4, data).expect("shape")])
            }
            OpFamily::Sum => (OpKind::Sum, vec![normal(rng, vec![3, 4])]),
            OpFamily::Mean => (OpKind::Mean, vec![normal(rng, vec![3, 4])]),
            OpFamily::RowNormalize => {
                let mut x = normal(rng, vec![3, 4]);
                for r in 0..3 {
                    // keep every row norm comfortably above zero
                    x.row_mut(r)[0] += S::lit(2.0);
                }
                (OpKind::RowNormalize, vec![x])
            }
            OpFamily::Dot => (OpKind::Dot, vec![normal(rng, vec![5]), normal(rng, vec![5])]),
            OpFamily::ConcatRows => (
                OpKind::ConcatRows,
                vec![normal(rng, vec![2, 3]), normal(rng, vec![1, 3]), normal(rng, vec![3, 3])],
            ),
            OpFamily::SoftmaxCrossEntropy => {
                let labels = (0..4).map(|_| rng.random_range(0..5)).collect();
                (OpKind::SoftmaxCrossEntropy(labels), vec![normal(rng, vec![4, 5])])
            }
            OpFamily::WeightedCrossEntropy => {
                let u = Uniform::new(0.0f64, 1.0).expect("valid range");
                let w = (0..20).map(|_| S::lit(u.sample(rng))).collect();
                (
                    OpKind::WeightedCrossEntropy(Tensor::matrix(4, 5, w).expect("shape")),
                    vec![normal(rng, vec![4, 5])],
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_random_three_by_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (kind, inputs) = OpFamily::MatMul.sample::<f64, _>(&mut rng);
        assert!(grad_check(&kind, &inputs, 1e-3).unwrap() <= 1e-4);
    }

    #[test]
    fn cross_entropy_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (kind, inputs) = OpFamily::SoftmaxCrossEntropy.sample::<f64, _>(&mut rng);
        assert!(grad_check(&kind, &inputs, 1e-3).unwrap() <= 1e-4);
    }

    #[test]
    fn exp_at_zero() {
        let err = grad_check(&OpKind::Exp, &[Tensor::scalar(0.0f64)], 1e-3).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn every_family_passes_a_few_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for fam in OpFamily::ALL {
            for _ in 0..5 {
                let (kind, inputs) = fam.sample::<f64, _>(&mut rng);
                let err = grad_check(&kind, &inputs, 1e-3).unwrap();
                assert!(err <= 1e-4, "{fam:?}: {err}");
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu straddling the kink with a large step disagrees with the subgradient
        let x = Tensor::vector(vec![1e-4f64]);
        let err = grad_check(&OpKind::Relu, &[x], 1e-2).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(grad_check(&OpKind::Exp, &[Tensor::scalar(0.0f64)], 0.0).is_err());
    }
}
