//! Named parameters, binding them onto a tape, and initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::snn_core::BatchNormParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Saved with the model but never touched by the optimizer.
    Buffer,
}

/// Anything that owns named tensors. Visit order must be deterministic.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }
}

pub(crate) fn visit_bn(
    prefix: &str,
    bn: &BatchNormParams,
    f: &mut dyn FnMut(&str, ParamKind, &Tensor),
) {
    f(&format!("{}.bn.scale", prefix), ParamKind::Trainable, &bn.scale);
    f(&format!("{}.bn.shift", prefix), ParamKind::Trainable, &bn.shift);
    f(&format!("{}.bn.running_mean", prefix), ParamKind::Buffer, &bn.running_mean);
    f(&format!("{}.bn.running_var", prefix), ParamKind::Buffer, &bn.running_var);
}

pub(crate) fn visit_bn_mut(
    prefix: &str,
    bn: &mut BatchNormParams,
    f: &mut dyn FnMut(&str, ParamKind, &mut Tensor),
) {
    f(&format!("{}.bn.scale", prefix), ParamKind::Trainable, &mut bn.scale);
    f(&format!("{}.bn.shift", prefix), ParamKind::Trainable, &mut bn.shift);
    f(&format!("{}.bn.running_mean", prefix), ParamKind::Buffer, &mut bn.running_mean);
    f(&format!("{}.bn.running_var", prefix), ParamKind::Buffer, &mut bn.running_var);
}

/// Records which tape variable each named parameter was bound to.
pub struct Binder {
    differentiable: bool,
    bound: Vec<(String, Var)>,
}

impl Binder {
    /// Parameters become leaves that receive gradients.
    pub fn trainable() -> Self {
        Binder {
            differentiable: true,
            bound: Vec::new(),
        }
    }

    /// Parameters become constants (inference, probing inputs only).
    pub fn frozen() -> Self {
        Binder {
            differentiable: false,
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Tensor) -> Var {
        let v = if self.differentiable {
            tape.leaf(value.clone())
        } else {
            tape.constant(value.clone())
        };
        self.bound.push((name.to_string(), v));
        v
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }
}

pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// He-style normal init for a weight whose trailing dims are the fan-in.
pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// `gain * Q` where `Q` is Haar-distributed with orthonormal rows (when
/// `rows <= cols`) or columns (when `rows > cols`). The trailing dims of
/// `shape` are flattened into the column count.
pub fn orthogonal<R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // n orthonormal vectors of length m via Gram-Schmidt on Gaussians;
    // normalizing each against the previous ones is the QR with positive
    // diagonal, which makes the result Haar distributed.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            data[r * cols + c] = gain * x;
        }
    }
    Tensor::from_vec(shape, data).expect("shape product")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram(t: &Tensor, by_rows: bool) -> Vec<Vec<f64>> {
        let (r, c) = (t.shape()[0], t.numel() / t.shape()[0]);
        let d = t.data();
        let (n, m) = if by_rows { (r, c) } else { (c, r) };
        let at = |i: usize, k: usize| if by_rows { d[i * c + k] } else { d[k * c + i] };
        (0..n)
            .map(|i| (0..n).map(|j| (0..m).map(|k| at(i, k) * at(j, k)).sum()).collect())
            .collect()
    }

    #[test]
    fn orthogonal_rows_and_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (shape, by_rows) in [(vec![3, 8], true), (vec![8, 3], false), (vec![4, 2, 1, 2], true)] {
            let q = orthogonal(&shape, 2.0, &mut rng);
            let g = gram(&q, by_rows);
            for (i, row) in g.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    let want = if i == j { 4.0 } else { 0.0 };
                    assert!((v - want).abs() < 1e-10, "{:?} [{},{}] = {}", shape, i, j, v);
                }
            }
        }
    }

    #[test]
    fn binder_records_in_order() {
        let mut tape = Tape::new();
        let mut b = Binder::trainable();
        let a = b.bind(&mut tape, "a", &Tensor::scalar(1.0));
        let c = b.bind(&mut tape, "c", &Tensor::scalar(2.0));
        assert_eq!(b.bound()[0], ("a".to_string(), a));
        assert_eq!(b.bound()[1], ("c".to_string(), c));
    }
}
