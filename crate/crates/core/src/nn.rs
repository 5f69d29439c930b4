//! Parameter groups and the small MLP used for the predictor and task heads.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A named, ordered group of trainable tensors.
///
/// `tensors` and `tensors_mut` must list the same names in the same order;
/// [`ParamSet::bind`] relies on it.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Leaves for every tensor, in `tensors` order.
    fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Vec<Var<'t>> {
        self.tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors()
            .into_iter()
            .map(|(n, t)| (format!("{}{}", prefix, n), t.clone()))
            .collect()
    }

    /// Overwrites every tensor from `<prefix><name>` entries; shapes must match.
    fn load_named(&mut self, map: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, t) in self.tensors_mut() {
            let key = format!("{}{}", prefix, name);
            let src = map
                .get(&key)
                .ok_or_else(|| Error::Format(format!("missing tensor {}", key)))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    key,
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub(crate) fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    uniform(&[fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

/// `y = relu(x W1 + b1) W2 + b2`, applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: uniform(&[input, hidden], (1.0 / input as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: uniform(&[hidden, output], (1.0 / hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, output]),
            b2: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn bind_mlp<'t>(&self, tape: &'t Tape, requires_grad: bool) -> MlpVars<'t> {
        MlpVars::from_vars(&self.bind(tape, requires_grad))
    }

    /// Forward pass on one `[d]` vector or a `[n, d]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.bind_mlp(&tape, false);
        let input = if x.rank() == 1 {
            x.clone().reshaped(vec![1, x.numel()])?
        } else {
            x.clone()
        };
        let out = v.forward(tape.constant(input))?.value();
        if x.rank() == 1 {
            out.reshaped(vec![self.output_dim()])
        } else {
            Ok(out)
        }
    }
}

impl ParamSet for Mlp {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

#[derive(Clone, Copy)]
pub struct MlpVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> MlpVars<'t> {
    pub fn from_vars(v: &[Var<'t>]) -> Self {
        Self {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
        }
    }

    pub fn all(&self) -> Vec<Var<'t>> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// `x` is `[n, input]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.w1)?
            .add_bias(self.b1)?
            .relu()
            .matmul(self.w2)?
            .add_bias(self.b2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias() {
        let mut m = Mlp::zeros(4, 3, 2);
        m.b2 = Tensor::vector(vec![0.5, -1.0]);
        let y = m.forward(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0]);
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Mlp::init(3, 5, 2, &mut rng);
        m.b1 = uniform(&[5], 0.5, &mut rng);
        m.b2 = uniform(&[2], 0.5, &mut rng);
        let x = [0.3, -1.2, 0.7];
        let y = m.forward(&Tensor::vector(x.to_vec())).unwrap();
        for o in 0..2 {
            let mut acc = m.b2.data()[o];
            for h in 0..5 {
                let mut z = m.b1.data()[h];
                for i in 0..3 {
                    z += x[i] * m.w1.data()[i * 5 + h];
                }
                acc += z.max(0.0) * m.w2.data()[h * 2 + o];
            }
            assert!((y.data()[o] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Mlp::init(3, 4, 2, &mut rng);
        let mut b = Mlp::zeros(3, 4, 2);
        let map: BTreeMap<_, _> = a.named("p.").into_iter().collect();
        b.load_named(&map, "p.").unwrap();
        assert_eq!(a, b);
        let mut c = Mlp::zeros(3, 5, 2);
        assert!(c.load_named(&map, "p.").is_err());
        assert!(b.load_named(&map, "q.").is_err());
    }
}
