//! Pre-norm causal transformer over pooled day sequences.
//!
//! Each layer: `x += Attn(LN1(x)) Wo; x += relu(LN2(x) F1) F2`, with bias-free
//! projections and affine layer norms, giving `4d^2 + 2·d·ff + 4d` parameters
//! per layer. Fixed sinusoidal position encodings are added to the input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::PooledSequence;
use crate::error::{Error, Result};
use crate::nn::{xavier, ParamSet};
use crate::tensor::{sinusoidal_table, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    pub d_model: usize,
    pub ff_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    /// Amplitude of the sinusoidal position encodings (also used for the
    /// behavior encoder's id-slot encodings).
    #[serde(default = "unit")]
    pub position_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for SeqModelConfig {
    fn default() -> Self {
        Self::preset("base").expect("base preset")
    }
}

pub const PRESETS: [&str; 5] = ["base", "base_x2", "base_x4", "base_x8", "base_x16"];

impl SeqModelConfig {
    /// Scaling presets; all use `d_model = 128` and 4 heads.
    pub fn preset(name: &str) -> Result<Self> {
        let (ff_dim, num_layers) = match name {
            "base" => (128, 4),
            "base_x2" => (128, 8),
            "base_x4" => (256, 5),
            "base_x8" => (256, 10),
            "base_x16" => (512, 5),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {:?}; expected one of {}",
                    other,
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            d_model: 128,
            ff_dim,
            num_layers,
            num_heads: 4,
            max_positions: 4096,
            position_scale: 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ff_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::Config(format!("sequence model sizes must be positive: {:?}", self)));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if !(self.position_scale.is_finite() && self.position_scale >= 0.0) {
            return Err(Error::Config(format!(
                "position_scale must be finite and non-negative, got {}",
                self.position_scale
            )));
        }
        Ok(())
    }

    /// Trainable parameters of the sequence model alone.
    pub fn count_params(&self) -> usize {
        let d = self.d_model;
        self.num_layers * (4 * d * d + 2 * d * self.ff_dim + 4 * d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff1: Tensor,
    pub ff2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

const LAYER_TENSORS: usize = 10;

impl LayerParams {
    fn init(d: usize, ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: xavier(d, d, rng),
            wk: xavier(d, d, rng),
            wv: xavier(d, d, rng),
            wo: xavier(d, d, rng),
            ff1: xavier(d, ff, rng),
            ff2: xavier(ff, d, rng),
            ln1_gamma: Tensor::filled(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::filled(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    fn entries(&self) -> [(&'static str, &Tensor); LAYER_TENSORS] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ff1", &self.ff1),
            ("ff2", &self.ff2),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
    }

    fn entries_mut(&mut self) -> [(&'static str, &mut Tensor); LAYER_TENSORS] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ff1", &mut self.ff1),
            ("ff2", &mut self.ff2),
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModelParams {
    pub config: SeqModelConfig,
    pub layers: Vec<LayerParams>,
}

impl SeqModelParams {
    pub fn init(config: SeqModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_rng(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with_rng(config: SeqModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::init(config.d_model, config.ff_dim, rng))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn bind_seq<'t>(&self, tape: &'t Tape, requires_grad: bool) -> SeqModelVars<'t> {
        let vars = self.bind(tape, requires_grad);
        SeqModelVars {
            config: self.config,
            layers: vars.chunks(LAYER_TENSORS).map(|c| c.to_vec()).collect(),
        }
    }

    /// Per-position outputs `H` and the representation at the last valid
    /// position.
    pub fn encode_sequence(&self, pooled: &PooledSequence) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let v = self.bind_seq(&tape, false);
        let out = v.forward(tape.constant(pooled.embeddings.clone()), &pooled.valid, true)?;
        let e = out.last_valid(&pooled.valid)?.value();
        let d = self.config.d_model;
        Ok((out.h.value(), e.reshaped(vec![d])?))
    }

    /// Mean post-softmax attention per layer over `samples` and heads, each `[K, K]`.
    pub fn attention_maps(&self, samples: &[PooledSequence]) -> Result<Vec<Tensor>> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("attention_maps needs at least one sample".into()))?;
        let k = first.len();
        let mut acc = vec![vec![0.0; k * k]; self.config.num_layers];
        for s in samples {
            if s.len() != k {
                return Err(Error::Contract(format!(
                    "attention_maps: sequence lengths differ ({} vs {})",
                    s.len(),
                    k
                )));
            }
            let tape = Tape::new();
            let v = self.bind_seq(&tape, false);
            let out = v.forward(tape.constant(s.embeddings.clone()), &s.valid, true)?;
            for (l, att) in out.attention.iter().enumerate() {
                let (heads, probs) = att.attention_probs().expect("attention node");
                for block in probs.chunks(k * k) {
                    for (a, p) in acc[l].iter_mut().zip(block) {
                        *a += p / heads as f64;
                    }
                }
            }
        }
        let n = samples.len() as f64;
        acc.into_iter()
            .map(|mut m| {
                m.iter_mut().for_each(|x| *x /= n);
                Tensor::new(vec![k, k], m)
            })
            .collect()
    }
}

impl ParamSet for SeqModelParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.entries()
                    .into_iter()
                    .map(move |(n, t)| (format!("layer{}.{}", i, n), t))
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.entries_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("layer{}.{}", i, n), t))
            })
            .collect()
    }
}

/// Additive attention mask: position `i` sees key `j` when `j == i`, or when
/// `j` is valid and (`j < i` or attention is bidirectional).
pub fn attention_mask(valid: &[bool], causal: bool) -> Tensor {
    let n = valid.len();
    let mut data = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        for j in 0..n {
            if j == i || (valid[j] && (!causal || j < i)) {
                data[i * n + j] = 0.0;
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

pub struct SeqModelVars<'t> {
    pub config: SeqModelConfig,
    layers: Vec<Vec<Var<'t>>>,
}

pub struct SeqOutput<'t> {
    /// `[K, d]` last-layer outputs.
    pub h: Var<'t>,
    /// Attention output node of each layer; carries the probabilities.
    pub attention: Vec<Var<'t>>,
}

impl<'t> SeqOutput<'t> {
    /// `[1, d]` output at the last valid position.
    pub fn last_valid(&self, valid: &[bool]) -> Result<Var<'t>> {
        let k = valid
            .iter()
            .rposition(|&v| v)
            .ok_or_else(|| Error::Contract("sequence has no valid position".into()))?;
        self.h.slice(0, k, k + 1)
    }
}

impl<'t> SeqModelVars<'t> {
    pub fn all(&self) -> Vec<Var<'t>> {
        self.layers.iter().flatten().copied().collect()
    }

    /// `x` is `[K, d]`; invalid rows should already be zero.
    pub fn forward(&self, x: Var<'t>, valid: &[bool], causal: bool) -> Result<SeqOutput<'t>> {
        let shape = x.shape();
        let d = self.config.d_model;
        if shape.len() != 2 || shape[1] != d || shape[0] != valid.len() {
            return Err(crate::error::shape_err(
                "seqmodel",
                format!("input {:?} with {} validity flags, d_model {}", shape, valid.len(), d),
            ));
        }
        let k = shape[0];
        if k == 0 {
            return Err(Error::Contract("empty sequence".into()));
        }
        if k > self.config.max_positions {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_positions {}",
                k, self.config.max_positions
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Contract("sequence has no valid position".into()));
        }
        let tape = x.tape();
        let mask = attention_mask(valid, causal);
        let mut h = x.add(tape.constant(sinusoidal_table(k, d).scaled(self.config.position_scale)))?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let [wq, wk, wv, wo, ff1, ff2, g1, b1, g2, b2] =
                [l[0], l[1], l[2], l[3], l[4], l[5], l[6], l[7], l[8], l[9]];
            let a = h.layer_norm(g1, b1, LAYER_NORM_EPS)?;
            let att = a
                .matmul(wq)?
                .attention(a.matmul(wk)?, a.matmul(wv)?, self.config.num_heads, &mask)?;
            attention.push(att);
            h = h.add(att.matmul(wo)?)?;
            let f = h.layer_norm(g2, b2, LAYER_NORM_EPS)?.matmul(ff1)?.relu().matmul(ff2)?;
            h = h.add(f)?;
        }
        Ok(SeqOutput { h, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SeqModelConfig {
        SeqModelConfig {
            d_model: 8,
            ff_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_positions: 64,
            position_scale: 1.0,
        }
    }

    fn random_input(k: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![k, d], (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn param_counts() {
        let base = SeqModelConfig::preset("base").unwrap();
        assert_eq!(base.count_params(), 395_264);
        assert_eq!(SeqModelConfig::preset("base_x2").unwrap().count_params(), 790_528);
        let hand = SeqModelConfig {
            d_model: 8,
            ff_dim: 8,
            num_layers: 1,
            num_heads: 1,
            max_positions: 8,
            position_scale: 1.0,
        };
        assert_eq!(hand.count_params(), 416);
        let p = SeqModelParams::init(tiny(), 0).unwrap();
        assert_eq!(p.num_params(), tiny().count_params());
        assert!(SeqModelConfig::preset("huge").is_err());
    }

    #[test]
    fn heads_must_divide() {
        let cfg = SeqModelConfig {
            num_heads: 3,
            ..tiny()
        };
        assert!(SeqModelParams::init(cfg, 0).is_err());
    }

    #[test]
    fn shape_and_single_position() {
        let p = SeqModelParams::init(tiny(), 1).unwrap();
        let pooled = PooledSequence {
            embeddings: random_input(5, 8, 2),
            valid: vec![true, false, true, true, false],
        };
        let (h, e) = p.encode_sequence(&pooled).unwrap();
        assert_eq!(h.shape(), &[5, 8]);
        assert_eq!(e.data(), h.row(3));

        let one = PooledSequence {
            embeddings: random_input(1, 8, 3),
            valid: vec![true],
        };
        let (h1, e1) = p.encode_sequence(&one).unwrap();
        assert_eq!(h1.data(), e1.data());
        let maps = p.attention_maps(&[one]).unwrap();
        assert_eq!(maps[0].data(), &[1.0]);
    }

    #[test]
    fn all_invalid_is_contract_error() {
        let p = SeqModelParams::init(tiny(), 1).unwrap();
        let pooled = PooledSequence {
            embeddings: Tensor::zeros(&[3, 8]),
            valid: vec![false; 3],
        };
        assert!(matches!(p.encode_sequence(&pooled), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_prefix_unchanged() {
        let p = SeqModelParams::init(tiny(), 4).unwrap();
        let x = random_input(6, 8, 5);
        let valid = vec![true; 6];
        let (h, _) = p
            .encode_sequence(&PooledSequence {
                embeddings: x.clone(),
                valid: valid.clone(),
            })
            .unwrap();
        let mut y = x.clone();
        for c in 0..8 {
            y.data_mut()[4 * 8 + c] += 3.0;
        }
        let (h2, _) = p
            .encode_sequence(&PooledSequence {
                embeddings: y,
                valid,
            })
            .unwrap();
        assert_eq!(&h.data()[..4 * 8], &h2.data()[..4 * 8]);
        assert_ne!(&h.data()[4 * 8..], &h2.data()[4 * 8..]);
    }

    #[test]
    fn attention_maps_rows_and_support() {
        let p = SeqModelParams::init(tiny(), 6).unwrap();
        let s = PooledSequence {
            embeddings: random_input(7, 8, 7),
            valid: vec![true, true, false, true, true, true, true],
        };
        let maps = p.attention_maps(&[s.clone()]).unwrap();
        let triple = p.attention_maps(&[s.clone(), s.clone(), s]).unwrap();
        assert_eq!(maps.len(), 2);
        for (m, t) in maps.iter().zip(&triple) {
            for i in 0..7 {
                let row = m.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                if i != 2 {
                    assert_eq!(row[2], 0.0);
                }
                for (a, b) in row.iter().zip(t.row(i)) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn mask_layout() {
        let m = attention_mask(&[true, false, true], true);
        let inf = f64::NEG_INFINITY;
        assert_eq!(m.data(), &[0.0, inf, inf, 0.0, 0.0, inf, 0.0, inf, 0.0]);
        let b = attention_mask(&[true, false, true], false);
        assert_eq!(b.data(), &[0.0, inf, 0.0, 0.0, 0.0, 0.0, 0.0, inf, 0.0]);
    }
}
