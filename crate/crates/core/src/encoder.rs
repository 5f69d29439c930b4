//! Multi-ID behavior encoder, time-bucket pooling and the student/teacher pair.
//!
//! For a behavior with ids `i_1..i_m`:
//!
//! ```text
//! x_j  = table[i_j] + p_j
//! e~_j = W1 x_j + b1
//! w_j  = sigmoid(W2 x_j + b2)          (scalar gate)
//! e_x  = sum_j w_j * e~_j
//! ```
//!
//! Because `e_x = W1 (sum_j w_j x_j) + (sum_j w_j) b1`, the mean over a bucket
//! of behaviors can be formed by pooling the gated inputs first and applying
//! `W1` once per bucket. [`EncoderVars::pooled`] does exactly that; it is
//! checked against the per-behavior formula in the tests.


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::data::{BehaviorEvent, SampleWindows};
use crate::error::{Error, Result};
use crate::nn::{uniform, ParamSet};
use crate::tensor::{sinusoidal_table, Tape, Tensor, Var};

const EMBEDDING_STD: f64 = 0.02;

/// Parameters of one behavior encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `[I + 1, d]`
    pub embedding: Tensor,
    /// `[d, d]`, applied as `W1 x`.
    pub w1: Tensor,
    /// `[d]`
    pub b1: Tensor,
    /// `[1, d]`
    pub w2: Tensor,
    /// `[1]`
    pub b2: Tensor,
    /// Fixed `[m_max, d]` id-slot encodings; not trained.
    id_positions: Tensor,
}

impl EncoderParams {
    pub fn init(dim: usize, max_id: u32, m_max: usize, seed: u64) -> Self {
        Self::init_with_rng(dim, max_id, m_max, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with_rng(dim: usize, max_id: u32, m_max: usize, rng: &mut impl Rng) -> Self {
        let rows = max_id as usize + 1;
        let normal = Normal::new(0.0, EMBEDDING_STD).expect("std");
        let embedding = Tensor::new(
            vec![rows, dim],
            (0..rows * dim).map(|_| rng.sample(normal)).collect(),
        )
        .expect("shape");
        let bound = (1.0 / dim as f64).sqrt();
        Self {
            embedding,
            w1: uniform(&[dim, dim], bound, rng),
            b1: Tensor::zeros(&[dim]),
            w2: uniform(&[1, dim], bound, rng),
            b2: Tensor::zeros(&[1]),
            id_positions: sinusoidal_table(m_max, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.shape()[1]
    }

    pub fn max_id(&self) -> u32 {
        (self.embedding.shape()[0] - 1) as u32
    }

    pub fn m_max(&self) -> usize {
        self.id_positions.shape()[0]
    }

    pub fn id_positions(&self) -> &Tensor {
        &self.id_positions
    }

    /// Zeroes the id-slot encodings (used to check order sensitivity).
    /// Multiplies the fixed id-slot encodings by `s`.
    pub fn scale_id_positions(&mut self, s: f64) {
        self.id_positions = self.id_positions.scaled(s);
    }

    pub fn clear_id_positions(&mut self) {
        self.id_positions = Tensor::zeros(self.id_positions.shape());
    }

    pub fn bind_encoder<'t>(&self, tape: &'t Tape, requires_grad: bool) -> EncoderVars<'t> {
        let v = self.bind(tape, requires_grad);
        let [e, w1, b1, w2, b2] = [v[0], v[1], v[2], v[3], v[4]];
        EncoderVars {
            embedding: e,
            w1,
            b1,
            w2,
            b2,
            positions: self.id_positions.clone(),
        }
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("embedding".into(), &self.embedding),
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("embedding".into(), &mut self.embedding),
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

/// Encoder parameters recorded on a tape.
pub struct EncoderVars<'t> {
    pub embedding: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    positions: Tensor,
}

impl<'t> EncoderVars<'t> {
    /// Same order as [`ParamSet::tensors`].
    pub fn all(&self) -> Vec<Var<'t>> {
        vec![self.embedding, self.w1, self.b1, self.w2, self.b2]
    }

    /// Mean embedding per observation bucket, `[K, d]`.
    pub fn pool_buckets(&self, w: &SampleWindows) -> Result<Var<'t>> {
        let (segments, counts) = w.bucket_segments();
        self.pooled(&w.ids, &w.slots, &segments, &counts)
    }

    /// Mean embedding per prediction window `k = 1..=K`, `[K, d]`.
    pub fn pool_targets(&self, w: &SampleWindows) -> Result<Var<'t>> {
        let (segments, counts) = w.target_segments();
        self.pooled(&w.ids, &w.slots, &segments, &counts)
    }

    fn tape(&self) -> &'t Tape {
        self.embedding.tape()
    }

    fn dim(&self) -> usize {
        self.positions.shape()[1]
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let rows = self.embedding.shape()[0];
        if ids.is_empty() {
            return Err(Error::Contract("behavior has no ids".into()));
        }
        if ids.len() > self.positions.shape()[0] {
            return Err(Error::Validation(format!(
                "behavior has {} ids, encoder supports {}",
                ids.len(),
                self.positions.shape()[0]
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Bounds {
                what: "behavior id",
                index: bad,
                len: rows,
            });
        }
        Ok(())
    }

    /// One behavior embedding `[d]`, evaluated id by id.
    pub fn encode_behavior(&self, ids: &[usize]) -> Result<Var<'t>> {
        self.check_ids(ids)?;
        let tape = self.tape();
        let d = self.dim();
        let w1t = self.w1.transpose()?;
        let w2t = self.w2.transpose()?;
        let mut total: Option<Var<'t>> = None;
        for (j, &id) in ids.iter().enumerate() {
            let p = tape.constant(Tensor::matrix(1, d, self.positions.row(j).to_vec())?);
            let x = self.embedding.gather_rows(&[id])?.add(p)?;
            let lin = x.matmul(w1t)?.add_bias(self.b1)?;
            let gate = x.matmul(w2t)?.add_bias(self.b2)?.sigmoid();
            let term = lin.row_scale(gate)?;
            total = Some(match total {
                None => term,
                Some(acc) => acc.add(term)?,
            });
        }
        total.expect("non-empty ids").reshape(&[d])
    }

    /// Mean behavior embedding per segment, `[segments, d]`.
    ///
    /// `ids[r]`/`slots[r]` list every id row; `segments[s]` is the id-row span
    /// of segment `s` and `counts[s]` the number of behaviors in it. Empty
    /// segments give zero rows.
    pub fn pooled(
        &self,
        ids: &[usize],
        slots: &[usize],
        segments: &[(usize, usize)],
        counts: &[usize],
    ) -> Result<Var<'t>> {
        let tape = self.tape();
        let d = self.dim();
        if ids.len() != slots.len() || segments.len() != counts.len() {
            return Err(Error::Contract("pooled: mismatched layout lengths".into()));
        }
        let m_max = self.positions.shape()[0];
        let mut pos = Vec::with_capacity(ids.len() * d);
        for &s in slots {
            if s >= m_max {
                return Err(Error::Validation(format!("id slot {} exceeds maximum {}", s, m_max)));
            }
            pos.extend_from_slice(self.positions.row(s));
        }
        let inv: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
            .collect();
        let inv = tape.constant(Tensor::new(vec![counts.len(), 1], inv)?);

        let x = self
            .embedding
            .gather_rows(ids)?
            .add(tape.constant(Tensor::new(vec![ids.len(), d], pos)?))?;
        let gate = x.matmul(self.w2.transpose()?)?.add_bias(self.b2)?.sigmoid();
        let gated = x.row_scale(gate)?.segment_sum(segments)?.row_scale(inv)?;
        let gate_mean = gate.segment_sum(segments)?.row_scale(inv)?;
        let lin = gated.matmul(self.w1.transpose()?)?;
        let bias = gate_mean.matmul(self.b1.reshape(&[1, d])?)?;
        lin.add(bias)
    }
}

/// Pooled day sequence: one row per bucket plus a validity flag; empty
/// buckets are zero rows flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSequence {
    pub embeddings: Tensor,
    pub valid: Vec<bool>,
}

impl PooledSequence {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Pools a sample's observation buckets with `params` (no gradient).
pub fn pool_sequence(params: &EncoderParams, w: &SampleWindows) -> Result<PooledSequence> {
    let tape = Tape::new();
    let v = params.bind_encoder(&tape, false);
    Ok(PooledSequence {
        embeddings: v.pool_buckets(w)?.value(),
        valid: w.valid_positions(),
    })
}

/// Behavior embedding `[d]` of one id list.
pub fn encode_behavior(params: &EncoderParams, ids: &[u32]) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.bind_encoder(&tape, false);
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    Ok(vars.encode_behavior(&ids)?.value())
}

/// Arithmetic mean of embeddings; `(zeros, false)` when empty.
pub fn pool_embeddings(embs: &[Tensor], dim: usize) -> Result<(Tensor, bool)> {
    if embs.is_empty() {
        return Ok((Tensor::zeros(&[dim]), false));
    }
    let mut acc = vec![0.0; dim];
    for e in embs {
        if e.numel() != dim {
            return Err(crate::error::shape_err(
                "pool_embeddings",
                format!("expected {} values, got {:?}", dim, e.shape()),
            ));
        }
        acc.iter_mut().zip(e.data()).for_each(|(a, v)| *a += v);
    }
    let n = embs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok((Tensor::vector(acc), true))
}

/// Detached mean of teacher embeddings of the given behaviors.
pub fn supervision_embedding(
    teacher: &EncoderParams,
    events: &[BehaviorEvent],
) -> Result<(Tensor, bool)> {
    let tape = Tape::new();
    let vars = teacher.bind_encoder(&tape, false);
    let mut embs = Vec::with_capacity(events.len());
    for e in events {
        let ids: Vec<usize> = e.ids.iter().map(|&i| i as usize).collect();
        embs.push(vars.encode_behavior(&ids)?.detach().value());
    }
    pool_embeddings(&embs, teacher.dim())
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(teacher: &mut EncoderParams, student: &EncoderParams, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {} outside [0, 1]", momentum)));
    }
    let src = student.tensors();
    for ((name, t), (_, s)) in teacher.tensors_mut().into_iter().zip(src) {
        if t.shape() != s.shape() {
            return Err(Error::State(format!(
                "teacher/student shape mismatch on {}: {:?} vs {:?}",
                name,
                t.shape(),
                s.shape()
            )));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

/// Trainable student plus its moving-average teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub student: EncoderParams,
    pub teacher: EncoderParams,
    pub momentum: f64,
}

impl EncoderPair {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: EncoderParams, momentum: f64) -> Self {
        Self {
            teacher: student.clone(),
            student,
            momentum,
        }
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.momentum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(d: usize) -> EncoderParams {
        EncoderParams::init(d, 20, 4, 7)
    }

    fn direct_formula(p: &EncoderParams, ids: &[u32]) -> Vec<f64> {
        let d = p.dim();
        let mut out = vec![0.0; d];
        for (j, &id) in ids.iter().enumerate() {
            let x: Vec<f64> = (0..d)
                .map(|c| p.embedding.row(id as usize)[c] + p.id_positions().row(j)[c])
                .collect();
            let mut gate_logit = p.b2.data()[0];
            for c in 0..d {
                gate_logit += p.w2.data()[c] * x[c];
            }
            let gate = 1.0 / (1.0 + (-gate_logit).exp());
            for r in 0..d {
                let mut v = p.b1.data()[r];
                for c in 0..d {
                    v += p.w1.data()[r * d + c] * x[c];
                }
                out[r] += gate * v;
            }
        }
        out
    }

    #[test]
    fn shapes_and_determinism() {
        let p = params(6);
        assert_eq!(p.embedding.shape(), &[21, 6]);
        assert_eq!(p.w1.shape(), &[6, 6]);
        assert_eq!(p.w2.shape(), &[1, 6]);
        assert_eq!(p.b2.shape(), &[1]);
        assert_eq!(p, params(6));
        assert_ne!(p, EncoderParams::init(6, 20, 4, 8));
        let pair = EncoderPair::new(p.clone(), 0.995);
        assert_eq!(pair.teacher, pair.student);
    }

    #[test]
    fn identity_merge_halves_sum() {
        let mut p = params(4);
        p.w1 = Tensor::eye(4);
        p.w2 = Tensor::zeros(&[1, 4]);
        let e = encode_behavior(&p, &[3, 5]).unwrap();
        for c in 0..4 {
            let expect = 0.5
                * (p.embedding.row(3)[c] + p.id_positions().row(0)[c] + p.embedding.row(5)[c]
                    + p.id_positions().row(1)[c]);
            assert!((e.data()[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn single_id_zero_gate() {
        let mut p = params(4);
        p.w2 = Tensor::zeros(&[1, 4]);
        p.b1 = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        let e = encode_behavior(&p, &[2]).unwrap();
        let full = direct_formula(&p, &[2]);
        for c in 0..4 {
            assert!((e.data()[c] - full[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_scalar_loop() {
        let mut p = params(5);
        p.b1 = Tensor::vector(vec![0.3, -0.1, 0.0, 0.2, 0.5]);
        p.b2 = Tensor::scalar(-0.4);
        let ids = [4, 17, 9];
        let e = encode_behavior(&p, &ids).unwrap();
        for (a, b) in e.data().iter().zip(direct_formula(&p, &ids)) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn bad_ids() {
        let p = params(4);
        assert!(matches!(encode_behavior(&p, &[21]), Err(Error::Bounds { .. })));
        assert!(matches!(encode_behavior(&p, &[1, 2, 3, 4, 5]), Err(Error::Validation(_))));
    }

    #[test]
    fn permutation_invariant_without_positions() {
        let mut p = params(4);
        assert_ne!(
            encode_behavior(&p, &[1, 2, 3]).unwrap(),
            encode_behavior(&p, &[3, 1, 2]).unwrap()
        );
        p.clear_id_positions();
        let a = encode_behavior(&p, &[1, 2, 3]).unwrap();
        let b = encode_behavior(&p, &[3, 1, 2]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn pooled_matches_per_behavior_mean() {
        let mut p = params(5);
        p.b1 = Tensor::vector(vec![0.3, -0.1, 0.0, 0.2, 0.5]);
        let behaviors: Vec<Vec<u32>> = vec![vec![1, 2], vec![3], vec![7, 8, 9], vec![4]];
        // segments: {0,1}, {}, {2,3}
        let mut ids = Vec::new();
        let mut slots = Vec::new();
        let mut rows = Vec::new();
        for b in &behaviors {
            let s = ids.len();
            for (j, &i) in b.iter().enumerate() {
                ids.push(i as usize);
                slots.push(j);
            }
            rows.push((s, ids.len()));
        }
        let segments = vec![(rows[0].0, rows[1].1), (rows[2].0, rows[2].0), (rows[2].0, rows[3].1)];
        let counts = vec![2, 0, 2];
        let tape = Tape::new();
        let v = p.bind_encoder(&tape, false);
        let pooled = v.pooled(&ids, &slots, &segments, &counts).unwrap().value();
        let e: Vec<Tensor> = behaviors.iter().map(|b| encode_behavior(&p, b).unwrap()).collect();
        let (m0, ok0) = pool_embeddings(&e[0..2], 5).unwrap();
        let (m2, _) = pool_embeddings(&e[2..4], 5).unwrap();
        let (z, ok1) = pool_embeddings(&[], 5).unwrap();
        assert!(ok0 && !ok1);
        for c in 0..5 {
            assert!((pooled.row(0)[c] - m0.data()[c]).abs() < 1e-13);
            assert_eq!(pooled.row(1)[c], z.data()[c]);
            assert!((pooled.row(2)[c] - m2.data()[c]).abs() < 1e-13);
        }
    }

    #[test]
    fn pool_basics() {
        let v = Tensor::vector(vec![1.0, -2.0]);
        assert_eq!(pool_embeddings(&[v.clone()], 2).unwrap(), (v.clone(), true));
        let neg = Tensor::vector(vec![-1.0, 2.0]);
        assert_eq!(pool_embeddings(&[v, neg], 2).unwrap().0.data(), &[0.0, 0.0]);
    }

    #[test]
    fn supervision_is_detached_mean() {
        let p = params(4);
        let events = vec![BehaviorEvent::new(0, &[1, 2]), BehaviorEvent::new(1, &[5])];
        let (s, ok) = supervision_embedding(&p, &events).unwrap();
        assert!(ok);
        let a = encode_behavior(&p, &[1, 2]).unwrap();
        let b = encode_behavior(&p, &[5]).unwrap();
        let (m, _) = pool_embeddings(&[a.clone(), b], 4).unwrap();
        assert_eq!(s, m);
        let (single, _) = supervision_embedding(&p, &events[..1]).unwrap();
        assert_eq!(single, a);
        assert!(!supervision_embedding(&p, &[]).unwrap().1);
    }

    #[test]
    fn ema_endpoints_and_default() {
        let student = params(3);
        let mut pair = EncoderPair::new(student, 1.0);
        pair.student.w1.data_mut()[0] += 1.0;
        let before = pair.teacher.clone();
        pair.ema_update().unwrap();
        assert_eq!(pair.teacher, before);
        pair.momentum = 0.0;
        pair.ema_update().unwrap();
        assert_eq!(pair.teacher, pair.student);

        let mut t = params(3);
        let mut s = params(3);
        t.b2 = Tensor::scalar(1.0);
        s.b2 = Tensor::scalar(0.0);
        ema_update(&mut t, &s, 0.995).unwrap();
        assert_eq!(t.b2.data()[0], 0.995);
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut t = params(3);
        let s = EncoderParams::init(3, 10, 4, 1);
        assert!(matches!(ema_update(&mut t, &s, 0.5), Err(Error::State(_))));
    }
}
