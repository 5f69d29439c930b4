//! The full parameter bundle: encoder pair, sequence model, predictor, heads.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderPair, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamSet};
use crate::seqmodel::{SeqModelConfig, SeqModelParams};
use crate::tensor::{load_checkpoint, save_checkpoint, Tensor};

pub const PREDICTOR_HIDDEN: usize = 128;
pub const HEAD_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq: SeqModelConfig,
    /// Largest id `I`; larger ids are folded modulo `I + 1`.
    pub max_id: u32,
    /// Most ids a single behavior may carry.
    pub m_max: usize,
    pub predictor_hidden: usize,
    pub head_hidden: usize,
    pub ema_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq: SeqModelConfig::default(),
            max_id: 999,
            m_max: 8,
            predictor_hidden: PREDICTOR_HIDDEN,
            head_hidden: HEAD_HIDDEN,
            ema_momentum: 0.995,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.seq.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.seq.validate()?;
        if self.m_max == 0 || self.predictor_hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum must be in [0, 1], got {}",
                self.ema_momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UbsModel {
    pub config: ModelConfig,
    pub encoders: EncoderPair,
    pub seq: SeqModelParams,
    pub predictor: Mlp,
    pub heads: BTreeMap<String, Mlp>,
    /// Method-specific tensors (baseline output layers, mask embedding),
    /// stored under `aux.`.
    pub aux: BTreeMap<String, Tensor>,
}

impl UbsModel {
    /// Student, sequence model and predictor drawn from one seeded stream;
    /// the teacher starts as a copy of the student. The predictor's output
    /// layer starts at zero so early updates carry target content rather
    /// than shrinking an O(1) prediction toward small teacher embeddings.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model();
        let mut student = EncoderParams::init_with_rng(d, config.max_id, config.m_max, &mut rng);
        student.scale_id_positions(config.seq.position_scale);
        let seq = SeqModelParams::init_with_rng(config.seq, &mut rng)?;
        let mut predictor = Mlp::init(d, config.predictor_hidden, d, &mut rng);
        predictor.w2 = Tensor::zeros(&[config.predictor_hidden, d]);
        Ok(Self {
            config,
            encoders: EncoderPair::new(student, config.ema_momentum),
            seq,
            predictor,
            heads: BTreeMap::new(),
            aux: BTreeMap::new(),
        })
    }

    /// Fresh `d -> head_hidden -> num_classes` head for `task`, replacing any
    /// existing one.
    pub fn attach_head(&mut self, task: &str, num_classes: usize, seed: u64) -> Result<&mut Mlp> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "task {} needs at least 2 classes, got {}",
                task, num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Mlp::init(self.config.d_model(), self.config.head_hidden, num_classes, &mut rng);
        self.heads.insert(task.to_string(), head);
        Ok(self.heads.get_mut(task).expect("just inserted"))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let c = &self.config;
        out.push((
            "meta.config".to_string(),
            Tensor::vector(vec![
                c.seq.num_heads as f64,
                c.seq.max_positions as f64,
                c.m_max as f64,
                c.ema_momentum,
                c.seq.position_scale,
            ]),
        ));
        out.extend(self.encoders.student.named("student."));
        out.extend(self.encoders.teacher.named("teacher."));
        out.extend(self.seq.named("seqmodel."));
        out.extend(self.predictor.named("predictor."));
        for (task, h) in &self.heads {
            out.extend(h.named(&format!("head.{}.", task)));
        }
        for (name, t) in &self.aux {
            out.push((format!("aux.{}", name), t.clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.named_tensors())
    }

    pub fn from_tensors(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let map: BTreeMap<String, Tensor> = entries.into_iter().collect();
        let missing = |k: &str| Error::Format(format!("checkpoint lacks {}", k));
        let meta = map.get("meta.config").ok_or_else(|| missing("meta.config"))?;
        if meta.numel() != 5 {
            return Err(Error::Format("meta.config must hold 5 values".into()));
        }
        let m = meta.data();
        let emb = map.get("student.embedding").ok_or_else(|| missing("student.embedding"))?;
        let (rows, d) = (emb.shape()[0], emb.shape()[1]);
        let num_layers = (0..)
            .take_while(|i| map.contains_key(&format!("seqmodel.layer{}.wq", i)))
            .count();
        let ff = map
            .get("seqmodel.layer0.ff1")
            .ok_or_else(|| missing("seqmodel.layer0.ff1"))?
            .shape()[1];
        let predictor_hidden = map
            .get("predictor.w1")
            .ok_or_else(|| missing("predictor.w1"))?
            .shape()[1];
        let config = ModelConfig {
            seq: SeqModelConfig {
                d_model: d,
                ff_dim: ff,
                num_layers,
                num_heads: m[0] as usize,
                max_positions: m[1] as usize,
                position_scale: m[4],
            },
            max_id: (rows - 1) as u32,
            m_max: m[2] as usize,
            predictor_hidden,
            head_hidden: HEAD_HIDDEN,
            ema_momentum: m[3],
        };
        let mut model = Self::init(config, 0)?;
        model.encoders.student.load_named(&map, "student.")?;
        model.encoders.teacher.load_named(&map, "teacher.")?;
        model.seq.load_named(&map, "seqmodel.")?;
        model.predictor.load_named(&map, "predictor.")?;

        let mut tasks: Vec<String> = map
            .keys()
            .filter_map(|k| k.strip_prefix("head.")?.strip_suffix(".w1").map(str::to_string))
            .collect();
        tasks.dedup();
        for task in tasks {
            let prefix = format!("head.{}.", task);
            let w1 = &map[&format!("{}w1", prefix)];
            let w2 = map
                .get(&format!("{}w2", prefix))
                .ok_or_else(|| missing(&format!("{}w2", prefix)))?;
            let mut head = Mlp::zeros(d, w1.shape()[1], w2.shape()[1]);
            head.load_named(&map, &prefix)?;
            model.config.head_hidden = w1.shape()[1];
            model.heads.insert(task, head);
        }
        for (k, t) in &map {
            if let Some(name) = k.strip_prefix("aux.") {
                model.aux.insert(name.to_string(), t.clone());
            }
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(load_checkpoint(path)?)
    }
}
