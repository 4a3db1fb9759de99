//! The full assistant: frozen image tower, connector and adapted LM, plus
//! the alignment / instruction-tuning trainer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::checkpoint::Checkpoint;
use crate::connector::{self, ConnectorConfig, TilePos};
use crate::error::{invalid, Error, Result};
use crate::image::ImageArray;
use crate::lm::{
    self, freeze_policy, AssembledSequence, LmConfig, LoraConfig, CONNECTOR, LM_BASE, LORA,
    VISION_ENCODER,
};
use crate::nn::{self, GradSet, ParamGroup, ParamSet, Tape};
use crate::optim::AdamW;
use crate::plip::{ImageTowerSpec, PlipModel, IMAGE_TOWER};
use crate::schedules::{effective_batch, ScheduleSpec};
use crate::tokenizer::{Tokenizer, EOS};

pub const CHECKPOINT_KIND: &str = "assistant";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssistantConfig {
    pub tower: ImageTowerSpec,
    pub connector: ConnectorConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
}

impl AssistantConfig {
    pub fn validate(&self) -> Result<()> {
        self.connector.validate()?;
        self.lm.validate()?;
        if self.connector.llm_dim != self.lm.dim {
            return Err(Error::Config(format!(
                "connector.llm_dim {} must equal lm.dim {}",
                self.connector.llm_dim, self.lm.dim
            )));
        }
        if self.connector.tile_size < self.tower.patch_size {
            return Err(Error::Config(format!(
                "connector.tile_size {} is smaller than one {}px patch",
                self.connector.tile_size, self.tower.patch_size
            )));
        }
        if !self.tower.enc_dim.is_multiple_of(self.connector.heads) {
            return Err(Error::Config(format!(
                "encoder width {} is not divisible by {} connector heads",
                self.tower.enc_dim, self.connector.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assistant {
    pub cfg: AssistantConfig,
    pub params: ParamSet,
}

impl Assistant {
    /// Builds the assistant around a trained image tower. The connector,
    /// the LM base and the adapters are seeded from their own configs.
    pub fn new(vision_encoder: ParamGroup, cfg: AssistantConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        params.insert_group(VISION_ENCODER, vision_encoder);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.connector.seed);
        params.insert_group(
            CONNECTOR,
            connector::init_connector(&mut rng, &cfg.connector, cfg.tower.enc_dim),
        );
        params.insert_group(LM_BASE, lm::init_lm(&cfg.lm));
        lm::attach_lora(&mut params, &cfg.lora)?;
        Ok(Self { cfg, params })
    }

    pub fn from_plip(
        plip: &PlipModel,
        connector: ConnectorConfig,
        lm: LmConfig,
        lora: LoraConfig,
    ) -> Result<Self> {
        let tower = plip
            .params
            .group(IMAGE_TOWER)
            .ok_or_else(|| Error::Checkpoint("pretrained model has no image tower".into()))?
            .clone();
        Self::new(
            tower,
            AssistantConfig {
                tower: plip.tower_spec(),
                connector,
                lm,
                lora,
            },
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected an {CHECKPOINT_KIND} checkpoint, found `{}`",
                ck.meta.kind
            )));
        }
        let cfg: AssistantConfig = serde_json::from_value(ck.meta.config.clone())?;
        cfg.validate()?;
        for g in [VISION_ENCODER, CONNECTOR, LM_BASE, LORA] {
            if ck.params.group(g).is_none() {
                return Err(Error::Checkpoint(format!("checkpoint lacks group `{g}`")));
            }
        }
        Ok(Self {
            cfg,
            params: ck.params.clone(),
        })
    }

    pub fn to_checkpoint(
        &self,
        seed: u64,
        step: u64,
        schedules: BTreeMap<String, ScheduleSpec>,
    ) -> Checkpoint {
        Checkpoint::new(
            CHECKPOINT_KIND,
            seed,
            step,
            serde_json::to_value(&self.cfg).expect("config serializes"),
            schedules,
            self.params.clone(),
        )
    }

    pub fn encode_tiles(&self, image: &ImageArray) -> Result<Vec<(TilePos, Mat)>> {
        connector::encode_tiles(
            &self.params,
            image,
            VISION_ENCODER,
            &self.cfg.tower,
            &self.cfg.connector,
        )
    }

    pub fn visual_prefix(&self, image: &ImageArray) -> Result<Mat> {
        connector::connect(
            &self.params,
            image,
            VISION_ENCODER,
            &self.cfg.tower,
            &self.cfg.connector,
        )
    }

    /// Generated token ids, a trailing EOS included when produced.
    pub fn generate_ids(
        &self,
        prefix: &Mat,
        question: &str,
        max_new_tokens: usize,
    ) -> Result<Vec<usize>> {
        if question.trim().is_empty() {
            return Err(invalid!("question is empty"));
        }
        let prompt = lm::prompt_ids(&Tokenizer::new(), question);
        lm::greedy_decode(
            &self.params,
            &self.cfg.lm,
            Some(&self.cfg.lora),
            prefix,
            &prompt,
            max_new_tokens,
        )
    }

    pub fn generate(
        &self,
        image: &ImageArray,
        question: &str,
        max_new_tokens: usize,
    ) -> Result<String> {
        let prefix = self.visual_prefix(image)?;
        let ids = self.generate_ids(&prefix, question, max_new_tokens)?;
        let ids: Vec<usize> = ids.into_iter().take_while(|i| *i != EOS).collect();
        Ok(Tokenizer::new().decode(&ids))
    }
}

/// One training row for stages 2 and 3.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaExample {
    pub image: ImageArray,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: usize,
    pub micro_batch: usize,
    pub accum: usize,
    #[serde(default = "one")]
    pub workers: usize,
    pub weight_decay: f64,
    /// One schedule per trainable group.
    pub schedules: BTreeMap<String, ScheduleSpec>,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl StageConfig {
    /// Default schedules for `stage`, every group sharing the horizon `steps`.
    pub fn for_stage(
        stage: u8,
        steps: usize,
        micro_batch: usize,
        accum: usize,
        seed: u64,
    ) -> Result<Self> {
        let schedules = match stage {
            2 => BTreeMap::from([
                (CONNECTOR.to_string(), ScheduleSpec::alignment(steps)),
                (LORA.to_string(), ScheduleSpec::alignment(steps)),
            ]),
            3 => BTreeMap::from([
                (
                    CONNECTOR.to_string(),
                    ScheduleSpec::instruction_connector(steps),
                ),
                (LORA.to_string(), ScheduleSpec::instruction_lora(steps)),
            ]),
            other => return Err(Error::Config(format!("no trainer for stage {other}"))),
        };
        Ok(Self {
            stage,
            steps,
            micro_batch,
            accum,
            workers: 1,
            weight_decay: 0.0,
            schedules,
            seed,
        })
    }

    pub fn effective_batch(&self) -> Result<usize> {
        effective_batch(self.micro_batch, self.accum, self.workers)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub step: usize,
    pub loss: f64,
    pub lr: BTreeMap<String, f64>,
}

/// Averages micro-batch gradients and applies one optimizer update.
pub fn apply_accumulated(
    opt: &mut AdamW,
    params: &mut ParamSet,
    micro_grads: Vec<GradSet>,
    lr_for: impl Fn(&str) -> f64,
) -> GradSet {
    let n = micro_grads.len();
    let mut total = GradSet::new();
    for g in micro_grads {
        nn::accumulate_grads(&mut total, g);
    }
    nn::scale_grads(&mut total, 1.0 / n as f64);
    opt.step(params, &total, lr_for);
    total
}

struct Prepared {
    tiles: Vec<(TilePos, Mat)>,
    seq: AssembledSequence,
}

/// Runs `cfg.steps` optimizer steps of the stage. Trainable groups follow
/// the stage's freezing policy; frozen groups are verified bit-identical
/// on exit. The optimizer state starts fresh.
pub fn train_stage(
    model: &mut Assistant,
    data: &[VqaExample],
    cfg: &StageConfig,
) -> Result<(Checkpoint, Vec<StageLog>)> {
    if data.is_empty() {
        return Err(invalid!("empty training set"));
    }
    let plan = freeze_policy(cfg.stage)?;
    cfg.effective_batch()?;
    for g in &plan.trainable {
        let s = cfg
            .schedules
            .get(g)
            .ok_or_else(|| Error::Config(format!("no schedule for trainable group `{g}`")))?;
        s.validate()?;
        if s.total_steps + 1 < cfg.steps {
            return Err(Error::Config(format!(
                "schedule for `{g}` covers {} steps but the stage runs {}",
                s.total_steps, cfg.steps
            )));
        }
    }
    let frozen_before: BTreeMap<String, String> = plan
        .frozen
        .iter()
        .filter_map(|g| model.params.group(g).map(|p| (g.clone(), p.content_hash())))
        .collect();

    let tokenizer = Tokenizer::new();
    let k = model.cfg.connector.num_queries;
    let placeholder = Mat::zeros((k, model.cfg.lm.dim));
    let prepared = data
        .iter()
        .map(|ex| {
            let seq = lm::assemble(
                &placeholder,
                &ex.question,
                &ex.answer,
                &tokenizer,
                model.cfg.lm.context,
            )?;
            if seq.answer_ids.is_empty() {
                return Err(invalid!(
                    "training row with question `{}` has an empty answer",
                    ex.question
                ));
            }
            Ok(Prepared {
                tiles: model.encode_tiles(&ex.image)?,
                seq,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let binding = Some(model.cfg.lora.binding());

    for step in 0..cfg.steps {
        let lrs = plan
            .trainable
            .iter()
            .map(|g| Ok((g.clone(), cfg.schedules[g].lr(step)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut micro_grads = Vec::with_capacity(cfg.accum * cfg.workers);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.accum * cfg.workers {
            while order.len() < cfg.micro_batch {
                let mut epoch: Vec<usize> = (0..prepared.len()).collect();
                epoch.shuffle(&mut rng);
                order.extend(epoch);
            }
            let idx: Vec<usize> = order.drain(..cfg.micro_batch).collect();
            let mut tape =
                Tape::new(&model.params, plan.trainable.iter().cloned()).with_lora(binding.clone());
            let mut losses = Vec::with_capacity(idx.len());
            for &i in &idx {
                let prefix = connector::connect_cached_on(
                    &mut tape,
                    &prepared[i].tiles,
                    &model.cfg.connector,
                )?;
                losses.push(lm::sequence_loss_on(
                    &mut tape,
                    &model.cfg.lm,
                    prefix,
                    &prepared[i].seq,
                )?);
            }
            let stacked = tape.g.concat_rows(&losses);
            let loss = tape.g.mean_rows(stacked);
            let value = tape.g.scalar(loss);
            if !value.is_finite() {
                return Err(invalid!("non-finite loss at step {step}"));
            }
            loss_sum += value;
            let grads = tape.g.backward(loss);
            micro_grads.push(tape.param_grads(&grads));
        }
        apply_accumulated(&mut opt, &mut model.params, micro_grads, |g| {
            lrs.get(g).copied().unwrap_or(0.0)
        });
        log.push(StageLog {
            step,
            loss: loss_sum / (cfg.accum * cfg.workers) as f64,
            lr: lrs,
        });
    }

    for (g, before) in &frozen_before {
        let after = model.params.group(g).map(ParamGroup::content_hash);
        if after.as_ref() != Some(before) {
            return Err(Error::Checkpoint(format!(
                "frozen group `{g}` changed during training"
            )));
        }
    }
    Ok((
        model.to_checkpoint(cfg.seed, cfg.steps as u64, cfg.schedules.clone()),
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plip::PlipConfig;

    pub(crate) fn tiny_assistant() -> Assistant {
        let plip = PlipModel::new(PlipConfig {
            patch_size: 8,
            enc_dim: 8,
            enc_layers: 1,
            heads: 2,
            proj_dim: 4,
            crop_size: 16,
            ..PlipConfig::default()
        })
        .unwrap();
        Assistant::from_plip(
            &plip,
            ConnectorConfig {
                tile_size: 16,
                max_tiles: 4,
                num_queries: 4,
                llm_dim: 16,
                heads: 1,
                seed: 1,
            },
            LmConfig {
                dim: 16,
                layers: 1,
                heads: 2,
                context: 64,
                ..LmConfig::default()
            },
            LoraConfig {
                rank: 4,
                alpha: 8.0,
                ..LoraConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let m = tiny_assistant();
        let mut cfg = m.cfg.clone();
        cfg.lm.dim = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_rejects_empty_data_and_missing_schedules() {
        let mut m = tiny_assistant();
        let cfg = StageConfig::for_stage(2, 2, 1, 1, 0).unwrap();
        assert!(train_stage(&mut m, &[], &cfg).is_err());
        let mut bad = cfg.clone();
        bad.schedules.remove(LORA);
        let ex = VqaExample {
            image: ImageArray::zeros(16, 16),
            question: "what?".into(),
            answer: "x".into(),
        };
        assert!(matches!(
            train_stage(&mut m, &[ex], &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny_assistant();
        let ck = m.to_checkpoint(3, 0, BTreeMap::new());
        assert_eq!(Assistant::from_checkpoint(&ck).unwrap(), m);
    }
}
