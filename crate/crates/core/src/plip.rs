//! Dual-encoder language-image pretraining: an image tower over patch
//! tokens, a text tower over byte-fallback tokens, projection heads into a
//! shared embedding space, and a cross-attention matching head.
//!
//! Training minimises `itc + itm` where the matching negatives are drawn from
//! the batch in proportion to their contrastive similarity.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::checkpoint::Checkpoint;
use crate::data::PairRecord;
use crate::error::{invalid, Error, Result};
use crate::image::{load_image, ImageArray};
use crate::losses::{itc_graph, itm_labels, sample_hard_negatives};
use crate::nn::{self, ParamGroup, ParamSet, Tape};
use crate::optim::AdamW;
use crate::schedules::ScheduleSpec;
use crate::tokenizer::{check_sequence, Tokenizer, VOCAB_SIZE};

pub const IMAGE_TOWER: &str = "image_tower";
pub const TEXT_TOWER: &str = "text_tower";
pub const ITM_HEAD: &str = "itm_head";
pub const TEMPERATURE: &str = "temperature";

pub const TAU_MIN: f64 = 0.001;
pub const TAU_MAX: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlipConfig {
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub heads: usize,
    pub proj_dim: usize,
    /// Initial value of the learnable contrastive temperature.
    pub temperature: f64,
    pub max_text_len: usize,
    pub vocab: usize,
    /// Side of the square training crops.
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for PlipConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            enc_dim: 128,
            enc_layers: 2,
            heads: 4,
            proj_dim: 64,
            temperature: 0.07,
            max_text_len: 100,
            vocab: VOCAB_SIZE,
            crop_size: 224,
            seed: 0,
        }
    }
}

impl PlipConfig {
    /// CPU-sized dimensions for tests and the bundled fixtures.
    pub fn desk() -> Self {
        Self {
            patch_size: 8,
            enc_dim: 32,
            enc_layers: 2,
            heads: 2,
            proj_dim: 32,
            crop_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.patch_size == 0 || !self.crop_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "patch_size {} must divide crop_size {}",
                self.patch_size, self.crop_size
            ));
        }
        if self.heads == 0 || !self.enc_dim.is_multiple_of(self.heads) {
            return err(format!(
                "enc_dim {} not divisible by heads {}",
                self.enc_dim, self.heads
            ));
        }
        if !self.enc_dim.is_multiple_of(4) {
            return err(format!("enc_dim {} must be a multiple of 4", self.enc_dim));
        }
        if self.vocab != VOCAB_SIZE {
            return err(format!(
                "vocab must match the shared tokenizer ({VOCAB_SIZE})"
            ));
        }
        if self.max_text_len == 0 || self.proj_dim == 0 || self.enc_layers == 0 {
            return err("max_text_len, proj_dim and enc_layers must be >= 1".into());
        }
        Ok(())
    }
}

/// Image-tower hyperparameters, enough to run the tower from any group name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTowerSpec {
    pub patch_size: usize,
    pub enc_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl From<&PlipConfig> for ImageTowerSpec {
    fn from(c: &PlipConfig) -> Self {
        Self {
            patch_size: c.patch_size,
            enc_dim: c.enc_dim,
            layers: c.enc_layers,
            heads: c.heads,
        }
    }
}

/// Number of patch tokens for an `h×w` image after bottom/right padding.
pub fn patch_count(h: usize, w: usize, patch: usize) -> usize {
    h.div_ceil(patch) * w.div_ceil(patch)
}

fn patchify(image: &ImageArray, patch: usize) -> (Mat, usize, usize) {
    let padded = image.pad_to_multiple(patch);
    let (gr, gc) = (padded.height() / patch, padded.width() / patch);
    let dim = patch * patch * 3;
    let mut out = Array2::zeros((gr * gc, dim));
    for r in 0..gr {
        for c in 0..gc {
            let mut k = 0;
            let row = r * gc + c;
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..3 {
                        out[[row, k]] = padded.get(r * patch + y, c * patch + x, ch);
                        k += 1;
                    }
                }
            }
        }
    }
    (out, gr, gc)
}

/// Patch tokens (`L×enc_dim`) of the image tower stored in `group`.
pub fn image_tokens(
    tape: &mut Tape,
    group: &str,
    spec: &ImageTowerSpec,
    image: &ImageArray,
) -> Result<Var> {
    if image.height() < spec.patch_size || image.width() < spec.patch_size {
        return Err(invalid!(
            "image {}×{} is smaller than one {}px patch",
            image.height(),
            image.width(),
            spec.patch_size
        ));
    }
    let (patches, gr, gc) = patchify(image, spec.patch_size);
    let x = tape.constant(patches);
    let mut h = tape.linear(group, "patch_embed", x);
    let pos = tape.constant(nn::sinusoidal_2d(gr, gc, spec.enc_dim));
    h = tape.g.add(h, pos);
    for i in 0..spec.layers {
        h = tape.block(group, &format!("layers.{i}"), h, spec.heads, false);
    }
    Ok(tape.layer_norm(group, "ln_f", h))
}

fn pooled_embedding(tape: &mut Tape, group: &str, proj: &str, pooled: Var) -> Var {
    let p = tape.linear(group, proj, pooled);
    tape.g.l2_normalize_rows(p)
}

pub fn init_image_tower(
    rng: &mut ChaCha8Rng,
    spec: &ImageTowerSpec,
    proj_dim: usize,
) -> ParamGroup {
    let mut g = ParamGroup::new();
    let d = spec.enc_dim;
    nn::init_linear(
        &mut g,
        rng,
        "patch_embed",
        spec.patch_size * spec.patch_size * 3,
        d,
    );
    for i in 0..spec.layers {
        nn::init_block(&mut g, rng, &format!("layers.{i}"), d, 4);
    }
    nn::init_layer_norm(&mut g, "ln_f", d);
    nn::init_linear(&mut g, rng, "img_proj", d, proj_dim);
    g
}

fn init_text_tower(rng: &mut ChaCha8Rng, cfg: &PlipConfig) -> ParamGroup {
    let mut g = ParamGroup::new();
    let d = cfg.enc_dim;
    g.insert("tok_embed", nn::uniform(rng, cfg.vocab, d, 0.1));
    g.insert("pos_embed", nn::uniform(rng, cfg.max_text_len, d, 0.02));
    for i in 0..cfg.enc_layers {
        nn::init_block(&mut g, rng, &format!("layers.{i}"), d, 4);
    }
    nn::init_layer_norm(&mut g, "ln_f", d);
    nn::init_linear(&mut g, rng, "txt_proj", d, cfg.proj_dim);
    g
}

fn init_itm_head(rng: &mut ChaCha8Rng, cfg: &PlipConfig) -> ParamGroup {
    let mut g = ParamGroup::new();
    let d = cfg.enc_dim;
    nn::init_layer_norm(&mut g, "ln_q", d);
    nn::init_attention(&mut g, rng, "xattn", d);
    nn::init_layer_norm(&mut g, "ln_out", d);
    nn::init_linear(&mut g, rng, "head", d, 1);
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlipModel {
    pub cfg: PlipConfig,
    pub params: ParamSet,
}

/// Tokens plus the unit-norm pooled embedding of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub tokens: Mat,
    pub pooled: Mat,
}

impl PlipModel {
    pub fn new(cfg: PlipConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        params.insert_group(
            IMAGE_TOWER,
            init_image_tower(&mut rng, &(&cfg).into(), cfg.proj_dim),
        );
        params.insert_group(TEXT_TOWER, init_text_tower(&mut rng, &cfg));
        params.insert_group(ITM_HEAD, init_itm_head(&mut rng, &cfg));
        let mut tau = ParamGroup::new();
        tau.insert("tau", Array2::from_elem((1, 1), cfg.temperature));
        params.insert_group(TEMPERATURE, tau);
        Ok(Self { cfg, params })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != "plip" {
            return Err(Error::Checkpoint(format!(
                "expected a plip checkpoint, found `{}`",
                ck.meta.kind
            )));
        }
        let cfg: PlipConfig = serde_json::from_value(ck.meta.config.clone())?;
        cfg.validate()?;
        for g in [IMAGE_TOWER, TEXT_TOWER, ITM_HEAD, TEMPERATURE] {
            if ck.params.group(g).is_none() {
                return Err(Error::Checkpoint(format!(
                    "plip checkpoint lacks group `{g}`"
                )));
            }
        }
        Ok(Self {
            cfg,
            params: ck.params.clone(),
        })
    }

    pub fn tower_spec(&self) -> ImageTowerSpec {
        (&self.cfg).into()
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(TEMPERATURE, "tau").expect("tau")[[0, 0]]
    }

    pub fn encode_image_on(&self, tape: &mut Tape, image: &ImageArray) -> Result<(Var, Var)> {
        let tokens = image_tokens(tape, IMAGE_TOWER, &self.tower_spec(), image)?;
        let mean = tape.g.mean_rows(tokens);
        Ok((
            tokens,
            pooled_embedding(tape, IMAGE_TOWER, "img_proj", mean),
        ))
    }

    pub fn encode_text_on(&self, tape: &mut Tape, ids: &[usize]) -> Result<(Var, Var)> {
        check_sequence(ids, self.cfg.max_text_len, self.cfg.vocab)?;
        let tok = tape.p(TEXT_TOWER, "tok_embed");
        let pos = tape.p(TEXT_TOWER, "pos_embed");
        let e = tape.g.gather_rows(tok, ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = tape.g.gather_rows(pos, &positions);
        let mut h = tape.g.add(e, p);
        for i in 0..self.cfg.enc_layers {
            h = tape.block(TEXT_TOWER, &format!("layers.{i}"), h, self.cfg.heads, false);
        }
        let h = tape.layer_norm(TEXT_TOWER, "ln_f", h);
        let first = tape.g.slice_rows(h, 0, 1);
        Ok((h, pooled_embedding(tape, TEXT_TOWER, "txt_proj", first)))
    }

    /// Matching logit: text tokens attend to patch tokens, the first fused
    /// token feeds a linear head.
    pub fn itm_logit_on(&self, tape: &mut Tape, text_tokens: Var, patch_tokens: Var) -> Var {
        let q = tape.layer_norm(ITM_HEAD, "ln_q", text_tokens);
        let a = tape.attention(ITM_HEAD, "xattn", q, patch_tokens, self.cfg.heads, false);
        let h = tape.g.add(text_tokens, a);
        let h = tape.layer_norm(ITM_HEAD, "ln_out", h);
        let first = tape.g.slice_rows(h, 0, 1);
        tape.linear(ITM_HEAD, "head", first)
    }

    pub fn encode_image(&self, image: &ImageArray) -> Result<Encoded> {
        let mut tape = Tape::inference(&self.params);
        let (t, p) = self.encode_image_on(&mut tape, image)?;
        Ok(Encoded {
            tokens: tape.g.value(t).clone(),
            pooled: tape.g.value(p).clone(),
        })
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<Encoded> {
        let mut tape = Tape::inference(&self.params);
        let (t, p) = self.encode_text_on(&mut tape, ids)?;
        Ok(Encoded {
            tokens: tape.g.value(t).clone(),
            pooled: tape.g.value(p).clone(),
        })
    }

    pub fn itm_logit(&self, image: &ImageArray, ids: &[usize]) -> Result<f64> {
        let mut tape = Tape::inference(&self.params);
        let (it, _) = self.encode_image_on(&mut tape, image)?;
        let (tt, _) = self.encode_text_on(&mut tape, ids)?;
        let z = self.itm_logit_on(&mut tape, tt, it);
        Ok(tape.g.scalar(z))
    }

    /// Builds `itc + itm` for one batch. Returns `(total, itc, itm)`.
    pub fn batch_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        batch: &[(&ImageArray, &[usize])],
        rng: &mut R,
    ) -> Result<(Var, Var, Var)> {
        let n = batch.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "batch of {n} pair(s): matching loss needs at least 2 for in-batch negatives"
            )));
        }
        let mut img_tok = Vec::with_capacity(n);
        let mut img_emb = Vec::with_capacity(n);
        let mut txt_tok = Vec::with_capacity(n);
        let mut txt_emb = Vec::with_capacity(n);
        for (image, ids) in batch {
            let (t, p) = self.encode_image_on(tape, image)?;
            img_tok.push(t);
            img_emb.push(p);
            let (t, p) = self.encode_text_on(tape, ids)?;
            txt_tok.push(t);
            txt_emb.push(p);
        }
        let iv = tape.g.concat_rows(&img_emb);
        let tv = tape.g.concat_rows(&txt_emb);
        let tau = tape.p(TEMPERATURE, "tau");
        let itc = itc_graph(&mut tape.g, iv, tv, tau);

        let sim = tape.g.value(iv).dot(&tape.g.value(tv).t()) / tape.g.scalar(tau);
        let (neg_txt, neg_img) = sample_hard_negatives(&sim, rng)?;
        let mut logits = Vec::with_capacity(3 * n);
        for i in 0..n {
            logits.push(self.itm_logit_on(tape, txt_tok[i], img_tok[i]));
        }
        for i in 0..n {
            logits.push(self.itm_logit_on(tape, txt_tok[neg_txt[i]], img_tok[i]));
        }
        for j in 0..n {
            logits.push(self.itm_logit_on(tape, txt_tok[j], img_tok[neg_img[j]]));
        }
        let z = tape.g.concat_rows(&logits);
        let itm = tape.g.bce_with_logits(z, &itm_labels(n));
        let total = tape.g.add(itc, itm);
        Ok((total, itc, itm))
    }

    pub fn clamp_temperature(&mut self) {
        if let Some(t) = self
            .params
            .group_mut(TEMPERATURE)
            .and_then(|g| g.get_mut("tau"))
        {
            t[[0, 0]] = t[[0, 0]].clamp(TAU_MIN, TAU_MAX);
        }
    }

    pub fn to_checkpoint(&self, step: u64, sched: &ScheduleSpec) -> Checkpoint {
        let mut schedules = BTreeMap::new();
        schedules.insert("plip".to_string(), sched.clone());
        Checkpoint::new(
            "plip",
            self.cfg.seed,
            step,
            serde_json::to_value(&self.cfg).expect("config serializes"),
            schedules,
            self.params.clone(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlipTrainOptions {
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for PlipTrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub itc: f64,
    pub itm: f64,
    pub batch: usize,
}

/// Random `crop`×`crop` window when the image is large enough, otherwise a
/// resize to that size.
pub fn training_crop<R: Rng>(image: &ImageArray, crop: usize, rng: &mut R) -> ImageArray {
    if image.height() >= crop && image.width() >= crop {
        let top = rng.gen_range(0..=image.height() - crop);
        let left = rng.gen_range(0..=image.width() - crop);
        image.crop(top, left, crop, crop)
    } else {
        image.resize(crop, crop)
    }
}

/// Trains from scratch for `sched.total_steps` steps with seeded batching,
/// cropping and negative sampling.
pub fn train_plip(
    manifest: &[PairRecord],
    cfg: &PlipConfig,
    sched: &ScheduleSpec,
    opts: &PlipTrainOptions,
    base_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    if manifest.is_empty() {
        return Err(invalid!("empty pretraining manifest"));
    }
    sched.validate()?;
    let batch_size = opts.batch_size.min(manifest.len());
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "effective batch of {batch_size}: hard negatives need at least 2 pairs per batch"
        )));
    }
    let mut model = PlipModel::new(cfg.clone())?;
    let tokenizer = Tokenizer::new();

    let mut images: HashMap<&str, ImageArray> = HashMap::new();
    for r in manifest {
        r.validate()?;
        if !images.contains_key(r.image_ref.as_str()) {
            images.insert(&r.image_ref, load_image(&r.image_ref, base_dir)?);
        }
    }
    let texts: Vec<Vec<usize>> = manifest
        .iter()
        .map(|r| tokenizer.encode_for_text_tower(&r.caption, cfg.max_text_len))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut opt = AdamW::new(opts.weight_decay);
    let trainable = [IMAGE_TOWER, TEXT_TOWER, ITM_HEAD, TEMPERATURE];
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(sched.total_steps);

    for step in 0..sched.total_steps {
        if order.len() < batch_size {
            let mut epoch: Vec<usize> = (0..manifest.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let idx: Vec<usize> = order.drain(..batch_size).collect();
        let crops: Vec<ImageArray> = idx
            .iter()
            .map(|&i| {
                training_crop(
                    &images[manifest[i].image_ref.as_str()],
                    cfg.crop_size,
                    &mut rng,
                )
            })
            .collect();
        let batch: Vec<(&ImageArray, &[usize])> = idx
            .iter()
            .zip(&crops)
            .map(|(&i, img)| (img, texts[i].as_slice()))
            .collect();

        let lr = sched.lr(step)?;
        let (grads, entry) = {
            let mut tape = Tape::new(&model.params, trainable);
            let (total, itc, itm) = model.batch_loss(&mut tape, &batch, &mut rng)?;
            let g = tape.g.backward(total);
            let entry = StepLog {
                step,
                lr,
                total: tape.g.scalar(total),
                itc: tape.g.scalar(itc),
                itm: tape.g.scalar(itm),
                batch: batch_size,
            };
            (tape.param_grads(&g), entry)
        };
        if !entry.total.is_finite() {
            return Err(invalid!("non-finite loss at step {step}"));
        }
        opt.step(&mut model.params, &grads, |_| lr);
        model.clamp_temperature();
        log.push(entry);
    }
    Ok((model.to_checkpoint(sched.total_steps as u64, sched), log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PlipConfig {
        PlipConfig {
            patch_size: 4,
            enc_dim: 8,
            enc_layers: 1,
            heads: 2,
            proj_dim: 4,
            crop_size: 8,
            ..PlipConfig::default()
        }
    }

    #[test]
    fn patch_grid_arithmetic() {
        assert_eq!(patch_count(224, 224, 16), 196);
        assert_eq!(patch_count(17, 17, 16), 4);
    }

    #[test]
    fn encode_image_shapes_and_norm() {
        let m = PlipModel::new(tiny()).unwrap();
        let img = ImageArray::from_fn(9, 13, |y, x, c| ((y + x + c) % 5) as f64 / 4.0);
        let e = m.encode_image(&img).unwrap();
        assert_eq!(e.tokens.dim(), (patch_count(9, 13, 4), 8));
        let n: f64 = e.pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(m.encode_image(&ImageArray::zeros(3, 10)).is_err());
    }

    #[test]
    fn text_length_limits() {
        let m = PlipModel::new(tiny()).unwrap();
        assert!(m.encode_text(&[]).is_err());
        assert!(m.encode_text(&vec![5; 100]).is_ok());
        assert!(m.encode_text(&vec![5; 101]).is_err());
        assert!(m.encode_text(&[600]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.crop_size = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_pair_batch_is_a_config_error() {
        let m = PlipModel::new(tiny()).unwrap();
        let img = ImageArray::zeros(8, 8);
        let ids = vec![1, 2];
        let mut tape = Tape::new(&m.params, [IMAGE_TOWER]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = m.batch_loss(&mut tape, &[(&img, ids.as_slice())], &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
