//! Named parameter storage and the transformer building blocks shared by the
//! vision tower, text tower, connector and language model.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Graph, Mat, Var};

/// A named, freezable collection of tensors. Iteration order is the key order,
/// which keeps serialization and hashing deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroup {
    tensors: BTreeMap<String, Mat>,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Little-endian binary encoding: magic, tensor count, then per tensor
    /// the name, shape and raw `f64` bits. Decoding is bit-exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(BLOB_MAGIC.len())? != BLOB_MAGIC {
            return Err("bad blob magic".into());
        }
        let count = cur.u64()? as usize;
        let mut group = ParamGroup::new();
        for _ in 0..count {
            let nlen = cur.u64()? as usize;
            let name = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_bits(cur.u64()?));
            }
            let m = Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())?;
            group.insert(name, m);
        }
        if cur.pos != bytes.len() {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(group)
    }

    /// SHA-256 of the binary encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

const BLOB_MAGIC: &[u8; 8] = b"PVLMTNS1";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        let s = self.bytes.get(self.pos..end).ok_or("truncated blob")?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, String> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// All parameter groups of a model, keyed by group name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    groups: BTreeMap<String, ParamGroup>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_group(&mut self, name: impl Into<String>, group: ParamGroup) {
        self.groups.insert(name.into(), group);
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.get(name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.get_mut(name)
    }

    pub fn remove_group(&mut self, name: &str) -> Option<ParamGroup> {
        self.groups.remove(name)
    }

    pub fn group_names(&self) -> impl Iterator<Item = &String> {
        self.groups.keys()
    }

    pub fn groups(&self) -> impl Iterator<Item = (&String, &ParamGroup)> {
        self.groups.iter()
    }

    pub fn get(&self, group: &str, name: &str) -> Option<&Mat> {
        self.groups.get(group).and_then(|g| g.get(name))
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.groups
            .iter()
            .map(|(k, g)| (k.clone(), g.content_hash()))
            .collect()
    }
}

/// Gradients keyed by group then tensor name.
pub type GradSet = BTreeMap<String, BTreeMap<String, Mat>>;

/// Adds `src` into `dst`, creating entries as needed.
pub fn accumulate_grads(dst: &mut GradSet, src: GradSet) {
    for (group, tensors) in src {
        let d = dst.entry(group).or_default();
        for (name, g) in tensors {
            match d.get_mut(&name) {
                Some(existing) => *existing += &g,
                None => {
                    d.insert(name, g);
                }
            }
        }
    }
}

pub fn scale_grads(grads: &mut GradSet, factor: f64) {
    for tensors in grads.values_mut() {
        for g in tensors.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// Low-rank adapters are looked up in `group` as `<layer>.lora_a` /
/// `<layer>.lora_b` whenever a linear layer of `base_group` runs.
#[derive(Clone, Debug)]
pub struct LoraBinding {
    pub base_group: String,
    pub group: String,
    pub scale: f64,
}

/// A computation graph bound to a parameter set. Parameters of trainable
/// groups enter as variables; everything else enters as constants.
pub struct Tape<'a> {
    pub g: Graph,
    params: &'a ParamSet,
    trainable: BTreeSet<String>,
    bound: BTreeMap<(String, String), Var>,
    lora: Option<LoraBinding>,
}

impl<'a> Tape<'a> {
    pub fn new<I, S>(params: &'a ParamSet, trainable: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            g: Graph::new(),
            params,
            trainable: trainable.into_iter().map(Into::into).collect(),
            bound: BTreeMap::new(),
            lora: None,
        }
    }

    pub fn inference(params: &'a ParamSet) -> Self {
        Self::new(params, std::iter::empty::<String>())
    }

    pub fn with_lora(mut self, lora: Option<LoraBinding>) -> Self {
        self.lora = lora;
        self
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.trainable.contains(group)
    }

    /// Binds a parameter into the graph (once per tape).
    ///
    /// Panics if the parameter does not exist: model code only asks for
    /// parameters it created.
    pub fn p(&mut self, group: &str, name: &str) -> Var {
        let key = (group.to_string(), name.to_string());
        if let Some(v) = self.bound.get(&key) {
            return *v;
        }
        let value = self
            .params
            .get(group, name)
            .unwrap_or_else(|| panic!("missing parameter {group}/{name}"))
            .clone();
        let v = if self.trainable.contains(group) {
            self.g.variable(value)
        } else {
            self.g.constant(value)
        };
        self.bound.insert(key, v);
        v
    }

    pub fn has_param(&self, group: &str, name: &str) -> bool {
        self.params.get(group, name).is_some()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.g.constant(m)
    }

    /// Collects gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Grads) -> GradSet {
        let mut out = GradSet::new();
        for ((group, name), v) in &self.bound {
            if !self.trainable.contains(group) {
                continue;
            }
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(self.g.value(*v).raw_dim()));
            out.entry(group.clone())
                .or_default()
                .insert(name.clone(), g);
        }
        out
    }

    /// `x · W + b` for the layer `name`, plus the scaled low-rank delta
    /// `(x Aᵀ) Bᵀ` when an adapter is attached to that layer.
    pub fn linear(&mut self, group: &str, name: &str, x: Var) -> Var {
        let w = self.p(group, &format!("{name}.weight"));
        let mut y = self.g.matmul(x, w);
        let bias = format!("{name}.bias");
        if self.has_param(group, &bias) {
            let b = self.p(group, &bias);
            y = self.g.add_row(y, b);
        }
        if let Some(lora) = self.lora.clone() {
            if lora.base_group == group {
                let a_name = format!("{name}.lora_a");
                if self.has_param(&lora.group, &a_name) {
                    let a = self.p(&lora.group, &a_name);
                    let b = self.p(&lora.group, &format!("{name}.lora_b"));
                    let xa = self.g.matmul_t(x, a);
                    let delta = self.g.matmul_t(xa, b);
                    let delta = self.g.scale(delta, lora.scale);
                    y = self.g.add(y, delta);
                }
            }
        }
        y
    }

    pub fn layer_norm(&mut self, group: &str, name: &str, x: Var) -> Var {
        let gamma = self.p(group, &format!("{name}.gamma"));
        let beta = self.p(group, &format!("{name}.beta"));
        self.g.layer_norm(x, gamma, beta, 1e-5)
    }

    /// Multi-head scaled dot-product attention from `xq` onto `xkv`.
    pub fn attention(
        &mut self,
        group: &str,
        prefix: &str,
        xq: Var,
        xkv: Var,
        heads: usize,
        causal: bool,
    ) -> Var {
        let q = self.linear(group, &format!("{prefix}.q_proj"), xq);
        let k = self.linear(group, &format!("{prefix}.k_proj"), xkv);
        let v = self.linear(group, &format!("{prefix}.v_proj"), xkv);
        let d = self.g.value(q).ncols();
        assert_eq!(d % heads, 0, "model dim must divide into heads");
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.g.slice_cols(q, h * dh, (h + 1) * dh),
                    self.g.slice_cols(k, h * dh, (h + 1) * dh),
                    self.g.slice_cols(v, h * dh, (h + 1) * dh),
                )
            };
            let scores = self.g.matmul_t(qh, kh);
            let mut scores = self.g.scale(scores, inv_sqrt);
            if causal {
                scores = self.g.causal_mask(scores);
            }
            let probs = self.g.softmax_rows(scores);
            outs.push(self.g.matmul(probs, vh));
        }
        let merged = if heads == 1 {
            outs[0]
        } else {
            self.g.concat_cols(&outs)
        };
        self.linear(group, &format!("{prefix}.o_proj"), merged)
    }

    /// Pre-norm transformer block: self-attention then a GELU MLP, each with
    /// a residual connection.
    pub fn block(&mut self, group: &str, prefix: &str, x: Var, heads: usize, causal: bool) -> Var {
        let h = self.layer_norm(group, &format!("{prefix}.ln1"), x);
        let a = self.attention(group, &format!("{prefix}.attn"), h, h, heads, causal);
        let x = self.g.add(x, a);
        let h = self.layer_norm(group, &format!("{prefix}.ln2"), x);
        let h = self.linear(group, &format!("{prefix}.mlp.fc1"), h);
        let h = self.g.gelu(h);
        let h = self.linear(group, &format!("{prefix}.mlp.fc2"), h);
        self.g.add(x, h)
    }
}

/// Xavier-uniform weight matrix.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

pub fn init_linear(
    g: &mut ParamGroup,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) {
    g.insert(format!("{name}.weight"), xavier(rng, d_in, d_out));
    g.insert(format!("{name}.bias"), Array2::zeros((1, d_out)));
}

pub fn init_layer_norm(g: &mut ParamGroup, name: &str, d: usize) {
    g.insert(format!("{name}.gamma"), Array2::ones((1, d)));
    g.insert(format!("{name}.beta"), Array2::zeros((1, d)));
}

pub fn init_attention(g: &mut ParamGroup, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
        init_linear(g, rng, &format!("{prefix}.{proj}"), d, d);
    }
}

pub fn init_block(
    g: &mut ParamGroup,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
) {
    init_layer_norm(g, &format!("{prefix}.ln1"), d);
    init_attention(g, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(g, &format!("{prefix}.ln2"), d);
    init_linear(g, rng, &format!("{prefix}.mlp.fc1"), d, d * mlp_ratio);
    init_linear(g, rng, &format!("{prefix}.mlp.fc2"), d * mlp_ratio, d);
}

/// Fixed 2-D sinusoidal position code: half the channels encode the row,
/// half the column.
pub fn sinusoidal_2d(rows: usize, cols: usize, d: usize) -> Mat {
    let half = d / 2;
    let mut out = Array2::zeros((rows * cols, d));
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            for (offset, pos) in [(0, r), (half, c)] {
                for k in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                    out[[i, offset + 2 * k]] = (pos as f64 * freq).sin();
                    out[[i, offset + 2 * k + 1]] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = ParamGroup::new();
        g.insert("b", xavier(&mut rng, 3, 5));
        g.insert("a", Array2::from_elem((1, 1), -0.0));
        let back = ParamGroup::from_bytes(&g.to_bytes()).unwrap();
        for (name, m) in g.iter() {
            let other = back.get(name).unwrap();
            let bits: Vec<u64> = m.iter().map(|v| v.to_bits()).collect();
            let obits: Vec<u64> = other.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, obits);
        }
        assert_eq!(g.content_hash(), back.content_hash());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut g = ParamGroup::new();
        g.insert("w", Array2::ones((2, 2)));
        let bytes = g.to_bytes();
        assert!(ParamGroup::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ParamGroup::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn frozen_groups_bind_as_constants() {
        let mut set = ParamSet::new();
        let mut a = ParamGroup::new();
        a.insert("w", Array2::ones((2, 2)));
        let mut b = ParamGroup::new();
        b.insert("w", Array2::ones((2, 2)));
        set.insert_group("frozen", a);
        set.insert_group("live", b);
        let mut tape = Tape::new(&set, ["live"]);
        let x = tape.constant(Array2::ones((1, 2)));
        let w1 = tape.p("frozen", "w");
        let w2 = tape.p("live", "w");
        let h = tape.g.matmul(x, w1);
        let h = tape.g.matmul(h, w2);
        let loss = tape.g.sum(h);
        let grads = tape.g.backward(loss);
        let pg = tape.param_grads(&grads);
        assert!(pg.contains_key("live"));
        assert!(!pg.contains_key("frozen"));
    }
}
