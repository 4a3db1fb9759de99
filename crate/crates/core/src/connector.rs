//! Scale-invariant connector.
//!
//! An image of any size is cut into a grid of fixed-size tiles chosen to
//! match its aspect ratio, plus one global thumbnail. Each tile goes through
//! the (frozen) image tower; the per-tile patch tokens, each tile preceded
//! by a learned position token, form a variable-length pool. A fixed set of
//! learned queries cross-attends to that pool and is projected to the
//! language model width, so the output is always `K×D_llm`.

use std::cmp::Ordering;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::error::{invalid, Error, Result};
use crate::image::ImageArray;
use crate::nn::{self, ParamGroup, ParamSet, Tape};
use crate::plip::{image_tokens, ImageTowerSpec};

pub const CONNECTOR: &str = "connector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConnectorConfig {
    pub tile_size: usize,
    pub max_tiles: usize,
    /// Number of learned queries, i.e. visual tokens handed to the LM.
    pub num_queries: usize,
    pub llm_dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            tile_size: 224,
            max_tiles: 6,
            num_queries: 32,
            llm_dim: 256,
            heads: 1,
            seed: 0,
        }
    }
}

impl ConnectorConfig {
    pub fn desk() -> Self {
        Self {
            tile_size: 64,
            num_queries: 8,
            llm_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tiles == 0 || self.num_queries == 0 || self.tile_size == 0 || self.llm_dim == 0
        {
            return Err(Error::Config(
                "connector tile_size, max_tiles, num_queries and llm_dim must be >= 1".into(),
            ));
        }
        if self.heads == 0 {
            return Err(Error::Config("connector heads must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub tile_size: usize,
    pub resized_h: usize,
    pub resized_w: usize,
    pub includes_thumbnail: bool,
}

impl TilePlan {
    pub fn num_tiles(&self) -> usize {
        self.grid_rows * self.grid_cols + usize::from(self.includes_thumbnail)
    }
}

/// Aspect mismatch of grid `(r, c)` for an `h×w` image as an exact fraction
/// `max(c·h, r·w) / min(c·h, r·w)`; its log is `|log(c/r) − log(w/h)|`.
fn aspect_badness(r: usize, c: usize, h: usize, w: usize) -> (u128, u128) {
    let a = c as u128 * h as u128;
    let b = r as u128 * w as u128;
    (a.max(b), a.min(b))
}

fn cmp_fraction(x: (u128, u128), y: (u128, u128)) -> Ordering {
    (x.0 * y.1).cmp(&(y.0 * x.1))
}

/// Picks the grid with the best aspect fit among all `r·c ≤ max_tiles`.
/// Among equally good fits the larger grid wins, but only when the image
/// has enough pixels for it (`h·w > ½·tile²·r·c`); then fewer rows win.
pub fn plan_tiles(h: usize, w: usize, cfg: &ConnectorConfig) -> Result<TilePlan> {
    if h == 0 || w == 0 {
        return Err(invalid!("image must be at least 1×1, got {h}×{w}"));
    }
    cfg.validate()?;
    let mut best_fit: Vec<(usize, usize)> = Vec::new();
    for r in 1..=cfg.max_tiles {
        for c in 1..=cfg.max_tiles / r {
            let order = match best_fit.first() {
                None => Ordering::Less,
                Some(&(br, bc)) => {
                    cmp_fraction(aspect_badness(r, c, h, w), aspect_badness(br, bc, h, w))
                }
            };
            match order {
                Ordering::Less => best_fit = vec![(r, c)],
                Ordering::Equal => best_fit.push((r, c)),
                Ordering::Greater => {}
            }
        }
    }
    let smallest = best_fit
        .iter()
        .map(|(r, c)| r * c)
        .min()
        .expect("1×1 always fits");
    let pixels = 2 * h as u128 * w as u128;
    let tile_area = (cfg.tile_size * cfg.tile_size) as u128;
    let (rows, cols) = best_fit
        .into_iter()
        .filter(|(r, c)| r * c == smallest || pixels > tile_area * (r * c) as u128)
        .min_by(|a, b| (b.0 * b.1).cmp(&(a.0 * a.1)).then(a.0.cmp(&b.0)))
        .expect("smallest tie always qualifies");
    Ok(TilePlan {
        grid_rows: rows,
        grid_cols: cols,
        tile_size: cfg.tile_size,
        resized_h: rows * cfg.tile_size,
        resized_w: cols * cfg.tile_size,
        includes_thumbnail: true,
    })
}

/// Grid position of a tile; the thumbnail sits at `(0, 0)` with its own flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TilePos {
    pub row: usize,
    pub col: usize,
    pub thumbnail: bool,
}

/// Grid tiles in row-major order followed by the thumbnail.
pub fn tile_image(
    image: &ImageArray,
    cfg: &ConnectorConfig,
) -> Result<(TilePlan, Vec<(TilePos, ImageArray)>)> {
    let plan = plan_tiles(image.height(), image.width(), cfg)?;
    let resized = image.resize(plan.resized_h, plan.resized_w);
    let t = plan.tile_size;
    let mut tiles = Vec::with_capacity(plan.num_tiles());
    for r in 0..plan.grid_rows {
        for c in 0..plan.grid_cols {
            let pos = TilePos {
                row: r,
                col: c,
                thumbnail: false,
            };
            tiles.push((pos, resized.crop(r * t, c * t, t, t)));
        }
    }
    let thumb = TilePos {
        row: 0,
        col: 0,
        thumbnail: true,
    };
    tiles.push((thumb, image.resize(t, t)));
    Ok((plan, tiles))
}

/// Stitches the grid tiles (thumbnail excluded) back into the resized image.
pub fn reassemble(plan: &TilePlan, tiles: &[(TilePos, ImageArray)]) -> ImageArray {
    let mut out = ImageArray::zeros(plan.resized_h, plan.resized_w);
    for (pos, tile) in tiles.iter().filter(|(p, _)| !p.thumbnail) {
        out.paste(tile, pos.row * plan.tile_size, pos.col * plan.tile_size);
    }
    out
}

pub fn init_connector(rng: &mut ChaCha8Rng, cfg: &ConnectorConfig, enc_dim: usize) -> ParamGroup {
    let mut g = ParamGroup::new();
    g.insert("tile_row", nn::uniform(rng, cfg.max_tiles, enc_dim, 0.02));
    g.insert("tile_col", nn::uniform(rng, cfg.max_tiles, enc_dim, 0.02));
    g.insert("tile_kind", nn::uniform(rng, 2, enc_dim, 0.02));
    g.insert("queries", nn::uniform(rng, cfg.num_queries, enc_dim, 0.5));
    nn::init_layer_norm(&mut g, "ln_q", enc_dim);
    nn::init_layer_norm(&mut g, "ln_kv", enc_dim);
    nn::init_attention(&mut g, rng, "xattn", enc_dim);
    nn::init_layer_norm(&mut g, "ln_out", enc_dim);
    nn::init_linear(&mut g, rng, "proj1", enc_dim, cfg.llm_dim);
    nn::init_linear(&mut g, rng, "proj2", cfg.llm_dim, cfg.llm_dim);
    g
}

/// Learned position token for a tile.
pub fn tile_position_on(tape: &mut Tape, pos: TilePos) -> Var {
    let row = tape.p(CONNECTOR, "tile_row");
    let col = tape.p(CONNECTOR, "tile_col");
    let kind = tape.p(CONNECTOR, "tile_kind");
    let r = tape.g.gather_rows(row, &[pos.row]);
    let c = tape.g.gather_rows(col, &[pos.col]);
    let k = tape.g.gather_rows(kind, &[usize::from(pos.thumbnail)]);
    let rc = tape.g.add(r, c);
    tape.g.add(rc, k)
}

/// Concatenates every tile's position token and patch tokens in order.
pub fn build_pool_on(tape: &mut Tape, tiles: &[(TilePos, Var)]) -> Var {
    let mut parts = Vec::with_capacity(tiles.len() * 2);
    for (pos, tokens) in tiles {
        parts.push(tile_position_on(tape, *pos));
        parts.push(*tokens);
    }
    tape.g.concat_rows(&parts)
}

/// Learned queries attend to the pool, then an MLP maps them to `llm_dim`.
pub fn resample_on(tape: &mut Tape, cfg: &ConnectorConfig, pool: Var) -> Result<Var> {
    if tape.g.value(pool).nrows() == 0 {
        return Err(invalid!("empty visual token pool"));
    }
    let queries = tape.p(CONNECTOR, "queries");
    let q = tape.layer_norm(CONNECTOR, "ln_q", queries);
    let kv = tape.layer_norm(CONNECTOR, "ln_kv", pool);
    let a = tape.attention(CONNECTOR, "xattn", q, kv, cfg.heads, false);
    let h = tape.g.add(queries, a);
    let h = tape.layer_norm(CONNECTOR, "ln_out", h);
    let h = tape.linear(CONNECTOR, "proj1", h);
    let h = tape.g.gelu(h);
    Ok(tape.linear(CONNECTOR, "proj2", h))
}

/// Full composition: tile, encode each tile with the tower stored in
/// `encoder_group`, pool, resample.
pub fn connect_on(
    tape: &mut Tape,
    image: &ImageArray,
    encoder_group: &str,
    tower: &ImageTowerSpec,
    cfg: &ConnectorConfig,
) -> Result<Var> {
    let (_, tiles) = tile_image(image, cfg)?;
    let mut encoded = Vec::with_capacity(tiles.len());
    for (pos, tile) in &tiles {
        encoded.push((*pos, image_tokens(tape, encoder_group, tower, tile)?));
    }
    let pool = build_pool_on(tape, &encoded);
    resample_on(tape, cfg, pool)
}

/// Patch tokens of every tile, computed outside any training graph. With a
/// frozen encoder these can be cached per image.
pub fn encode_tiles(
    params: &ParamSet,
    image: &ImageArray,
    encoder_group: &str,
    tower: &ImageTowerSpec,
    cfg: &ConnectorConfig,
) -> Result<Vec<(TilePos, Mat)>> {
    let (_, tiles) = tile_image(image, cfg)?;
    let mut tape = Tape::inference(params);
    tiles
        .iter()
        .map(|(pos, tile)| {
            let v = image_tokens(&mut tape, encoder_group, tower, tile)?;
            Ok((*pos, tape.g.value(v).clone()))
        })
        .collect()
}

/// Connector output from cached tile tokens.
pub fn connect_cached_on(
    tape: &mut Tape,
    cached: &[(TilePos, Mat)],
    cfg: &ConnectorConfig,
) -> Result<Var> {
    let tiles: Vec<(TilePos, Var)> = cached
        .iter()
        .map(|(pos, m)| (*pos, tape.constant(m.clone())))
        .collect();
    let pool = build_pool_on(tape, &tiles);
    resample_on(tape, cfg, pool)
}

/// Resamples an already-built pool (`M×enc_dim`) to `K×llm_dim`.
pub fn resample(params: &ParamSet, cfg: &ConnectorConfig, pool: &Mat) -> Result<Mat> {
    if pool.nrows() == 0 {
        return Err(invalid!("empty visual token pool"));
    }
    let mut tape = Tape::inference(params);
    let p = tape.constant(pool.clone());
    let out = resample_on(&mut tape, cfg, p)?;
    Ok(tape.g.value(out).clone())
}

pub fn connect(
    params: &ParamSet,
    image: &ImageArray,
    encoder_group: &str,
    tower: &ImageTowerSpec,
    cfg: &ConnectorConfig,
) -> Result<Mat> {
    let mut tape = Tape::inference(params);
    let v = connect_on(&mut tape, image, encoder_group, tower, cfg)?;
    Ok(tape.g.value(v).clone())
}

/// Empty pool placeholder used in error-path tests.
pub fn empty_pool(enc_dim: usize) -> Mat {
    Array2::zeros((0, enc_dim))
}
