//! The pixel-sequence classifier: linear pixel embedding, a stack of
//! pre-norm encoder blocks whose attention runs through the kernel-space
//! paths, mean pooling, and a linear head.
//!
//! Parameters live in a [`ParamStore`] keyed by name; each forward pass
//! inserts them as leaves on a fresh tape. Pooling is a mean over tokens
//! rather than a class token: a class token has no pixel coordinate and
//! would not participate in the positional constructions.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::attention::{
    multi_head_attention, AttentionImpl, AttnContext, AttnParams, Dropout, HeadLayout,
};
use crate::favor::FeatureMap;
use crate::positional::{absolute_sinusoidal, build_neighbor_map, EncodingMode, PixelCoords};
use crate::rng::{chacha, split, split_indexed};
use crate::tensor::checkpoint::{self, Buf, CheckpointError, Entry};
use crate::tensor::{Dtype, Element, ReduceKind, Result, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Random feature draws per head.
    pub feature_count: usize,
    pub mode: EncodingMode,
    /// Maximum relative distance for strategy 2.
    pub clip: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
    pub classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    /// Strategy-1 lengthscales per head per axis.
    pub lengthscales: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 256,
            depth: 6,
            heads: 8,
            feature_count: 128,
            mode: EncodingMode::Absolute,
            clip: 6,
            dropout: 0.1,
            ffn_mult: 4,
            classes: 10,
            image_h: 32,
            image_w: 32,
            channels: 1,
            lengthscales: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(TensorError::Invalid {
                op: "model_config",
                detail: format!("dim {} must be divisible by heads {}", self.dim, self.heads),
            });
        }
        if self.mode == EncodingMode::S2 && self.heads % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "model_config",
                detail: format!("strategy 2 needs an even head count, got {}", self.heads),
            });
        }
        if self.mode == EncodingMode::Absolute && self.dim % 4 != 0 {
            return Err(TensorError::Invalid {
                op: "model_config",
                detail: format!("absolute encodings need dim % 4 == 0, got {}", self.dim),
            });
        }
        if self.depth == 0 || self.classes == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(TensorError::Invalid {
                op: "model_config",
                detail: "depth, classes, and image size must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::Invalid {
                op: "model_config",
                detail: format!("dropout {} outside [0, 1)", self.dropout),
            });
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.dim / self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.image_h * self.image_w
    }

    pub fn coords(&self) -> PixelCoords {
        PixelCoords::new(self.image_h, self.image_w)
    }

    pub fn layout(&self) -> Result<HeadLayout> {
        HeadLayout::for_mode(self.mode, self.heads)
    }

    /// Width of the key projection: position heads never consume keys.
    pub fn key_width(&self) -> usize {
        match self.mode {
            EncodingMode::S2 => self.d_head() * (self.heads / 2),
            _ => self.dim,
        }
    }

    /// Input dimension of a content head's feature map (content features
    /// plus, under strategy 1, the per-axis positional features).
    pub fn content_phi_dim(&self) -> usize {
        match self.mode {
            EncodingMode::S1 => self.d_head() + 4 * self.lengthscales,
            _ => self.d_head(),
        }
    }
}

// ── Parameter storage ───────────────────────────────────────────────

pub struct ParamStore<E> {
    entries: Vec<(String, Tensor<E>)>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    /// Initialize all learnable parameters for a config. Projection
    /// weights are uniform in `(-sqrt(1/fan_in), sqrt(1/fan_in))`, biases
    /// zero, normalization at identity, strategy-1 lengthscales on the
    /// geometric ladder with the rotation blocks at identity.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = chacha(split(seed, "init"));
        let mut store = ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        let linear = |store: &mut Self,
                      rng: &mut rand_chacha::ChaCha8Rng,
                      name: String,
                      fan_in: usize,
                      fan_out: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            store.insert(
                name,
                Tensor::from_f64_slice(vec![fan_in, fan_out], &data).unwrap(),
            );
        };
        let zeros = |store: &mut Self, name: String, n: usize| {
            store.insert(name, Tensor::zeros(vec![n]));
        };
        let ones = |store: &mut Self, name: String, n: usize| {
            store.insert(name, Tensor::full(vec![n], E::one()));
        };

        linear(&mut store, &mut rng, "embed.w".into(), cfg.channels, cfg.dim);
        zeros(&mut store, "embed.b".into(), cfg.dim);

        let layout = cfg.layout()?;
        let dh = cfg.d_head();
        for l in 0..cfg.depth {
            let p = |part: &str| format!("block{l}.{part}");
            ones(&mut store, p("ln1.g"), cfg.dim);
            zeros(&mut store, p("ln1.b"), cfg.dim);
            linear(&mut store, &mut rng, p("attn.wq"), cfg.dim, cfg.dim);
            zeros(&mut store, p("attn.bq"), cfg.dim);
            linear(&mut store, &mut rng, p("attn.wk"), cfg.dim, cfg.key_width());
            zeros(&mut store, p("attn.bk"), cfg.key_width());
            linear(&mut store, &mut rng, p("attn.wv"), cfg.dim, cfg.dim);
            zeros(&mut store, p("attn.bv"), cfg.dim);
            linear(&mut store, &mut rng, p("attn.wo"), cfg.dim, cfg.dim);
            zeros(&mut store, p("attn.bo"), cfg.dim);
            if cfg.mode == EncodingMode::S1 {
                let ladder = crate::positional::S1AxisParams::geometric_omegas(cfg.lengthscales);
                for axis in ["row", "col"] {
                    let omegas: Vec<f64> = (0..cfg.heads).flat_map(|_| ladder.clone()).collect();
                    store.insert(
                        p(&format!("attn.s1.{axis}.omega")),
                        Tensor::from_f64_slice(vec![cfg.heads, cfg.lengthscales], &omegas)
                            .unwrap(),
                    );
                    store.insert(
                        p(&format!("attn.s1.{axis}.alpha")),
                        Tensor::full(vec![cfg.heads, cfg.lengthscales], E::one()),
                    );
                    store.insert(
                        p(&format!("attn.s1.{axis}.beta")),
                        Tensor::zeros(vec![cfg.heads, cfg.lengthscales]),
                    );
                }
            }
            for &h in &layout.position {
                linear(
                    &mut store,
                    &mut rng,
                    p(&format!("attn.head{h}.rel_w")),
                    cfg.clip + 1,
                    dh,
                );
            }
            ones(&mut store, p("ln2.g"), cfg.dim);
            zeros(&mut store, p("ln2.b"), cfg.dim);
            let ffn = cfg.dim * cfg.ffn_mult;
            linear(&mut store, &mut rng, p("ffn.w1"), cfg.dim, ffn);
            zeros(&mut store, p("ffn.b1"), ffn);
            linear(&mut store, &mut rng, p("ffn.w2"), ffn, cfg.dim);
            zeros(&mut store, p("ffn.b2"), cfg.dim);
        }
        ones(&mut store, "final_ln.g".into(), cfg.dim);
        zeros(&mut store, "final_ln.b".into(), cfg.dim);
        linear(&mut store, &mut rng, "head.w".into(), cfg.dim, cfg.classes);
        zeros(&mut store, "head.b".into(), cfg.classes);
        Ok(store)
    }

    fn insert(&mut self, name: String, value: Tensor<E>) {
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<E> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalar count.
    pub fn count_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

// ── Feature maps per layer and head ─────────────────────────────────

/// The random feature maps of one model instance: `maps[layer][head]`.
/// Only `(seed, draw_epoch)` are persisted; the Gaussian matrices are
/// regenerated on load.
pub struct FeatureSet {
    pub maps: Vec<Vec<FeatureMap>>,
    pub seed: u64,
    pub draw_epoch: u64,
}

pub fn draw_feature_maps(cfg: &ModelConfig, seed: u64, draw_epoch: u64) -> Result<FeatureSet> {
    let layout = cfg.layout()?;
    let mut maps = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let mut per_head = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let d = if layout.content.contains(&h) {
                cfg.content_phi_dim()
            } else {
                cfg.d_head()
            };
            let head_seed = split_indexed(seed, "fm", (l * cfg.heads + h) as u64);
            per_head.push(FeatureMap::draw(
                head_seed,
                draw_epoch,
                cfg.feature_count,
                d,
            )?);
        }
        maps.push(per_head);
    }
    Ok(FeatureSet {
        maps,
        seed,
        draw_epoch,
    })
}

// ── Forward pass ────────────────────────────────────────────────────

/// Parameter leaves of one tape, keyed by store name.
pub struct LeafSet {
    map: HashMap<String, Var>,
    names: Vec<String>,
}

impl LeafSet {
    pub fn insert_all<E: Element>(
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        trainable: bool,
    ) -> Self {
        let mut map = HashMap::new();
        let mut names = Vec::new();
        for (name, tensor) in store.iter() {
            let var = tape.leaf(tensor.clone(), trainable);
            map.insert(name.to_string(), var);
            names.push(name.to_string());
        }
        LeafSet { map, names }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Linear pixel embedding: each token's channel vector projected to
/// `dim`, plus the absolute encoding when that mode is active.
/// `images` is `[b, l, channels]`.
pub fn embed<E: Element>(
    tape: &mut Tape<E>,
    leaves: &LeafSet,
    cfg: &ModelConfig,
    images: Var,
) -> Result<Var> {
    let shape = tape.shape(images).to_vec();
    if shape.len() != 3 || shape[1] != cfg.seq_len() || shape[2] != cfg.channels {
        return Err(TensorError::Invalid {
            op: "embed",
            detail: format!(
                "expected images [batch, {}, {}], got {shape:?}",
                cfg.seq_len(),
                cfg.channels
            ),
        });
    }
    let proj = tape.matmul(images, leaves.var("embed.w"))?;
    let mut x = tape.add_row(proj, leaves.var("embed.b"))?;
    if cfg.mode == EncodingMode::Absolute {
        let enc = absolute_sinusoidal(&cfg.coords(), cfg.dim)?;
        let enc = Tensor::<E>::from_f64_slice(enc.shape().to_vec(), enc.data())?;
        let enc = tape.constant(enc);
        let enc = tape.repeat_batch(enc, shape[0])?;
        x = tape.add(x, enc)?;
    }
    Ok(x)
}

fn reborrow<'a>(d: &'a mut Option<&mut Dropout>) -> Option<&'a mut Dropout> {
    d.as_mut().map(|x| &mut **x)
}

/// Full forward pass to class logits `[b, classes]`.
pub fn forward<E: Element>(
    tape: &mut Tape<E>,
    leaves: &LeafSet,
    cfg: &ModelConfig,
    fms: &FeatureSet,
    images: Var,
    implementation: AttentionImpl,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    forward_with_offset(
        tape,
        leaves,
        cfg,
        fms,
        images,
        implementation,
        dropout,
        (0.0, 0.0),
    )
}

/// Forward pass with an explicit strategy-1 coordinate-grid offset; the
/// verification suite uses it to confirm logits do not depend on the
/// grid's absolute placement.
#[allow(clippy::too_many_arguments)]
pub fn forward_with_offset<E: Element>(
    tape: &mut Tape<E>,
    leaves: &LeafSet,
    cfg: &ModelConfig,
    fms: &FeatureSet,
    images: Var,
    implementation: AttentionImpl,
    mut dropout: Option<&mut Dropout>,
    s1_coord_offset: (f64, f64),
) -> Result<Var> {
    let layout = cfg.layout()?;
    let coords = cfg.coords();
    let neighbor_map = if cfg.mode == EncodingMode::S2 {
        Some(build_neighbor_map(&coords, cfg.clip))
    } else {
        None
    };
    let mut x = embed(tape, leaves, cfg, images)?;
    for l in 0..cfg.depth {
        let p = |part: &str| format!("block{l}.{part}");
        let a = tape.layer_norm(x, leaves.var(&p("ln1.g")), leaves.var(&p("ln1.b")), LN_EPS)?;
        let attn_params = AttnParams {
            wq: leaves.var(&p("attn.wq")),
            bq: leaves.var(&p("attn.bq")),
            wk: leaves.var(&p("attn.wk")),
            bk: leaves.var(&p("attn.bk")),
            wv: leaves.var(&p("attn.wv")),
            bv: leaves.var(&p("attn.bv")),
            wo: leaves.var(&p("attn.wo")),
            bo: leaves.var(&p("attn.bo")),
            s1_row: (cfg.mode == EncodingMode::S1).then(|| {
                (
                    leaves.var(&p("attn.s1.row.omega")),
                    leaves.var(&p("attn.s1.row.alpha")),
                    leaves.var(&p("attn.s1.row.beta")),
                )
            }),
            s1_col: (cfg.mode == EncodingMode::S1).then(|| {
                (
                    leaves.var(&p("attn.s1.col.omega")),
                    leaves.var(&p("attn.s1.col.alpha")),
                    leaves.var(&p("attn.s1.col.beta")),
                )
            }),
            rel_w: layout
                .position
                .iter()
                .map(|h| leaves.var(&p(&format!("attn.head{h}.rel_w"))))
                .collect(),
        };
        let ctx = AttnContext {
            mode: cfg.mode,
            layout: &layout,
            d_head: cfg.d_head(),
            coords: &coords,
            feature_maps: &fms.maps[l],
            neighbor_map: neighbor_map.as_ref(),
            implementation,
            eps: crate::attention::DENOM_EPS,
            s1_coord_offset,
        };
        let at = multi_head_attention(tape, a, &attn_params, &ctx, reborrow(&mut dropout))?;
        x = tape.add(x, at)?;

        let b = tape.layer_norm(x, leaves.var(&p("ln2.g")), leaves.var(&p("ln2.b")), LN_EPS)?;
        let h1 = tape.matmul(b, leaves.var(&p("ffn.w1")))?;
        let h1 = tape.add_row(h1, leaves.var(&p("ffn.b1")))?;
        let mut h = tape.relu(h1)?;
        if let Some(d) = reborrow(&mut dropout) {
            h = tape.dropout(h, d.p, &mut d.rng)?;
        }
        let h2 = tape.matmul(h, leaves.var(&p("ffn.w2")))?;
        let f = tape.add_row(h2, leaves.var(&p("ffn.b2")))?;
        x = tape.add(x, f)?;
    }
    let pooled = tape.reduce(ReduceKind::Mean, x, Some(1))?;
    let normed = tape.layer_norm(
        pooled,
        leaves.var("final_ln.g"),
        leaves.var("final_ln.b"),
        LN_EPS,
    )?;
    let logits = tape.matmul(normed, leaves.var("head.w"))?;
    tape.add_row(logits, leaves.var("head.b"))
}

// ── Checkpoint glue ─────────────────────────────────────────────────

pub fn save_checkpoint<E: Element>(
    path: &Path,
    store: &ParamStore<E>,
    favor_seed: u64,
    draw_epoch: u64,
) -> std::result::Result<(), CheckpointError> {
    let mut entries: Vec<Entry> = store
        .iter()
        .map(|(name, t)| Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: match E::DTYPE {
                Dtype::F32 => Buf::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
                Dtype::F64 => Buf::F64(t.data().iter().map(|v| v.as_f64()).collect()),
            },
        })
        .collect();
    entries.push(Entry {
        name: "favor.seed".into(),
        shape: vec![2],
        data: Buf::F64(u64_to_f64_pair(favor_seed)),
    });
    entries.push(Entry {
        name: "favor.draw_epoch".into(),
        shape: vec![2],
        data: Buf::F64(u64_to_f64_pair(draw_epoch)),
    });
    checkpoint::save(path, &entries)
}

// u64 values survive the float-buffer format as exact (hi, lo) u32 pairs.
fn u64_to_f64_pair(v: u64) -> Vec<f64> {
    vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

fn f64_pair_to_u64(pair: &[f64]) -> u64 {
    ((pair[0] as u64) << 32) | (pair[1] as u64)
}

pub struct LoadedCheckpoint {
    pub entries: Vec<Entry>,
    pub favor_seed: u64,
    pub draw_epoch: u64,
    pub dtype: Dtype,
}

pub fn load_checkpoint(path: &Path) -> std::result::Result<LoadedCheckpoint, CheckpointError> {
    let entries = checkpoint::load(path)?;
    let favor_seed = f64_pair_to_u64(&checkpoint::find(&entries, "favor.seed")?.data.to_f64_vec());
    let draw_epoch =
        f64_pair_to_u64(&checkpoint::find(&entries, "favor.draw_epoch")?.data.to_f64_vec());
    let dtype = entries
        .iter()
        .find(|e| !e.name.starts_with("favor."))
        .map(|e| e.data.dtype())
        .unwrap_or(Dtype::F32);
    Ok(LoadedCheckpoint {
        entries,
        favor_seed,
        draw_epoch,
        dtype,
    })
}

impl<E: Element> ParamStore<E> {
    /// Rebuild a store from checkpoint entries; shapes come from the
    /// config so mismatches surface as errors rather than silent
    /// truncation.
    pub fn from_checkpoint(cfg: &ModelConfig, loaded: &LoadedCheckpoint) -> Result<Self> {
        let template = ParamStore::<E>::init(cfg, 0)?;
        let mut store = ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        for (name, t) in template.iter() {
            let entry = loaded
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| TensorError::Invalid {
                    op: "load_checkpoint",
                    detail: format!("checkpoint is missing parameter {name:?}"),
                })?;
            if entry.shape != t.shape() {
                return Err(TensorError::Invalid {
                    op: "load_checkpoint",
                    detail: format!(
                        "parameter {name:?}: checkpoint shape {:?} vs config shape {:?}",
                        entry.shape,
                        t.shape()
                    ),
                });
            }
            if entry.data.dtype() != E::DTYPE {
                return Err(TensorError::Invalid {
                    op: "load_checkpoint",
                    detail: format!(
                        "parameter {name:?}: checkpoint dtype {} vs requested {}",
                        entry.data.dtype().name(),
                        E::DTYPE.name()
                    ),
                });
            }
            let data = entry.data.to_f64_vec();
            store.insert(
                name.to_string(),
                Tensor::from_f64_slice(entry.shape.clone(), &data)?,
            );
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(mode: EncodingMode) -> ModelConfig {
        ModelConfig {
            dim: 16,
            depth: 2,
            heads: 2,
            feature_count: 8,
            mode,
            clip: 2,
            dropout: 0.1,
            ffn_mult: 2,
            classes: 10,
            image_h: 3,
            image_w: 3,
            channels: 1,
            lengthscales: 2,
        }
    }

    fn random_images(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = chacha(seed);
        let n = b * cfg.seq_len() * cfg.channels;
        Tensor::new(
            vec![b, cfg.seq_len(), cfg.channels],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn logits_for(
        cfg: &ModelConfig,
        store: &ParamStore<f64>,
        fms: &FeatureSet,
        images: Tensor<f64>,
        implementation: AttentionImpl,
    ) -> Vec<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let leaves = LeafSet::insert_all(&mut tape, store, false);
        let img = tape.constant(images);
        let out = forward(&mut tape, &leaves, cfg, fms, img, implementation, None).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn forward_shapes_and_finiteness_all_modes() {
        for mode in EncodingMode::ALL {
            let cfg = tiny_cfg(mode);
            let store = ParamStore::<f64>::init(&cfg, 1).unwrap();
            let fms = draw_feature_maps(&cfg, 2, 0).unwrap();
            let logits = logits_for(
                &cfg,
                &store,
                &fms,
                random_images(2, &cfg, 3),
                AttentionImpl::Favor,
            );
            assert_eq!(logits.len(), 2 * 10, "mode {mode}");
            assert!(logits.iter().all(|v| v.is_finite()), "mode {mode}");
        }
    }

    #[test]
    fn zero_image_gives_equal_tokens_mode_none() {
        let cfg = tiny_cfg(EncodingMode::None);
        let store = ParamStore::<f64>::init(&cfg, 1).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let leaves = LeafSet::insert_all(&mut tape, &store, false);
        let img = tape.constant(Tensor::zeros(vec![1, cfg.seq_len(), 1]));
        let x = embed(&mut tape, &leaves, &cfg, img).unwrap();
        let data = tape.value(x).data();
        let first = data[..cfg.dim].to_vec();
        for row in data.chunks(cfg.dim) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn single_pixel_change_is_local_in_embedding() {
        let cfg = tiny_cfg(EncodingMode::None);
        let store = ParamStore::<f64>::init(&cfg, 1).unwrap();
        let l = cfg.seq_len();
        let embed_of = |pixels: Vec<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let leaves = LeafSet::insert_all(&mut tape, &store, false);
            let img = tape.constant(Tensor::new(vec![1, l, 1], pixels).unwrap());
            let x = embed(&mut tape, &leaves, &cfg, img).unwrap();
            tape.value(x).data().to_vec()
        };
        let base = embed_of(vec![0.25; l]);
        let mut changed = vec![0.25; l];
        changed[4] = 0.9;
        let after = embed_of(changed);
        for t in 0..l {
            let same =
                base[t * cfg.dim..(t + 1) * cfg.dim] == after[t * cfg.dim..(t + 1) * cfg.dim];
            assert_eq!(same, t != 4, "token {t}");
        }
    }

    #[test]
    fn token_permutation_leaves_logits_unchanged_mode_none() {
        let cfg = tiny_cfg(EncodingMode::None);
        let store = ParamStore::<f64>::init(&cfg, 5).unwrap();
        let fms = draw_feature_maps(&cfg, 9, 0).unwrap();
        let images = random_images(1, &cfg, 11);
        let l = cfg.seq_len();
        let perm: Vec<usize> = (0..l).map(|i| (i * 4 + 2) % l).collect();
        {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..l).collect::<Vec<_>>(), "perm is a bijection");
        }
        let permuted: Vec<f64> = perm.iter().map(|&i| images.data()[i]).collect();
        let permuted = Tensor::new(vec![1, l, 1], permuted).unwrap();
        let a = logits_for(&cfg, &store, &fms, images, AttentionImpl::Favor);
        let b = logits_for(&cfg, &store, &fms, permuted, AttentionImpl::Favor);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        for seed in [1u64, 2, 3] {
            for mode in [EncodingMode::Absolute, EncodingMode::S1, EncodingMode::S2] {
                let cfg = tiny_cfg(mode);
                let store = ParamStore::<f64>::init(&cfg, seed).unwrap();
                let fms = draw_feature_maps(&cfg, seed + 100, 0).unwrap();
                let mut tape: Tape<f64> = Tape::new();
                let leaves = LeafSet::insert_all(&mut tape, &store, true);
                let img = tape.constant(random_images(2, &cfg, seed + 7));
                let out = forward(
                    &mut tape,
                    &leaves,
                    &cfg,
                    &fms,
                    img,
                    AttentionImpl::Favor,
                    None,
                )
                .unwrap();
                let loss = tape.cross_entropy(out, &[3, 8]).unwrap();
                tape.backward(loss).unwrap();
                for name in leaves.names() {
                    let g = tape
                        .grad(leaves.var(name))
                        .unwrap_or_else(|| panic!("{mode}: no gradient for {name}"));
                    assert!(
                        g.iter().any(|v| *v != 0.0),
                        "{mode} seed {seed}: gradient identically zero for {name}"
                    );
                }
            }
        }
    }

    #[test]
    fn count_params_trivial_case() {
        let mut store = ParamStore::<f64> {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        store.insert("w".into(), Tensor::zeros(vec![2, 3]));
        assert_eq!(store.count_params(), 6);
    }

    #[test]
    fn full_size_param_counts_match_reported_values() {
        // 4.7M for the content-only variants, 4.5M for strategy 2
        for (mode, want) in [
            (EncodingMode::None, 4.7e6),
            (EncodingMode::Absolute, 4.7e6),
            (EncodingMode::S1, 4.7e6),
            (EncodingMode::S2, 4.5e6),
        ] {
            let cfg = ModelConfig {
                mode,
                ..ModelConfig::default()
            };
            let store = ParamStore::<f32>::init(&cfg, 0).unwrap();
            let count = store.count_params() as f64;
            let rel = (count - want).abs() / want;
            assert!(rel < 0.10, "{mode}: {count} vs {want} (rel {rel:.3})");
        }
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let cfg = tiny_cfg(EncodingMode::S2);
        let store = ParamStore::<f32>::init(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.eqpf");
        save_checkpoint(&path, &store, 77, 4).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.favor_seed, 77);
        assert_eq!(loaded.draw_epoch, 4);
        assert_eq!(loaded.dtype, Dtype::F32);
        let back = ParamStore::<f32>::from_checkpoint(&cfg, &loaded).unwrap();
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn exact_path_runs_all_modes() {
        for mode in EncodingMode::ALL {
            let cfg = tiny_cfg(mode);
            let store = ParamStore::<f64>::init(&cfg, 1).unwrap();
            let fms = draw_feature_maps(&cfg, 2, 0).unwrap();
            let logits = logits_for(
                &cfg,
                &store,
                &fms,
                random_images(1, &cfg, 3),
                AttentionImpl::Exact,
            );
            assert!(logits.iter().all(|v| v.is_finite()), "mode {mode}");
        }
    }
}
