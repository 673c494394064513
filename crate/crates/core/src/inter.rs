//! Cross-person relation stage.
//!
//! Each person's `[h × w × d]` features are max-pooled by `R`, flattened and
//! concatenated slot by slot into one `L × d` token sequence
//! (`L = (h/R)(w/R)N`). Empty slots hold masked noise tokens. Relation blocks
//! run masked multi-head self-attention with no positional code, so the
//! stage is equivariant to slot order. Each valid slot is then upsampled by a
//! depthwise transposed convolution, added to its stage-one features, and
//! mapped to keypoint heatmaps.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::layers::{self, BlockShape};
use crate::model::ModelError;
use crate::numcore::{Graph, NumError, ParamStore, Scalar, Tensor, Var};
use crate::scenes::SceneRecord;

pub const PREFIX: &str = "inter";

#[derive(Debug, Clone, PartialEq)]
pub struct InterConfig {
    /// Downsampling ratio `R` (pool window and stride, deconvolution stride).
    pub ratio: usize,
    /// Slots per group `N`.
    pub persons: usize,
    pub blocks: usize,
    pub heads: usize,
    /// MLP hidden width as a fraction of `d`.
    pub mlp_ratio: f64,
    /// Standard deviation of padded-slot noise tokens.
    pub noise_scale: f64,
    pub dump_attention: bool,
}

impl Default for InterConfig {
    fn default() -> Self {
        InterConfig { ratio: 2, persons: 3, blocks: 2, heads: 4, mlp_ratio: 0.25, noise_scale: 1.0, dump_attention: false }
    }
}

impl InterConfig {
    /// Token grid `(h/R, w/R)` for feature resolution `(h, w)`.
    pub fn grid(&self, feature: (usize, usize)) -> (usize, usize) {
        (feature.0 / self.ratio, feature.1 / self.ratio)
    }

    /// Sequence length `L = (h/R)(w/R)N`.
    pub fn sequence_len(&self, feature: (usize, usize)) -> usize {
        let (gh, gw) = self.grid(feature);
        gh * gw * self.persons
    }

    pub fn hidden(&self, d: usize) -> usize {
        ((d as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self, feature: (usize, usize), d: usize) -> Result<(), ModelError> {
        let r = self.ratio;
        if r == 0 || r % 2 != 0 {
            return Err(ModelError::config("ratio", format!("{r} must be a positive even number")));
        }
        if feature.0 % r != 0 || feature.1 % r != 0 {
            return Err(ModelError::config("ratio", format!("{r} does not divide the {}×{} feature grid", feature.0, feature.1)));
        }
        if self.persons == 0 {
            return Err(ModelError::config("persons", "group size must be at least 1"));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(ModelError::config("inter_heads", format!("{} does not divide d = {d}", self.heads)));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return Err(ModelError::config("inter_mlp_ratio", format!("{} must be positive", self.mlp_ratio)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(ModelError::config("noise_scale", format!("{} must be non-negative", self.noise_scale)));
        }
        Ok(())
    }

    fn block_shape(&self, d: usize) -> BlockShape {
        BlockShape { d, hidden: self.hidden(d), heads: self.heads, out_proj: false, qkv_bias: false }
    }
}

/// Registers every stage-two parameter under the `inter.` prefix. None of
/// them depend on `N`.
pub fn init_params<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    cfg: &InterConfig,
    d: usize,
    k: usize,
    rng: &mut R,
) -> Result<(), NumError> {
    for b in 0..cfg.blocks {
        layers::init_block(store, &format!("inter.block{b}"), cfg.block_shape(d), rng)?;
    }
    store.insert("inter.deconv.w", bilinear_kernel(cfg.ratio, d))?;
    layers::init_head(store, "inter.head", d, k, rng)
}

/// Per-channel bilinear upsampling stencil `[2R × 2R × d]`.
pub fn bilinear_kernel<T: Scalar>(r: usize, d: usize) -> Tensor<T> {
    let k = 2 * r;
    let center = (k as f64 - 1.0) / 2.0;
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / r as f64;
    let mut data = Vec::with_capacity(k * k * d);
    for ky in 0..k {
        for kx in 0..k {
            data.extend(std::iter::repeat_n(T::lit(tap(ky) * tap(kx)), d));
        }
    }
    Tensor::from_vec(&[k, k, d], data).expect("sized above")
}

/// Which persons fill the `N` slots of one group; `None` is a padded slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonGroup {
    pub scene_id: u64,
    pub slots: Vec<Option<usize>>,
}

impl PersonGroup {
    fn padded(scene_id: u64, persons: Vec<usize>, n: usize) -> Self {
        let mut slots: Vec<Option<usize>> = persons.into_iter().map(Some).collect();
        slots.resize(n, None);
        PersonGroup { scene_id, slots }
    }

    pub fn valid(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.slots.iter().enumerate().filter_map(|(s, p)| p.map(|p| (s, p)))
    }

    pub fn valid_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.valid_count() == 0 {
            return Err(ModelError::EmptyGroup);
        }
        Ok(())
    }
}

fn non_empty(scene: &SceneRecord, n: usize) -> Result<(), ModelError> {
    if scene.persons.is_empty() {
        return Err(ModelError::EmptyGroup);
    }
    if n == 0 {
        return Err(ModelError::config("persons", "group size must be at least 1"));
    }
    Ok(())
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// The `N − 1` persons nearest to `target` by box-centre distance, ties by
/// lower index, preceded by the target itself.
pub fn nearest_group(scene: &SceneRecord, target: usize, n: usize) -> Result<PersonGroup, ModelError> {
    non_empty(scene, n)?;
    let centers: Vec<(f64, f64)> = scene.persons.iter().map(|p| p.bbox.center()).collect();
    let c = *centers.get(target).ok_or_else(|| ModelError::config("target", format!("person {target} not in scene")))?;
    let mut others: Vec<usize> = (0..centers.len()).filter(|&i| i != target).collect();
    others.sort_by(|&a, &b| dist2(centers[a], c).total_cmp(&dist2(centers[b], c)).then(a.cmp(&b)));
    let mut members = vec![target];
    members.extend(others.into_iter().take(n - 1));
    Ok(PersonGroup::padded(scene.scene_id, members, n))
}

/// Training-time grouping: everyone (plus padding) when `P ≤ N`, otherwise a
/// uniformly random target with its nearest neighbours.
pub fn select_group_training<R: Rng>(scene: &SceneRecord, n: usize, rng: &mut R) -> Result<PersonGroup, ModelError> {
    non_empty(scene, n)?;
    let p = scene.persons.len();
    if p <= n {
        return Ok(PersonGroup::padded(scene.scene_id, (0..p).collect(), n));
    }
    nearest_group(scene, rng.random_range(0..p), n)
}

/// Ablation grouping: `min(P, N)` persons drawn uniformly without replacement.
pub fn select_group_random<R: Rng>(scene: &SceneRecord, n: usize, rng: &mut R) -> Result<PersonGroup, ModelError> {
    non_empty(scene, n)?;
    let p = scene.persons.len();
    let picked = sample(rng, p, p.min(n)).into_vec();
    Ok(PersonGroup::padded(scene.scene_id, picked, n))
}

/// Test-time grouping: persons sorted by box centre (x, then y, then index)
/// and cut into consecutive groups of `N`; the last group is padded.
pub fn sliding_window_groups(scene: &SceneRecord, n: usize) -> Result<Vec<PersonGroup>, ModelError> {
    non_empty(scene, n)?;
    let mut order: Vec<usize> = (0..scene.persons.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (scene.persons[a].bbox.center(), scene.persons[b].bbox.center());
        ca.0.total_cmp(&cb.0).then(ca.1.total_cmp(&cb.1)).then(a.cmp(&b))
    });
    Ok(order.chunks(n).map(|c| PersonGroup::padded(scene.scene_id, c.to_vec(), n)).collect())
}

/// Max-pools an `[h·w × d]` token matrix on its `h × w` grid, giving
/// `[(h/R)·(w/R) × d]`.
pub fn downsample_features<T: Scalar>(
    g: &mut Graph<'_, T>,
    features: Var,
    feature: (usize, usize),
    r: usize,
) -> Result<Var, NumError> {
    let d = g.shape(features)[1];
    let x = g.reshape(features, &[feature.0, feature.1, d])?;
    let p = g.maxpool2d(x, r)?;
    g.reshape(p, &[(feature.0 / r) * (feature.1 / r), d])
}

/// Graph handles of a built token sequence.
#[derive(Debug, Clone)]
pub struct SequenceVars {
    /// `[L × d]`
    pub tokens: Var,
    /// Per-token validity, length `L`.
    pub mask: Vec<bool>,
    pub grid: (usize, usize),
}

impl SequenceVars {
    pub fn slot_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Pools and concatenates the slots' features in slot order; empty slots
/// get `N(0, 1)·noise_scale` tokens and are masked out.
pub fn build_sequence<T: Scalar, R: Rng>(
    g: &mut Graph<'_, T>,
    cfg: &InterConfig,
    slots: &[Option<Var>],
    feature: (usize, usize),
    d: usize,
    rng: &mut R,
) -> Result<SequenceVars, ModelError> {
    if !slots.iter().any(Option::is_some) {
        return Err(ModelError::EmptyGroup);
    }
    let grid = cfg.grid(feature);
    let per = grid.0 * grid.1;
    let mut parts = Vec::with_capacity(slots.len());
    let mut mask = Vec::with_capacity(per * slots.len());
    for slot in slots {
        match slot {
            Some(f) => {
                parts.push(downsample_features(g, *f, feature, cfg.ratio)?);
                mask.extend(std::iter::repeat_n(true, per));
            }
            None => {
                let noise = (0..per * d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::lit(cfg.noise_scale * z)
                    })
                    .collect();
                parts.push(g.input(Tensor::from_vec(&[per, d], noise)?));
                mask.extend(std::iter::repeat_n(false, per));
            }
        }
    }
    let tokens = g.concat_rows(&parts)?;
    Ok(SequenceVars { tokens, mask, grid })
}

/// Relation blocks over the whole sequence. Returns the output tokens and
/// one attention node per block.
pub fn relation_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &InterConfig,
    seq: &SequenceVars,
) -> Result<(Var, Vec<Var>), NumError> {
    let d = g.shape(seq.tokens)[1];
    let mut x = seq.tokens;
    let mut attn = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let (y, a) = layers::block(g, &format!("inter.block{b}"), cfg.block_shape(d), x, &seq.mask)?;
        x = y;
        attn.push(a);
    }
    Ok((x, attn))
}

/// Per valid slot: unflatten, upsample by `R`, add the slot's stage-one
/// features, apply the final keypoint head. Empty slots yield `None`.
pub fn inter_head<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &InterConfig,
    tokens: Var,
    seq: &SequenceVars,
    skip: &[Option<Var>],
    feature: (usize, usize),
) -> Result<Vec<Option<Var>>, NumError> {
    let d = g.shape(tokens)[1];
    let per = seq.slot_tokens();
    if g.shape(tokens)[0] != per * skip.len() {
        return Err(NumError::Dimension {
            op: "inter_head",
            detail: format!("{} tokens for {} slots of {per}", g.shape(tokens)[0], skip.len()),
        });
    }
    let w = g.param_named("inter.deconv.w")?;
    let mut out = Vec::with_capacity(skip.len());
    for (s, f) in skip.iter().enumerate() {
        let Some(f) = f else {
            out.push(None);
            continue;
        };
        if g.shape(*f) != [feature.0 * feature.1, d] {
            return Err(NumError::Dimension {
                op: "inter_head",
                detail: format!("skip features {:?} for a {}×{} grid", g.shape(*f), feature.0, feature.1),
            });
        }
        let t = g.slice_rows(tokens, s * per, per)?;
        let t = g.reshape(t, &[seq.grid.0, seq.grid.1, d])?;
        let up = g.conv_transpose2d(t, w, cfg.ratio)?;
        let up = g.reshape(up, &[feature.0 * feature.1, d])?;
        let fused = g.add(up, *f)?;
        out.push(Some(layers::linear(g, "inter.head", fused, true)?));
    }
    Ok(out)
}

/// Attention probabilities of one group run, `[blocks × heads × L × L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub scene_id: u64,
    pub slots: Vec<Option<usize>>,
    /// Token grid per slot; token `t` is slot `t / (gh·gw)`, cell
    /// `(t % (gh·gw)) / gw, t % gw`.
    pub grid: (usize, usize),
    pub blocks: usize,
    pub heads: usize,
    pub tokens: usize,
    pub mask: Vec<bool>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl AttentionExport {
    pub fn matrix(&self, block: usize, head: usize) -> &[f32] {
        let l2 = self.tokens * self.tokens;
        &self.data[(block * self.heads + head) * l2..][..l2]
    }

    /// `(slot, row, col)` of token `t`.
    pub fn coordinates(&self, t: usize) -> (usize, usize, usize) {
        let per = self.grid.0 * self.grid.1;
        (t / per, (t % per) / self.grid.1, t % self.grid.1)
    }
}

/// Copies the attention probabilities out of a finished forward pass, or
/// `None` when the dump toggle is off.
pub fn export_attention<T: Scalar>(
    g: &Graph<'_, T>,
    cfg: &InterConfig,
    attention: &[Var],
    seq: &SequenceVars,
    group: &PersonGroup,
) -> Option<AttentionExport> {
    if !cfg.dump_attention || attention.is_empty() {
        return None;
    }
    let mut data = Vec::new();
    let mut heads = 0;
    let mut tokens = 0;
    for &a in attention {
        let (p, h, l) = g.attention_probs(a)?;
        heads = h;
        tokens = l;
        data.extend(p.iter().map(|v| v.as_f64() as f32));
    }
    Some(AttentionExport {
        scene_id: group.scene_id,
        slots: group.slots.clone(),
        grid: seq.grid,
        blocks: attention.len(),
        heads,
        tokens,
        mask: seq.mask.clone(),
        data,
    })
}
