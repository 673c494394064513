//! Single-person encoder: 4×4 patch tokens, fixed 2-D sinusoidal positions,
//! a stack of pre-norm transformer blocks, and an intermediate keypoint head.
//!
//! Feature maps are carried as `[h·w × d]` token matrices in row-major grid
//! order; [`FeatureMap`] is the owned form.

use rand::Rng;

use crate::heatmap::HeatmapStack;
use crate::layers::{self, BlockShape};
use crate::model::ModelError;
use crate::numcore::{Graph, NumError, ParamStore, Scalar, Tensor, Var};

/// Input-to-feature resolution ratio.
pub const PATCH: usize = 4;
pub const PREFIX: &str = "intra";

#[derive(Debug, Clone, PartialEq)]
pub struct IntraConfig {
    /// Patch resolution `(H_in, W_in)`.
    pub input: (usize, usize),
    pub channels_in: usize,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub k: usize,
}

impl Default for IntraConfig {
    fn default() -> Self {
        IntraConfig { input: (64, 48), channels_in: 1, d: 48, blocks: 4, heads: 4, mlp_ratio: 4, k: 5 }
    }
}

impl IntraConfig {
    /// Feature resolution `(h, w) = (H_in/4, W_in/4)`.
    pub fn feature(&self) -> (usize, usize) {
        (self.input.0 / PATCH, self.input.1 / PATCH)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.feature();
        h * w
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (hi, wi) = self.input;
        if hi == 0 || hi % PATCH != 0 {
            return Err(ModelError::config("input_height", format!("{hi} is not a positive multiple of {PATCH}")));
        }
        if wi == 0 || wi % PATCH != 0 {
            return Err(ModelError::config("input_width", format!("{wi} is not a positive multiple of {PATCH}")));
        }
        if self.channels_in == 0 {
            return Err(ModelError::config("channels_in", "must be positive"));
        }
        if self.d == 0 || self.d % 4 != 0 {
            return Err(ModelError::config("d", format!("{} is not a positive multiple of 4", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::config("intra_heads", format!("{} does not divide d = {}", self.heads, self.d)));
        }
        if self.mlp_ratio == 0 {
            return Err(ModelError::config("intra_mlp_ratio", "must be positive"));
        }
        if self.k == 0 {
            return Err(ModelError::config("k", "must be positive"));
        }
        Ok(())
    }

    fn block_shape(&self) -> BlockShape {
        BlockShape { d: self.d, hidden: self.d * self.mlp_ratio, heads: self.heads, out_proj: true, qkv_bias: true }
    }
}

/// One person's encoder output, `[h × w × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
    pub person: usize,
}

/// Registers every stage-one parameter under the `intra.` prefix.
pub fn init_params<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &IntraConfig, rng: &mut R) -> Result<(), NumError> {
    layers::init_linear(store, "intra.embed", PATCH * PATCH * cfg.channels_in, cfg.d, true, rng)?;
    for b in 0..cfg.blocks {
        layers::init_block(store, &format!("intra.block{b}"), cfg.block_shape(), rng)?;
    }
    layers::init_head(store, "intra.head", cfg.d, cfg.k, rng)
}

/// Fixed 2-D sinusoidal code `[h·w × d]`: the first `d/2` channels encode
/// the row, the rest the column, each as interleaved sin/cos pairs.
pub fn sinusoidal_encoding<T: Scalar>(h: usize, w: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let pairs = half / 2;
    let mut out = vec![T::zero(); h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..][..d];
            for (base, pos) in [(0, y), (half, x)] {
                for i in 0..pairs {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    let a = pos as f64 * freq;
                    row[base + 2 * i] = T::lit(a.sin());
                    row[base + 2 * i + 1] = T::lit(a.cos());
                }
            }
        }
    }
    Tensor::from_vec(&[h * w, d], out).expect("sized above")
}

/// Rearranges `[H × W × C]` into `[h·w × 16·C]`, one row per 4×4 block.
pub fn space_to_depth<T: Scalar>(patch: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let s = patch.shape();
    if s.len() != 3 || s[0] % PATCH != 0 || s[1] % PATCH != 0 {
        return Err(NumError::Dimension { op: "patch_embed", detail: format!("patch shape {s:?}") });
    }
    let (hi, wi, c) = (s[0], s[1], s[2]);
    let (h, w) = (hi / PATCH, wi / PATCH);
    let cols = PATCH * PATCH * c;
    let src = patch.data();
    let mut out = vec![T::zero(); h * w * cols];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * cols..][..cols];
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let at = ((y * PATCH + dy) * wi + x * PATCH + dx) * c;
                    row[(dy * PATCH + dx) * c..][..c].copy_from_slice(&src[at..at + c]);
                }
            }
        }
    }
    Tensor::from_vec(&[h * w, cols], out)
}

/// Linear projection of each 4×4 block to `d` channels, `[h·w × d]`.
pub fn patch_embed<T: Scalar>(g: &mut Graph<'_, T>, cfg: &IntraConfig, patch: &Tensor<T>) -> Result<Var, NumError> {
    let expect = [cfg.input.0, cfg.input.1, cfg.channels_in];
    if patch.shape() != expect {
        return Err(NumError::Dimension { op: "patch_embed", detail: format!("patch {:?}, expected {expect:?}", patch.shape()) });
    }
    let x = g.input(space_to_depth(patch)?);
    layers::linear(g, "intra.embed", x, true)
}

/// Graph handles of one stage-one pass.
#[derive(Debug, Clone, Copy)]
pub struct IntraOutput {
    /// `[h·w × d]`
    pub features: Var,
    /// `[h·w × K]`
    pub heatmaps: Var,
}

pub fn intra_forward<T: Scalar>(g: &mut Graph<'_, T>, cfg: &IntraConfig, patch: &Tensor<T>) -> Result<IntraOutput, NumError> {
    let (h, w) = cfg.feature();
    let mut x = patch_embed(g, cfg, patch)?;
    let pe = g.input(sinusoidal_encoding(h, w, cfg.d));
    x = g.add(x, pe)?;
    let mask = vec![true; h * w];
    for b in 0..cfg.blocks {
        x = layers::block(g, &format!("intra.block{b}"), cfg.block_shape(), x, &mask)?.0;
    }
    let heatmaps = layers::linear(g, "intra.head", x, true)?;
    Ok(IntraOutput { features: x, heatmaps })
}

/// Stand-alone inference for one person.
pub fn encode_person<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &IntraConfig,
    patch: &Tensor<T>,
    person: usize,
) -> Result<(FeatureMap<T>, HeatmapStack), NumError> {
    let mut g = Graph::new(store);
    let out = intra_forward(&mut g, cfg, patch)?;
    let (h, w) = cfg.feature();
    let features = g.value(out.features).clone().reshape(&[h, w, cfg.d])?;
    let hm = HeatmapStack::from_channels_last(g.value(out.heatmaps).data(), cfg.k, h, w, PATCH);
    Ok((FeatureMap { data: features, person }, hm))
}
