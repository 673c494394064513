//! The full two-stage network: configuration, parameter initialisation and
//! the per-group forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::heatmap::HeatmapStack;
use crate::inter::{self, AttentionExport, InterConfig, PersonGroup, SequenceVars};
use crate::intra::{self, IntraConfig, IntraOutput};
use crate::numcore::{Graph, NumError, ParamStore, Scalar, Tensor, Var};
use crate::scenes::SceneError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration key `{key}`: {message}")]
    Config { key: &'static str, message: String },
    #[error("group has no valid slot")]
    EmptyGroup,
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

impl ModelError {
    pub fn config(key: &'static str, message: impl Into<String>) -> Self {
        ModelError::Config { key, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub intra: IntraConfig,
    pub inter: InterConfig,
    /// Drop the relation stage; predictions come from the stage-one head.
    pub intra_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { intra: IntraConfig::default(), inter: InterConfig::default(), intra_only: false }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.intra.validate()?;
        self.inter.validate(self.intra.feature(), self.intra.d)
    }

    pub fn k(&self) -> usize {
        self.intra.k
    }

    pub fn feature(&self) -> (usize, usize) {
        self.intra.feature()
    }
}

/// Fresh parameters drawn from `seed`.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    intra::init_params(&mut store, &cfg.intra, &mut rng)?;
    if !cfg.intra_only {
        inter::init_params(&mut store, &cfg.inter, cfg.intra.d, cfg.intra.k, &mut rng)?;
    }
    Ok(store)
}

/// Share of scalar parameters that belong to the relation stage.
pub fn inter_fraction<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store.element_count_with_prefix("inter.") as f64 / store.element_count() as f64
}

/// Graph handles of one group's forward pass. Per-slot vectors have one entry
/// per slot and are `None` for padded slots.
#[derive(Debug, Clone)]
pub struct GroupForward {
    pub intra: Vec<Option<IntraOutput>>,
    /// `[h·w × K]` final heatmaps (the stage-one head when intra-only).
    pub heatmaps: Vec<Option<Var>>,
    pub sequence: Option<SequenceVars>,
    pub attention: Vec<Var>,
}

/// Runs both stages on one group. `patches[s]` is the slot's `[H × W × C]`
/// patch, `None` for padding. `rng` only draws padding noise.
pub fn forward_group<T: Scalar, R: Rng>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    patches: &[Option<&Tensor<T>>],
    rng: &mut R,
) -> Result<GroupForward, ModelError> {
    if !patches.iter().any(Option::is_some) {
        return Err(ModelError::EmptyGroup);
    }
    let mut outs = Vec::with_capacity(patches.len());
    for p in patches {
        outs.push(match p {
            Some(p) => Some(intra::intra_forward(g, &cfg.intra, p)?),
            None => None,
        });
    }
    if cfg.intra_only {
        let heatmaps = outs.iter().map(|o| o.map(|o| o.heatmaps)).collect();
        return Ok(GroupForward { intra: outs, heatmaps, sequence: None, attention: Vec::new() });
    }
    let feats: Vec<Option<Var>> = outs.iter().map(|o| o.map(|o| o.features)).collect();
    let feature = cfg.feature();
    let seq = inter::build_sequence(g, &cfg.inter, &feats, feature, cfg.intra.d, rng)?;
    let (tokens, attention) = inter::relation_forward(g, &cfg.inter, &seq)?;
    let heatmaps = inter::inter_head(g, &cfg.inter, tokens, &seq, &feats, feature)?;
    Ok(GroupForward { intra: outs, heatmaps, sequence: Some(seq), attention })
}

/// Decoded-ready outputs of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPrediction {
    pub person: usize,
    /// Stage-one (intermediate) head.
    pub intermediate: HeatmapStack,
    pub final_heatmaps: HeatmapStack,
}

/// Inference on one group: per valid slot heatmaps plus the optional
/// attention export.
pub fn predict_group<T: Scalar, R: Rng>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    group: &PersonGroup,
    patches: &[Option<&Tensor<T>>],
    rng: &mut R,
) -> Result<(Vec<SlotPrediction>, Option<AttentionExport>), ModelError> {
    group.validate()?;
    let mut g = Graph::new(store);
    let fwd = forward_group(&mut g, cfg, patches, rng)?;
    let (h, w) = cfg.feature();
    let k = cfg.k();
    let mut preds = Vec::new();
    for (slot, person) in group.valid() {
        let (Some(io), Some(fin)) = (fwd.intra[slot], fwd.heatmaps[slot]) else {
            return Err(ModelError::config("persons", format!("slot {slot} has a person but no patch")));
        };
        preds.push(SlotPrediction {
            person,
            intermediate: HeatmapStack::from_channels_last(g.value(io.heatmaps).data(), k, h, w, intra::PATCH),
            final_heatmaps: HeatmapStack::from_channels_last(g.value(fin).data(), k, h, w, intra::PATCH),
        });
    }
    let export = fwd
        .sequence
        .as_ref()
        .and_then(|seq| inter::export_attention(&g, &cfg.inter, &fwd.attention, seq, group));
    Ok((preds, export))
}
