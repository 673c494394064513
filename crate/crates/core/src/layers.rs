//! Building blocks shared by both stages: parameter initialisation and the
//! pre-norm transformer block.

use rand::Rng;

use crate::numcore::{Graph, NumError, ParamStore, Scalar, Tensor, Var};

/// Registers `name.w` `[cin × cout]` with N(0, 1/cin) entries and, when
/// `bias` is set, a zero `name.b`.
pub(crate) fn init_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    bias: bool,
    rng: &mut R,
) -> Result<(), NumError> {
    store.insert_normal(format!("{name}.w"), &[cin, cout], 1.0 / (cin as f64).sqrt(), rng)?;
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    }
    Ok(())
}

/// Standard deviation of heatmap-head weights, small so that initial
/// predictions start near the all-zero background.
pub(crate) const HEAD_INIT_STD: f64 = 1e-3;

/// Heatmap head `name.w` `[cin × K]` with N(0, HEAD_INIT_STD²) weights and a
/// zero bias.
pub(crate) fn init_head<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    k: usize,
    rng: &mut R,
) -> Result<(), NumError> {
    store.insert_normal(format!("{name}.w"), &[cin, k], HEAD_INIT_STD, rng)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[k]))?;
    Ok(())
}

pub(crate) fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<(), NumError> {
    store.insert(format!("{name}.g"), Tensor::full(&[d], T::one()))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Shape of one transformer block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockShape {
    pub d: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Output projection after attention.
    pub out_proj: bool,
    /// Biases on the query and value projections. A key bias would shift
    /// every score of a row equally, so it is never created.
    pub qkv_bias: bool,
}

pub(crate) fn init_block<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    shape: BlockShape,
    rng: &mut R,
) -> Result<(), NumError> {
    let d = shape.d;
    init_layer_norm(store, &format!("{prefix}.ln1"), d)?;
    for p in ["q", "k", "v"] {
        init_linear(store, &format!("{prefix}.attn.{p}"), d, d, shape.qkv_bias && p != "k", rng)?;
    }
    if shape.out_proj {
        init_linear(store, &format!("{prefix}.attn.o"), d, d, true, rng)?;
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), d)?;
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, shape.hidden, true, rng)?;
    init_linear(store, &format!("{prefix}.mlp.fc2"), shape.hidden, d, true, rng)?;
    Ok(())
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<'_, T>, name: &str, x: Var, bias: bool) -> Result<Var, NumError> {
    let w = g.param_named(&format!("{name}.w"))?;
    let b = if bias { Some(g.param_named(&format!("{name}.b"))?) } else { None };
    g.linear(x, w, b)
}

pub(crate) fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, name: &str, x: Var) -> Result<Var, NumError> {
    let gain = g.param_named(&format!("{name}.g"))?;
    let bias = g.param_named(&format!("{name}.b"))?;
    g.layer_norm(x, gain, bias)
}

/// `x + Attn(LN(x))` followed by `x + MLP(LN(x))` over `[L × d]` tokens.
/// Returns the block output and the attention node (for probability export).
pub(crate) fn block<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    shape: BlockShape,
    x: Var,
    mask: &[bool],
) -> Result<(Var, Var), NumError> {
    let h = layer_norm(g, &format!("{prefix}.ln1"), x)?;
    let q = linear(g, &format!("{prefix}.attn.q"), h, shape.qkv_bias)?;
    let k = linear(g, &format!("{prefix}.attn.k"), h, false)?;
    let v = linear(g, &format!("{prefix}.attn.v"), h, shape.qkv_bias)?;
    let attn = g.attention(q, k, v, mask, shape.heads)?;
    let a = if shape.out_proj { linear(g, &format!("{prefix}.attn.o"), attn, true)? } else { attn };
    let x = g.add(x, a)?;
    let h = layer_norm(g, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, &format!("{prefix}.mlp.fc1"), h, true)?;
    let h = g.gelu(h)?;
    let h = linear(g, &format!("{prefix}.mlp.fc2"), h, true)?;
    Ok((g.add(x, h)?, attn))
}
