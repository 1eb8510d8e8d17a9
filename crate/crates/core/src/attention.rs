//! Spectral-spatial axial aggregation attention.
//!
//! Queries, keys and values are projected per pixel, then squeezed onto the
//! two spatial axes by a max over the orthogonal axis. Output position
//! (i, j) is the sum of a row term (row i attends over all rows) and a
//! column term (column j attends over all columns):
//!
//! ```text
//! h(i,j) = Σ_p softmax_p((q_row,i + rq_row,i)·(k_row,p + rk_row,p) / √d) (v_row,p + rv_row,p)
//!        + Σ_p softmax_p((q_col,j + rq_col,j)·(k_col,p + rk_col,p) / √d) (v_col,p + rv_col,p)
//! ```
//!
//! per head of width `d`, followed by an output projection. The positional
//! tables are indexed by absolute row/column inside the patch. An auxiliary
//! 3×3 convolution + batch norm path is added to the attention output.

use crate::error::{invalid, Result};
use crate::layers::{self, ConvParams, Graph, LinearParams, NormParams, ParamStore};
use crate::numerics::{Tensor, Var};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AxialAttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    /// Positional tables `[max_h, dim]` for the row axis.
    pub row_q: layers::ParamId,
    pub row_k: layers::ParamId,
    pub row_v: layers::ParamId,
    /// Positional tables `[max_w, dim]` for the column axis.
    pub col_q: layers::ParamId,
    pub col_k: layers::ParamId,
    pub col_v: layers::ParamId,
    pub aux_conv: ConvParams,
    pub aux_norm: NormParams,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_h: usize,
    pub max_w: usize,
}

impl AxialAttentionParams {
    /// `channels` in and out, `dim` for the query/key/value projections.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        dim: usize,
        heads: usize,
        max_h: usize,
        max_w: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid(format!("{heads} heads do not divide projection width {dim}")));
        }
        if channels == 0 || max_h == 0 || max_w == 0 {
            return Err(invalid("attention extents must be positive"));
        }
        let query = LinearParams::new(store, &format!("{name}.query"), channels, dim, rng);
        // a key bias only shifts each query's logits uniformly
        let key = LinearParams::without_bias(store, &format!("{name}.key"), channels, dim, rng);
        let value = LinearParams::new(store, &format!("{name}.value"), channels, dim, rng);
        let output = LinearParams::new(store, &format!("{name}.output"), dim, channels, rng);
        let mut table = |suffix: &str, len: usize| store.add(format!("{name}.{suffix}"), Tensor::zeros(&[len, dim]), true);
        let (row_q, row_k, row_v) = (table("row_q", max_h), table("row_k", max_h), table("row_v", max_h));
        let (col_q, col_k, col_v) = (table("col_q", max_w), table("col_k", max_w), table("col_v", max_w));
        let aux_conv = ConvParams::new(store, &format!("{name}.aux_conv"), channels, channels, false, rng);
        let aux_norm = NormParams::batch(store, &format!("{name}.aux_norm"), channels);
        Ok(Self {
            query,
            key,
            value,
            output,
            row_q,
            row_k,
            row_v,
            col_q,
            col_k,
            col_v,
            aux_conv,
            aux_norm,
            channels,
            dim,
            heads,
            max_h,
            max_w,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Max over columns (row form, `[N, h, C]`) and over rows (column form,
/// `[N, w, C]`) of a `[N, h, w, C]` map.
pub fn axial_squeeze(g: &mut Graph, t: Var) -> Result<(Var, Var)> {
    let shape = g.tape.shape(t).to_vec();
    if shape.len() != 4 {
        return Err(invalid(format!("axial_squeeze expects [N, h, w, C], got {shape:?}")));
    }
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let row = g.tape.reduce_max(t, 2)?;
    let row = g.tape.reshape(row, &[n, h, c])?;
    let col = g.tape.reduce_max(t, 1)?;
    let col = g.tape.reshape(col, &[n, w, c])?;
    Ok((row, col))
}

/// Attention weights of both axes, `[N·heads, h, h]` and `[N·heads, w, w]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub row: Var,
    pub col: Var,
}

/// Axial aggregation attention on `[N, h, w, c]`, returning the same shape.
pub fn axial_aggregation_attention(g: &mut Graph, x: Var, p: &AxialAttentionParams) -> Result<Var> {
    axial_aggregation_attention_traced(g, x, p).map(|(y, _)| y)
}

/// As [`axial_aggregation_attention`], also returning the softmax weights.
pub fn axial_aggregation_attention_traced(
    g: &mut Graph,
    x: Var,
    p: &AxialAttentionParams,
) -> Result<(Var, AttentionWeights)> {
    let shape = g.tape.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != p.channels {
        return Err(crate::Error::ShapeMismatch {
            op: "axial_aggregation_attention",
            lhs: shape,
            rhs: vec![p.max_h, p.max_w, p.channels],
        });
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    if h > p.max_h || w > p.max_w {
        return Err(invalid(format!(
            "sample {h}x{w} exceeds positional bias capacity {}x{}",
            p.max_h, p.max_w
        )));
    }
    let q = layers::linear(g, x, &p.query)?;
    let k = layers::linear(g, x, &p.key)?;
    let v = layers::linear(g, x, &p.value)?;
    let (q_row, q_col) = axial_squeeze(g, q)?;
    let (k_row, k_col) = axial_squeeze(g, k)?;
    let (v_row, v_col) = axial_squeeze(g, v)?;

    let row_tables = [p.row_q, p.row_k, p.row_v];
    let (row_out, row_w) = axis_attention(g, [q_row, k_row, v_row], row_tables, n, h, p)?;
    let col_tables = [p.col_q, p.col_k, p.col_v];
    let (col_out, col_w) = axis_attention(g, [q_col, k_col, v_col], col_tables, n, w, p)?;

    // row term is constant along columns, column term along rows
    let row_out = g.tape.reshape(row_out, &[n, h, 1, p.dim])?;
    let row_out = g.tape.expand(row_out, 2, w)?;
    let col_out = g.tape.reshape(col_out, &[n, 1, w, p.dim])?;
    let col_out = g.tape.expand(col_out, 1, h)?;
    let summed = g.tape.add(row_out, col_out)?;
    let y = layers::linear(g, summed, &p.output)?;
    Ok((y, AttentionWeights { row: row_w, col: col_w }))
}

/// Multi-head attention along one squeezed axis of length `len`. Inputs are
/// `[N, len, dim]`; returns `[N, len, dim]` and the weights.
fn axis_attention(
    g: &mut Graph,
    [q, k, v]: [Var; 3],
    tables: [layers::ParamId; 3],
    n: usize,
    len: usize,
    p: &AxialAttentionParams,
) -> Result<(Var, Var)> {
    let (heads, d) = (p.heads, p.head_dim());
    let mut positioned = [q, k, v];
    for (t, table) in positioned.iter_mut().zip(tables) {
        let mut bias = g.param(table);
        if g.tape.shape(bias)[0] != len {
            bias = g.tape.slice(bias, 0, 0, len)?;
        }
        *t = g.tape.add_trailing(*t, bias)?;
    }
    let split = |g: &mut Graph, t: Var| -> Result<Var> {
        let t = g.tape.reshape(t, &[n, len, heads, d])?;
        let t = g.tape.permute(t, &[0, 2, 1, 3])?;
        g.tape.reshape(t, &[n * heads, len, d])
    };
    let [q, k, v] = positioned;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let kt = g.tape.permute(k, &[0, 2, 1])?;
    let logits = g.tape.bmm(q, kt)?;
    let logits = g.tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = g.tape.softmax(logits, 2)?;
    let out = g.tape.bmm(weights, v)?;
    let out = g.tape.reshape(out, &[n, heads, len, d])?;
    let out = g.tape.permute(out, &[0, 2, 1, 3])?;
    let out = g.tape.reshape(out, &[n, len, p.dim])?;
    Ok((out, weights))
}

/// 3×3 convolution followed by batch norm.
pub fn aux_spatial_path(g: &mut Graph, x: Var, p: &AxialAttentionParams) -> Result<Var> {
    let y = layers::conv3x3(g, x, &p.aux_conv)?;
    layers::batch_norm(g, y, &p.aux_norm)
}

/// Elementwise sum of the attention and auxiliary features.
pub fn fuse(g: &mut Graph, attn: Var, aux: Var) -> Result<Var> {
    g.tape.add(attn, aux)
}

/// Attention plus auxiliary path, fused.
pub fn axial_attention_block(g: &mut Graph, x: Var, p: &AxialAttentionParams) -> Result<Var> {
    let attn = axial_aggregation_attention(g, x, p)?;
    let aux = aux_spatial_path(g, x, p)?;
    fuse(g, attn, aux)
}
