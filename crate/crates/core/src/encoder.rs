//! Multi-level spectral extraction.
//!
//! The embedded channels are cut into contiguous partitions of length `c`,
//! once per level. Each encoder block pair runs a regular pass over those
//! partitions and then a shifted pass: the channel axis is rotated by `c/2`,
//! partitioned again and rotated back. The last shifted partition joins the
//! two spectral ends, so it is processed as two independent halves.
//!
//! Every partition (or half) is a unit with its own parameters:
//!
//! ```text
//! y = x + AttentionBlock(LN(x))
//! z = y + FFN(LN(y))          FFN = Linear → GELU → Dropout → Linear → Dropout
//! ```
//!
//! Level outputs are averaged and layer-normalised.

use std::ops::Range;

use crate::attention::{axial_attention_block, AxialAttentionParams};
use crate::error::{invalid, Result};
use crate::layers::{self, Graph, LinearParams, NormParams, ParamStore};
use crate::numerics::{Tensor, Var};
use rand::Rng;

/// Partition lengths per level for `embed` channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    embed: usize,
    levels: Vec<usize>,
}

impl PartitionPlan {
    pub fn new(embed: usize, levels: &[usize]) -> Result<Self> {
        if levels.is_empty() {
            return Err(invalid("at least one partition level is required"));
        }
        for &c in levels {
            if c == 0 || !embed.is_multiple_of(c) {
                return Err(invalid(format!("partition length {c} does not divide {embed} channels")));
            }
            if c % 2 != 0 {
                return Err(invalid(format!("partition length {c} is odd")));
            }
        }
        Ok(Self {
            embed,
            levels: levels.to_vec(),
        })
    }

    pub fn embed(&self) -> usize {
        self.embed
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn partition_len(&self, level: usize) -> usize {
        self.levels[level]
    }

    /// Channel ranges of the regular pass.
    pub fn partitions(&self, level: usize) -> Vec<Range<usize>> {
        let c = self.levels[level];
        (0..self.embed / c).map(|i| i * c..(i + 1) * c).collect()
    }

    /// Index of the wrapped partition in the shifted pass.
    pub fn wrapped_partition(&self, level: usize) -> usize {
        self.embed / self.levels[level] - 1
    }

    /// The two halves of a shifted-pass partition, in shifted coordinates.
    /// Only the wrapped partition is split.
    pub fn wrap_halves(&self, level: usize, partition: usize) -> Result<[Range<usize>; 2]> {
        if partition != self.wrapped_partition(level) {
            return Err(invalid(format!(
                "partition {partition} of level {level} does not wrap around the spectrum"
            )));
        }
        let c = self.levels[level];
        let start = partition * c;
        Ok([start..start + c / 2, start + c / 2..start + c])
    }

    /// Channel ranges processed independently in the shifted pass, in
    /// shifted coordinates: every unwrapped partition, then both halves of
    /// the wrapped one.
    pub fn shifted_units(&self, level: usize) -> Vec<Range<usize>> {
        let mut units = self.partitions(level);
        units.pop();
        let halves = self
            .wrap_halves(level, self.wrapped_partition(level))
            .expect("last partition wraps");
        units.extend(halves);
        units
    }
}

/// Source channel of every shifted position: `new[i] = old[(i + c/2) mod C]`.
pub fn shift_index(channels: usize, c: usize) -> Result<Vec<usize>> {
    if !c.is_multiple_of(2) {
        return Err(invalid(format!("shift needs an even partition length, got {c}")));
    }
    if c == 0 || !channels.is_multiple_of(c) {
        return Err(invalid(format!("partition length {c} does not divide {channels} channels")));
    }
    Ok((0..channels).map(|i| (i + c / 2) % channels).collect())
}

fn gather_channels(x: &Tensor, index: &[usize]) -> Tensor {
    let channels = index.len();
    let mut out = Vec::with_capacity(x.numel());
    for px in x.data().chunks(channels) {
        out.extend(index.iter().map(|&i| px[i]));
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

fn check_channels(x: &Tensor) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| invalid("tensor has no channel axis"))
}

/// Slices `[.., C]` into consecutive `[.., c]` blocks.
pub fn partition_channels(x: &Tensor, c: usize) -> Result<Vec<Tensor>> {
    let channels = check_channels(x)?;
    if c == 0 || channels % c != 0 {
        return Err(invalid(format!("partition length {c} does not divide {channels} channels")));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = c;
    Ok((0..channels / c)
        .map(|p| {
            let index: Vec<usize> = (p * c..(p + 1) * c).collect();
            let mut data = Vec::with_capacity(x.numel() / (channels / c));
            for px in x.data().chunks(channels) {
                data.extend(index.iter().map(|&i| px[i]));
            }
            Tensor::new(&shape, data).expect("consistent extents")
        })
        .collect())
}

/// Rotates the channel axis so channel `j` moves to `(j − c/2) mod C`.
pub fn shift_channels(x: &Tensor, c: usize) -> Result<Tensor> {
    let index = shift_index(check_channels(x)?, c)?;
    Ok(gather_channels(x, &index))
}

/// Inverse of [`shift_channels`].
pub fn unshift_channels(x: &Tensor, c: usize) -> Result<Tensor> {
    let channels = check_channels(x)?;
    let forward = shift_index(channels, c)?;
    let mut inverse = vec![0; channels];
    for (new, &old) in forward.iter().enumerate() {
        inverse[old] = new;
    }
    Ok(gather_channels(x, &inverse))
}

fn rotate_var(g: &mut Graph, x: Var, by: usize) -> Result<Var> {
    let shape = g.tape.shape(x).to_vec();
    let axis = shape.len() - 1;
    let channels = shape[axis];
    if by.is_multiple_of(channels) {
        return Ok(x);
    }
    let head = g.tape.slice(x, axis, by, channels - by)?;
    let tail = g.tape.slice(x, axis, 0, by)?;
    g.tape.concat(&[head, tail], axis)
}

/// One partition (or wrapped half) with its own normalisation, attention
/// and feed-forward parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams {
    pub attn_norm: NormParams,
    pub attn: AxialAttentionParams,
    pub ffn_norm: NormParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
    pub width: usize,
}

impl UnitParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        max_extent: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attn_norm = NormParams::layer(store, &format!("{name}.attn_norm"), width);
        let attn = AxialAttentionParams::new(
            store,
            &format!("{name}.attn"),
            width,
            width,
            heads,
            max_extent,
            max_extent,
            rng,
        )?;
        let ffn_norm = NormParams::layer(store, &format!("{name}.ffn_norm"), width);
        let ffn_in = LinearParams::new(store, &format!("{name}.ffn_in"), width, 2 * width, rng);
        let ffn_out = LinearParams::new(store, &format!("{name}.ffn_out"), 2 * width, width, rng);
        Ok(Self {
            attn_norm,
            attn,
            ffn_norm,
            ffn_in,
            ffn_out,
            width,
        })
    }
}

/// Regular and shifted units of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockParams {
    pub regular: Vec<UnitParams>,
    pub shifted: Vec<UnitParams>,
    pub level: usize,
}

impl EncoderBlockParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        plan: &PartitionPlan,
        level: usize,
        heads: usize,
        max_extent: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut make = |tag: &str, ranges: Vec<Range<usize>>| -> Result<Vec<UnitParams>> {
            ranges
                .iter()
                .enumerate()
                .map(|(i, r)| UnitParams::new(store, &format!("{name}.{tag}{i}"), r.len(), heads, max_extent, rng))
                .collect()
        };
        let regular = make("regular", plan.partitions(level))?;
        let shifted = make("shifted", plan.shifted_units(level))?;
        Ok(Self { regular, shifted, level })
    }
}

/// All levels of one depth plus the fusion norm.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelParams {
    pub levels: Vec<EncoderBlockParams>,
    pub fusion_norm: NormParams,
}

impl MultiLevelParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        plan: &PartitionPlan,
        heads: usize,
        max_extent: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let levels = (0..plan.levels().len())
            .map(|l| EncoderBlockParams::new(store, &format!("{name}.level{l}"), plan, l, heads, max_extent, rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion_norm = NormParams::layer(store, &format!("{name}.fusion_norm"), plan.embed());
        Ok(Self { levels, fusion_norm })
    }
}

/// Pre-norm attention and feed-forward sublayers with residuals.
pub fn unit_forward(g: &mut Graph, x: Var, p: &UnitParams, dropout: f64) -> Result<Var> {
    let normed = layers::layer_norm(g, x, &p.attn_norm)?;
    let attended = axial_attention_block(g, normed, &p.attn)?;
    let y = g.tape.add(x, attended)?;
    let normed = layers::layer_norm(g, y, &p.ffn_norm)?;
    let hidden = layers::linear(g, normed, &p.ffn_in)?;
    let hidden = layers::gelu(g, hidden);
    let hidden = layers::dropout(g, hidden, dropout)?;
    let out = layers::linear(g, hidden, &p.ffn_out)?;
    let out = layers::dropout(g, out, dropout)?;
    g.tape.add(y, out)
}

fn run_units(g: &mut Graph, x: Var, ranges: &[Range<usize>], units: &[UnitParams], dropout: f64) -> Result<Var> {
    let axis = g.tape.shape(x).len() - 1;
    let mut outputs = Vec::with_capacity(ranges.len());
    for (r, unit) in ranges.iter().zip(units) {
        let part = g.tape.slice(x, axis, r.start, r.len())?;
        outputs.push(unit_forward(g, part, unit, dropout)?);
    }
    g.tape.concat(&outputs, axis)
}

fn check_feature_map(g: &Graph, f: Var, plan: &PartitionPlan, op: &'static str) -> Result<()> {
    let shape = g.tape.shape(f);
    if shape.len() != 4 || shape[3] != plan.embed() {
        return Err(crate::Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![plan.embed()],
        });
    }
    Ok(())
}

/// Units over the level's regular partitions of `[N, h, w, C_e]`.
pub fn regular_pass(g: &mut Graph, f: Var, p: &EncoderBlockParams, plan: &PartitionPlan, dropout: f64) -> Result<Var> {
    check_feature_map(g, f, plan, "regular_pass")?;
    run_units(g, f, &plan.partitions(p.level), &p.regular, dropout)
}

/// Shift, units over the shifted partitions (wrapped one in halves), unshift.
pub fn shifted_pass(g: &mut Graph, f: Var, p: &EncoderBlockParams, plan: &PartitionPlan, dropout: f64) -> Result<Var> {
    check_feature_map(g, f, plan, "shifted_pass")?;
    let c = plan.partition_len(p.level);
    let shifted = rotate_var(g, f, c / 2)?;
    let z = run_units(g, shifted, &plan.shifted_units(p.level), &p.shifted, dropout)?;
    rotate_var(g, z, plan.embed() - c / 2)
}

/// Regular pass followed by the shifted pass.
pub fn encoder_block_pair(
    g: &mut Graph,
    f: Var,
    p: &EncoderBlockParams,
    plan: &PartitionPlan,
    dropout: f64,
) -> Result<Var> {
    let y = regular_pass(g, f, p, plan, dropout)?;
    shifted_pass(g, y, p, plan, dropout)
}

/// Every level on the same input, averaged and layer-normalised.
pub fn multi_level_forward(
    g: &mut Graph,
    x: Var,
    p: &MultiLevelParams,
    plan: &PartitionPlan,
    dropout: f64,
) -> Result<Var> {
    if p.levels.is_empty() {
        return Err(invalid("multi-level forward needs at least one level"));
    }
    let mut sum = None;
    for level in &p.levels {
        let out = encoder_block_pair(g, x, level, plan, dropout)?;
        sum = Some(match sum {
            None => out,
            Some(acc) => g.tape.add(acc, out)?,
        });
    }
    let sum = sum.expect("non-empty");
    let mean = g.tape.scale(sum, 1.0 / p.levels.len() as f64);
    layers::layer_norm(g, mean, &p.fusion_norm)
}
