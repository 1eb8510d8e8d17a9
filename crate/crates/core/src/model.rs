//! The end-to-end classifier.
//!
//! ```text
//! [N, p, p, C_in] → Linear(C_in → C_e) → Dropout
//!                 → depth × multi-level encoder
//!                 → LN → mean over the p² positions → Linear(C_e → K)
//! ```
//!
//! Parameters are kept in f64; checkpoints store them as f32 (see
//! [`checkpoint`]).

mod checkpoint;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, EpochLoss, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::dataflow::{Center, HsiCube, LabelMap};
use crate::encoder::{multi_level_forward, MultiLevelParams, PartitionPlan};
use crate::error::{Error, Result};
use crate::layers::{self, Graph, LinearParams, Mode, NormParams, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{stream, Stream};

/// Samples per forward pass in [`SaaFormer::predict`].
pub const PREDICT_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaaFormerConfig {
    pub bands: usize,
    pub embed: usize,
    pub heads: usize,
    /// Number of regular + shifted block pairs.
    pub depth: usize,
    /// Partition length per level.
    pub levels: Vec<usize>,
    pub patch: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl SaaFormerConfig {
    /// Defaults: embed 128, 4 heads, depth 2, levels (128, 64, 32), 5×5
    /// patches, dropout 0.1.
    pub fn new(bands: usize, classes: usize) -> Self {
        Self {
            bands,
            embed: 128,
            heads: 4,
            depth: 2,
            levels: vec![128, 64, 32],
            patch: 5,
            dropout: 0.1,
            classes,
        }
    }

    /// Replaces the levels with a single one spanning the embedding.
    pub fn single_level(mut self) -> Self {
        self.levels = vec![self.embed];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.bands == 0 || self.embed == 0 || self.depth == 0 {
            return bad("bands, embed and depth must be positive".into());
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return bad(format!("class count must be in 2..=65535, got {}", self.classes));
        }
        if self.heads == 0 || !self.embed.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide embed {}", self.heads, self.embed));
        }
        if self.patch.is_multiple_of(2) {
            return bad(format!("patch must be odd, got {}", self.patch));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        PartitionPlan::new(self.embed, &self.levels).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(c) = self.levels.iter().find(|&&c| (c / 2) % self.heads != 0) {
            return bad(format!("{} heads do not divide half-partition {}", self.heads, c / 2));
        }
        Ok(())
    }

    /// Scalars in the parameter store (trainable and running statistics),
    /// from the layer shapes alone.
    pub fn parameter_count(&self) -> u128 {
        let (p, e) = (self.patch as u128, self.embed as u128);
        // norms 2w + 2w, q/v/out 3(w² + w), key w², tables 6pw, conv 9w²,
        // batch norm 4w, ffn 2w² + 2w and 2w² + w
        let unit = |w: u128| 17 * w * w + 14 * w + 6 * p * w;
        let level = |c: u128| {
            let parts = e / c;
            parts * unit(c) + (parts - 1) * unit(c) + 2 * unit(c / 2)
        };
        let depth: u128 = self.levels.iter().map(|&c| level(c as u128)).sum::<u128>() + 2 * e;
        let (b, k) = (self.bands as u128, self.classes as u128);
        (b * e + e) + self.depth as u128 * depth + 2 * e + (e * k + k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaaFormerParams {
    pub embed: LinearParams,
    pub depths: Vec<MultiLevelParams>,
    pub head_norm: NormParams,
    pub head: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaaFormer {
    config: SaaFormerConfig,
    plan: PartitionPlan,
    params: SaaFormerParams,
    store: ParamStore,
}

impl SaaFormer {
    /// Builds a model with weights drawn from the `Init` stream of `seed`.
    pub fn new(config: SaaFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = PartitionPlan::new(config.embed, &config.levels)?;
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let embed = LinearParams::new(&mut store, "embed", config.bands, config.embed, &mut rng);
        let depths = (0..config.depth)
            .map(|d| MultiLevelParams::new(&mut store, &format!("depth{d}"), &plan, config.heads, config.patch, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_norm = NormParams::layer(&mut store, "head_norm", config.embed);
        let head = LinearParams::new(&mut store, "head", config.embed, config.classes, &mut rng);
        Ok(Self {
            config,
            plan,
            params: SaaFormerParams {
                embed,
                depths,
                head_norm,
                head,
            },
            store,
        })
    }

    pub fn config(&self) -> &SaaFormerConfig {
        &self.config
    }

    pub fn params(&self) -> &SaaFormerParams {
        &self.params
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[N, p, p, C_in]` samples to `[N, K]` logits.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != c.patch || shape[2] != c.patch || shape[3] != c.bands {
            return Err(Error::ShapeMismatch {
                op: "saaformer_forward",
                lhs: shape,
                rhs: vec![c.patch, c.patch, c.bands],
            });
        }
        let n = shape[0];
        let mut f = layers::linear(g, x, &self.params.embed)?;
        f = layers::dropout(g, f, c.dropout)?;
        for depth in &self.params.depths {
            f = multi_level_forward(g, f, depth, &self.plan, c.dropout)?;
        }
        f = layers::layer_norm(g, f, &self.params.head_norm)?;
        let f = g.tape.reshape(f, &[n, c.patch * c.patch, c.embed])?;
        let pooled = g.tape.mean_axis(f, 1)?;
        let pooled = g.tape.reshape(pooled, &[n, c.embed])?;
        layers::linear(g, pooled, &self.params.head)
    }

    /// Evaluation-mode logits for a `[N, p, p, C_in]` batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.store, Mode::Eval);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x)?;
        Ok(tape.value(y).clone())
    }

    /// Predicted classes (1-based) for the given centers.
    pub fn predict(&self, cube: &HsiCube, centers: &[Center]) -> Result<Vec<u16>> {
        if cube.bands() != self.config.bands {
            return Err(Error::Config(format!(
                "model expects {} bands, cube has {}",
                self.config.bands,
                cube.bands()
            )));
        }
        let mut out = Vec::with_capacity(centers.len());
        for chunk in centers.chunks(PREDICT_BATCH) {
            let logits = self.logits(&cube.patches(chunk, self.config.patch)?)?;
            out.extend(logits.data().chunks(self.config.classes).map(|row| argmax(row) as u16 + 1));
        }
        Ok(out)
    }

    /// Prediction for every labeled pixel of `labels` (every pixel when
    /// `None`); unlabeled pixels get 0.
    pub fn predict_map(&self, cube: &HsiCube, labels: Option<&LabelMap>) -> Result<LabelMap> {
        let (h, w) = (cube.height(), cube.width());
        if let Some(l) = labels {
            if (l.height(), l.width()) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "predict_map",
                    lhs: vec![l.height(), l.width()],
                    rhs: vec![h, w],
                });
            }
        }
        let centers: Vec<Center> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| labels.is_none_or(|l| l.get(r, c) != 0))
            .collect();
        let predicted = self.predict(cube, &centers)?;
        let mut map = vec![0u16; h * w];
        for (&(r, c), p) in centers.iter().zip(predicted) {
            map[r * w + c] = p;
        }
        LabelMap::new(h, w, map)
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
