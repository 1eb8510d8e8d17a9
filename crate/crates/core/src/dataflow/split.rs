//! Train/test splits.
//!
//! Random splits draw a fraction of every class pixel by pixel. Block splits
//! assign whole `block × block` tiles to train or test territory; test pixels
//! closer than `gap + 1` (Chebyshev) to train territory are dropped, and every
//! center's window must lie inside its own territory. With `gap ≥ patch − 1`
//! no test window can share a pixel with any train window.
//!
//! Split files are JSON:
//!
//! ```json
//! {"mode": "block", "patch": 5, "seed": 7,
//!  "parameters": {"block": 12, "gap": 4},
//!  "train": [[r, c], ...], "test": [[r, c], ...]}
//! ```

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::cube::LabelMap;
use super::Center;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Random,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SplitParameters {
    Random { train_fraction: f64 },
    Block { block: usize, gap: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub patch: usize,
    pub seed: u64,
    pub parameters: SplitParameters,
    pub train: Vec<Center>,
    pub test: Vec<Center>,
}

impl SplitSpec {
    /// Structural checks that need no label map.
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch.is_multiple_of(2) {
            return Err(Error::Malformed(format!("patch size must be odd, got {}", self.patch)));
        }
        match (self.mode, self.parameters) {
            (SplitMode::Random, SplitParameters::Random { train_fraction }) => {
                if !(train_fraction > 0.0 && train_fraction <= 1.0) {
                    return Err(Error::Malformed(format!("train fraction {train_fraction} outside (0, 1]")));
                }
            }
            (SplitMode::Block, SplitParameters::Block { block, .. }) => {
                if block == 0 {
                    return Err(Error::Malformed("block size must be positive".into()));
                }
            }
            _ => return Err(Error::Malformed("split parameters do not match the mode".into())),
        }
        let mut seen = HashSet::with_capacity(self.train.len());
        for c in &self.train {
            if !seen.insert(*c) {
                return Err(Error::Malformed(format!("duplicate train center {c:?}")));
            }
        }
        let mut seen_test = HashSet::with_capacity(self.test.len());
        for c in &self.test {
            if seen.contains(c) {
                return Err(Error::Malformed(format!("center {c:?} is in both train and test")));
            }
            if !seen_test.insert(*c) {
                return Err(Error::Malformed(format!("duplicate test center {c:?}")));
            }
        }
        Ok(())
    }

    /// Every center must be a labeled pixel of `labels`.
    pub fn validate_against(&self, labels: &LabelMap) -> Result<()> {
        self.validate()?;
        for &(r, c) in self.train.iter().chain(&self.test) {
            if r >= labels.height() || c >= labels.width() {
                return Err(Error::Malformed(format!(
                    "center ({r}, {c}) outside {}x{} scene",
                    labels.height(),
                    labels.width()
                )));
            }
            if labels.get(r, c) == 0 {
                return Err(Error::Malformed(format!("center ({r}, {c}) is unlabeled")));
            }
        }
        Ok(())
    }
}

pub fn encode_split(spec: &SplitSpec) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(spec)?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_split(bytes: &[u8]) -> Result<SplitSpec> {
    let spec: SplitSpec = serde_json::from_slice(bytes)?;
    spec.validate()?;
    Ok(spec)
}

pub fn write_split(path: impl AsRef<Path>, spec: &SplitSpec) -> Result<()> {
    std::fs::write(path, encode_split(spec)?)?;
    Ok(())
}

pub fn read_split(path: impl AsRef<Path>) -> Result<SplitSpec> {
    decode_split(&std::fs::read(path)?)
}

fn check_patch(patch: usize) -> Result<()> {
    if patch == 0 || patch.is_multiple_of(2) {
        return Err(invalid(format!("patch size must be odd, got {patch}")));
    }
    Ok(())
}

/// Per class, `max(1, ⌈fraction·count⌉)` pixels go to train and the rest to
/// test.
pub fn random_split(labels: &LabelMap, fraction: f64, patch: usize, seed: u64) -> Result<SplitSpec> {
    check_patch(patch)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("train fraction must be in (0, 1], got {fraction}")));
    }
    let classes = labels.class_count();
    if classes == 0 {
        return Err(invalid("label map has no labeled pixels"));
    }
    let mut rng = stream(seed, Stream::Split);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 1..=classes as u16 {
        let mut pixels = labels.pixels_of(class);
        let count = pixels.len();
        if count < 2 {
            return Err(Error::ClassTooSmall { class, count });
        }
        // tolerance keeps products like 0.05·40 from rounding up past 2
        let n_train = ((fraction * count as f64 - 1e-9).ceil() as usize).max(1);
        if n_train >= count {
            return Err(Error::ClassPlacement {
                class,
                reason: format!("fraction {fraction} of {count} pixels leaves no test sample"),
            });
        }
        pixels.shuffle(&mut rng);
        train.extend_from_slice(&pixels[..n_train]);
        test.extend_from_slice(&pixels[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec {
        mode: SplitMode::Random,
        patch,
        seed,
        parameters: SplitParameters::Random { train_fraction: fraction },
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Territory {
    Train,
    Test,
    /// Test-role pixel within `gap` of train territory.
    Gap,
}

/// Tile roles and the resulting per-pixel territory of a block split.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub gap: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    /// Row-major, true for train tiles.
    pub train_tiles: Vec<bool>,
}

impl BlockLayout {
    /// Default selector: every 4th tile in row-major order, phase `seed % 4`.
    pub fn new(height: usize, width: usize, block: usize, gap: usize, seed: u64) -> Self {
        let tile_rows = height.div_ceil(block);
        let tile_cols = width.div_ceil(block);
        let phase = (seed % 4) as usize;
        let train_tiles = (0..tile_rows * tile_cols).map(|t| t % 4 == phase).collect();
        Self {
            height,
            width,
            block,
            gap,
            tile_rows,
            tile_cols,
            train_tiles,
        }
    }

    fn tile_of(&self, r: usize, c: usize) -> usize {
        (r / self.block) * self.tile_cols + c / self.block
    }

    fn is_train_pixel(&self, r: usize, c: usize) -> bool {
        self.train_tiles[self.tile_of(r, c)]
    }

    /// Territory of every pixel, row-major.
    pub fn territory(&self) -> Vec<Territory> {
        let (h, w) = (self.height, self.width);
        // Chebyshev dilation of the train mask by `gap`, rows then columns
        let mut train = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                train[r * w + c] = self.is_train_pixel(r, c);
            }
        }
        let mut rows = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                let lo = c.saturating_sub(self.gap);
                let hi = (c + self.gap).min(w - 1);
                rows[r * w + c] = (lo..=hi).any(|x| train[r * w + x]);
            }
        }
        let mut near = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                let lo = r.saturating_sub(self.gap);
                let hi = (r + self.gap).min(h - 1);
                near[r * w + c] = (lo..=hi).any(|y| rows[y * w + c]);
            }
        }
        (0..h * w)
            .map(|i| {
                if train[i] {
                    Territory::Train
                } else if near[i] {
                    Territory::Gap
                } else {
                    Territory::Test
                }
            })
            .collect()
    }

    /// Labeled pixels whose whole window is in bounds and inside one
    /// territory, split into train and test centers (row-major).
    pub fn centers(&self, labels: &LabelMap, patch: usize) -> (Vec<Center>, Vec<Center>) {
        let territory = self.territory();
        let (h, w) = (self.height, self.width);
        let r = patch / 2;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        if h < patch || w < patch {
            return (train, test);
        }
        for y in r..h - r {
            for x in r..w - r {
                if labels.get(y, x) == 0 {
                    continue;
                }
                let own = territory[y * w + x];
                if own == Territory::Gap {
                    continue;
                }
                let uniform = (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| territory[yy * w + xx] == own));
                if uniform {
                    match own {
                        Territory::Train => train.push((y, x)),
                        Territory::Test => test.push((y, x)),
                        Territory::Gap => unreachable!(),
                    }
                }
            }
        }
        (train, test)
    }
}

/// Classes with at least one center in `centers`.
fn class_presence(labels: &LabelMap, centers: &[Center], classes: usize) -> Vec<bool> {
    let mut present = vec![false; classes + 1];
    for &(r, c) in centers {
        present[labels.get(r, c) as usize] = true;
    }
    present
}

fn satisfied(labels: &LabelMap, layout: &BlockLayout, patch: usize, classes: usize) -> (usize, Option<(u16, bool)>) {
    let (train, test) = layout.centers(labels, patch);
    let (in_train, in_test) = (class_presence(labels, &train, classes), class_presence(labels, &test, classes));
    let mut count = 0;
    let mut first_missing = None;
    for k in 1..=classes {
        for (present, is_train) in [(in_train[k], true), (in_test[k], false)] {
            if present {
                count += 1;
            } else if first_missing.is_none() {
                first_missing = Some((k as u16, is_train));
            }
        }
    }
    (count, first_missing)
}

/// Block-wise split with every class present in both sets.
///
/// When the default selector leaves a class out of one set, tiles are
/// flipped greedily: among the tiles whose flip places the missing class,
/// the one that keeps the most (class, set) pairs satisfied wins, then the
/// one with the fewest labeled pixels, then the lowest index. Each tile
/// flips at most once.
pub fn block_split(labels: &LabelMap, block: usize, gap: usize, patch: usize, seed: u64) -> Result<SplitSpec> {
    check_patch(patch)?;
    if block < patch {
        return Err(invalid(format!("block {block} is smaller than patch {patch}")));
    }
    if gap + 1 < patch {
        return Err(invalid(format!(
            "gap {gap} is below patch - 1 = {}, windows could overlap",
            patch - 1
        )));
    }
    let classes = labels.class_count();
    if classes == 0 {
        return Err(invalid("label map has no labeled pixels"));
    }
    let mut layout = BlockLayout::new(labels.height(), labels.width(), block, gap, seed);
    let tile_pixels: Vec<usize> = {
        let mut counts = vec![0; layout.train_tiles.len()];
        for r in 0..labels.height() {
            for c in 0..labels.width() {
                if labels.get(r, c) != 0 {
                    counts[layout.tile_of(r, c)] += 1;
                }
            }
        }
        counts
    };

    let mut flipped = vec![false; layout.train_tiles.len()];
    loop {
        let (_, missing) = satisfied(labels, &layout, patch, classes);
        let Some((class, want_train)) = missing else {
            let (train, test) = layout.centers(labels, patch);
            return Ok(SplitSpec {
                mode: SplitMode::Block,
                patch,
                seed,
                parameters: SplitParameters::Block { block, gap },
                train,
                test,
            });
        };
        // candidates: tiles of the other role whose flip places `class`
        let mut best: Option<(usize, usize, usize)> = None; // (score, pixels, tile)
        for t in 0..layout.train_tiles.len() {
            if layout.train_tiles[t] == want_train || flipped[t] {
                continue;
            }
            layout.train_tiles[t] = want_train;
            let (train, test) = layout.centers(labels, patch);
            let placed = class_presence(labels, if want_train { &train } else { &test }, classes)[class as usize];
            let (score, _) = satisfied(labels, &layout, patch, classes);
            layout.train_tiles[t] = !want_train;
            if !placed {
                continue;
            }
            let better = match best {
                None => true,
                Some((s, p, _)) => score > s || (score == s && tile_pixels[t] < p),
            };
            if better {
                best = Some((score, tile_pixels[t], t));
            }
        }
        let Some((_, _, tile)) = best else {
            return Err(Error::ClassPlacement {
                class,
                reason: format!(
                    "no remaining tile of size {block} gives it a full {} window",
                    if want_train { "train" } else { "test" }
                ),
            });
        };
        layout.train_tiles[tile] = want_train;
        flipped[tile] = true;
    }
}
