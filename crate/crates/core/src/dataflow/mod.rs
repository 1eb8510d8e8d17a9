//! Scenes, splits and the leakage audit.
//!
//! - [`cube`]: hyperspectral cubes, label maps, the `.hsic` file format and
//!   patch extraction with mirrored borders.
//! - [`synthetic`]: seeded tiled scenes with separable class signatures.
//! - [`split`]: pixel-wise random and block-wise train/test splits, and
//!   their JSON file format.
//! - [`overlap`]: overlap rate of a test window against the union of
//!   training windows, and its three-bucket histogram.

pub mod cube;
pub mod overlap;
pub mod split;
pub mod synthetic;

pub use cube::{decode_cube, encode_cube, read_cube, write_cube, HsiCube, LabelMap};
pub use overlap::{bucket_of, bucket_overlap, overlap_rate, overlap_rates, Bucket, OverlapBuckets, OverlapIndex};
pub use split::{block_split, decode_split, encode_split, random_split, read_split, write_split, SplitMode, SplitParameters, SplitSpec};
pub use synthetic::{generate_synthetic, SyntheticParams, SyntheticScene};

/// Pixel coordinate `(row, col)`.
pub type Center = (usize, usize);
