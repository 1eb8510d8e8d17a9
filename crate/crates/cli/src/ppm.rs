//! Binary PPM (P6) classification maps.

use saaformer::dataflow::LabelMap;

/// Class `k` is drawn in `PALETTE[(k - 1) % 16]`; label 0 is black.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub fn color(label: u16) -> [u8; 3] {
    match label {
        0 => [0, 0, 0],
        k => PALETTE[(k as usize - 1) % PALETTE.len()],
    }
}

pub fn encode(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.reserve(3 * map.labels().len());
    for &l in map.labels() {
        out.extend_from_slice(&color(l));
    }
    out
}
