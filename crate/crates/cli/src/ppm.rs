use std::io::Write;
use std::path::Path;

use lau_core::LabelMap;

/// Fixed 16-colour palette; labels wrap around it.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
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
];

/// Ignored pixels are drawn white.
const IGNORE_RGB: [u8; 3] = [255, 255, 255];

/// Binary P6 image of a label map, batch entries stacked vertically.
pub fn encode(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.w, labels.n * labels.h).into_bytes();
    out.reserve(labels.labels.len() * 3);
    for &l in &labels.labels {
        let rgb = if l < 0 { IGNORE_RGB } else { PALETTE[l as usize % PALETTE.len()] };
        out.extend_from_slice(&rgb);
    }
    out
}

pub fn write(path: &Path, labels: &LabelMap) -> std::io::Result<()> {
    std::fs::File::create(path)?.write_all(&encode(labels))
}
