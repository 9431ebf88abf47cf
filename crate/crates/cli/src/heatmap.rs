use std::path::Path;

use ndarray::Array3;

use crate::error::{CliError, CliResult};

pub const UPSAMPLE: usize = 8;
/// Pixels between panels.
const GAP: usize = 2;

/// Lays out the `t` panels of a `[t, m, n]` map side by side, each cell
/// upsampled `UPSAMPLE`× (nearest neighbour) and scaled so the map maximum
/// is white. Returns `(width, height, pixels)`.
pub fn grid(map: &Array3<f64>) -> (usize, usize, Vec<u8>) {
    let (t, m, n) = map.dim();
    let (pw, ph) = (n * UPSAMPLE, m * UPSAMPLE);
    let width = t * pw + t.saturating_sub(1) * GAP;
    let height = ph;
    let max = map.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut pixels = vec![0u8; width * height];
    for tau in 0..t {
        let x0 = tau * (pw + GAP);
        for y in 0..ph {
            for x in 0..pw {
                let v = map[[tau, y / UPSAMPLE, x / UPSAMPLE]].max(0.0) * scale;
                pixels[y * width + x0 + x] = v.round().min(255.0) as u8;
            }
        }
    }
    (width, height, pixels)
}

/// Binary greyscale PGM (`P5`).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> CliResult {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
