//! Attention visualization: upscale a captioner's cell-level attention to
//! image resolution and emit a portable graymap.

use crate::captioner::CaptionerBackend;
use crate::corpus::image::{gray_to_pgm_bytes, RasterImage};
use crate::error::{Error, Result};

/// Bilinear upscale of a `rows x cols` grid (row-major) to `out_h x out_w`,
/// sampling at cell centers.
pub fn bilinear_upscale(
    values: &[f64],
    rows: usize,
    cols: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::contract("upscale dimensions must be positive"));
    }
    if values.len() != rows * cols {
        return Err(Error::contract(format!(
            "grid has {} values, expected {rows}x{cols}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        // Map the output pixel center into grid coordinates.
        let gy = ((y as f64 + 0.5) * rows as f64 / out_h as f64 - 0.5)
            .clamp(0.0, (rows - 1) as f64);
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let fy = gy - y0 as f64;
        for x in 0..out_w {
            let gx = ((x as f64 + 0.5) * cols as f64 / out_w as f64 - 0.5)
                .clamp(0.0, (cols - 1) as f64);
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let fx = gx - x0 as f64;
            let top = values[y0 * cols + x0] * (1.0 - fx) + values[y0 * cols + x1] * fx;
            let bottom = values[y1 * cols + x0] * (1.0 - fx) + values[y1 * cols + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// Render the captioner's attention over `image` as a PGM (P5) byte
/// stream at full image resolution, brightest cell mapped to 255.
pub fn attention_heatmap_pgm(
    captioner: &dyn CaptionerBackend,
    image: &RasterImage,
    prompt: &[String],
) -> Result<Vec<u8>> {
    let map = captioner
        .attention_map(image)?
        .ok_or_else(|| Error::contract("this captioner exposes no attention map"))?;
    let _ = prompt; // attention is prompt-independent for every current backend
    let rows = map.rows() as usize;
    let cols = map.cols() as usize;
    let weights = map.weights();
    let peak = weights.iter().cloned().fold(0.0f64, f64::max);
    let scaled: Vec<f64> = if peak > 0.0 {
        weights.iter().map(|w| w / peak).collect()
    } else {
        vec![0.0; weights.len()]
    };
    let up = bilinear_upscale(
        &scaled,
        rows,
        cols,
        image.height() as usize,
        image.width() as usize,
    )?;
    let gray: Vec<u8> = up
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    gray_to_pgm_bytes(image.width(), image.height(), &gray)
}
