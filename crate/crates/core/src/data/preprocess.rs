use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const DEFAULT_INPUT_SIZE: usize = 300;

/// A grayscale scan with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScan {
    pub id: String,
    pub source: String,
    /// `[H, W]`
    pub pixels: Tensor,
}

impl RawScan {
    pub fn validate(&self) -> Result<()> {
        match self.pixels.shape() {
            [h, w] if *h >= 2 && *w >= 2 => {}
            s => bail!(Data, "scan {} must be [H>=2, W>=2], got {:?}", self.id, s),
        }
        if !self.pixels.all_finite() {
            bail!(Data, "scan {} contains non-finite pixels", self.id);
        }
        Ok(())
    }
}

/// Rows `[H/2, H)` and columns `[floor(0.4 W), floor(0.9 W))`.
pub fn crop_bounds(h: usize, w: usize) -> ((usize, usize), (usize, usize)) {
    ((h / 2, h), (4 * w / 10, 9 * w / 10))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Source index pair and weight for output position `i` (half-pixel centres).
fn sample_axis(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let i0 = crate::math::floor(pos) as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear resize of a row-major `h x w` grid.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let cols: Vec<_> = (0..out_w).map(|x| sample_axis(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = sample_axis(y, h, out_h);
        let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, fx) in &cols {
            let top = lerp(r0[x0], r0[x1], fx);
            let bottom = lerp(r1[x0], r1[x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    out
}

/// Crop, resize to `size x size`, clamp to `[0, 1]` and replicate to 3 channels.
pub fn preprocess(scan: &RawScan, size: usize) -> Result<Tensor> {
    scan.validate()?;
    if size == 0 {
        bail!(Data, "output size must be positive");
    }
    let (h, w) = (scan.pixels.shape()[0], scan.pixels.shape()[1]);
    let ((r0, r1), (c0, c1)) = crop_bounds(h, w);
    if r1 <= r0 || c1 <= c0 {
        bail!(Data, "scan {} ({}x{}) leaves an empty crop", scan.id, h, w);
    }
    let (ch, cw) = (r1 - r0, c1 - c0);
    let mut crop = Vec::with_capacity(ch * cw);
    for r in r0..r1 {
        crop.extend_from_slice(&scan.pixels.data()[r * w + c0..r * w + c1]);
    }
    let plane: Vec<f64> = resize_bilinear(&crop, ch, cw, size, size)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::from_vec(&[3, size, size], data)
}
