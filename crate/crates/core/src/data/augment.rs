use rand::Rng;

use crate::math;
use crate::tensor::Tensor;

/// Sampling ranges for the random affine transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub scale: (f64, f64),
    /// Maximum shift as a fraction of each image side.
    pub translate: f64,
    pub rotate_deg: f64,
    pub shear_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.9, 1.1),
            translate: 0.05,
            rotate_deg: 10.0,
            shear_deg: 5.0,
        }
    }
}

impl AugmentConfig {
    /// All ranges collapsed to the identity transform.
    pub fn neutral() -> Self {
        Self {
            scale: (1.0, 1.0),
            translate: 0.0,
            rotate_deg: 0.0,
            shear_deg: 0.0,
        }
    }
}

/// One concrete transform: scale, then shear along x, then rotation, about
/// the image centre, followed by a shift of `(tx, ty)` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub rotate_rad: f64,
    pub shear_rad: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
            rotate_rad: 0.0,
            shear_rad: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let scale = u(cfg.scale.0, cfg.scale.1);
        let tx = u(-cfg.translate, cfg.translate) * w as f64;
        let ty = u(-cfg.translate, cfg.translate) * h as f64;
        let rotate_rad = u(-cfg.rotate_deg, cfg.rotate_deg).to_radians();
        let shear_rad = u(-cfg.shear_deg, cfg.shear_deg).to_radians();
        Self {
            scale,
            tx,
            ty,
            rotate_rad,
            shear_rad,
        }
    }

    /// Resamples every channel of `[C,H,W]` bilinearly; outside is zero.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        let s = img.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = (math::sin(self.rotate_rad), math::cos(self.rotate_rad));
        let tan = math::tan(self.shear_rad);
        let inv_s = 1.0 / self.scale;
        let plane = h * w;
        let mut out = Tensor::zeros(s).expect("input shape is valid");
        let src = img.data();
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx - self.tx;
                let dy = y as f64 - cy - self.ty;
                // undo rotation, then shear, then scale
                let rx = cos * dx + sin * dy;
                let ry = -sin * dx + cos * dy;
                let sx = (rx - tan * ry) * inv_s + cx;
                let sy = ry * inv_s + cy;
                let (x0, y0) = (math::floor(sx), math::floor(sy));
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                for (c, d) in dst.chunks_exact_mut(plane).enumerate() {
                    let p = &src[c * plane..(c + 1) * plane];
                    let at = |yy: i64, xx: i64| {
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            0.0
                        } else {
                            p[yy as usize * w + xx as usize]
                        }
                    };
                    let top = at(y0, x0) + (at(y0, x0 + 1) - at(y0, x0)) * fx;
                    let bottom = at(y0 + 1, x0) + (at(y0 + 1, x0 + 1) - at(y0 + 1, x0)) * fx;
                    d[y * w + x] = top + (bottom - top) * fy;
                }
            }
        }
        out
    }
}

/// Random affine augmentation of a `[C,H,W]` image.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let s = img.shape();
    let p = AffineParams::sample(cfg, s[s.len() - 2], s[s.len() - 1], rng);
    p.apply(img)
}
