use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::labels::{segment_score_from_extent, AacLabel, Risk};
use super::preprocess::{crop_bounds, RawScan};
use crate::error::{bail, Result};
use crate::model::NUM_GROUPS;
use crate::tensor::Tensor;

/// Low / Moderate / High counts of the reference cohort.
pub const DEFAULT_CATEGORY_COUNTS: [usize; 3] = [829, 445, 642];

const DECODE_THRESHOLD: f64 = 0.8;

/// Scene geometry. Horizontal `u` and vertical `v` coordinates are fractions
/// of the crop window that preprocessing keeps, so the drawn anatomy lands in
/// the same place of the network input whatever the native size.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub native_h: usize,
    pub native_w: usize,
    pub background: f64,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    pub spine: f64,
    pub streak: f64,
    pub first_top: f64,
    pub pitch: f64,
    pub vertebra_height: f64,
    pub spine_u: (f64, f64),
    pub anterior_u: (f64, f64),
    pub posterior_u: (f64, f64),
    /// Extent range drawn for scores 1, 2 and 3.
    pub extent_bands: [(f64, f64); 3],
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            native_h: 1600,
            native_w: 300,
            background: 0.1,
            noise: 0.02,
            spine: 0.45,
            streak: 0.9,
            first_top: 0.05,
            pitch: 0.235,
            vertebra_height: 0.2,
            spine_u: (0.55, 0.95),
            anterior_u: (0.10, 0.16),
            posterior_u: (0.34, 0.40),
            extent_bands: [(0.08, 0.30), (0.38, 0.62), (0.72, 0.98)],
        }
    }
}

impl Layout {
    /// Vertical span `[top, bottom)` of vertebra `0..4` (L1 at the top).
    pub fn vertebra_span(&self, i: usize) -> (f64, f64) {
        let top = self.first_top + i as f64 * self.pitch;
        (top, top + self.vertebra_height)
    }

    /// Zone for granular index `g`: its vertebra span and wall band.
    pub fn zone(&self, g: usize) -> ((f64, f64), (f64, f64)) {
        let wall = if g < 4 {
            self.anterior_u
        } else {
            self.posterior_u
        };
        (self.vertebra_span(g % 4), wall)
    }
}

/// Per-segment score probabilities, and the risk mix of a generated set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    pub segment_probs: [f64; 4],
    pub category_counts: [usize; 3],
}

impl Default for ScoreDistribution {
    fn default() -> Self {
        Self {
            segment_probs: [0.6, 0.2, 0.12, 0.08],
            category_counts: DEFAULT_CATEGORY_COUNTS,
        }
    }
}

impl ScoreDistribution {
    fn validate(&self) -> Result<()> {
        let p = &self.segment_probs;
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || p.iter().sum::<f64>() <= 0.0 {
            bail!(
                Config,
                "segment probabilities must be non-negative with positive sum"
            );
        }
        let (zero, nonzero) = (p[0] > 0.0, p[1..].iter().any(|&v| v > 0.0));
        let reachable = [zero, zero && nonzero, nonzero];
        for ((risk, &c), ok) in Risk::ALL.iter().zip(&self.category_counts).zip(reachable) {
            if c > 0 && !ok {
                bail!(
                    Config,
                    "category {} cannot be reached with these probabilities",
                    risk
                );
            }
        }
        if self.category_counts.iter().sum::<usize>() == 0 {
            bail!(Config, "category counts are all zero");
        }
        Ok(())
    }

    fn draw_segment<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        let total: f64 = self.segment_probs.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (s, &p) in self.segment_probs.iter().enumerate() {
            if u < p {
                return s as u8;
            }
            u -= p;
        }
        (0..4)
            .rev()
            .find(|&s| self.segment_probs[s] > 0.0)
            .unwrap_or(0) as u8
    }

    /// Rejection-samples eight segment scores until their risk is `risk`.
    pub fn draw_granular<R: Rng + ?Sized>(&self, risk: Risk, rng: &mut R) -> [u8; NUM_GROUPS] {
        loop {
            let g: [u8; NUM_GROUPS] = core::array::from_fn(|_| self.draw_segment(rng));
            let total: u32 = g.iter().map(|&s| u32::from(s)).sum();
            let r = match total {
                0..=1 => Risk::Low,
                2..=5 => Risk::Moderate,
                _ => Risk::High,
            };
            if r == risk {
                return g;
            }
        }
    }
}

/// Largest-remainder apportionment of `n` over `weights` (ties go to the
/// earlier entry).
pub fn split_counts(n: usize, weights: &[usize; 3]) -> [usize; 3] {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return [0; 3];
    }
    let mut counts = weights.map(|w| n * w / total);
    let mut rem: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (n * w % total, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - counts.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Everything needed to render one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub label: AacLabel,
    /// Streak length as a fraction of vertebra height, 0 for absent.
    pub extents: [f64; NUM_GROUPS],
    /// Streak start as a fraction of vertebra height.
    pub offsets: [f64; NUM_GROUPS],
    pub noise_seed: u64,
}

impl SyntheticSample {
    pub fn from_granular<R: Rng + ?Sized>(
        id: String,
        granular: [u8; NUM_GROUPS],
        layout: &Layout,
        rng: &mut R,
    ) -> Result<Self> {
        let label = AacLabel::from_granular(granular)?;
        let mut extents = [0.0; NUM_GROUPS];
        let mut offsets = [0.0; NUM_GROUPS];
        for g in 0..NUM_GROUPS {
            if granular[g] > 0 {
                let (lo, hi) = layout.extent_bands[usize::from(granular[g]) - 1];
                extents[g] = rng.random_range(lo..=hi);
                offsets[g] = rng.random::<f64>() * (1.0 - extents[g]);
            }
        }
        Ok(Self {
            id,
            label,
            extents,
            offsets,
            noise_seed: rng.random(),
        })
    }
}

/// Draws `n` labelled scan descriptions. Risk categories follow
/// `dist.category_counts` scaled to `n`, in shuffled order.
pub fn generate_synthetic_dataset(
    n: usize,
    seed: u64,
    dist: &ScoreDistribution,
    layout: &Layout,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        bail!(Data, "synthetic dataset size must be at least 1");
    }
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = split_counts(n, &dist.category_counts);
    let mut risks: Vec<Risk> = Risk::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&r, c)| core::iter::repeat(r).take(c))
        .collect();
    risks.shuffle(&mut rng);
    let width = format!("{}", n - 1).len();
    risks
        .into_iter()
        .enumerate()
        .map(|(i, risk)| {
            let granular = dist.draw_granular(risk, &mut rng);
            SyntheticSample::from_granular(format!("syn{:0width$}", i), granular, layout, &mut rng)
        })
        .collect()
}

/// Renders the `native_h x native_w` grayscale scan of `sample`.
pub fn render_scan(sample: &SyntheticSample, layout: &Layout) -> Result<RawScan> {
    let (h, w) = (layout.native_h, layout.native_w);
    let ((r0, r1), (c0, c1)) = crop_bounds(h, w);
    if r1 <= r0 || c1 <= c0 {
        bail!(Data, "native size {}x{} leaves an empty crop", h, w);
    }
    let (ch, cw) = ((r1 - r0) as f64, (c1 - c0) as f64);
    let u_of = |c: usize| (c as f64 - c0 as f64 + 0.5) / cw;
    let v_of = |r: usize| (r as f64 - r0 as f64 + 0.5) / ch;
    let inside = |x: f64, (lo, hi): (f64, f64)| x >= lo && x < hi;
    let mut rng = ChaCha8Rng::seed_from_u64(sample.noise_seed);
    let mut pixels = Vec::with_capacity(h * w);
    let mut base = alloc::vec![layout.background; w];
    for r in 0..h {
        let v = v_of(r);
        base.fill(layout.background);
        for i in 0..4 {
            let (top, bottom) = layout.vertebra_span(i);
            if !inside(v, (top, bottom)) {
                continue;
            }
            for (c, b) in base.iter_mut().enumerate() {
                if inside(u_of(c), layout.spine_u) {
                    *b = layout.spine;
                }
            }
            let rel = (v - top) / layout.vertebra_height;
            for g in [i, i + 4] {
                let (e, o) = (sample.extents[g], sample.offsets[g]);
                if e > 0.0 && rel >= o && rel < o + e {
                    let (_, band) = layout.zone(g);
                    for (c, b) in base.iter_mut().enumerate() {
                        if inside(u_of(c), band) {
                            *b = layout.streak;
                        }
                    }
                }
            }
        }
        for &b in &base {
            let n = layout.noise * (2.0 * rng.random::<f64>() - 1.0);
            pixels.push((b + n).clamp(0.0, 1.0));
        }
    }
    Ok(RawScan {
        id: sample.id.clone(),
        source: String::from("synthetic"),
        pixels: Tensor::from_vec(&[h, w], pixels)?,
    })
}

/// Output rows or columns of an `s`-sized axis whose centres fall in `[lo, hi)`.
fn axis_range(s: usize, (lo, hi): (f64, f64)) -> core::ops::Range<usize> {
    let start = (0..s)
        .find(|&i| (i as f64 + 0.5) / s as f64 >= lo)
        .unwrap_or(s);
    let end = (start..s)
        .find(|&i| (i as f64 + 0.5) / s as f64 >= hi)
        .unwrap_or(s);
    start..end
}

/// Rule-based reading of the eight segment scores from a preprocessed image
/// (`[C,S,S]` or `[S,S]`; the first channel is used). A row counts as
/// calcified when its mean over the interior of the wall band exceeds 0.8.
pub fn decode_granular(image: &Tensor, layout: &Layout) -> Result<[u8; NUM_GROUPS]> {
    let s = image.shape();
    let (h, w) = match s {
        [h, w] | [_, h, w] => (*h, *w),
        _ => bail!(
            Shape,
            "decode_granular expects [C,S,S] or [S,S], got {:?}",
            s
        ),
    };
    let plane = &image.data()[..h * w];
    let mut out = [0u8; NUM_GROUPS];
    for (g, slot) in out.iter_mut().enumerate() {
        let ((top, bottom), (lo, hi)) = layout.zone(g);
        let rows = axis_range(h, (top, bottom));
        let mut cols = axis_range(w, (lo, hi));
        if cols.len() > 2 {
            cols = cols.start + 1..cols.end - 1;
        } else if cols.is_empty() {
            let mid = (((lo + hi) / 2.0 * w as f64) as usize).min(w - 1);
            cols = mid..mid + 1;
        }
        if rows.is_empty() {
            bail!(
                Data,
                "image of {} rows is too small to resolve a vertebra",
                h
            );
        }
        let lit = rows
            .clone()
            .filter(|&r| {
                let row = &plane[r * w + cols.start..r * w + cols.end];
                row.iter().sum::<f64>() / row.len() as f64 > DECODE_THRESHOLD
            })
            .count();
        *slot = segment_score_from_extent(lit as f64 / rows.len() as f64)?;
    }
    Ok(out)
}
