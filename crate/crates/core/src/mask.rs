//! Adaptive spatial masks built from velocity differences.
//!
//! Pipeline: per-site magnitude of the velocity difference, quantile
//! normalisation, temperature-scaled sigmoid, pointwise union with a base
//! mask, grayscale closing. Quantiles use linear interpolation between order
//! statistics (position `q * (n - 1)` in the sorted values). Morphology pads
//! by replicating edge values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{LatentState, Layout};

/// Per-site weights on an H×W grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct Mask {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMask {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl TryFrom<RawMask> for Mask {
    type Error = Error;
    fn try_from(raw: RawMask) -> Result<Self> {
        Mask::new(raw.h, raw.w, raw.values)
    }
}

impl Mask {
    /// A mask with every entry in `[0, 1]`.
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "{h}x{w} mask needs {} values, got {}",
                h * w,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!(
                "mask value {v} outside [0, 1]"
            )));
        }
        Ok(Self { h, w, values })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(h, w, vec![value; h * w])
    }

    /// Binary disk of radius `r` centred at `(cy, cx)` in site coordinates.
    pub fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Self {
        let values = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                if (y - cy).powi(2) + (x - cx).powi(2) <= r * r {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self { h, w, values }
    }

    /// Binary axis-aligned rectangle covering rows `y0..y1`, columns `x0..x1`.
    pub fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        let values = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self { h, w, values }
    }

    /// Pointwise maximum.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_shape(other.h, other.w)?;
        Ok(Mask {
            h: self.h,
            w: self.w,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.max(*b))
                .collect(),
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    fn check_shape(&self, h: usize, w: usize) -> Result<()> {
        if self.h == h && self.w == w {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, expected {h}x{w}",
                self.h, self.w
            )))
        }
    }
}

/// Unbounded per-site scalar field; intermediate stage of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteField {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

/// Knobs of the refinement pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "MaskConfig::default_q")]
    pub q: f64,
    #[serde(default = "MaskConfig::default_tau")]
    pub tau: f64,
    #[serde(default = "MaskConfig::default_k")]
    pub k: usize,
    pub base: Mask,
}

impl MaskConfig {
    fn default_q() -> f64 {
        0.95
    }
    fn default_tau() -> f64 {
        15.0
    }
    fn default_k() -> usize {
        5
    }

    /// Default `q`, `tau`, `k` with the given base mask.
    pub fn with_base(base: Mask) -> Self {
        Self {
            q: Self::default_q(),
            tau: Self::default_tau(),
            k: Self::default_k(),
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.5 && self.q <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "quantile q must be in (0.5, 1], got {}",
                self.q
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        check_kernel(self.k)
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        Err(Error::InvalidConfig(format!(
            "kernel size must be odd and >= 1, got {k}"
        )))
    } else {
        Ok(())
    }
}

/// l2 norm of the channel vector at every site.
pub fn per_site_magnitude(delta_v: &LatentState) -> Result<SiteField> {
    match delta_v.layout() {
        Layout::Grid { h, w, .. } => Ok(SiteField {
            h,
            w,
            values: delta_v.sites().map(crate::state::l2).collect(),
        }),
        Layout::Flat(_) => Err(Error::LayoutMismatch("masking needs a grid layout".into())),
    }
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

const DEGENERATE_RANGE: f64 = 1e-12;

/// `(m - Q(1-q)) / (Q(q) - Q(1-q))`, unclipped; all 0.5 when the range is
/// degenerate.
pub fn quantile_normalize(m: &SiteField, q: f64) -> Result<SiteField> {
    if m.values.is_empty() {
        return Err(Error::EmptyState);
    }
    let mut sorted = m.values.clone();
    sorted.sort_by(f64::total_cmp);
    let v_min = quantile_sorted(&sorted, 1.0 - q);
    let v_max = quantile_sorted(&sorted, q);
    let range = v_max - v_min;
    let values = if range < DEGENERATE_RANGE {
        vec![0.5; m.values.len()]
    } else {
        m.values.iter().map(|v| (v - v_min) / range).collect()
    };
    Ok(SiteField {
        h: m.h,
        w: m.w,
        values,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sigmoid(tau * (m - 0.5))` elementwise.
pub fn sigmoid_contrast(m: &SiteField, tau: f64) -> Mask {
    Mask {
        h: m.h,
        w: m.w,
        values: m.values.iter().map(|v| sigmoid(tau * (v - 0.5))).collect(),
    }
}

/// Moving max (`dilate == true`) or min over a k×k window, edge-replicated.
fn filter(m: &Mask, k: usize, dilate: bool) -> Mask {
    let r = (k / 2) as isize;
    let pick = |a: f64, b: f64| if dilate { a.max(b) } else { a.min(b) };
    let (h, w) = (m.h as isize, m.w as isize);
    let clamp = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    // separable: rows then columns
    let mut rows = vec![0.0; m.values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = m.values[(y * w + x) as usize];
            for dx in -r..=r {
                acc = pick(acc, m.values[(y * w) as usize + clamp(x + dx, w)]);
            }
            rows[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; m.values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = rows[(y * w + x) as usize];
            for dy in -r..=r {
                acc = pick(acc, rows[clamp(y + dy, h) * m.w + x as usize]);
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    Mask {
        h: m.h,
        w: m.w,
        values: out,
    }
}

pub fn grayscale_dilate(m: &Mask, k: usize) -> Result<Mask> {
    check_kernel(k)?;
    Ok(filter(m, k, true))
}

pub fn grayscale_erode(m: &Mask, k: usize) -> Result<Mask> {
    check_kernel(k)?;
    Ok(filter(m, k, false))
}

/// Dilation followed by erosion with the same k×k window.
pub fn grayscale_close(m: &Mask, k: usize) -> Result<Mask> {
    check_kernel(k)?;
    Ok(filter(&filter(m, k, true), k, false))
}

/// Sigmoid-contrasted velocity mask unioned with the base, before closing.
pub fn adaptive_union(delta_v: &LatentState, cfg: &MaskConfig) -> Result<Mask> {
    cfg.validate()?;
    let magnitude = per_site_magnitude(delta_v)?;
    cfg.base.check_shape(magnitude.h, magnitude.w)?;
    let contrast = sigmoid_contrast(&quantile_normalize(&magnitude, cfg.q)?, cfg.tau);
    contrast.union(&cfg.base)
}

/// Full refinement: union with the base mask, then closing, clamped to [0, 1].
pub fn mask_refine(delta_v: &LatentState, cfg: &MaskConfig) -> Result<Mask> {
    let mut closed = grayscale_close(&adaptive_union(delta_v, cfg)?, cfg.k)?;
    for v in &mut closed.values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(closed)
}
