//! Latent states, time grids and conditions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a latent: a flat vector or an H×W grid of C-channel vectors.
///
/// Grid values are row-major over sites with each site's channels stored
/// contiguously, so per-site reductions walk one contiguous chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Flat(usize),
    Grid { h: usize, w: usize, c: usize },
}

impl Layout {
    pub fn len(&self) -> usize {
        match *self {
            Layout::Flat(d) => d,
            Layout::Grid { h, w, c } => h * w * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatial sites (1 for flat layouts).
    pub fn sites(&self) -> usize {
        match *self {
            Layout::Flat(_) => 1,
            Layout::Grid { h, w, .. } => h * w,
        }
    }

    /// Values per site.
    pub fn channels(&self) -> usize {
        match *self {
            Layout::Flat(d) => d,
            Layout::Grid { c, .. } => c,
        }
    }
}

#[derive(Deserialize)]
struct RawState {
    layout: Layout,
    values: Vec<f64>,
}

/// A point in latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawState")]
pub struct LatentState {
    layout: Layout,
    values: Vec<f64>,
}

impl TryFrom<RawState> for LatentState {
    type Error = Error;
    fn try_from(raw: RawState) -> Result<Self> {
        LatentState::new(raw.layout, raw.values)
    }
}

impl LatentState {
    /// Build a state, checking the value count and finiteness.
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{:?} expects {} values, got {}",
                layout,
                layout.len(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                context: format!("state value {pos} is {}", values[pos]),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn flat(values: Vec<f64>) -> Self {
        let layout = Layout::Flat(values.len());
        Self::new(layout, values).expect("finite flat state")
    }

    pub fn grid(h: usize, w: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(Layout::Grid { h, w, c }, values)
    }

    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.len()],
        }
    }

    /// Internal constructor for arithmetic results; finiteness is checked by
    /// the solvers at step boundaries via [`LatentState::ensure_finite`].
    pub(crate) fn from_parts(layout: Layout, values: Vec<f64>) -> Self {
        debug_assert_eq!(layout.len(), values.len());
        Self { layout, values }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, step: usize, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step,
                context: what.to_string(),
            })
        }
    }

    pub fn check_same_layout(&self, other: &LatentState) -> Result<()> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.layout, other.layout
            )))
        }
    }

    fn zip_with(&self, other: &LatentState, f: impl Fn(f64, f64) -> f64) -> LatentState {
        assert_eq!(
            self.layout, other.layout,
            "layout mismatch in state arithmetic"
        );
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        LatentState::from_parts(self.layout, values)
    }

    /// `self + other`. Panics on layout mismatch.
    pub fn add(&self, other: &LatentState) -> LatentState {
        self.zip_with(other, |a, b| a + b)
    }

    /// `self - other`. Panics on layout mismatch.
    pub fn sub(&self, other: &LatentState) -> LatentState {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + s * other`. Panics on layout mismatch.
    pub fn axpy(&self, s: f64, other: &LatentState) -> LatentState {
        self.zip_with(other, |a, b| a + s * b)
    }

    pub fn scale(&self, s: f64) -> LatentState {
        LatentState::from_parts(self.layout, self.values.iter().map(|v| v * s).collect())
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }

    /// Euclidean distance. Panics on layout mismatch.
    pub fn dist(&self, other: &LatentState) -> f64 {
        assert_eq!(self.layout, other.layout, "layout mismatch in distance");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Channel vectors, one per spatial site.
    pub fn sites(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.layout.channels().max(1))
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

const DEGENERATE_NORM: f64 = 1e-12;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2(a);
    let nb = l2(b);
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity averaged over spatial sites.
///
/// Grid states compare the channel vectors site by site and average over all
/// H·W sites; flat states fall back to the plain cosine of the full vectors.
/// Near-zero vectors (norm below 1e-12) count as zero alignment.
pub fn spatial_cosine(a: &LatentState, b: &LatentState) -> Result<f64> {
    a.check_same_layout(b)?;
    if a.is_empty() {
        return Err(Error::EmptyState);
    }
    match a.layout {
        Layout::Flat(_) => Ok(cosine(&a.values, &b.values)),
        Layout::Grid { .. } => {
            let sites = a.layout.sites() as f64;
            let total: f64 = a.sites().zip(b.sites()).map(|(x, y)| cosine(x, y)).sum();
            Ok(total / sites)
        }
    }
}

/// Uniform time grid `t_i = i / N` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidConfig(
                "time grid needs at least one step".into(),
            ));
        }
        Ok(Self { n_steps })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    /// `t_i`; exact at both ends.
    pub fn t(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        i as f64 / self.n_steps as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(|i| self.t(i))
    }
}

/// Conditioning signal for a velocity field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// The unconditional token.
    #[default]
    Null,
    Label(u32),
    Embedding(Vec<f64>),
}

impl Condition {
    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}
