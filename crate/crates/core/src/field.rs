//! Velocity fields: the evaluation trait, the analytic catalog and guidance.
//!
//! Analytic fields have the form `v(z, t, c) = J z + h(t) + s(c)` where `J`
//! acts on consecutive coordinate pairs, `h` is an optional time drive and
//! `s(c)` is a per-condition shift (zero for the null condition, a table row
//! for labels, the vector itself for embeddings). Because the shift does not
//! depend on `z`, every guided combination of conditions shares the base
//! Lipschitz constant, and `v_c - v_null = s(c)` is constant in `(z, t)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{Condition, LatentState};

/// An evaluable conditional velocity field `v(z, t, c)`.
///
/// Implementations must be pure: identical inputs give bit-identical output.
pub trait VelocityField: Send + Sync {
    fn eval(&self, z: &LatentState, t: f64, c: &Condition) -> Result<LatentState>;

    /// Certified Lipschitz constant in `z`, valid for every `t` and for every
    /// guided combination of conditions.
    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }

    /// Certified bound on `|dv/dt|` along trajectories of the field under
    /// `condition` that stay inside [`VelocityField::certified_radius`].
    fn curvature_bound(&self, _condition: &Condition) -> Option<f64> {
        None
    }

    /// Radius of the origin-centred ball the certificates hold on.
    fn certified_radius(&self) -> Option<f64> {
        None
    }

    fn descriptor(&self) -> String;
}

impl<T: VelocityField + ?Sized> VelocityField for Box<T> {
    fn eval(&self, z: &LatentState, t: f64, c: &Condition) -> Result<LatentState> {
        (**self).eval(z, t, c)
    }
    fn lipschitz_bound(&self) -> Option<f64> {
        (**self).lipschitz_bound()
    }
    fn curvature_bound(&self, condition: &Condition) -> Option<f64> {
        (**self).curvature_bound(condition)
    }
    fn certified_radius(&self) -> Option<f64> {
        (**self).certified_radius()
    }
    fn descriptor(&self) -> String {
        (**self).descriptor()
    }
}

/// Wraps a field and counts evaluations.
pub struct Counted<'a> {
    inner: &'a dyn VelocityField,
    count: AtomicUsize,
}

impl<'a> Counted<'a> {
    pub fn new(inner: &'a dyn VelocityField) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl VelocityField for Counted<'_> {
    fn eval(&self, z: &LatentState, t: f64, c: &Condition) -> Result<LatentState> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(z, t, c)
    }
    fn lipschitz_bound(&self) -> Option<f64> {
        self.inner.lipschitz_bound()
    }
    fn curvature_bound(&self, condition: &Condition) -> Option<f64> {
        self.inner.curvature_bound(condition)
    }
    fn certified_radius(&self) -> Option<f64> {
        self.inner.certified_radius()
    }
    fn descriptor(&self) -> String {
        self.inner.descriptor()
    }
}

/// Label-keyed table; JSON object keys are label numbers written as strings.
fn label_table<'de, D>(de: D) -> std::result::Result<BTreeMap<u32, Vec<f64>>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    use serde::de::Error as _;
    let raw: BTreeMap<String, Vec<f64>> = Deserialize::deserialize(de)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse::<u32>().map(|k| (k, v)).map_err(|_| {
                D::Error::custom(format!("label key `{k}` is not a non-negative integer"))
            })
        })
        .collect()
}

fn default_radius() -> f64 {
    2.0
}

/// Declarative description of a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    /// `v = value`.
    Constant {
        value: Vec<f64>,
        #[serde(default, deserialize_with = "label_table")]
        shifts: BTreeMap<u32, Vec<f64>>,
    },
    /// Rotation of each coordinate pair at rate `omega`.
    LinearSkew {
        omega: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default, deserialize_with = "label_table")]
        shifts: BTreeMap<u32, Vec<f64>>,
    },
    /// Rotation at rate `omega` with radial decay `lambda`.
    ContractingSpiral {
        lambda: f64,
        omega: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default, deserialize_with = "label_table")]
        shifts: BTreeMap<u32, Vec<f64>>,
    },
    /// Rotation at rate `rate` plus a unit-norm drive of magnitude `amplitude`
    /// turning at `frequency` cycles per unit time.
    TimeCurved {
        rate: f64,
        amplitude: f64,
        frequency: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default, deserialize_with = "label_table")]
        shifts: BTreeMap<u32, Vec<f64>>,
    },
    /// A trained conditional flow loaded from a checkpoint file.
    Trained { checkpoint: PathBuf },
}

impl FieldSpec {
    pub fn linear_skew(omega: f64) -> Self {
        FieldSpec::LinearSkew {
            omega,
            radius: default_radius(),
            shifts: BTreeMap::new(),
        }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        FieldSpec::Constant {
            value,
            shifts: BTreeMap::new(),
        }
    }

    /// Attach per-label shifts (no-op for trained fields).
    pub fn with_shifts(mut self, table: BTreeMap<u32, Vec<f64>>) -> Self {
        match &mut self {
            FieldSpec::Constant { shifts, .. }
            | FieldSpec::LinearSkew { shifts, .. }
            | FieldSpec::ContractingSpiral { shifts, .. }
            | FieldSpec::TimeCurved { shifts, .. } => *shifts = table,
            FieldSpec::Trained { .. } => {}
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("field spec: {e}")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            FieldSpec::Constant { .. } => "constant",
            FieldSpec::LinearSkew { .. } => "linear_skew",
            FieldSpec::ContractingSpiral { .. } => "contracting_spiral",
            FieldSpec::TimeCurved { .. } => "time_curved",
            FieldSpec::Trained { .. } => "trained",
        }
    }
}

/// Build an evaluable field from its description.
pub fn make_field(spec: &FieldSpec) -> Result<Box<dyn VelocityField>> {
    match spec {
        FieldSpec::Trained { checkpoint } => {
            if !checkpoint.is_file() {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint {} does not exist",
                    checkpoint.display()
                )));
            }
            Ok(Box::new(crate::cfm::CfmModel::load(checkpoint)?))
        }
        other => Ok(Box::new(AnalyticField::new(other)?)),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Base {
    Constant(Vec<f64>),
    /// `J = -decay * I + rate * S` on pairs, plus the rotating drive.
    PairLinear {
        decay: f64,
        rate: f64,
        amplitude: f64,
        frequency: f64,
    },
}

/// A closed-form field with certified constants.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticField {
    spec: FieldSpec,
    base: Base,
    shifts: BTreeMap<u32, Vec<f64>>,
    radius: f64,
    lipschitz: f64,
}

fn check_param(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} must be finite, got {v}"
        )))
    }
}

impl AnalyticField {
    pub fn new(spec: &FieldSpec) -> Result<Self> {
        let (base, shifts, radius) = match spec {
            FieldSpec::Constant { value, shifts } => {
                for &v in value {
                    check_param("constant value", v)?;
                }
                (Base::Constant(value.clone()), shifts, f64::INFINITY)
            }
            FieldSpec::LinearSkew {
                omega,
                radius,
                shifts,
            } => {
                check_param("omega", *omega)?;
                (
                    Base::PairLinear {
                        decay: 0.0,
                        rate: *omega,
                        amplitude: 0.0,
                        frequency: 0.0,
                    },
                    shifts,
                    *radius,
                )
            }
            FieldSpec::ContractingSpiral {
                lambda,
                omega,
                radius,
                shifts,
            } => {
                check_param("lambda", *lambda)?;
                check_param("omega", *omega)?;
                (
                    Base::PairLinear {
                        decay: *lambda,
                        rate: *omega,
                        amplitude: 0.0,
                        frequency: 0.0,
                    },
                    shifts,
                    *radius,
                )
            }
            FieldSpec::TimeCurved {
                rate,
                amplitude,
                frequency,
                radius,
                shifts,
            } => {
                check_param("rate", *rate)?;
                check_param("amplitude", *amplitude)?;
                check_param("frequency", *frequency)?;
                (
                    Base::PairLinear {
                        decay: 0.0,
                        rate: *rate,
                        amplitude: *amplitude,
                        frequency: *frequency,
                    },
                    shifts,
                    *radius,
                )
            }
            FieldSpec::Trained { .. } => {
                return Err(Error::InvalidConfig(
                    "trained fields are not analytic".into(),
                ))
            }
        };
        if !(radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "radius must be positive, got {radius}"
            )));
        }
        for (label, s) in shifts {
            for &v in s {
                check_param(&format!("shift for label {label}"), v)?;
            }
        }
        let lipschitz = match &base {
            Base::Constant(_) => 0.0,
            Base::PairLinear { decay, rate, .. } => decay.hypot(*rate),
        };
        Ok(Self {
            spec: spec.clone(),
            base,
            shifts: shifts.clone(),
            radius,
            lipschitz,
        })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    fn shift<'a>(&'a self, c: &'a Condition, len: usize) -> Result<Option<&'a [f64]>> {
        let s = match c {
            Condition::Null => return Ok(None),
            Condition::Label(k) => self
                .shifts
                .get(k)
                .ok_or_else(|| Error::InvalidConfig(format!("field has no shift for label {k}")))?,
            Condition::Embedding(e) => e,
        };
        if s.len() != len {
            return Err(Error::LayoutMismatch(format!(
                "condition shift has {} values, state has {len}",
                s.len()
            )));
        }
        Ok(Some(s))
    }

    /// Unit-norm time drive evaluated per pair.
    fn drive(amplitude: f64, frequency: f64, t: f64, pairs: usize) -> (f64, f64) {
        if amplitude == 0.0 {
            return (0.0, 0.0);
        }
        let theta = 2.0 * PI * frequency * t;
        let norm = (pairs as f64).sqrt();
        (
            amplitude * theta.cos() / norm,
            amplitude * theta.sin() / norm,
        )
    }
}

impl VelocityField for AnalyticField {
    fn eval(&self, z: &LatentState, t: f64, c: &Condition) -> Result<LatentState> {
        let x = z.values();
        let mut out = match &self.base {
            Base::Constant(value) => {
                if value.len() != x.len() {
                    return Err(Error::LayoutMismatch(format!(
                        "constant field has {} values, state has {}",
                        value.len(),
                        x.len()
                    )));
                }
                value.clone()
            }
            Base::PairLinear {
                decay,
                rate,
                amplitude,
                frequency,
            } => {
                if !x.len().is_multiple_of(2) {
                    return Err(Error::LayoutMismatch(format!(
                        "pairwise field needs an even value count, got {}",
                        x.len()
                    )));
                }
                let (dx, dy) = Self::drive(*amplitude, *frequency, t, x.len() / 2);
                let mut out = Vec::with_capacity(x.len());
                for p in x.chunks_exact(2) {
                    let (a, b) = (p[0], p[1]);
                    out.push(-decay * a - rate * b + dx);
                    out.push(rate * a - decay * b + dy);
                }
                out
            }
        };
        if let Some(s) = self.shift(c, x.len())? {
            for (o, v) in out.iter_mut().zip(s) {
                *o += v;
            }
        }
        Ok(LatentState::from_parts(z.layout(), out))
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(self.lipschitz)
    }

    /// `dv/dt = J (J z + h + s) + h'`, so
    /// `|dv/dt| <= L (L R + |h| + |s|) + |h'|` on the ball of radius `R`.
    fn curvature_bound(&self, condition: &Condition) -> Option<f64> {
        match &self.base {
            Base::Constant(_) => Some(0.0),
            Base::PairLinear {
                amplitude,
                frequency,
                ..
            } => {
                let shift_norm = match condition {
                    Condition::Null => 0.0,
                    Condition::Label(k) => crate::state::l2(self.shifts.get(k)?),
                    Condition::Embedding(e) => crate::state::l2(e),
                };
                let l = self.lipschitz;
                let drive_rate = 2.0 * PI * frequency.abs() * amplitude.abs();
                Some(l * (l * self.radius + amplitude.abs() + shift_norm) + drive_rate)
            }
        }
    }

    fn certified_radius(&self) -> Option<f64> {
        Some(self.radius)
    }

    fn descriptor(&self) -> String {
        serde_json::to_string(&self.spec).unwrap_or_else(|_| self.spec.name().to_string())
    }
}

/// Which conditional velocity guidance extrapolates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgMode {
    /// `v_null + w (v_tar - v_null)`.
    #[default]
    Standard,
    /// `v_src + w (v_tar - v_src)`.
    SourceAnchored,
}

fn check_scale(w: f64) -> Result<()> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "guidance scale must be >= 0, got {w}"
        )))
    }
}

/// `base + w (cond - base)` with the endpoints returned exactly.
fn extrapolate(base: LatentState, cond: LatentState, w: f64) -> LatentState {
    if w == 1.0 {
        return cond;
    }
    if w == 0.0 {
        return base;
    }
    let values = base
        .values()
        .iter()
        .zip(cond.values())
        .map(|(&b, &c)| b + w * (c - b))
        .collect();
    LatentState::from_parts(base.layout(), values)
}

/// Classifier-free guidance: `v(z,t,null) + w (v(z,t,c) - v(z,t,null))`.
///
/// Always costs two evaluations.
pub fn cfg_velocity(
    field: &dyn VelocityField,
    z: &LatentState,
    t: f64,
    c: &Condition,
    w: f64,
) -> Result<LatentState> {
    check_scale(w)?;
    let v_null = field.eval(z, t, &Condition::Null)?;
    let v_cond = field.eval(z, t, c)?;
    Ok(extrapolate(v_null, v_cond, w))
}

/// Guidance anchored on the source condition:
/// `v(z,t,c_src) + w (v(z,t,c_tar) - v(z,t,c_src))`.
///
/// Always costs two evaluations.
pub fn cfg_velocity_src_anchored(
    field: &dyn VelocityField,
    z: &LatentState,
    t: f64,
    c_src: &Condition,
    c_tar: &Condition,
    w: f64,
) -> Result<LatentState> {
    check_scale(w)?;
    let v_src = field.eval(z, t, c_src)?;
    let v_tar = field.eval(z, t, c_tar)?;
    Ok(extrapolate(v_src, v_tar, w))
}

/// Guided target velocity for either mode.
pub fn guided_velocity(
    field: &dyn VelocityField,
    z: &LatentState,
    t: f64,
    c_src: &Condition,
    c_tar: &Condition,
    w: f64,
    mode: CfgMode,
) -> Result<LatentState> {
    match mode {
        CfgMode::Standard => cfg_velocity(field, z, t, c_tar, w),
        CfgMode::SourceAnchored => cfg_velocity_src_anchored(field, z, t, c_src, c_tar, w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(v: &[f64]) -> LatentState {
        LatentState::flat(v.to_vec())
    }

    #[test]
    fn constant_field_ignores_state_and_time() {
        let f = make_field(&FieldSpec::constant(vec![1.0, 2.0])).unwrap();
        for (z, t) in [([0.0, 0.0], 0.0), ([5.0, -3.0], 0.7)] {
            assert_eq!(
                f.eval(&flat(&z), t, &Condition::Null).unwrap().values(),
                &[1.0, 2.0]
            );
        }
        assert_eq!(f.lipschitz_bound(), Some(0.0));
        assert_eq!(f.curvature_bound(&Condition::Null), Some(0.0));
    }

    #[test]
    fn skew_applies_rotation_generator() {
        let f = make_field(&FieldSpec::linear_skew(1.0)).unwrap();
        let v = f.eval(&flat(&[1.0, 0.0]), 0.3, &Condition::Null).unwrap();
        assert_eq!(v.values(), &[0.0, 1.0]);
        assert_eq!(f.lipschitz_bound(), Some(1.0));
        // omega^2 * radius
        assert_eq!(f.curvature_bound(&Condition::Null), Some(2.0));
    }

    #[test]
    fn spiral_and_time_curved_certificates() {
        let s = make_field(&FieldSpec::ContractingSpiral {
            lambda: 0.6,
            omega: 0.8,
            radius: 1.5,
            shifts: BTreeMap::new(),
        })
        .unwrap();
        assert!((s.lipschitz_bound().unwrap() - 1.0).abs() < 1e-15);
        assert!((s.curvature_bound(&Condition::Null).unwrap() - 1.5).abs() < 1e-15);
        let tc = make_field(&FieldSpec::TimeCurved {
            rate: 0.0,
            amplitude: 0.5,
            frequency: 1.0,
            radius: 2.0,
            shifts: BTreeMap::new(),
        })
        .unwrap();
        assert_eq!(tc.lipschitz_bound(), Some(0.0));
        assert!((tc.curvature_bound(&Condition::Null).unwrap() - PI).abs() < 1e-12);
        let v = tc.eval(&flat(&[3.0, 4.0]), 0.25, &Condition::Null).unwrap();
        assert!((v.values()[0]).abs() < 1e-15 && (v.values()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unknown_kind_and_bad_params_are_errors() {
        assert!(FieldSpec::from_json(r#"{"kind":"vortex","omega":1}"#).is_err());
        assert!(make_field(&FieldSpec::linear_skew(f64::NAN)).is_err());
        let spec = FieldSpec::from_json(r#"{"kind":"linear_skew","omega":2.0}"#).unwrap();
        assert_eq!(spec, FieldSpec::linear_skew(2.0));
        let shifted =
            FieldSpec::linear_skew(1.0).with_shifts(BTreeMap::from([(3, vec![0.5, -0.5])]));
        let text = serde_json::to_string(&shifted).unwrap();
        assert_eq!(FieldSpec::from_json(&text).unwrap(), shifted);
        assert!(
            FieldSpec::from_json(r#"{"kind":"linear_skew","omega":1,"shifts":{"a":[1,2]}}"#)
                .is_err()
        );
    }

    #[test]
    fn odd_dimension_rejected_for_pairwise_fields() {
        let f = make_field(&FieldSpec::linear_skew(1.0)).unwrap();
        assert!(f
            .eval(&flat(&[1.0, 2.0, 3.0]), 0.0, &Condition::Null)
            .is_err());
    }

    #[test]
    fn label_shifts() {
        let spec = FieldSpec::linear_skew(1.0).with_shifts(BTreeMap::from([(1, vec![0.5, -0.5])]));
        let f = make_field(&spec).unwrap();
        let z = flat(&[1.0, 0.0]);
        let v = f.eval(&z, 0.0, &Condition::Label(1)).unwrap();
        assert_eq!(v.values(), &[0.5, 0.5]);
        assert!(f.eval(&z, 0.0, &Condition::Label(7)).is_err());
        let e = f
            .eval(&z, 0.0, &Condition::Embedding(vec![1.0, 1.0]))
            .unwrap();
        assert_eq!(e.values(), &[1.0, 2.0]);
    }

    #[test]
    fn purity_over_repeated_evaluations() {
        let spec = FieldSpec::TimeCurved {
            rate: 0.7,
            amplitude: 0.3,
            frequency: 1.3,
            radius: 3.0,
            shifts: BTreeMap::from([(0, vec![0.1, 0.2, 0.3, 0.4])]),
        };
        let f = make_field(&spec).unwrap();
        let z = LatentState::grid(1, 2, 2, vec![0.3, -0.2, 1.1, 0.9]).unwrap();
        let first = f.eval(&z, 0.37, &Condition::Label(0)).unwrap();
        for _ in 0..1000 {
            let again = f.eval(&z, 0.37, &Condition::Label(0)).unwrap();
            assert!(first
                .values()
                .iter()
                .zip(again.values())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn skew_lipschitz_certificate_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for omega in [0.5, 1.0, 2.0, -3.0] {
            let f = make_field(&FieldSpec::linear_skew(omega)).unwrap();
            for _ in 0..10_000 {
                let mut p = || {
                    let r: f64 = rng.random::<f64>().sqrt();
                    let th: f64 = rng.random::<f64>() * 2.0 * PI;
                    flat(&[r * th.cos(), r * th.sin()])
                };
                let (a, b) = (p(), p());
                let t = 0.5;
                let dv = f
                    .eval(&a, t, &Condition::Null)
                    .unwrap()
                    .dist(&f.eval(&b, t, &Condition::Null).unwrap());
                // rounding in the products is bounded by a few ulps of the operands
                let ulps = 4.0 * f64::EPSILON * omega.abs() * (a.norm() + b.norm());
                assert!(dv <= omega.abs() * a.dist(&b) * (1.0 + 1e-14) + ulps);
            }
        }
    }

    #[test]
    fn cfg_examples() {
        let spec =
            FieldSpec::constant(vec![0.0, 0.0]).with_shifts(BTreeMap::from([(1, vec![1.0, 0.0])]));
        let f = make_field(&spec).unwrap();
        let z = flat(&[0.0, 0.0]);
        let v = cfg_velocity(&*f, &z, 0.2, &Condition::Label(1), 3.5).unwrap();
        assert_eq!(v.values(), &[3.5, 0.0]);
        let v1 = cfg_velocity(&*f, &z, 0.2, &Condition::Label(1), 1.0).unwrap();
        assert_eq!(v1, f.eval(&z, 0.2, &Condition::Label(1)).unwrap());
        let v0 = cfg_velocity(&*f, &z, 0.2, &Condition::Label(1), 0.0).unwrap();
        assert_eq!(v0.values(), &[0.0, 0.0]);
        let vn = cfg_velocity(&*f, &z, 0.2, &Condition::Null, 7.0).unwrap();
        assert_eq!(vn, f.eval(&z, 0.2, &Condition::Null).unwrap());
        assert!(cfg_velocity(&*f, &z, 0.2, &Condition::Null, -1.0).is_err());
    }

    #[test]
    fn src_anchored_examples() {
        let spec = FieldSpec::constant(vec![0.0, 0.0])
            .with_shifts(BTreeMap::from([(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]));
        let f = make_field(&spec).unwrap();
        let z = flat(&[0.3, 0.3]);
        let (c0, c1) = (Condition::Label(0), Condition::Label(1));
        assert_eq!(
            cfg_velocity_src_anchored(&*f, &z, 0.0, &c0, &c1, 2.0)
                .unwrap()
                .values(),
            &[-1.0, 2.0]
        );
        assert_eq!(
            cfg_velocity_src_anchored(&*f, &z, 0.0, &c0, &c0, 9.0)
                .unwrap()
                .values(),
            &[1.0, 0.0]
        );
        assert_eq!(
            cfg_velocity_src_anchored(&*f, &z, 0.0, &c0, &c1, 1.0)
                .unwrap()
                .values(),
            &[0.0, 1.0]
        );
    }

    #[test]
    fn cfg_is_affine_in_scale() {
        let spec = FieldSpec::ContractingSpiral {
            lambda: 0.3,
            omega: 1.7,
            radius: 2.0,
            shifts: BTreeMap::from([(2, vec![0.4, -1.3])]),
        };
        let f = make_field(&spec).unwrap();
        let z = flat(&[0.7, -0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (w1, w2) = (rng.random::<f64>() * 8.0, rng.random::<f64>() * 8.0);
            let a = cfg_velocity(&*f, &z, 0.4, &Condition::Label(2), w1).unwrap();
            let b = cfg_velocity(&*f, &z, 0.4, &Condition::Label(2), w2).unwrap();
            let m = cfg_velocity(&*f, &z, 0.4, &Condition::Label(2), 0.5 * (w1 + w2)).unwrap();
            for ((x, y), z) in a.values().iter().zip(b.values()).zip(m.values()) {
                assert!((x + y - 2.0 * z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counted_wrapper_counts() {
        let f = make_field(&FieldSpec::linear_skew(1.0)).unwrap();
        let counted = Counted::new(&*f);
        let z = flat(&[1.0, 0.0]);
        cfg_velocity(&counted, &z, 0.0, &Condition::Null, 2.0).unwrap();
        counted.eval(&z, 0.0, &Condition::Null).unwrap();
        assert_eq!(counted.count(), 3);
    }
}
