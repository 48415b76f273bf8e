//! Backward editing by interpolating cached source velocities toward guided
//! target velocities, with an optional adaptive spatial mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{guided_velocity, CfgMode, Counted, VelocityField};
use crate::mask::{mask_refine, Mask, MaskConfig};
use crate::solvers::{invert_afp, Method, SolverConfig};
use crate::state::{spatial_cosine, Condition, LatentState, Layout};
use crate::trajectory::{finite_diff_velocity, Direction, Trajectory};

/// How the per-step interpolation weight is formed when no override is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    /// `cos(v_src, v_tar) * (1 - t^gamma)`.
    #[default]
    CosineDecay,
    /// `1 - t^gamma`.
    DecayOnly,
    /// `cos(v_src, v_tar)`.
    CosineOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    /// Guidance scale.
    pub w: f64,
    /// Temporal decay rate of the schedule.
    pub gamma: f64,
    pub n_steps: usize,
    /// Amortized fixed-point iterations for the forward inversion of a
    /// multi-turn edit.
    #[serde(default = "EditConfig::default_k_afp")]
    pub k_afp: usize,
    #[serde(default)]
    pub cfg_mode: CfgMode,
    /// Constant weight that bypasses the schedule.
    #[serde(default)]
    pub alpha_override: Option<f64>,
    #[serde(default)]
    pub schedule: AlphaSchedule,
    #[serde(default)]
    pub mask: Option<MaskConfig>,
    #[serde(default = "EditConfig::default_clamp")]
    pub clamp_negative_cosine: bool,
}

impl EditConfig {
    fn default_k_afp() -> usize {
        1
    }
    fn default_clamp() -> bool {
        true
    }

    pub fn new(w: f64, gamma: f64, n_steps: usize) -> Self {
        Self {
            w,
            gamma,
            n_steps,
            k_afp: 1,
            cfg_mode: CfgMode::Standard,
            alpha_override: None,
            schedule: AlphaSchedule::CosineDecay,
            mask: None,
            clamp_negative_cosine: true,
        }
    }

    /// Strong-guidance preset: `gamma = 4.5`, `w = 6.5`, 15 steps.
    pub fn preset_strong() -> Self {
        Self::new(6.5, 4.5, 15)
    }

    /// Moderate-guidance preset: `gamma = 5.5`, `w = 3.5`, 30 steps.
    pub fn preset_moderate() -> Self {
        Self::new(3.5, 5.5, 30)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha_override = Some(alpha);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w.is_finite() && self.w >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "w must be >= 0, got {}",
                self.w
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be >= 1".into()));
        }
        if self.k_afp == 0 {
            return Err(Error::InvalidConfig("k_afp must be >= 1".into()));
        }
        if let Some(a) = self.alpha_override {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidConfig(format!(
                    "alpha_override must be in [0, 1], got {a}"
                )));
            }
        }
        if let Some(m) = &self.mask {
            m.validate()?;
        }
        Ok(())
    }
}

/// Schedule value and the cosine it was built from.
fn schedule(
    v_src: &LatentState,
    v_tar: &LatentState,
    t_next: f64,
    gamma: f64,
    clamp: bool,
    kind: AlphaSchedule,
) -> Result<(f64, f64)> {
    let mut cos = spatial_cosine(v_src, v_tar)?;
    if clamp {
        cos = cos.max(0.0);
    }
    let decay = 1.0 - t_next.clamp(0.0, 1.0).powf(gamma);
    let alpha = match kind {
        AlphaSchedule::CosineDecay => cos * decay,
        AlphaSchedule::DecayOnly => decay,
        AlphaSchedule::CosineOnly => cos,
    };
    Ok((alpha, cos))
}

/// `cos(v_src, v_tar) * (1 - t_next^gamma)`, with negative cosines raised to
/// zero when `clamp` is set.
pub fn alpha_schedule(
    v_src: &LatentState,
    v_tar: &LatentState,
    t_next: f64,
    gamma: f64,
    clamp: bool,
) -> Result<f64> {
    Ok(schedule(
        v_src,
        v_tar,
        t_next,
        gamma,
        clamp,
        AlphaSchedule::CosineDecay,
    )?
    .0)
}

/// `v_src + alpha * M ⊙ (v_tar - v_src)`, the per-site mask broadcast over
/// channels. Elements with gain 0 or 1 return the endpoint exactly.
pub fn edit_velocity(
    v_src: &LatentState,
    v_tar: &LatentState,
    alpha: f64,
    mask: Option<&Mask>,
) -> Result<LatentState> {
    v_src.check_same_layout(v_tar)?;
    let channels = v_src.layout().channels();
    if let Some(m) = mask {
        match v_src.layout() {
            Layout::Grid { h, w, .. } if m.h() == h && m.w() == w => {}
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "{}x{} mask for a {other:?} state",
                    m.h(),
                    m.w()
                )))
            }
        }
    }
    let mut out = v_src.clone();
    for (idx, (o, &t)) in out.values_mut().iter_mut().zip(v_tar.values()).enumerate() {
        let g = match mask {
            Some(m) => alpha * m.values()[idx / channels],
            None => alpha,
        };
        if g == 1.0 {
            *o = t;
        } else if g != 0.0 {
            *o += g * (t - *o);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub i: usize,
    pub t: f64,
    pub alpha: f64,
    pub cosine: f64,
    pub delta_v_norm: f64,
    pub mask_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditReport {
    pub final_state: LatentState,
    /// Origin of the source trajectory the edit started from.
    pub source_origin: LatentState,
    pub target: Condition,
    pub steps: Vec<StepRecord>,
    pub nfe: usize,
    pub config: EditConfig,
    /// Backward trajectory; `velocities[i - 1]` is the edit velocity applied
    /// from `t_i` to `t_{i-1}`.
    #[serde(skip)]
    pub trajectory: Trajectory,
}

impl EditReport {
    pub fn deviation_from_source(&self) -> f64 {
        self.final_state.dist(&self.source_origin)
    }

    pub fn max_alpha(&self) -> f64 {
        self.steps.iter().map(|s| s.alpha).fold(0.0, f64::max)
    }
}

/// Edit from the noise end of `src` back to `t = 0`.
///
/// The source velocity at step `i` is the finite difference of the cached
/// states; only the guided target velocity costs evaluations.
pub fn backward_edit(
    field: &dyn VelocityField,
    src: &Trajectory,
    c_tar: &Condition,
    config: &EditConfig,
) -> Result<EditReport> {
    config.validate()?;
    let n = src.n_steps();
    if n != config.n_steps {
        return Err(Error::InvalidConfig(format!(
            "source trajectory has {n} steps, edit config expects {}",
            config.n_steps
        )));
    }
    let grid = src.grid();
    let dt = grid.dt();
    let counted = Counted::new(field);
    let c_src = src.condition();
    let mut states = vec![src.state(n).clone(); n + 1];
    let mut velocities = vec![LatentState::zeros(src.layout()); n];
    let mut steps = Vec::with_capacity(n);
    for i in (1..=n).rev() {
        let v_src = finite_diff_velocity(src, i)?;
        let z = &states[i];
        let v_tar = guided_velocity(
            &counted,
            z,
            grid.t(i),
            c_src,
            c_tar,
            config.w,
            config.cfg_mode,
        )?;
        let t_prev = grid.t(i - 1);
        let (alpha, cosine) = match config.alpha_override {
            Some(a) => (a, spatial_cosine(&v_src, &v_tar)?),
            None => schedule(
                &v_src,
                &v_tar,
                t_prev,
                config.gamma,
                config.clamp_negative_cosine,
                config.schedule,
            )?,
        };
        let delta = v_tar.sub(&v_src);
        let mask = match &config.mask {
            Some(mc) => Some(mask_refine(&delta, mc)?),
            None => None,
        };
        let v_edit = edit_velocity(&v_src, &v_tar, alpha, mask.as_ref())?;
        let prev = z.axpy(-dt, &v_edit);
        prev.ensure_finite(i - 1, "edited state")?;
        steps.push(StepRecord {
            i,
            t: grid.t(i),
            alpha,
            cosine,
            delta_v_norm: delta.norm(),
            mask_mean: mask.as_ref().map(Mask::mean),
        });
        states[i - 1] = prev;
        velocities[i - 1] = v_edit;
    }
    let trajectory = Trajectory::new(grid, states, velocities, c_tar.clone(), Direction::Backward)?;
    Ok(EditReport {
        final_state: trajectory.state(0).clone(),
        source_origin: src.state(0).clone(),
        target: c_tar.clone(),
        steps,
        nfe: counted.count(),
        config: config.clone(),
        trajectory,
    })
}

/// One turn of a multi-turn edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub target: Condition,
    /// Overrides the config's decay rate for this turn.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Replaces the base mask of the config's mask settings (or the default
    /// settings when the config has none).
    #[serde(default)]
    pub base_mask: Option<Mask>,
    #[serde(default)]
    pub alpha_override: Option<f64>,
}

impl Turn {
    pub fn to(target: Condition) -> Self {
        Self {
            target,
            gamma: None,
            base_mask: None,
            alpha_override: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha_override = Some(alpha);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiTurnReport {
    pub inversion_nfe: usize,
    pub turns: Vec<EditReport>,
    #[serde(skip)]
    pub source: Trajectory,
}

/// Invert once, then edit turn by turn; each turn's edit trajectory is the
/// next turn's source.
pub fn multi_turn_edit(
    field: &dyn VelocityField,
    z0: &LatentState,
    c_src: &Condition,
    turns: &[Turn],
    config: &EditConfig,
) -> Result<MultiTurnReport> {
    if turns.is_empty() {
        return Err(Error::InvalidConfig(
            "multi-turn edit needs at least one turn".into(),
        ));
    }
    config.validate()?;
    let solver = SolverConfig::new(
        config.n_steps,
        Method::Afp { k: config.k_afp },
        c_src.clone(),
    );
    let inversion = invert_afp(field, z0, &solver)?;
    let mut source = inversion.trajectory.clone();
    let mut reports = Vec::with_capacity(turns.len());
    for (k, turn) in turns.iter().enumerate() {
        let mut cfg = config.clone();
        if let Some(g) = turn.gamma {
            cfg.gamma = g;
        }
        if let Some(a) = turn.alpha_override {
            cfg.alpha_override = Some(a);
        }
        if let Some(base) = &turn.base_mask {
            cfg.mask = Some(match &config.mask {
                Some(m) => MaskConfig {
                    base: base.clone(),
                    ..m.clone()
                },
                None => MaskConfig::with_base(base.clone()),
            });
        }
        let report =
            backward_edit(field, &source, &turn.target, &cfg).map_err(|e| Error::Turn {
                turn: k,
                source: Box::new(e),
            })?;
        source = report.trajectory.clone();
        reports.push(report);
    }
    Ok(MultiTurnReport {
        inversion_nfe: inversion.nfe,
        turns: reports,
        source: inversion.trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{make_field, FieldSpec};
    use crate::solvers::{invert, reconstruct};
    use std::collections::BTreeMap;

    fn flat(v: &[f64]) -> LatentState {
        LatentState::flat(v.to_vec())
    }

    fn two_label_skew() -> Box<dyn VelocityField> {
        let spec = FieldSpec::linear_skew(1.0)
            .with_shifts(BTreeMap::from([(0, vec![0.3, -0.2]), (1, vec![-0.4, 0.5])]));
        make_field(&spec).unwrap()
    }

    fn source(field: &dyn VelocityField, n: usize) -> Trajectory {
        let cfg = SolverConfig::new(n, Method::Afp { k: 2 }, Condition::Label(0));
        invert(field, &flat(&[0.6, -0.3]), &cfg).unwrap().trajectory
    }

    #[test]
    fn alpha_examples() {
        let v = flat(&[1.0, 2.0]);
        assert_eq!(
            alpha_schedule(&v, &flat(&[3.0, -1.0]), 1.0, 4.5, true).unwrap(),
            0.0
        );
        assert!((alpha_schedule(&v, &v, 0.5, 2.0, true).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(
            alpha_schedule(&v, &v.scale(-1.0), 0.3, 2.0, true).unwrap(),
            0.0
        );
        assert!(alpha_schedule(&v, &v.scale(-1.0), 0.0, 2.0, false).unwrap() < 0.0);
        assert!((alpha_schedule(&v, &v, 0.0, 2.0, true).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn edit_velocity_examples() {
        let vs = flat(&[0.3, -1.7]);
        let vt = flat(&[2.1, 0.4]);
        assert_eq!(edit_velocity(&vs, &vt, 0.0, None).unwrap(), vs);
        assert_eq!(edit_velocity(&vs, &vt, 1.0, None).unwrap(), vt);
        let half = edit_velocity(&flat(&[0.0, 0.0]), &flat(&[2.0, 4.0]), 0.5, None).unwrap();
        assert_eq!(half.values(), &[1.0, 2.0]);

        let gs = LatentState::grid(2, 1, 1, vec![0.0, 0.0]).unwrap();
        let gt = LatentState::grid(2, 1, 1, vec![2.0, 2.0]).unwrap();
        let m = Mask::new(2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(
            edit_velocity(&gs, &gt, 1.0, Some(&m)).unwrap().values(),
            &[2.0, 0.0]
        );
        let wrong = Mask::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(edit_velocity(&gs, &gt, 1.0, Some(&wrong)).is_err());
        assert!(edit_velocity(&vs, &vt, 1.0, Some(&m)).is_err());
    }

    #[test]
    fn zero_alpha_reproduces_source() {
        let f = two_label_skew();
        let src = source(&*f, 12);
        let r = backward_edit(
            &*f,
            &src,
            &Condition::Label(1),
            &EditConfig::new(3.0, 4.5, 12).with_alpha(0.0),
        )
        .unwrap();
        for i in 0..=12 {
            assert!(r.trajectory.state(i).dist(src.state(i)) < 1e-9);
        }
        assert_eq!(r.nfe, 24);
        assert_eq!(r.steps.len(), 12);
        assert!(r.trajectory.step_relation_residual() < 1e-12);
    }

    #[test]
    fn full_alpha_same_condition_is_reconstruction() {
        let f = two_label_skew();
        let src = source(&*f, 10);
        let r = backward_edit(
            &*f,
            &src,
            &Condition::Label(0),
            &EditConfig::new(1.0, 4.5, 10).with_alpha(1.0),
        )
        .unwrap();
        let rec = reconstruct(&*f, src.endpoint(), &Condition::Label(0), 10, None).unwrap();
        assert!(r.final_state.dist(&rec.z0_hat) < 1e-9);
    }

    #[test]
    fn schedule_stays_in_unit_interval_and_first_step_is_live() {
        let f = two_label_skew();
        let src = source(&*f, 15);
        let r = backward_edit(
            &*f,
            &src,
            &Condition::Label(1),
            &EditConfig::preset_strong(),
        )
        .unwrap();
        assert!(r.steps.iter().all(|s| (0.0..=1.0).contains(&s.alpha)));
        assert_eq!(r.steps[0].i, 15);
        assert!(r.steps[0].alpha > 0.0, "decay is evaluated at t_(N-1)");
    }

    #[test]
    fn all_ones_mask_is_neutral() {
        let spec = FieldSpec::linear_skew(1.0)
            .with_shifts(BTreeMap::from([(0, vec![0.1; 18]), (1, vec![-0.2; 18])]));
        let f = make_field(&spec).unwrap();
        let z0 = LatentState::grid(
            3,
            3,
            2,
            (0..18).map(|i| (i as f64 * 0.7).sin() * 0.3).collect(),
        )
        .unwrap();
        let src = invert(
            &*f,
            &z0,
            &SolverConfig::new(8, Method::Euler, Condition::Label(0)),
        )
        .unwrap()
        .trajectory;
        let plain = EditConfig::new(2.0, 4.5, 8);
        let mut masked = plain.clone();
        masked.mask = Some(MaskConfig::with_base(Mask::filled(3, 3, 1.0).unwrap()));
        let a = backward_edit(&*f, &src, &Condition::Label(1), &plain).unwrap();
        let b = backward_edit(&*f, &src, &Condition::Label(1), &masked).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(b.steps[0].mask_mean, Some(1.0));
    }

    #[test]
    fn config_errors() {
        let f = two_label_skew();
        let src = source(&*f, 6);
        let c = Condition::Label(1);
        assert!(matches!(
            backward_edit(&*f, &src, &c, &EditConfig::new(1.0, 4.5, 7)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(backward_edit(&*f, &src, &c, &EditConfig::new(1.0, 0.0, 6)).is_err());
        assert!(
            backward_edit(&*f, &src, &c, &EditConfig::new(1.0, 4.5, 6).with_alpha(1.5)).is_err()
        );
        let mut flat_mask = EditConfig::new(1.0, 4.5, 6);
        flat_mask.mask = Some(MaskConfig::with_base(Mask::filled(1, 2, 0.0).unwrap()));
        assert!(backward_edit(&*f, &src, &c, &flat_mask).is_err());
    }

    #[test]
    fn multi_turn_identity_and_handoff() {
        let f = two_label_skew();
        let z0 = flat(&[0.6, -0.3]);
        let cfg = EditConfig::new(2.0, 4.5, 20);
        let turns = vec![Turn::to(Condition::Label(1)).with_alpha(0.0); 3];
        let r = multi_turn_edit(&*f, &z0, &Condition::Label(0), &turns, &cfg).unwrap();
        assert_eq!(r.inversion_nfe, 21);
        for t in &r.turns {
            assert!(t.final_state.dist(r.source.state(0)) < 1e-9);
        }

        let turns = vec![
            Turn::to(Condition::Label(1)),
            Turn::to(Condition::Label(1)).with_alpha(0.0),
        ];
        let r = multi_turn_edit(&*f, &z0, &Condition::Label(0), &turns, &cfg).unwrap();
        assert!(r.turns[1].final_state.dist(&r.turns[0].final_state) < 1e-9);
    }

    #[test]
    fn multi_turn_failure_names_the_turn() {
        let f = two_label_skew();
        let turns = vec![Turn::to(Condition::Label(1)), Turn::to(Condition::Label(7))];
        let err = multi_turn_edit(
            &*f,
            &flat(&[0.1, 0.2]),
            &Condition::Label(0),
            &turns,
            &EditConfig::new(1.0, 4.5, 5),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Turn { turn: 1, .. }));
        assert!(multi_turn_edit(
            &*f,
            &flat(&[0.1, 0.2]),
            &Condition::Label(0),
            &[],
            &EditConfig::new(1.0, 4.5, 5)
        )
        .is_err());
    }

    #[test]
    fn report_serializes_per_step_records() {
        let f = two_label_skew();
        let src = source(&*f, 4);
        let r = backward_edit(
            &*f,
            &src,
            &Condition::Label(1),
            &EditConfig::new(2.0, 4.5, 4),
        )
        .unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["steps"].as_array().unwrap().len(), 4);
        assert_eq!(v["nfe"], 8);
        assert!(v["steps"][0]["mask_mean"].is_null());
        assert!(v.get("trajectory").is_none());
    }
}
