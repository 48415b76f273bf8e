//! Empirical constants and the analytic error bounds they feed.
//!
//! The finite-step inversion bound is `(M dt / L)((1 + L dt)^N - 1)`, with the
//! exponential relaxation `(M dt / L)(e^L - 1)`. The controlled-edit bound is
//! `B(alpha) = (delta / L)(e^{alpha L} - 1)`. Both extend continuously to
//! `L = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::edit::{EditReport, MultiTurnReport};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::{cfg_velocity, guided_velocity, CfgMode, VelocityField};
use crate::solvers::{rk4_path, MIN_DENSE_STEPS};
use crate::state::{Condition, LatentState};
use crate::trajectory::{finite_diff_velocity, Trajectory};

/// Minimum pair count for [`estimate_lipschitz`].
pub const MIN_PAIRS: usize = 1000;

/// A ball in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub center: LatentState,
    pub radius: f64,
}

impl Region {
    pub fn ball(center: LatentState, radius: f64) -> Self {
        Self { center, radius }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> LatentState {
        let d = self.center.len();
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = crate::state::l2(&dir).max(f64::MIN_POSITIVE);
        let r = self.radius * rng.random::<f64>().powf(1.0 / d as f64);
        let mut z = self.center.clone();
        for (zi, di) in z.values_mut().iter_mut().zip(&dir) {
            *zi += r * di / norm;
        }
        z
    }
}

/// Largest sampled difference quotient `|v(z) - v(z')| / |z - z'|`.
///
/// Pair `j` draws from its own ChaCha stream, so the estimate depends only on
/// `seed` and `n_pairs`. Even pairs are independent points in the region; odd
/// pairs are local perturbations. Both points of a pair share a random time.
pub fn estimate_lipschitz(
    field: &dyn VelocityField,
    condition: &Condition,
    region: &Region,
    n_pairs: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if n_pairs < MIN_PAIRS {
        return Err(Error::InvalidConfig(format!(
            "Lipschitz estimation needs at least {MIN_PAIRS} pairs, got {n_pairs}"
        )));
    }
    let ratios = exec.map_range(n_pairs, |j| -> Result<Option<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let a = region.sample(&mut rng);
        let b = if j % 2 == 0 {
            region.sample(&mut rng)
        } else {
            let scale = region.radius * 10f64.powf(-rng.random_range(1.0..4.0));
            let mut b = a.clone();
            for v in b.values_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
            b
        };
        let t: f64 = rng.random();
        let dz = a.dist(&b);
        if dz == 0.0 {
            return Ok(None);
        }
        let dv = field
            .eval(&a, t, condition)?
            .dist(&field.eval(&b, t, condition)?);
        Ok(Some(dv / dz))
    });
    let mut best = 0.0f64;
    for r in ratios {
        if let Some(q) = r? {
            best = best.max(q);
        }
    }
    Ok(best)
}

/// Largest `|v(Z_{j+1}, t_{j+1}) - v(Z_j, t_j)| / h` along a dense RK4
/// re-solve from the trajectory's origin in its own direction.
pub fn estimate_curvature(
    field: &dyn VelocityField,
    traj: &Trajectory,
    dense_steps: usize,
) -> Result<f64> {
    if traj.n_steps() < 4 {
        return Err(Error::InvalidConfig(format!(
            "curvature estimation needs N >= 4, got {}",
            traj.n_steps()
        )));
    }
    if dense_steps < MIN_DENSE_STEPS {
        return Err(Error::InvalidConfig(format!(
            "curvature estimation needs at least {MIN_DENSE_STEPS} dense steps"
        )));
    }
    let c = traj.condition();
    let path = rk4_path(field, traj.origin(), c, traj.direction(), dense_steps)?;
    let h = 1.0 / dense_steps as f64;
    let mut prev = field.eval(&path[0].1, path[0].0, c)?;
    let mut best = 0.0f64;
    for (t, z) in &path[1..] {
        let v = field.eval(z, *t, c)?;
        best = best.max(v.dist(&prev) / h);
        prev = v;
    }
    Ok(best)
}

/// Finite-step and exponential inversion bounds for Lipschitz constant `l`,
/// curvature `m` and `n` steps.
pub fn inversion_bound(l: f64, m: f64, n: usize) -> Result<(f64, f64)> {
    if !(l >= 0.0 && m >= 0.0 && l.is_finite() && m.is_finite()) || n == 0 {
        return Err(Error::InvalidConfig(format!(
            "bound needs L >= 0, M >= 0, N >= 1; got L={l}, M={m}, N={n}"
        )));
    }
    let dt = 1.0 / n as f64;
    if l == 0.0 {
        return Ok((m * dt, m * dt));
    }
    let finite = m * dt / l * (n as f64 * (l * dt).ln_1p()).exp_m1();
    let exp = m * dt / l * l.exp_m1();
    Ok((finite, exp))
}

/// `B(alpha) = (delta / L)(e^{alpha L} - 1)`; `delta * alpha` at `L = 0`.
pub fn edit_bound(delta_max: f64, l: f64, alpha: f64) -> f64 {
    if l == 0.0 {
        delta_max * alpha
    } else {
        delta_max / l * (alpha * l).exp_m1()
    }
}

/// Largest `|v~(Z_i, t_i, c_tar, w) - v(Z_i, t_i, c_src)|` over the states of
/// a source trajectory.
pub fn delta_max_hat(
    field: &dyn VelocityField,
    src: &Trajectory,
    c_src: &Condition,
    c_tar: &Condition,
    w: f64,
    mode: CfgMode,
) -> Result<f64> {
    let grid = src.grid();
    let mut best = 0.0f64;
    for (i, z) in src.states().iter().enumerate() {
        let t = grid.t(i);
        let guided = guided_velocity(field, z, t, c_src, c_tar, w, mode)?;
        best = best.max(guided.dist(&field.eval(z, t, c_src)?));
    }
    Ok(best)
}

/// Largest `|v~(Z_i, t_i, c_tar, w) - (Z_i - Z_{i-1}) / dt|` for `i = 1..N`:
/// the deviation between guided velocities and the velocities an edit
/// actually replays from the cached source.
pub fn delta_max_cached(
    field: &dyn VelocityField,
    src: &Trajectory,
    c_tar: &Condition,
    w: f64,
    mode: CfgMode,
) -> Result<f64> {
    let grid = src.grid();
    let mut best = 0.0f64;
    for i in 1..=src.n_steps() {
        let guided = guided_velocity(
            field,
            src.state(i),
            grid.t(i),
            src.condition(),
            c_tar,
            w,
            mode,
        )?;
        best = best.max(guided.dist(&finite_diff_velocity(src, i)?));
    }
    Ok(best)
}

/// Editing and guidance deviation sums of a completed edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub v_delta_norm: f64,
    pub v_cfg_norm: f64,
    pub rhs: f64,
    pub lhs: f64,
}

impl Decomposition {
    pub fn holds(&self, tol: f64) -> bool {
        self.lhs <= self.rhs + tol
    }
}

/// Re-evaluates the conditional and unconditional velocities along the edit
/// trajectory and accumulates
/// `V_delta = sum_i v(Z~_i, c_tar) - V^src_i` and
/// `V_cfg = sum_i v(Z~_i, c_tar) - v(Z~_i, null)`.
///
/// The source velocities telescope to `(Z_N - Z^src_0) / dt`, so only the
/// source origin is needed. Returns `rhs = dt (|V_delta| + |w - 1| |V_cfg|)`
/// and `lhs = |Z~_0 - Z^src_0|`.
pub fn decomposition_accumulate(
    run: &EditReport,
    field: &dyn VelocityField,
) -> Result<Decomposition> {
    if run.config.cfg_mode != CfgMode::Standard {
        return Err(Error::InvalidConfig(
            "decomposition needs a standard-guidance run".into(),
        ));
    }
    let traj = &run.trajectory;
    let n = traj.n_steps();
    if run.steps.len() != n {
        return Err(Error::Missing(format!(
            "edit report has {} step records for {n} steps",
            run.steps.len()
        )));
    }
    let grid = traj.grid();
    let dt = grid.dt();
    let c_tar = &run.target;
    let mut sum_tar = LatentState::zeros(traj.layout());
    let mut sum_cfg = LatentState::zeros(traj.layout());
    for i in 1..=n {
        let z = traj.state(i);
        let v_c = field.eval(z, grid.t(i), c_tar)?;
        let v_null = field.eval(z, grid.t(i), &Condition::Null)?;
        sum_cfg = sum_cfg.add(&v_c.sub(&v_null));
        sum_tar = sum_tar.add(&v_c);
    }
    let sum_src = traj.state(n).sub(&run.source_origin).scale(1.0 / dt);
    let v_delta_norm = sum_tar.sub(&sum_src).norm();
    let v_cfg_norm = sum_cfg.norm();
    let rhs = dt * (v_delta_norm + (run.config.w - 1.0).abs() * v_cfg_norm);
    let lhs = run.final_state.dist(&run.source_origin);
    Ok(Decomposition {
        v_delta_norm,
        v_cfg_norm,
        rhs,
        lhs,
    })
}

/// Largest state norm along a trajectory.
pub fn max_state_norm(traj: &Trajectory) -> f64 {
    traj.states()
        .iter()
        .map(LatentState::norm)
        .fold(0.0, f64::max)
}

/// Guided velocity deviation sup for fields whose condition enters as an
/// additive constant: `|w s_tar + (1 - w) s_null - s_src|` does not depend on
/// the state, so one evaluation pair at any point gives it exactly.
pub fn delta_max_additive(
    field: &dyn VelocityField,
    probe: &LatentState,
    c_src: &Condition,
    c_tar: &Condition,
    w: f64,
) -> Result<f64> {
    Ok(cfg_velocity(field, probe, 0.0, c_tar, w)?.dist(&field.eval(probe, 0.0, c_src)?))
}

/// The guided target velocity viewed as a field of its own; the condition
/// passed to `eval` is ignored.
pub struct GuidedField<'a> {
    pub field: &'a dyn VelocityField,
    pub c_src: Condition,
    pub c_tar: Condition,
    pub w: f64,
    pub mode: CfgMode,
}

impl VelocityField for GuidedField<'_> {
    fn eval(&self, z: &LatentState, t: f64, _c: &Condition) -> Result<LatentState> {
        guided_velocity(
            self.field,
            z,
            t,
            &self.c_src,
            &self.c_tar,
            self.w,
            self.mode,
        )
    }

    /// Conditions enter analytic fields additively, so guidance keeps the
    /// state Jacobian and its bound.
    fn lipschitz_bound(&self) -> Option<f64> {
        self.field.certified_radius()?;
        self.field.lipschitz_bound()
    }

    fn descriptor(&self) -> String {
        format!("guided({})", self.field.descriptor())
    }
}

/// Drift of one edit turn against its controlled-edit bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnMargin {
    pub turn: usize,
    /// `|Z^(k)_0 - Z^(k-1)_0|`, with `Z^(-1)_0` the inverted source origin.
    pub drift: f64,
    pub delta_max: f64,
    pub lipschitz: f64,
    pub max_alpha: f64,
    pub bound: f64,
    /// `bound - drift`.
    pub margin: f64,
    /// Whether the constants are certified (otherwise the margin is
    /// informational).
    pub certified: bool,
}

/// Per-turn drift and `B(max alpha)` with the deviation measured against the
/// turn's own cached source velocities. `lipschitz` supplies the guided
/// Lipschitz constant for turns whose field has no certificate.
pub fn turn_margins(
    field: &dyn VelocityField,
    run: &MultiTurnReport,
    mut lipschitz: impl FnMut(&GuidedField<'_>) -> Result<f64>,
) -> Result<Vec<TurnMargin>> {
    let mut source = &run.source;
    let mut out = Vec::with_capacity(run.turns.len());
    for (k, turn) in run.turns.iter().enumerate() {
        let cfg = &turn.config;
        let guided = GuidedField {
            field,
            c_src: source.condition().clone(),
            c_tar: turn.target.clone(),
            w: cfg.w,
            mode: cfg.cfg_mode,
        };
        let delta_max = delta_max_cached(field, source, &turn.target, cfg.w, cfg.cfg_mode)?;
        let (l, certified) = match guided.lipschitz_bound() {
            Some(l) => (l, true),
            None => (lipschitz(&guided)?, false),
        };
        let max_alpha = turn.max_alpha();
        let bound = edit_bound(delta_max, l, max_alpha);
        let drift = turn.final_state.dist(source.state(0));
        out.push(TurnMargin {
            turn: k,
            drift,
            delta_max,
            lipschitz: l,
            max_alpha,
            bound,
            margin: bound - drift,
            certified,
        });
        source = &turn.trajectory;
    }
    Ok(out)
}

/// One row of the controlled-edit bound table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaBound {
    pub alpha: f64,
    pub bound: f64,
    pub linear: f64,
}

/// `B(alpha)` next to `alpha B(1)` over an alpha grid.
pub fn edit_bound_table(delta_max: f64, l: f64, alphas: &[f64]) -> Vec<AlphaBound> {
    let full = edit_bound(delta_max, l, 1.0);
    alphas
        .iter()
        .map(|&alpha| AlphaBound {
            alpha,
            bound: edit_bound(delta_max, l, alpha),
            linear: alpha * full,
        })
        .collect()
}

/// Evenly spaced interior points `k / (n + 1)`, `k = 1..=n`.
pub fn interior_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
}

/// Constants and bound checks for one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub field: String,
    pub l_hat: f64,
    pub m_hat: f64,
    pub delta_max_hat: f64,
    pub l_certified: Option<f64>,
    pub m_certified: Option<f64>,
    pub inversion_bound: f64,
    pub inversion_bound_exp: f64,
    pub reconstruction_error: f64,
    /// `None` when no certified constants exist (report only).
    pub inversion_pass: Option<bool>,
    pub edit_bounds: Vec<AlphaBound>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{make_field, FieldSpec};
    use crate::solvers::{invert, Method, SolverConfig};
    use proptest::prelude::*;
    use std::collections::BTreeMap;
    use std::f64::consts::{E, PI};

    fn flat(v: &[f64]) -> LatentState {
        LatentState::flat(v.to_vec())
    }

    fn unit_ball() -> Region {
        Region::ball(flat(&[0.0, 0.0]), 1.0)
    }

    #[test]
    fn lipschitz_examples() {
        let c = make_field(&FieldSpec::constant(vec![1.0, 2.0])).unwrap();
        assert_eq!(
            estimate_lipschitz(
                &*c,
                &Condition::Null,
                &unit_ball(),
                1000,
                1,
                Execution::Sequential
            )
            .unwrap(),
            0.0
        );
        let skew = make_field(&FieldSpec::linear_skew(1.0)).unwrap();
        let a = estimate_lipschitz(
            &*skew,
            &Condition::Null,
            &unit_ball(),
            10_000,
            1,
            Execution::default(),
        )
        .unwrap();
        let b = estimate_lipschitz(
            &*skew,
            &Condition::Null,
            &unit_ball(),
            10_000,
            2,
            Execution::default(),
        )
        .unwrap();
        assert!((0.99..=1.0 + 1e-9).contains(&a), "{a}");
        assert!((a - b).abs() <= 0.02 * a.max(b));
        assert!(estimate_lipschitz(
            &*skew,
            &Condition::Null,
            &unit_ball(),
            999,
            1,
            Execution::Sequential
        )
        .is_err());
    }

    #[test]
    fn lipschitz_is_execution_independent() {
        let f = make_field(&FieldSpec::ContractingSpiral {
            lambda: 0.4,
            omega: 1.3,
            radius: 2.0,
            shifts: BTreeMap::new(),
        })
        .unwrap();
        let seq = estimate_lipschitz(
            &*f,
            &Condition::Null,
            &unit_ball(),
            2000,
            9,
            Execution::Sequential,
        )
        .unwrap();
        let par = estimate_lipschitz(
            &*f,
            &Condition::Null,
            &unit_ball(),
            2000,
            9,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(seq.to_bits(), par.to_bits());
        assert!(seq <= f.lipschitz_bound().unwrap() + 1e-6);
    }

    #[test]
    fn curvature_examples() {
        let c = make_field(&FieldSpec::constant(vec![1.0, 0.0])).unwrap();
        let cfg = SolverConfig::new(8, Method::Euler, Condition::Null);
        let tc = invert(&*c, &flat(&[0.0, 0.0]), &cfg).unwrap().trajectory;
        assert_eq!(estimate_curvature(&*c, &tc, 1000).unwrap(), 0.0);

        let skew = make_field(&FieldSpec::linear_skew(1.0)).unwrap();
        let ts = invert(&*skew, &flat(&[1.0, 0.0]), &cfg).unwrap().trajectory;
        let m = estimate_curvature(&*skew, &ts, 1000).unwrap();
        assert!((m - 1.0).abs() < 1e-3, "{m}");

        let spec = FieldSpec::TimeCurved {
            rate: 0.0,
            amplitude: 0.5,
            frequency: 1.0,
            radius: 2.0,
            shifts: BTreeMap::new(),
        };
        let curved = make_field(&spec).unwrap();
        let t = invert(&*curved, &flat(&[0.2, 0.1]), &cfg)
            .unwrap()
            .trajectory;
        let m = estimate_curvature(&*curved, &t, 2000).unwrap();
        assert!((m - PI).abs() < 0.05 * PI, "{m}");
        assert!(m <= curved.curvature_bound(&Condition::Null).unwrap() + 1e-6);

        let short = invert(
            &*skew,
            &flat(&[1.0, 0.0]),
            &SolverConfig::new(3, Method::Euler, Condition::Null),
        )
        .unwrap();
        assert!(estimate_curvature(&*skew, &short.trajectory, 1000).is_err());
    }

    #[test]
    fn inversion_bound_examples() {
        assert_eq!(inversion_bound(1.0, 0.0, 10).unwrap(), (0.0, 0.0));
        let (f, e) = inversion_bound(1.0, 1.0, 10).unwrap();
        assert!((f - 0.1 * (1.1f64.powi(10) - 1.0)).abs() < 1e-14);
        assert!((f - 0.159374).abs() < 1e-6 && (e - 0.171828).abs() < 1e-6);
        assert!(inversion_bound(1.0, 1.0, 20).unwrap().0 < f);
        assert_eq!(inversion_bound(0.0, 2.0, 4).unwrap(), (0.5, 0.5));
        assert!(inversion_bound(-1.0, 1.0, 4).is_err());
        assert!(inversion_bound(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn edit_bound_examples() {
        assert_eq!(edit_bound(1.0, 1.0, 0.0), 0.0);
        let b = edit_bound(1.0, 1.0, 0.5);
        assert!((b - 0.648721).abs() < 1e-6);
        assert!(b < 0.5 * (E - 1.0));
        assert!((edit_bound(2.0, 1.5, 1.0) - 2.0 / 1.5 * (1.5f64.exp() - 1.0)).abs() < 1e-14);
        assert_eq!(edit_bound(0.7, 0.0, 0.5), 0.35);
    }

    fn shifted_skew() -> Box<dyn VelocityField> {
        make_field(
            &FieldSpec::linear_skew(1.0)
                .with_shifts(BTreeMap::from([(0, vec![0.2, -0.1]), (1, vec![-0.3, 0.4])])),
        )
        .unwrap()
    }

    #[test]
    fn delta_examples() {
        let f = shifted_skew();
        let src = invert(
            &*f,
            &flat(&[0.5, 0.5]),
            &SolverConfig::new(10, Method::Euler, Condition::Label(0)),
        )
        .unwrap()
        .trajectory;
        let same = delta_max_hat(
            &*f,
            &src,
            &Condition::Label(0),
            &Condition::Label(0),
            1.0,
            CfgMode::Standard,
        )
        .unwrap();
        assert_eq!(same, 0.0);
        let mut last = 0.0;
        for w in [1.0, 1.5, 2.0, 4.0] {
            let d = delta_max_hat(
                &*f,
                &src,
                &Condition::Label(0),
                &Condition::Label(1),
                w,
                CfgMode::Standard,
            )
            .unwrap();
            let exact = ((w * -0.3 - 0.2f64).powi(2) + (w * 0.4 + 0.1f64).powi(2)).sqrt();
            assert!((d - exact).abs() < 1e-12);
            assert!(d >= last);
            last = d;
        }
        let probe = delta_max_additive(
            &*f,
            &flat(&[0.0, 0.0]),
            &Condition::Label(0),
            &Condition::Label(1),
            2.0,
        )
        .unwrap();
        let d2 = delta_max_hat(
            &*f,
            &src,
            &Condition::Label(0),
            &Condition::Label(1),
            2.0,
            CfgMode::Standard,
        )
        .unwrap();
        assert!((probe - d2).abs() < 1e-12);
        let cached =
            delta_max_cached(&*f, &src, &Condition::Label(0), 1.0, CfgMode::Standard).unwrap();
        assert!(
            cached > 0.0,
            "explicit steps replay velocities from the previous state"
        );
    }

    #[test]
    fn decomposition_examples() {
        use crate::edit::{backward_edit, EditConfig};
        let f = shifted_skew();
        let src = invert(
            &*f,
            &flat(&[0.5, -0.2]),
            &SolverConfig::new(12, Method::Afp { k: 1 }, Condition::Label(0)),
        )
        .unwrap()
        .trajectory;
        let r = backward_edit(
            &*f,
            &src,
            &Condition::Label(0),
            &EditConfig::new(1.0, 4.5, 12).with_alpha(1.0),
        )
        .unwrap();
        let d = decomposition_accumulate(&r, &*f).unwrap();
        assert!(d.holds(1e-9));
        assert_eq!(d.rhs, r.trajectory.dt() * d.v_delta_norm);

        let r = backward_edit(
            &*f,
            &src,
            &Condition::Label(1),
            &EditConfig::new(3.0, 4.5, 12).with_alpha(1.0),
        )
        .unwrap();
        let d = decomposition_accumulate(&r, &*f).unwrap();
        assert!(d.holds(1e-9), "{d:?}");
        assert!(d.v_cfg_norm > 0.0);

        let mut bad = r.clone();
        bad.steps.pop();
        assert!(matches!(
            decomposition_accumulate(&bad, &*f),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn table_and_grid() {
        let g = interior_grid(99);
        assert_eq!(g.len(), 99);
        assert_eq!(g[49], 0.5);
        let t = edit_bound_table(0.8, 1.3, &g);
        assert!(t.iter().all(|r| r.bound < r.linear));
    }

    proptest! {
        #[test]
        fn finite_bound_below_exponential(l in 1e-6f64..5.0, m in 0.0f64..10.0, n in 1usize..200) {
            let (f, e) = inversion_bound(l, m, n).unwrap();
            prop_assert!(f <= e * (1.0 + 1e-12));
        }

        #[test]
        fn convexity_gap_is_negative(l in 1e-3f64..5.0, delta in 1e-3f64..10.0) {
            for r in edit_bound_table(delta, l, &interior_grid(99)) {
                prop_assert!(r.bound < r.linear);
            }
        }
    }
}
