//! Forward inversion, backward reconstruction and the dense reference
//! integrator.
//!
//! Every solver counts velocity evaluations. With `N` steps:
//!
//! | method          | forward NFE      |
//! |-----------------|------------------|
//! | Euler           | `N`              |
//! | FixedPoint(K)   | `N * (K + 1)`    |
//! | AFP(K)          | `N + K`          |
//! | Midpoint        | `2 * N`          |
//!
//! AFP spends one evaluation on the initial guess and `K` refinements at the
//! first step (`K + 1` total there), then one correction per remaining step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{cfg_velocity, Counted, VelocityField};
use crate::state::{Condition, LatentState, TimeGrid};
use crate::trajectory::{Direction, Trajectory};

/// Forward integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    /// `K` fixed-point iterations at every step.
    FixedPoint {
        k: usize,
    },
    /// `K` fixed-point iterations at the first step, one warm-started
    /// correction afterwards.
    Afp {
        k: usize,
    },
    Midpoint,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::FixedPoint { .. } => "fixed_point",
            Method::Afp { .. } => "afp",
            Method::Midpoint => "midpoint",
        }
    }

    pub fn iterations(&self) -> usize {
        match *self {
            Method::FixedPoint { k } | Method::Afp { k } => k,
            _ => 0,
        }
    }

    /// Documented forward NFE for `n` steps.
    pub fn expected_nfe(&self, n: usize) -> usize {
        match *self {
            Method::Euler => n,
            Method::FixedPoint { k } => n * (k + 1),
            Method::Afp { k } => n + k,
            Method::Midpoint => 2 * n,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Method::FixedPoint { k: 0 } | Method::Afp { k: 0 } => Err(Error::InvalidConfig(
                "fixed-point methods need K >= 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub n_steps: usize,
    pub method: Method,
    #[serde(default)]
    pub condition: Condition,
}

impl SolverConfig {
    pub fn new(n_steps: usize, method: Method, condition: Condition) -> Self {
        Self {
            n_steps,
            method,
            condition,
        }
    }
}

/// A forward solve and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub trajectory: Trajectory,
    pub nfe: usize,
}

fn check_method(cfg: &SolverConfig, want: fn(&Method) -> bool, name: &str) -> Result<()> {
    cfg.method.validate()?;
    if want(&cfg.method) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} called with method {:?}",
            cfg.method
        )))
    }
}

fn finish(
    grid: TimeGrid,
    states: Vec<LatentState>,
    velocities: Vec<LatentState>,
    condition: &Condition,
    counted: &Counted<'_>,
) -> Result<Inversion> {
    Ok(Inversion {
        trajectory: Trajectory::new(
            grid,
            states,
            velocities,
            condition.clone(),
            Direction::Forward,
        )?,
        nfe: counted.count(),
    })
}

/// Run whichever forward scheme `cfg.method` names.
pub fn invert(
    field: &dyn VelocityField,
    z0: &LatentState,
    cfg: &SolverConfig,
) -> Result<Inversion> {
    match cfg.method {
        Method::Euler => invert_euler(field, z0, cfg),
        Method::FixedPoint { .. } => invert_fixed_point(field, z0, cfg),
        Method::Afp { .. } => invert_afp(field, z0, cfg),
        Method::Midpoint => invert_midpoint(field, z0, cfg),
    }
}

/// Explicit Euler: `Z_{i+1} = Z_i + dt v(Z_i, t_i, c)`.
pub fn invert_euler(
    field: &dyn VelocityField,
    z0: &LatentState,
    cfg: &SolverConfig,
) -> Result<Inversion> {
    check_method(cfg, |m| matches!(m, Method::Euler), "invert_euler")?;
    let grid = TimeGrid::new(cfg.n_steps)?;
    let counted = Counted::new(field);
    let dt = grid.dt();
    let c = &cfg.condition;
    let mut states = vec![z0.clone()];
    let mut velocities = Vec::with_capacity(cfg.n_steps);
    for i in 0..cfg.n_steps {
        let v = counted.eval(&states[i], grid.t(i), c)?;
        let next = states[i].axpy(dt, &v);
        next.ensure_finite(i + 1, "euler forward state")?;
        velocities.push(v);
        states.push(next);
    }
    finish(grid, states, velocities, c, &counted)
}

/// Result of iterating `v <- v(z + dt v, t_next, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointStep {
    pub velocity: LatentState,
    /// `|v^{k+1} - v^k|` for `k = 0..K`.
    pub residuals: Vec<f64>,
}

/// Exactly `k` iterations of the implicit step map starting from `v_init`.
///
/// No early exit: the evaluation count is always `k`.
pub fn solve_fixed_point_step(
    field: &dyn VelocityField,
    z: &LatentState,
    t_i: f64,
    t_next: f64,
    v_init: &LatentState,
    k: usize,
    condition: &Condition,
) -> Result<FixedPointStep> {
    if k == 0 {
        return Err(Error::InvalidConfig("fixed-point step needs K >= 1".into()));
    }
    let dt = t_next - t_i;
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "step size must be positive, got {dt}"
        )));
    }
    let mut v = v_init.clone();
    let mut residuals = Vec::with_capacity(k);
    for it in 0..k {
        let next = field.eval(&z.axpy(dt, &v), t_next, condition)?;
        next.ensure_finite(it, "fixed-point iterate")?;
        residuals.push(next.dist(&v));
        v = next;
    }
    Ok(FixedPointStep {
        velocity: v,
        residuals,
    })
}

/// Uniform fixed-point refinement: `K` iterations at every step, each started
/// from the explicit Euler velocity.
pub fn invert_fixed_point(
    field: &dyn VelocityField,
    z0: &LatentState,
    cfg: &SolverConfig,
) -> Result<Inversion> {
    check_method(
        cfg,
        |m| matches!(m, Method::FixedPoint { .. }),
        "invert_fixed_point",
    )?;
    let k = cfg.method.iterations();
    let grid = TimeGrid::new(cfg.n_steps)?;
    let counted = Counted::new(field);
    let dt = grid.dt();
    let c = &cfg.condition;
    let mut states = vec![z0.clone()];
    let mut velocities = Vec::with_capacity(cfg.n_steps);
    for i in 0..cfg.n_steps {
        let z = &states[i];
        let v0 = counted.eval(z, grid.t(i), c)?;
        let step = solve_fixed_point_step(&counted, z, grid.t(i), grid.t(i + 1), &v0, k, c)
            .map_err(|e| at_step(e, i))?;
        let next = z.axpy(dt, &step.velocity);
        next.ensure_finite(i + 1, "fixed-point forward state")?;
        velocities.push(step.velocity);
        states.push(next);
    }
    finish(grid, states, velocities, c, &counted)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { context, .. } => Error::NonFinite { step, context },
        other => other,
    }
}

/// Amortized fixed-point inversion.
///
/// At `t_0` the Euler velocity is refined `K` times through the implicit step
/// map; every later step makes one prediction with the previous step's
/// velocity and one correction evaluation at `t_{i+1}`.
pub fn invert_afp(
    field: &dyn VelocityField,
    z0: &LatentState,
    cfg: &SolverConfig,
) -> Result<Inversion> {
    check_method(cfg, |m| matches!(m, Method::Afp { .. }), "invert_afp")?;
    let k = cfg.method.iterations();
    let grid = TimeGrid::new(cfg.n_steps)?;
    let counted = Counted::new(field);
    let dt = grid.dt();
    let c = &cfg.condition;

    let mut v = counted.eval(z0, grid.t(0), c)?;
    for _ in 0..k {
        let predicted = z0.axpy(dt, &v);
        v = counted.eval(&predicted, grid.t(1), c)?;
        v.ensure_finite(0, "afp initial refinement")?;
    }
    let mut states = vec![z0.clone(), z0.axpy(dt, &v)];
    states[1].ensure_finite(1, "afp forward state")?;
    let mut velocities = vec![v.clone()];

    for i in 1..cfg.n_steps {
        let z = &states[i];
        let predicted = z.axpy(dt, &v);
        v = counted.eval(&predicted, grid.t(i + 1), c)?;
        let next = z.axpy(dt, &v);
        next.ensure_finite(i + 1, "afp forward state")?;
        velocities.push(v.clone());
        states.push(next);
    }
    finish(grid, states, velocities, c, &counted)
}

/// Explicit midpoint rule, two evaluations per step.
pub fn invert_midpoint(
    field: &dyn VelocityField,
    z0: &LatentState,
    cfg: &SolverConfig,
) -> Result<Inversion> {
    check_method(cfg, |m| matches!(m, Method::Midpoint), "invert_midpoint")?;
    let grid = TimeGrid::new(cfg.n_steps)?;
    let counted = Counted::new(field);
    let dt = grid.dt();
    let c = &cfg.condition;
    let mut states = vec![z0.clone()];
    let mut velocities = Vec::with_capacity(cfg.n_steps);
    for i in 0..cfg.n_steps {
        let z = &states[i];
        let t = grid.t(i);
        let v = counted.eval(z, t, c)?;
        let v_half = counted.eval(&z.axpy(0.5 * dt, &v), t + 0.5 * dt, c)?;
        let next = z.axpy(dt, &v_half);
        next.ensure_finite(i + 1, "midpoint forward state")?;
        velocities.push(v_half);
        states.push(next);
    }
    finish(grid, states, velocities, c, &counted)
}

/// Backward Euler reconstruction and its error against a known origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    pub z0_hat: LatentState,
    /// Backward trajectory; `states[N]` is the starting latent.
    pub trajectory: Trajectory,
    /// `|z0_hat - z0|` when a ground truth was supplied.
    pub error: Option<f64>,
    pub nfe: usize,
}

/// `Z_i = Z_{i+1} - dt v(Z_{i+1}, t_{i+1}, c)` for `i = N-1..0`.
pub fn reconstruct(
    field: &dyn VelocityField,
    z1: &LatentState,
    condition: &Condition,
    n_steps: usize,
    ground_truth: Option<&LatentState>,
) -> Result<ReconReport> {
    let grid = TimeGrid::new(n_steps)?;
    let counted = Counted::new(field);
    let trajectory =
        integrate_backward(&grid, z1, condition, |z, t| counted.eval(z, t, condition))?;
    let z0_hat = trajectory.state(0).clone();
    let error = match ground_truth {
        Some(gt) => {
            gt.check_same_layout(&z0_hat)?;
            Some(z0_hat.dist(gt))
        }
        None => None,
    };
    Ok(ReconReport {
        z0_hat,
        trajectory,
        error,
        nfe: counted.count(),
    })
}

/// Backward Euler sampling under classifier-free guidance with scale `w`.
pub fn generate(
    field: &dyn VelocityField,
    z1: &LatentState,
    condition: &Condition,
    w: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    let grid = TimeGrid::new(n_steps)?;
    integrate_backward(&grid, z1, condition, |z, t| {
        cfg_velocity(field, z, t, condition, w)
    })
}

fn integrate_backward(
    grid: &TimeGrid,
    z1: &LatentState,
    condition: &Condition,
    mut velocity: impl FnMut(&LatentState, f64) -> Result<LatentState>,
) -> Result<Trajectory> {
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut states = vec![z1.clone(); n + 1];
    let mut velocities = vec![LatentState::zeros(z1.layout()); n];
    for i in (0..n).rev() {
        let v = velocity(&states[i + 1], grid.t(i + 1))?;
        let prev = states[i + 1].axpy(-dt, &v);
        prev.ensure_finite(i, "backward state")?;
        states[i] = prev;
        velocities[i] = v;
    }
    Trajectory::new(
        *grid,
        states,
        velocities,
        condition.clone(),
        Direction::Backward,
    )
}

/// Smallest resolution accepted by the reference integrator.
pub const MIN_DENSE_STEPS: usize = 1000;

/// Classical RK4 over the whole unit interval; returns the endpoint.
pub fn reference_solve(
    field: &dyn VelocityField,
    z: &LatentState,
    condition: &Condition,
    direction: Direction,
    dense_steps: usize,
) -> Result<LatentState> {
    Ok(reference_path(field, z, condition, direction, dense_steps)?
        .pop()
        .expect("path has at least two points")
        .1)
}

/// RK4 path `(t_j, Z_{t_j})` in integration order.
pub fn reference_path(
    field: &dyn VelocityField,
    z: &LatentState,
    condition: &Condition,
    direction: Direction,
    dense_steps: usize,
) -> Result<Vec<(f64, LatentState)>> {
    if dense_steps < MIN_DENSE_STEPS {
        return Err(Error::InvalidConfig(format!(
            "reference solve needs at least {MIN_DENSE_STEPS} steps, got {dense_steps}"
        )));
    }
    rk4_path(field, z, condition, direction, dense_steps)
}

pub(crate) fn rk4_path(
    field: &dyn VelocityField,
    z: &LatentState,
    c: &Condition,
    direction: Direction,
    steps: usize,
) -> Result<Vec<(f64, LatentState)>> {
    let (sign, t_start) = match direction {
        Direction::Forward => (1.0, 0.0),
        Direction::Backward => (-1.0, 1.0),
    };
    let h = sign / steps as f64;
    let mut path = Vec::with_capacity(steps + 1);
    path.push((t_start, z.clone()));
    let mut cur = z.clone();
    for j in 0..steps {
        let t = t_start + sign * (j as f64 / steps as f64);
        let k1 = field.eval(&cur, t, c)?;
        let k2 = field.eval(&cur.axpy(0.5 * h, &k1), t + 0.5 * h, c)?;
        let k3 = field.eval(&cur.axpy(0.5 * h, &k2), t + 0.5 * h, c)?;
        let k4 = field.eval(&cur.axpy(h, &k3), t + h, c)?;
        let incr = k1.add(&k2.scale(2.0)).add(&k3.scale(2.0)).add(&k4);
        cur = cur.axpy(h / 6.0, &incr);
        cur.ensure_finite(j + 1, "reference integrator state")?;
        let t_next = t_start + sign * ((j + 1) as f64 / steps as f64);
        path.push((t_next, cur.clone()));
    }
    Ok(path)
}
