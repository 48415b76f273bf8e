//! Experiment orchestration: config documents, seeded runs and their
//! artifacts on disk.
//!
//! Every run writes `manifest.json` (config echo, version, seed, timestamp)
//! and `result.json`. The result depends only on the config and seed; wall
//! clock values live in the manifest alone. CSV tables and trajectory JSONL
//! files are written next to them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{
    decomposition_accumulate, delta_max_cached, delta_max_hat, edit_bound, edit_bound_table,
    estimate_curvature, estimate_lipschitz, interior_grid, inversion_bound, max_state_norm,
    turn_margins, BoundsReport, Region,
};
use crate::cfm::{
    cfm_grad_check, cfm_train, conditional_accuracy, heldout_batch, CfmModel, DatasetSpec,
    TrainConfig,
};
use crate::edit::{backward_edit, multi_turn_edit, AlphaSchedule, EditConfig, EditReport, Turn};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::{make_field, CfgMode, FieldSpec, VelocityField};
use crate::solvers::{invert, reconstruct, Method, SolverConfig};
use crate::state::{Condition, LatentState};
use crate::trajectory::Trajectory;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Dense steps used for curvature estimates in reports.
const DENSE_STEPS: usize = 2000;

/// A complete, self-describing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Thread usage only; never changes results.
    #[serde(default)]
    pub execution: Execution,
    pub experiment: Experiment,
}

fn default_z0() -> LatentState {
    LatentState::flat(vec![1.0, 0.0])
}
fn default_bench_field() -> FieldSpec {
    FieldSpec::LinearSkew {
        omega: 1.0,
        radius: 4.0,
        shifts: BTreeMap::new(),
    }
}
fn default_methods() -> Vec<Method> {
    let mut m = vec![Method::Euler];
    for k in [1, 2, 4, 8] {
        m.push(Method::FixedPoint { k });
    }
    for k in [1, 2, 4, 8] {
        m.push(Method::Afp { k });
    }
    m.push(Method::Midpoint);
    m
}
fn default_n_values() -> Vec<usize> {
    vec![5, 10, 20, 40]
}
fn default_alphas() -> Vec<f64> {
    vec![0.1, 0.25, 0.5, 0.75, 0.9]
}
fn default_edit_runs() -> usize {
    50
}
fn default_edit_n() -> usize {
    20
}
fn default_pairs() -> usize {
    10_000
}
fn default_dataset() -> DatasetSpec {
    DatasetSpec::two_mixture()
}
fn default_samples() -> usize {
    500
}
fn default_one() -> f64 {
    1.0
}
fn default_sample_steps() -> usize {
    30
}
fn default_grad_params() -> usize {
    50
}
fn default_grad_batch() -> usize {
    8
}
fn default_inversion() -> Method {
    Method::Afp { k: 1 }
}

/// What a run does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Forward inversion of `z0`.
    Invert {
        field: FieldSpec,
        z0: LatentState,
        solver: SolverConfig,
    },
    /// Forward inversion followed by backward Euler reconstruction.
    Reconstruct {
        field: FieldSpec,
        z0: LatentState,
        solver: SolverConfig,
    },
    /// Invert under `source`, then edit toward `target`.
    Edit {
        field: FieldSpec,
        z0: LatentState,
        source: Condition,
        target: Condition,
        #[serde(default = "default_inversion")]
        inversion: Method,
        edit: EditConfig,
    },
    MultiTurn {
        field: FieldSpec,
        z0: LatentState,
        source: Condition,
        turns: Vec<Turn>,
        edit: EditConfig,
    },
    /// Reconstruction error of every method at every step count.
    BenchSolvers {
        #[serde(default = "default_bench_field")]
        field: FieldSpec,
        #[serde(default = "default_z0")]
        z0: LatentState,
        #[serde(default)]
        condition: Condition,
        #[serde(default = "default_methods")]
        methods: Vec<Method>,
        #[serde(default = "default_n_values")]
        n_values: Vec<usize>,
    },
    /// Bound checks over a set of analytic fields (the built-in zoo by
    /// default).
    VerifyBounds {
        #[serde(default)]
        fields: Option<Vec<FieldSpec>>,
        #[serde(default = "default_n_values")]
        n_values: Vec<usize>,
        #[serde(default = "default_alphas")]
        alphas: Vec<f64>,
        #[serde(default = "default_edit_runs")]
        edit_runs: usize,
        #[serde(default = "default_edit_n")]
        edit_steps: usize,
        #[serde(default = "default_pairs")]
        lipschitz_pairs: usize,
    },
    /// The six alpha-scheduler variants on one edit.
    SweepAlphaSchedulers {
        field: FieldSpec,
        z0: LatentState,
        source: Condition,
        target: Condition,
        #[serde(default = "default_inversion")]
        inversion: Method,
        edit: EditConfig,
    },
    Train {
        #[serde(default = "default_dataset")]
        dataset: DatasetSpec,
        #[serde(default)]
        train: TrainConfig,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_one")]
        w: f64,
        #[serde(default = "default_sample_steps")]
        sample_steps: usize,
    },
    GradCheck {
        #[serde(default = "default_dataset")]
        dataset: DatasetSpec,
        #[serde(default)]
        train: TrainConfig,
        #[serde(default = "default_grad_params")]
        n_params: usize,
        #[serde(default = "default_grad_batch")]
        batch: usize,
    },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Invert { .. } => "invert",
            Experiment::Reconstruct { .. } => "reconstruct",
            Experiment::Edit { .. } => "edit",
            Experiment::MultiTurn { .. } => "multi_turn",
            Experiment::BenchSolvers { .. } => "bench_solvers",
            Experiment::VerifyBounds { .. } => "verify_bounds",
            Experiment::SweepAlphaSchedulers { .. } => "sweep_alpha_schedulers",
            Experiment::Train { .. } => "train",
            Experiment::GradCheck { .. } => "grad_check",
        }
    }
}

impl RunConfig {
    pub fn new(seed: u64, experiment: Experiment) -> Self {
        Self {
            seed,
            execution: Execution::default(),
            experiment,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Make relative checkpoint paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |spec: &mut FieldSpec| {
            if let FieldSpec::Trained { checkpoint } = spec {
                if checkpoint.is_relative() {
                    *checkpoint = base.join(&*checkpoint);
                }
            }
        };
        match &mut self.experiment {
            Experiment::Invert { field, .. }
            | Experiment::Reconstruct { field, .. }
            | Experiment::Edit { field, .. }
            | Experiment::MultiTurn { field, .. }
            | Experiment::BenchSolvers { field, .. }
            | Experiment::SweepAlphaSchedulers { field, .. } => fix(field),
            Experiment::VerifyBounds {
                fields: Some(fields),
                ..
            } => fields.iter_mut().for_each(fix),
            _ => {}
        }
    }
}

/// Label shifts used by the zoo, scaled so their norm does not depend on
/// `dim`.
fn zoo_shifts(dim: usize) -> BTreeMap<u32, Vec<f64>> {
    let patterns = [(0u32, [0.2, -0.1]), (1, [-0.3, 0.4]), (2, [0.1, 0.3])];
    let scale = 1.0 / ((dim / 2).max(1) as f64).sqrt();
    patterns
        .iter()
        .map(|(k, p)| (*k, (0..dim).map(|i| p[i % 2] * scale).collect()))
        .collect()
}

/// Certified radius of the zoo's pairwise fields.
pub const ZOO_RADIUS: f64 = 4.0;

/// Analytic fields over `dim` values (even) with shifts for labels 0, 1, 2.
pub fn field_zoo(dim: usize) -> Vec<FieldSpec> {
    let shifts = zoo_shifts(dim);
    let mut zoo = vec![FieldSpec::Constant {
        value: (0..dim).map(|i| [0.3, -0.2][i % 2]).collect(),
        shifts: shifts.clone(),
    }];
    for omega in [0.5, 1.0, 2.0] {
        zoo.push(FieldSpec::LinearSkew {
            omega,
            radius: ZOO_RADIUS,
            shifts: shifts.clone(),
        });
    }
    zoo.push(FieldSpec::ContractingSpiral {
        lambda: 0.5,
        omega: 1.5,
        radius: ZOO_RADIUS,
        shifts: shifts.clone(),
    });
    zoo.push(FieldSpec::TimeCurved {
        rate: 1.0,
        amplitude: 0.5,
        frequency: 0.5,
        radius: ZOO_RADIUS,
        shifts,
    });
    zoo
}

/// Uniform point in the ball of radius `r` around the origin.
pub fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, r: f64) -> LatentState {
    let dir: Vec<f64> = (0..dim)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    let norm = crate::state::l2(&dir).max(f64::MIN_POSITIVE);
    let rad = r * rng.random::<f64>().powf(1.0 / dim as f64);
    LatentState::flat(dir.iter().map(|d| rad * d / norm).collect())
}

/// One line of a bound-verification table. `pass` is
/// `measured <= bound + tol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub field: String,
    pub n: usize,
    pub alpha: Option<f64>,
    pub measured: f64,
    pub bound: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(
        check: &str,
        field: &str,
        n: usize,
        alpha: Option<f64>,
        measured: f64,
        bound: f64,
        tol: f64,
    ) -> Self {
        Self {
            check: check.into(),
            field: field.into(),
            n,
            alpha,
            measured,
            bound,
            tol,
            pass: measured <= bound + tol,
        }
    }
}

/// One line of the solver benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub nfe: usize,
    pub error: f64,
    /// Finite-step inversion bound from certified constants, when available.
    pub bound: Option<f64>,
    pub pass: Option<bool>,
}

/// Reconstruction error of each `(method, N)` cell; cells run independently.
pub fn bench_solvers(
    field: &dyn VelocityField,
    z0: &LatentState,
    condition: &Condition,
    methods: &[Method],
    n_values: &[usize],
    exec: Execution,
) -> Result<Vec<BenchRow>> {
    let cells: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|m| n_values.iter().map(move |&n| (*m, n)))
        .collect();
    let certified = match (field.lipschitz_bound(), field.curvature_bound(condition)) {
        (Some(l), Some(m)) => Some((l, m)),
        _ => None,
    };
    exec.try_map(&cells, |&(method, n)| {
        let inv = invert(field, z0, &SolverConfig::new(n, method, condition.clone()))?;
        let rec = reconstruct(field, inv.trajectory.endpoint(), condition, n, Some(z0))?;
        let error = rec.error.expect("ground truth supplied");
        let bound = certified
            .map(|(l, m)| inversion_bound(l, m, n))
            .transpose()?
            .map(|b| b.0);
        Ok(BenchRow {
            method: method.name().into(),
            k: method.iterations(),
            n,
            nfe: inv.nfe,
            error,
            bound,
            pass: bound.map(|b| error <= b + 1e-9),
        })
    })
}

fn field_label(spec: &FieldSpec) -> String {
    match spec {
        FieldSpec::Constant { .. } => "constant".into(),
        FieldSpec::LinearSkew { omega, .. } => format!("linear_skew(omega={omega})"),
        FieldSpec::ContractingSpiral { lambda, omega, .. } => {
            format!("contracting_spiral(lambda={lambda},omega={omega})")
        }
        FieldSpec::TimeCurved {
            rate,
            amplitude,
            frequency,
            ..
        } => format!("time_curved(rate={rate},amplitude={amplitude},frequency={frequency})"),
        FieldSpec::Trained { .. } => "trained".into(),
    }
}

/// Parameters of [`verify_bounds`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyPlan {
    pub fields: Vec<FieldSpec>,
    pub n_values: Vec<usize>,
    pub alphas: Vec<f64>,
    pub edit_runs: usize,
    pub edit_steps: usize,
    pub lipschitz_pairs: usize,
}

impl VerifyPlan {
    pub fn zoo() -> Self {
        Self {
            fields: field_zoo(2),
            n_values: default_n_values(),
            alphas: default_alphas(),
            edit_runs: default_edit_runs(),
            edit_steps: default_edit_n(),
            lipschitz_pairs: default_pairs(),
        }
    }
}

/// Output of [`verify_bounds`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOutcome {
    pub rows: Vec<CheckRow>,
    pub reports: Vec<BoundsReport>,
}

impl VerifyOutcome {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Fixed-point iterations used for converged sources.
const CONVERGED_K: usize = 60;

struct FieldChecks {
    rows: Vec<CheckRow>,
    report: BoundsReport,
}

fn check_field(
    spec: &FieldSpec,
    plan: &VerifyPlan,
    seed: u64,
    exec: Execution,
) -> Result<FieldChecks> {
    let field = make_field(spec)?;
    let name = field_label(spec);
    let l = field
        .lipschitz_bound()
        .ok_or_else(|| Error::InvalidConfig(format!("{name} has no Lipschitz certificate")))?;
    let radius = field.certified_radius().unwrap_or(f64::INFINITY);
    let dim = match spec {
        FieldSpec::Constant { value, .. } => value.len(),
        _ => 2,
    };
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<LatentState> = std::iter::once(LatentState::flat(
        (0..dim).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
    ))
    .chain((0..3).map(|_| sample_ball(&mut rng, dim, 1.0)))
    .collect();

    // finite-step inversion bound on Euler reconstruction
    let mut worst_error = 0.0f64;
    let mut first_bound = None;
    for c in [Condition::Null, Condition::Label(0)] {
        let m = field.curvature_bound(&c).expect("analytic field");
        for &n in &plan.n_values {
            let (finite, exp) = inversion_bound(l, m, n)?;
            first_bound.get_or_insert((finite, exp));
            rows.push(CheckRow::new(
                "inversion_bound_exp",
                &name,
                n,
                None,
                finite,
                exp,
                1e-12 * exp,
            ));
            for z0 in &starts {
                let inv = invert(&*field, z0, &SolverConfig::new(n, Method::Euler, c.clone()))?;
                let rec = reconstruct(&*field, inv.trajectory.endpoint(), &c, n, Some(z0))?;
                let err = rec.error.expect("ground truth supplied");
                worst_error = worst_error.max(err);
                rows.push(CheckRow::new(
                    "inversion_bound",
                    &name,
                    n,
                    None,
                    err,
                    finite,
                    1e-9,
                ));
                let reach = max_state_norm(&inv.trajectory).max(max_state_norm(&rec.trajectory));
                rows.push(CheckRow::new("radius", &name, n, None, reach, radius, 0.0));
            }
        }
    }

    // empirical constants against certificates
    let region = Region::ball(LatentState::flat(vec![0.0; dim]), radius.min(ZOO_RADIUS));
    let l_hat = estimate_lipschitz(
        &*field,
        &Condition::Label(0),
        &region,
        plan.lipschitz_pairs,
        seed,
        exec,
    )?;
    rows.push(CheckRow::new("lipschitz", &name, 0, None, l_hat, l, 1e-6));
    let curve_src = invert(
        &*field,
        &starts[0],
        &SolverConfig::new(plan.edit_steps.max(4), Method::Euler, Condition::Label(0)),
    )?;
    let m_hat = estimate_curvature(&*field, &curve_src.trajectory, DENSE_STEPS)?;
    let m_cert = field
        .curvature_bound(&Condition::Label(0))
        .expect("analytic field");
    rows.push(CheckRow::new(
        "curvature",
        &name,
        0,
        None,
        m_hat,
        m_cert,
        1e-6,
    ));

    // controlled-edit bound with a converged implicit source
    let n = plan.edit_steps;
    let (c_src, c_tar, w) = (Condition::Label(0), Condition::Label(1), 2.0);
    let src = invert(
        &*field,
        &starts[1],
        &SolverConfig::new(n, Method::FixedPoint { k: CONVERGED_K }, c_src.clone()),
    )?
    .trajectory;
    let delta = delta_max_hat(&*field, &src, &c_src, &c_tar, w, CfgMode::Standard)?;
    for &alpha in &plan.alphas {
        let r = backward_edit(
            &*field,
            &src,
            &c_tar,
            &EditConfig::new(w, 4.5, n).with_alpha(alpha),
        )?;
        let b = edit_bound(delta, l, alpha);
        rows.push(CheckRow::new(
            "edit_bound",
            &name,
            n,
            Some(alpha),
            r.deviation_from_source(),
            b,
            1e-6,
        ));
        rows.push(CheckRow::new(
            "radius",
            &name,
            n,
            Some(alpha),
            max_state_norm(&r.trajectory),
            radius,
            0.0,
        ));
    }
    let table = edit_bound_table(delta, l, &interior_grid(99));
    if l > 0.0 && delta > 0.0 {
        let gap = table
            .iter()
            .map(|r| r.bound - r.linear)
            .fold(f64::NEG_INFINITY, f64::max);
        rows.push(CheckRow::new(
            "edit_bound_convexity",
            &name,
            99,
            None,
            gap,
            0.0,
            0.0,
        ));
    }
    let (inv_finite, inv_exp) = first_bound.unwrap_or((0.0, 0.0));
    let report = BoundsReport {
        field: name,
        l_hat,
        m_hat,
        delta_max_hat: delta,
        l_certified: Some(l),
        m_certified: Some(m_cert),
        inversion_bound: inv_finite,
        inversion_bound_exp: inv_exp,
        reconstruction_error: worst_error,
        inversion_pass: Some(
            rows.iter()
                .filter(|r| r.check == "inversion_bound")
                .all(|r| r.pass),
        ),
        edit_bounds: edit_bound_table(delta, l, &plan.alphas),
    };
    Ok(FieldChecks { rows, report })
}

/// One randomized uncontrolled edit and its decomposition check.
fn decomposition_run(fields: &[FieldSpec], seed: u64, run: usize) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + run as u64);
    let spec = &fields[rng.random_range(0..fields.len())];
    let field = make_field(spec)?;
    let dim = match spec {
        FieldSpec::Constant { value, .. } => value.len(),
        _ => 2,
    };
    let z0 = sample_ball(&mut rng, dim, 1.0);
    let src_label = rng.random_range(0..3u32);
    let tar_label = (src_label + rng.random_range(1..3u32)) % 3;
    let w = rng.random_range(1.0..=5.0);
    let n = [8usize, 12, 20, 30][rng.random_range(0..4)];
    let method = [
        Method::Euler,
        Method::Afp { k: 1 },
        Method::FixedPoint { k: 2 },
    ][rng.random_range(0..3)];
    let src = invert(
        &*field,
        &z0,
        &SolverConfig::new(n, method, Condition::Label(src_label)),
    )?
    .trajectory;
    let r = backward_edit(
        &*field,
        &src,
        &Condition::Label(tar_label),
        &EditConfig::new(w, 4.5, n).with_alpha(1.0),
    )?;
    let d = decomposition_accumulate(&r, &*field)?;
    Ok(CheckRow::new(
        "decomposition",
        &field_label(spec),
        n,
        Some(1.0),
        d.lhs,
        d.rhs,
        1e-9,
    ))
}

/// Finite-step, controlled-edit, decomposition and certificate checks.
pub fn verify_bounds(plan: &VerifyPlan, seed: u64, exec: Execution) -> Result<VerifyOutcome> {
    let per_field = exec.try_map(&plan.fields, |spec| {
        check_field(spec, plan, seed, Execution::Sequential)
    })?;
    let runs: Vec<usize> = (0..plan.edit_runs).collect();
    let decomposition = exec.try_map(&runs, |&r| decomposition_run(&plan.fields, seed, r))?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for fc in per_field {
        rows.extend(fc.rows);
        reports.push(fc.report);
    }
    rows.extend(decomposition);
    Ok(VerifyOutcome { rows, reports })
}

/// Alpha-scheduler variant of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SweepVariant {
    Fixed(f64),
    DecayOnly,
    CosineOnly,
    CosineDecay,
}

impl SweepVariant {
    pub fn all() -> [SweepVariant; 6] {
        [
            SweepVariant::Fixed(0.1),
            SweepVariant::Fixed(0.5),
            SweepVariant::Fixed(0.9),
            SweepVariant::DecayOnly,
            SweepVariant::CosineOnly,
            SweepVariant::CosineDecay,
        ]
    }

    pub fn label(&self) -> String {
        match self {
            SweepVariant::Fixed(a) => format!("fixed_{a}"),
            SweepVariant::DecayOnly => "time_decay".into(),
            SweepVariant::CosineOnly => "cosine".into(),
            SweepVariant::CosineDecay => "time_decay_x_cosine".into(),
        }
    }

    fn apply(&self, base: &EditConfig) -> EditConfig {
        let mut cfg = base.clone();
        cfg.alpha_override = None;
        match *self {
            SweepVariant::Fixed(a) => cfg.alpha_override = Some(a),
            SweepVariant::DecayOnly => cfg.schedule = AlphaSchedule::DecayOnly,
            SweepVariant::CosineOnly => cfg.schedule = AlphaSchedule::CosineOnly,
            SweepVariant::CosineDecay => cfg.schedule = AlphaSchedule::CosineDecay,
        }
        cfg
    }
}

/// Sweep row: distance of the edit from the source origin and from the
/// uncontrolled (alpha = 1) edit endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub deviation_from_source: f64,
    pub deviation_from_target: f64,
    pub mean_alpha: f64,
}

pub fn sweep_alpha_schedulers(
    field: &dyn VelocityField,
    src: &Trajectory,
    target: &Condition,
    base: &EditConfig,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    let mut uncontrolled = base.clone();
    uncontrolled.alpha_override = Some(1.0);
    let attractor = backward_edit(field, src, target, &uncontrolled)?.final_state;
    exec.try_map(&SweepVariant::all(), |v| {
        let r = backward_edit(field, src, target, &v.apply(base))?;
        Ok(SweepRow {
            variant: v.label(),
            deviation_from_source: r.deviation_from_source(),
            deviation_from_target: r.final_state.dist(&attractor),
            mean_alpha: r.steps.iter().map(|s| s.alpha).sum::<f64>() / r.steps.len() as f64,
        })
    })
}

/// Files produced by a run, relative to its output directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        self.files.push(PathBuf::from(name));
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.files.push(PathBuf::from(name));
        Ok(())
    }

    fn trajectory(&mut self, name: &str, traj: &Trajectory) -> Result<()> {
        traj.save(&self.dir.join(name))?;
        self.files.push(PathBuf::from(name));
        Ok(())
    }
}

#[derive(Serialize)]
struct StepRow {
    turn: usize,
    i: usize,
    t: f64,
    alpha: f64,
    cosine: f64,
    delta_v_norm: f64,
    mask_mean: Option<f64>,
}

fn step_rows(turn: usize, r: &EditReport) -> Vec<StepRow> {
    r.steps
        .iter()
        .map(|s| StepRow {
            turn,
            i: s.i,
            t: s.t,
            alpha: s.alpha,
            cosine: s.cosine,
            delta_v_norm: s.delta_v_norm,
            mask_mean: s.mask_mean,
        })
        .collect()
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Run the experiment, writing every artifact to `out_dir`. Returns the
/// result document (also written as `result.json`).
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<Value> {
    fs::create_dir_all(out_dir)?;
    let mut out = Writer {
        dir: out_dir,
        files: Vec::new(),
    };
    let exec = config.execution;
    let seed = config.seed;
    let body = match &config.experiment {
        Experiment::Invert { field, z0, solver } => {
            let f = make_field(field)?;
            let inv = invert(&*f, z0, solver)?;
            out.trajectory("trajectory.jsonl", &inv.trajectory)?;
            json!({
                "method": solver.method,
                "n_steps": solver.n_steps,
                "nfe": inv.nfe,
                "endpoint": inv.trajectory.endpoint(),
            })
        }
        Experiment::Reconstruct { field, z0, solver } => {
            let f = make_field(field)?;
            let inv = invert(&*f, z0, solver)?;
            let rec = reconstruct(
                &*f,
                inv.trajectory.endpoint(),
                &solver.condition,
                solver.n_steps,
                Some(z0),
            )?;
            out.trajectory("forward.jsonl", &inv.trajectory)?;
            out.trajectory("backward.jsonl", &rec.trajectory)?;
            json!({
                "method": solver.method,
                "n_steps": solver.n_steps,
                "forward_nfe": inv.nfe,
                "backward_nfe": rec.nfe,
                "z0_hat": rec.z0_hat,
                "error": rec.error,
            })
        }
        Experiment::Edit {
            field,
            z0,
            source,
            target,
            inversion,
            edit,
        } => {
            let f = make_field(field)?;
            let inv = invert(
                &*f,
                z0,
                &SolverConfig::new(edit.n_steps, *inversion, source.clone()),
            )?;
            let r = backward_edit(&*f, &inv.trajectory, target, edit)?;
            out.trajectory("source.jsonl", &inv.trajectory)?;
            out.trajectory("edit.jsonl", &r.trajectory)?;
            out.csv("edit_steps.csv", &step_rows(0, &r))?;
            let decomposition = match edit.cfg_mode {
                CfgMode::Standard => Some(decomposition_accumulate(&r, &*f)?),
                CfgMode::SourceAnchored => None,
            };
            let delta = delta_max_cached(&*f, &inv.trajectory, target, edit.w, edit.cfg_mode)?;
            json!({
                "inversion_nfe": inv.nfe,
                "edit": r,
                "deviation_from_source": r.deviation_from_source(),
                "decomposition": decomposition,
                "delta_max_cached": delta,
            })
        }
        Experiment::MultiTurn {
            field,
            z0,
            source,
            turns,
            edit,
        } => {
            let f = make_field(field)?;
            let mt = multi_turn_edit(&*f, z0, source, turns, edit)?;
            out.trajectory("source.jsonl", &mt.source)?;
            let mut rows = Vec::new();
            for (k, t) in mt.turns.iter().enumerate() {
                out.trajectory(&format!("turn_{k}.jsonl"), &t.trajectory)?;
                rows.extend(step_rows(k, t));
            }
            out.csv("edit_steps.csv", &rows)?;
            let region = Region::ball(LatentState::zeros(z0.layout()), ZOO_RADIUS);
            let margins = turn_margins(&*f, &mt, |g| {
                estimate_lipschitz(g, &Condition::Null, &region, 2000, seed, exec)
            })?;
            json!({
                "inversion_nfe": mt.inversion_nfe,
                "turns": mt.turns,
                "margins": margins,
            })
        }
        Experiment::BenchSolvers {
            field,
            z0,
            condition,
            methods,
            n_values,
        } => {
            let f = make_field(field)?;
            let rows = bench_solvers(&*f, z0, condition, methods, n_values, exec)?;
            out.csv("bench.csv", &rows)?;
            json!({ "rows": rows })
        }
        Experiment::VerifyBounds {
            fields,
            n_values,
            alphas,
            edit_runs,
            edit_steps,
            lipschitz_pairs,
        } => {
            let plan = VerifyPlan {
                fields: fields.clone().unwrap_or_else(|| field_zoo(2)),
                n_values: n_values.clone(),
                alphas: alphas.clone(),
                edit_runs: *edit_runs,
                edit_steps: *edit_steps,
                lipschitz_pairs: *lipschitz_pairs,
            };
            let outcome = verify_bounds(&plan, seed, exec)?;
            out.csv("verify_bounds.csv", &outcome.rows)?;
            let failed = outcome.rows.iter().filter(|r| !r.pass).count();
            json!({
                "checks": outcome.rows.len(),
                "failed": failed,
                "all_pass": outcome.all_pass(),
                "reports": outcome.reports,
            })
        }
        Experiment::SweepAlphaSchedulers {
            field,
            z0,
            source,
            target,
            inversion,
            edit,
        } => {
            let f = make_field(field)?;
            let inv = invert(
                &*f,
                z0,
                &SolverConfig::new(edit.n_steps, *inversion, source.clone()),
            )?;
            let rows = sweep_alpha_schedulers(&*f, &inv.trajectory, target, edit, exec)?;
            out.csv("alpha_sweep.csv", &rows)?;
            json!({ "rows": rows })
        }
        Experiment::Train {
            dataset,
            train,
            samples,
            w,
            sample_steps,
        } => {
            let cfg = TrainConfig {
                seed,
                ..train.clone()
            };
            let outcome = cfm_train(dataset, &cfg)?;
            outcome.model.save(&out_dir.join("checkpoint.json"))?;
            out.files.push(PathBuf::from("checkpoint.json"));
            let rows: Vec<LossRow> = outcome
                .loss_curve
                .iter()
                .map(|&(step, loss)| LossRow { step, loss })
                .collect();
            out.csv("loss_curve.csv", &rows)?;
            let score =
                conditional_accuracy(&outcome.model, dataset, *samples, *w, *sample_steps, seed)?;
            json!({
                "initial_heldout_loss": outcome.initial_heldout_loss,
                "final_heldout_loss": outcome.final_heldout_loss,
                "loss_ratio": outcome.final_heldout_loss / outcome.initial_heldout_loss,
                "sampling": score,
            })
        }
        Experiment::GradCheck {
            dataset,
            train,
            n_params,
            batch,
        } => {
            let cfg = TrainConfig {
                seed,
                ..train.clone()
            };
            let model = CfmModel::init(dataset.dim(), dataset.n_labels(), &cfg)?;
            let items = heldout_batch(dataset, seed)?;
            let take = (*batch).min(items.len());
            let max_rel = cfm_grad_check(&model, &items[..take], *n_params, seed)?;
            json!({
                "parameters": model.params().len(),
                "checked": (*n_params).max(50).min(model.params().len()),
                "max_relative_error": max_rel,
            })
        }
    };
    let result = json!({
        "experiment": config.experiment.name(),
        "seed": seed,
        "version": VERSION,
        "result": body,
    });
    out.text(
        "result.json",
        &format!("{}\n", serde_json::to_string_pretty(&result)?),
    )?;
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut files: Vec<String> = out.files.iter().map(|p| p.display().to_string()).collect();
    files.push("manifest.json".into());
    let manifest = json!({
        "tool": "rfedit",
        "version": VERSION,
        "seed": seed,
        "timestamp_unix": timestamp,
        "config": to_value(config)?,
        "outputs": files,
    });
    fs::write(
        out_dir.join("manifest.json"),
        format!("{}\n", serde_json::to_string_pretty(&manifest)?),
    )?;
    Ok(result)
}
