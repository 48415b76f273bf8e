//! Discrete trajectories over a uniform time grid and their JSON-lines form.
//!
//! File layout: the first line is a header
//! `{"n_steps", "layout", "condition", "direction"}`; then one line per grid
//! point `{"i", "t", "state", "velocity"}` where `velocity` is the step
//! velocity used between `t_i` and `t_{i+1}` and is `null` on the last line.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{Condition, LatentState, Layout, TimeGrid};

/// Integration direction of a recorded trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Data to noise, `t` increasing.
    Forward,
    /// Noise to data, `t` decreasing.
    Backward,
}

/// States `Z_{t_0..t_N}` together with the step velocities between them.
///
/// For both directions `velocities[i]` is the velocity used across
/// `[t_i, t_{i+1}]`, so `states[i + 1] = states[i] + dt * velocities[i]`.
/// A forward solve produces `states[i + 1]` from `states[i]`; a backward solve
/// produces `states[i]` from `states[i + 1]` by subtracting the same term.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    states: Vec<LatentState>,
    velocities: Vec<LatentState>,
    condition: Condition,
    direction: Direction,
}

/// Relative tolerance for the step relation in [`Trajectory::new`].
pub const STEP_RELATION_TOL: f64 = 1e-12;

impl Trajectory {
    pub fn new(
        grid: TimeGrid,
        states: Vec<LatentState>,
        velocities: Vec<LatentState>,
        condition: Condition,
        direction: Direction,
    ) -> Result<Self> {
        let n = grid.n_steps();
        if states.len() != n + 1 || velocities.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "grid of {n} steps needs {} states and {n} velocities, got {} and {}",
                n + 1,
                states.len(),
                velocities.len()
            )));
        }
        let layout = states[0].layout();
        for s in states.iter().chain(&velocities) {
            if s.layout() != layout {
                return Err(Error::LayoutMismatch(format!(
                    "trajectory mixes {:?} and {:?}",
                    layout,
                    s.layout()
                )));
            }
        }
        Ok(Self {
            grid,
            states,
            velocities,
            condition,
            direction,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn layout(&self) -> Layout {
        self.states[0].layout()
    }

    pub fn states(&self) -> &[LatentState] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &LatentState {
        &self.states[i]
    }

    pub fn velocities(&self) -> &[LatentState] {
        &self.velocities
    }

    pub fn condition(&self) -> &Condition {
        &self.condition
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Start of integration: `states[0]` going forward, `states[N]` going back.
    pub fn origin(&self) -> &LatentState {
        match self.direction {
            Direction::Forward => &self.states[0],
            Direction::Backward => &self.states[self.n_steps()],
        }
    }

    /// End of integration.
    pub fn endpoint(&self) -> &LatentState {
        match self.direction {
            Direction::Forward => &self.states[self.n_steps()],
            Direction::Backward => &self.states[0],
        }
    }

    /// Largest relative violation of `states[i+1] = states[i] + dt * v[i]`,
    /// measured against the magnitude of the states involved.
    pub fn step_relation_residual(&self) -> f64 {
        let dt = self.dt();
        (0..self.n_steps())
            .map(|i| {
                let predicted = self.states[i].axpy(dt, &self.velocities[i]);
                let scale = self.states[i]
                    .norm()
                    .max(self.states[i + 1].norm())
                    .max(1.0);
                predicted.dist(&self.states[i + 1]) / scale
            })
            .fold(0.0, f64::max)
    }

    /// Step velocity recovered by finite differences,
    /// `(states[i] - states[i-1]) / dt` for `1 <= i <= N`.
    pub fn finite_diff_velocity(&self, i: usize) -> Result<LatentState> {
        finite_diff_velocity(self, i)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            n_steps: self.n_steps(),
            layout: self.layout(),
            condition: self.condition.clone(),
            direction: self.direction,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (i, state) in self.states.iter().enumerate() {
            let line = StepLine {
                i,
                t: self.grid.t(i),
                state: state.values().to_vec(),
                velocity: self.velocities.get(i).map(|v| v.values().to_vec()),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("empty trajectory file".into()))??;
        let header: Header = serde_json::from_str(&header_line)?;
        let grid = TimeGrid::new(header.n_steps)?;
        let mut states = Vec::with_capacity(header.n_steps + 1);
        let mut velocities = Vec::with_capacity(header.n_steps);
        for (expected, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let step: StepLine = serde_json::from_str(&line)?;
            if step.i != expected {
                return Err(Error::Format(format!(
                    "expected step {expected}, found {}",
                    step.i
                )));
            }
            states.push(LatentState::new(header.layout, step.state)?);
            match (step.velocity, step.i < header.n_steps) {
                (Some(v), true) => velocities.push(LatentState::new(header.layout, v)?),
                (None, false) => {}
                (Some(_), false) => {
                    return Err(Error::Format("final step must have a null velocity".into()))
                }
                (None, true) => {
                    return Err(Error::Format(format!(
                        "step {} is missing its velocity",
                        step.i
                    )))
                }
            }
        }
        Trajectory::new(grid, states, velocities, header.condition, header.direction)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    n_steps: usize,
    layout: Layout,
    condition: Condition,
    direction: Direction,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    i: usize,
    t: f64,
    state: Vec<f64>,
    velocity: Option<Vec<f64>>,
}

/// `(states[i] - states[i-1]) / dt`, valid for `1 <= i <= N`.
pub fn finite_diff_velocity(traj: &Trajectory, i: usize) -> Result<LatentState> {
    let n = traj.n_steps();
    if i == 0 || i > n {
        return Err(Error::IndexOutOfRange {
            index: i,
            lo: 1,
            hi: n,
        });
    }
    Ok(traj.states[i]
        .sub(&traj.states[i - 1])
        .scale(1.0 / traj.dt()))
}

/// Largest per-step state distance between two trajectories.
pub fn compare_trajectories(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.n_steps() != b.n_steps() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} steps",
            a.n_steps(),
            b.n_steps()
        )));
    }
    if a.layout() != b.layout() {
        return Err(Error::LayoutMismatch(format!(
            "{:?} vs {:?}",
            a.layout(),
            b.layout()
        )));
    }
    Ok(a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| x.dist(y))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant_velocity_traj(v: &[f64], n: usize) -> Trajectory {
        let grid = TimeGrid::new(n).unwrap();
        let vel = LatentState::flat(v.to_vec());
        let mut states = vec![LatentState::flat(vec![0.0; v.len()])];
        for i in 0..n {
            let next = states[i].axpy(grid.dt(), &vel);
            states.push(next);
        }
        Trajectory::new(
            grid,
            states,
            vec![vel; n],
            Condition::Null,
            Direction::Forward,
        )
        .unwrap()
    }

    #[test]
    fn finite_diff_constant_step() {
        let traj = constant_velocity_traj(&[2.0, -1.0], 10);
        for i in 1..=10 {
            let v = traj.finite_diff_velocity(i).unwrap();
            assert!((v.values()[0] - 2.0).abs() < 1e-12);
            assert!((v.values()[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_diff_direct_arithmetic() {
        let grid = TimeGrid::new(10).unwrap();
        let mut states = vec![
            LatentState::flat(vec![0.0, 0.0]),
            LatentState::flat(vec![0.3, 0.1]),
        ];
        let mut vels = vec![LatentState::flat(vec![3.0, 1.0])];
        for _ in 1..10 {
            states.push(states.last().unwrap().clone());
            vels.push(LatentState::flat(vec![0.0, 0.0]));
        }
        let traj =
            Trajectory::new(grid, states, vels, Condition::Null, Direction::Forward).unwrap();
        let v = finite_diff_velocity(&traj, 1).unwrap();
        assert!((v.values()[0] - 3.0).abs() < 1e-12);
        assert!((v.values()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_bounds() {
        let traj = constant_velocity_traj(&[1.0], 4);
        assert!(matches!(
            traj.finite_diff_velocity(0),
            Err(Error::IndexOutOfRange { index: 0, .. })
        ));
        assert!(traj.finite_diff_velocity(5).is_err());
        assert!(traj.finite_diff_velocity(4).is_ok());
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let grid = TimeGrid::new(2).unwrap();
        let s = LatentState::flat(vec![0.0]);
        assert!(Trajectory::new(
            grid,
            vec![s.clone(); 2],
            vec![s.clone(); 2],
            Condition::Null,
            Direction::Forward
        )
        .is_err());
        let g = LatentState::grid(1, 1, 1, vec![0.0]).unwrap();
        assert!(Trajectory::new(
            grid,
            vec![s.clone(), g, s.clone()],
            vec![s.clone(); 2],
            Condition::Null,
            Direction::Forward
        )
        .is_err());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let traj = constant_velocity_traj(&[1.0, 2.0], 2);
        let mut buf = Vec::new();
        traj.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(1, 2);
        assert!(Trajectory::read_jsonl(lines.join("\n").as_bytes()).is_err());
        assert!(Trajectory::read_jsonl(&b""[..]).is_err());
        let truncated: Vec<&str> = text.lines().take(3).collect();
        assert!(Trajectory::read_jsonl(truncated.join("\n").as_bytes()).is_err());
    }

    #[test]
    fn compare_identical_is_zero() {
        let a = constant_velocity_traj(&[1.0, 2.0], 5);
        assert_eq!(compare_trajectories(&a, &a).unwrap(), 0.0);
        let b = constant_velocity_traj(&[1.0, 2.0], 6);
        assert!(compare_trajectories(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_bit_exact(
            vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 6),
            vel in prop::collection::vec(-1e6f64..1e6, 2),
            label in 0u32..50,
            backward in any::<bool>(),
        ) {
            let grid = TimeGrid::new(2).unwrap();
            let layout = Layout::Grid { h: 1, w: 1, c: 2 };
            let states: Vec<LatentState> = vals.chunks(2).map(|c| LatentState::new(layout, c.to_vec()).unwrap()).collect();
            let velocities = vec![LatentState::new(layout, vel.clone()).unwrap(), LatentState::new(layout, vel).unwrap()];
            let direction = if backward { Direction::Backward } else { Direction::Forward };
            let traj = Trajectory::new(grid, states, velocities, Condition::Label(label), direction).unwrap();
            let mut buf = Vec::new();
            traj.write_jsonl(&mut buf).unwrap();
            let back = Trajectory::read_jsonl(&buf[..]).unwrap();
            for (a, b) in traj.states().iter().chain(traj.velocities()).zip(back.states().iter().chain(back.velocities())) {
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(traj, back);
        }
    }
}
