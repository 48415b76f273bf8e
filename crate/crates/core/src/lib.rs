//! Rectified-flow inversion and editing lab.

pub mod bounds;
pub mod cfm;
pub mod edit;
pub mod error;
pub mod exec;
pub mod field;
pub mod harness;
pub mod mask;
pub mod solvers;
pub mod state;
pub mod trajectory;

pub use error::{Error, Result};
pub use exec::Execution;
pub use field::{make_field, CfgMode, FieldSpec, VelocityField};
pub use state::{Condition, LatentState, Layout, TimeGrid};
pub use trajectory::{Direction, Trajectory};
