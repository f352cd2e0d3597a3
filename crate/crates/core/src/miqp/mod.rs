//! Mixed-integer QP: problem container, relaxation solver, branch and bound
//! and a brute-force enumeration oracle.

pub mod bnb;
pub mod problem;
pub mod qp;

pub use bnb::{solve_bnb, solve_enumerate, BnbResult, BnbStatus, Branching, NodeRecord, SolverOptions, MAX_ENUMERATE_BINARIES};
pub use problem::{column_name, Layout, MiqpProblem, SparseRow};
pub use qp::{solve_qp_relaxation, solve_qp_with, ConstraintId, QpOptions, QpSolution, QpStatus, WarmStart};
