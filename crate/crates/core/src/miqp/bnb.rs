use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use super::problem::MiqpProblem;
use super::qp::{solve_qp_with, ConstraintId, QpOptions, QpSolution, QpStatus, WarmStart};
use crate::error::{Error, Result};

/// Largest binary count accepted by [`solve_enumerate`].
pub const MAX_ENUMERATE_BINARIES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branching {
    MostFractional,
    PseudoCost,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub tol_int: f64,
    pub mip_gap: f64,
    pub node_limit: usize,
    pub time_limit: Duration,
    pub branching: Branching,
    /// Keep a record of every solved node in [`BnbResult::tree`].
    pub record_tree: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_kkt: 1e-8,
            tol_feas: 1e-8,
            tol_int: 1e-6,
            mip_gap: 1e-6,
            node_limit: 200_000,
            time_limit: Duration::from_secs(60),
            branching: Branching::MostFractional,
            record_tree: false,
        }
    }
}

impl SolverOptions {
    fn qp(&self) -> QpOptions {
        QpOptions {
            tol_kkt: self.tol_kkt,
            tol_feas: self.tol_feas,
            ..QpOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnbStatus {
    Optimal,
    Infeasible,
    NodeLimit,
    TimeLimit,
}

#[derive(Debug, Clone)]
pub struct BnbResult {
    pub status: BnbStatus,
    pub incumbent: Option<Vec<f64>>,
    /// Objective of the incumbent (`+inf` without one).
    pub objective: f64,
    pub best_bound: f64,
    /// `(incumbent - best_bound) / max(1, |incumbent|)`.
    pub gap: f64,
    pub nodes_explored: usize,
    pub wall_time: Duration,
    pub tree: Vec<NodeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    /// Relaxation objective (`+inf` when infeasible).
    pub objective: f64,
}

impl BnbResult {
    fn finish(
        status: BnbStatus,
        incumbent: Option<(Vec<f64>, f64)>,
        best_bound: f64,
        nodes: usize,
        start: Instant,
    ) -> Self {
        let (x, obj) = match incumbent {
            Some((x, o)) => (Some(x), o),
            None => (None, f64::INFINITY),
        };
        let bound = best_bound.min(obj);
        let gap = if obj.is_finite() {
            ((obj - bound) / obj.abs().max(1.0)).max(0.0)
        } else {
            f64::INFINITY
        };
        BnbResult {
            status: if x.is_none() && status == BnbStatus::Optimal {
                BnbStatus::Infeasible
            } else {
                status
            },
            incumbent: x,
            objective: obj,
            best_bound: bound,
            gap,
            nodes_explored: nodes,
            wall_time: start.elapsed(),
            tree: Vec::new(),
        }
    }
}

struct Node {
    bound: f64,
    id: usize,
    parent: Option<usize>,
    fixed: Vec<Option<bool>>,
    warm_x: Vec<f64>,
    warm_active: Vec<ConstraintId>,
    /// Branching record: (binary position, went up, parent objective, parent value).
    origin: Option<(usize, bool, f64, f64)>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // max-heap: smallest bound first, then oldest node
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}

#[derive(Default, Clone, Copy)]
struct PseudoCost {
    down_sum: f64,
    down_n: u32,
    up_sum: f64,
    up_n: u32,
}

/// Best-bound branch and bound over the binaries of `p`.
///
/// Deterministic for fixed options (ties broken by lowest binary index and
/// node creation order) unless the time limit interrupts the search.
pub fn solve_bnb(p: &MiqpProblem, opt: &SolverOptions) -> BnbResult {
    let start = Instant::now();
    let qp_opts = opt.qp();
    let nb = p.n_binary();
    let mut pseudo = vec![PseudoCost::default(); nb];

    let mut incumbent: Option<(Vec<f64>, f64)> = None;
    let mut heap = BinaryHeap::new();
    let mut next_id = 0usize;
    heap.push(Node {
        bound: f64::NEG_INFINITY,
        id: next_id,
        parent: None,
        fixed: vec![None; nb],
        warm_x: Vec::new(),
        warm_active: Vec::new(),
        origin: None,
    });
    next_id += 1;
    let mut nodes = 0usize;
    let mut tree = Vec::new();

    let prune_level = |inc: &Option<(Vec<f64>, f64)>| -> f64 {
        match inc {
            Some((_, obj)) => obj - opt.mip_gap * obj.abs().max(1.0),
            None => f64::INFINITY,
        }
    };

    while let Some(node) = heap.pop() {
        if node.bound >= prune_level(&incumbent) {
            // every remaining node is at least as bad
            heap.clear();
            break;
        }
        if nodes >= opt.node_limit {
            let bound = node.bound;
            return BnbResult { tree, ..BnbResult::finish(BnbStatus::NodeLimit, incumbent, bound, nodes, start) };
        }
        if start.elapsed() > opt.time_limit {
            let bound = node.bound;
            return BnbResult { tree, ..BnbResult::finish(BnbStatus::TimeLimit, incumbent, bound, nodes, start) };
        }
        nodes += 1;

        let warm = WarmStart {
            x: (!node.warm_x.is_empty()).then_some(node.warm_x.as_slice()),
            active: &node.warm_active,
        };
        let sol = solve_qp_with(p, &node.fixed, &qp_opts, warm);
        if opt.record_tree {
            tree.push(NodeRecord {
                id: node.id,
                parent: node.parent,
                objective: if sol.status == QpStatus::Optimal { sol.objective } else { f64::INFINITY },
            });
        }
        if sol.status == QpStatus::Infeasible {
            continue;
        }
        if sol.status == QpStatus::MaxIter {
            log::warn!("bnb: relaxation hit its iteration limit at node {}", node.id);
            continue;
        }
        // child bound can only rise; guard against round-off
        let obj = sol.objective.max(node.bound);

        if let Some((k, up, parent_obj, parent_val)) = node.origin {
            let delta = (obj - parent_obj).max(0.0);
            let frac = if up { 1.0 - parent_val } else { parent_val };
            if frac > 1e-9 {
                let pc = &mut pseudo[k];
                if up {
                    pc.up_sum += delta / frac;
                    pc.up_n += 1;
                } else {
                    pc.down_sum += delta / frac;
                    pc.down_n += 1;
                }
            }
        }

        if obj >= prune_level(&incumbent) {
            continue;
        }

        let branch = pick_branch(p, &node.fixed, &sol, opt, &pseudo);
        match branch {
            None => {
                if let Some((x, val)) = polish(p, &sol, &qp_opts, opt) {
                    if val < incumbent.as_ref().map_or(f64::INFINITY, |i| i.1) {
                        incumbent = Some((x, val));
                    }
                }
            }
            Some(k) => {
                let val = sol.x[p.binary_idx[k]];
                // explore the nearer side first
                let first_up = val >= 0.5;
                for up in [first_up, !first_up] {
                    let mut fixed = node.fixed.clone();
                    fixed[k] = Some(up);
                    heap.push(Node {
                        bound: obj,
                        id: next_id,
                        parent: Some(node.id),
                        fixed,
                        warm_x: sol.x.clone(),
                        warm_active: sol.active.clone(),
                        origin: Some((k, up, obj, val)),
                    });
                    next_id += 1;
                }
            }
        }
    }
    let bound = incumbent.as_ref().map_or(f64::INFINITY, |i| i.1);
    BnbResult { tree, ..BnbResult::finish(BnbStatus::Optimal, incumbent, bound, nodes, start) }
}

/// Binary position to branch on, or `None` when the relaxation is integral.
fn pick_branch(
    p: &MiqpProblem,
    fixed: &[Option<bool>],
    sol: &QpSolution,
    opt: &SolverOptions,
    pseudo: &[PseudoCost],
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &j) in p.binary_idx.iter().enumerate() {
        if fixed[k].is_some() {
            continue;
        }
        let v = sol.x[j];
        let frac = (v - v.floor()).min(v.ceil() - v);
        if frac <= opt.tol_int {
            continue;
        }
        let score = match opt.branching {
            Branching::MostFractional => frac,
            Branching::PseudoCost => {
                let pc = pseudo[k];
                if pc.down_n == 0 || pc.up_n == 0 {
                    // uninitialized: fall back to fractionality, ranked below scored ones
                    frac * 1e-9
                } else {
                    let down = pc.down_sum / f64::from(pc.down_n) * v;
                    let up = pc.up_sum / f64::from(pc.up_n) * (1.0 - v);
                    down.max(1e-12) * up.max(1e-12)
                }
            }
        };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((k, score));
        }
    }
    best.map(|b| b.0)
}

/// Rounds the binaries of an integral relaxation and re-solves with all of
/// them fixed, so the incumbent satisfies the product constraints exactly.
fn polish(
    p: &MiqpProblem,
    sol: &QpSolution,
    qp_opts: &QpOptions,
    opt: &SolverOptions,
) -> Option<(Vec<f64>, f64)> {
    let rounded: Vec<Option<bool>> = p.binary_idx.iter().map(|&j| Some(sol.x[j] > 0.5)).collect();
    let warm = WarmStart {
        x: Some(&sol.x),
        active: &sol.active,
    };
    let fixed = solve_qp_with(p, &rounded, qp_opts, warm);
    if fixed.status != QpStatus::Optimal {
        return None;
    }
    if p.max_violation(&fixed.x) > opt.tol_feas * 10.0 || p.max_integrality_gap(&fixed.x) > opt.tol_int {
        return None;
    }
    Some((fixed.x, fixed.objective))
}

/// Exact optimum by solving one QP per binary assignment.
pub fn solve_enumerate(p: &MiqpProblem, opt: &SolverOptions) -> Result<BnbResult> {
    let nb = p.n_binary();
    if nb > MAX_ENUMERATE_BINARIES {
        return Err(Error::Solver(format!(
            "enumeration refused: {nb} binaries exceeds the limit of {MAX_ENUMERATE_BINARIES}"
        )));
    }
    let start = Instant::now();
    let qp_opts = opt.qp();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let count = 1usize << nb;
    for mask in 0..count {
        let fixed: Vec<Option<bool>> = (0..nb).map(|k| Some(mask >> k & 1 == 1)).collect();
        let sol = solve_qp_with(p, &fixed, &qp_opts, WarmStart::default());
        if sol.status != QpStatus::Optimal {
            continue;
        }
        if best.as_ref().is_none_or(|b| sol.objective < b.1) {
            best = Some((sol.x, sol.objective));
        }
    }
    let bound = best.as_ref().map_or(f64::INFINITY, |b| b.1);
    Ok(BnbResult::finish(BnbStatus::Optimal, best, bound, count, start))
}
