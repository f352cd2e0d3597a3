//! Convex QP relaxation solver.
//!
//! The relaxation Hessian is only positive semidefinite (most costs are
//! linear), so each solve runs a proximal-point outer loop: every inner
//! problem adds `rho/2 |x - center|^2` to the objective, which makes it
//! strictly convex and amenable to the Goldfarb-Idnani dual active-set
//! method. The outer loop stops when the proximal step is below the KKT
//! tolerance, at which point `x` is a KKT point of the unmodified problem.
//!
//! Fixed columns (fixed binaries and `lower == upper`) are substituted out
//! before the active-set phase; constraint rows are scaled to unit infinity
//! norm; equality rows enter the active set first and never leave it.

use super::problem::{sparse_dot, MiqpProblem, SparseRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConstraintId {
    Eq(usize),
    Le(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Full-length primal vector (fixed columns included).
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    /// Active inequality rows and bounds at the returned point.
    pub active: Vec<ConstraintId>,
    pub outer_iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    /// Proximal weight.
    pub rho: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol_kkt: 1e-8,
            tol_feas: 1e-8,
            rho: 1e-6,
            max_outer: 200,
            max_inner: 5000,
        }
    }
}

/// Starting information taken from a previously solved, related problem.
#[derive(Debug, Clone, Copy, Default)]
pub struct WarmStart<'a> {
    pub x: Option<&'a [f64]>,
    pub active: &'a [ConstraintId],
}

/// Solves the continuous relaxation with the binaries in `fixed` pinned
/// (`fixed[k]` refers to `p.binary_idx[k]`; `None` relaxes to `[0,1]`).
pub fn solve_qp_relaxation(p: &MiqpProblem, fixed: &[Option<bool>]) -> QpSolution {
    solve_qp_with(p, fixed, &QpOptions::default(), WarmStart::default())
}

pub fn solve_qp_with(
    p: &MiqpProblem,
    fixed: &[Option<bool>],
    opts: &QpOptions,
    warm: WarmStart<'_>,
) -> QpSolution {
    let infeasible = |x: Vec<f64>| QpSolution {
        objective: f64::INFINITY,
        x,
        status: QpStatus::Infeasible,
        kkt_residual: f64::INFINITY,
        active: Vec::new(),
        outer_iterations: 0,
    };
    let red = match Reduced::build(p, fixed, opts.tol_feas) {
        Some(r) => r,
        None => return infeasible(vec![f64::NAN; p.n_vars()]),
    };
    let nf = red.free.len();

    if nf == 0 {
        let x = red.x_full.clone();
        return QpSolution {
            objective: p.objective(&x),
            kkt_residual: 0.0,
            x,
            status: QpStatus::Optimal,
            active: Vec::new(),
            outer_iterations: 0,
        };
    }

    let mut h_rho = red.h.clone();
    for i in 0..nf {
        h_rho[i * nf + i] += opts.rho;
    }
    let chol = match DenseChol::new(&h_rho, nf) {
        Some(c) => c,
        None => return infeasible(red.x_full.clone()),
    };

    let mut center: Vec<f64> = match warm.x {
        Some(wx) => red.free.iter().map(|&j| wx[j]).collect(),
        None => vec![0.0; nf],
    };
    for (k, &j) in red.free.iter().enumerate() {
        center[k] = center[k].clamp(p.lower[j], p.upper[j]);
        if !center[k].is_finite() {
            center[k] = 0.0;
        }
    }
    let mut hint: Vec<bool> = red.ineq.iter().map(|c| warm.active.contains(&c.id)).collect();

    let g_scale = red
        .g
        .iter()
        .map(|v| v.abs())
        .fold(1.0, f64::max);
    let mut status = QpStatus::MaxIter;
    let mut last: Option<GiOut> = None;
    let mut outer = 0;
    let mut g_k = vec![0.0; nf];
    while outer < opts.max_outer {
        outer += 1;
        for i in 0..nf {
            g_k[i] = red.g[i] - opts.rho * center[i];
        }
        let out = match gi_solve(&chol, &g_k, &red.eq, &red.ineq, &hint, opts) {
            Ok(o) => o,
            Err(GiFail::Infeasible) => return infeasible(red.x_full.clone()),
            Err(GiFail::MaxIter) => {
                status = QpStatus::MaxIter;
                break;
            }
        };
        let step = out
            .x
            .iter()
            .zip(&center)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let x_scale = out.x.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for (k, h) in hint.iter_mut().enumerate() {
            *h = out.active_in.contains(&k);
        }
        center.copy_from_slice(&out.x);
        let small_step = opts.rho * step <= 1e-2 * opts.tol_kkt * g_scale || step <= 1e-12 * x_scale;
        let certified = small_step && red.kkt_residual(&out, g_scale) <= opts.tol_kkt;
        last = Some(out);
        if certified {
            status = QpStatus::Optimal;
            break;
        }
    }

    let Some(out) = last else {
        return QpSolution {
            status: QpStatus::MaxIter,
            ..infeasible(red.x_full.clone())
        };
    };
    let mut x = red.x_full.clone();
    for (k, &j) in red.free.iter().enumerate() {
        x[j] = out.x[k];
    }
    let kkt = red.kkt_residual(&out, g_scale);
    let viol = p.max_violation(&x);
    if status == QpStatus::Optimal && viol > opts.tol_feas {
        log::debug!("qp: violation {viol:.3e} above tolerance after {outer} outer iterations");
        status = QpStatus::MaxIter;
    }
    let active = out
        .active_in
        .iter()
        .map(|&k| red.ineq[k].id)
        .collect();
    QpSolution {
        objective: p.objective(&x),
        x,
        status,
        kkt_residual: kkt,
        active,
        outer_iterations: outer,
    }
}

/// Violation threshold of the active-set phase relative to `tol_feas`, so the
/// returned point meets the reported tolerance with room to spare.
const SELECT_FRACTION: f64 = 1e-3;

/// Constraint `row . x (= | >=) rhs` over reduced columns, row scaled to unit inf-norm.
#[derive(Debug, Clone)]
struct Cons {
    row: SparseRow,
    rhs: f64,
    id: ConstraintId,
}

struct Reduced {
    free: Vec<usize>,
    x_full: Vec<f64>,
    /// Dense `nf x nf` Hessian block of the free columns.
    h: Vec<f64>,
    g: Vec<f64>,
    eq: Vec<Cons>,
    ineq: Vec<Cons>,
}

impl Reduced {
    fn build(p: &MiqpProblem, fixed: &[Option<bool>], tol: f64) -> Option<Self> {
        let n = p.n_vars();
        let mut lo = p.lower.clone();
        let mut hi = p.upper.clone();
        for (k, &j) in p.binary_idx.iter().enumerate() {
            lo[j] = lo[j].max(0.0);
            hi[j] = hi[j].min(1.0);
            if let Some(Some(v)) = fixed.get(k) {
                let v = f64::from(u8::from(*v));
                if v < lo[j] || v > hi[j] {
                    return None;
                }
                lo[j] = v;
                hi[j] = v;
            }
        }
        let mut pos = vec![usize::MAX; n];
        let mut free = Vec::new();
        let mut x_full = vec![0.0; n];
        for j in 0..n {
            if lo[j] > hi[j] {
                return None;
            }
            if lo[j] == hi[j] {
                x_full[j] = lo[j];
            } else {
                pos[j] = free.len();
                free.push(j);
            }
        }
        let nf = free.len();

        let mut h = vec![0.0; nf * nf];
        let mut g: Vec<f64> = free.iter().map(|&j| p.c[j]).collect();
        for (i, row) in p.q.iter().enumerate() {
            for &(j, v) in row {
                match (pos[i], pos[j]) {
                    (a, b) if a != usize::MAX && b != usize::MAX => h[a * nf + b] += v,
                    (a, _) if a != usize::MAX => g[a] += v * x_full[j],
                    _ => {}
                }
            }
        }

        let reduce = |row: &[(usize, f64)], rhs: f64| -> (SparseRow, f64) {
            let mut out = Vec::with_capacity(row.len());
            let mut b = rhs;
            for &(j, v) in row {
                if pos[j] == usize::MAX {
                    b -= v * x_full[j];
                } else {
                    out.push((pos[j], v));
                }
            }
            (out, b)
        };
        let scale = |row: &mut SparseRow, rhs: &mut f64| -> bool {
            let s = row.iter().map(|e| e.1.abs()).fold(0.0, f64::max);
            if s == 0.0 {
                return false;
            }
            for e in row.iter_mut() {
                e.1 /= s;
            }
            *rhs /= s;
            true
        };

        let mut eq = Vec::new();
        for (i, (row, &b)) in p.a_eq.iter().zip(&p.b_eq).enumerate() {
            let (mut r, mut rhs) = reduce(row, b);
            if !scale(&mut r, &mut rhs) {
                if rhs.abs() > tol * (1.0 + b.abs()) {
                    return None;
                }
                continue;
            }
            eq.push(Cons { row: r, rhs, id: ConstraintId::Eq(i) });
        }
        let mut ineq = Vec::new();
        for (i, (row, &b)) in p.a_in.iter().zip(&p.b_in).enumerate() {
            // a x <= b  ->  -a x >= -b
            let (r, rhs) = reduce(row, b);
            let mut r: SparseRow = r.into_iter().map(|(j, v)| (j, -v)).collect();
            let mut rhs = -rhs;
            if !scale(&mut r, &mut rhs) {
                if rhs > tol * (1.0 + b.abs()) {
                    return None;
                }
                continue;
            }
            ineq.push(Cons { row: r, rhs, id: ConstraintId::Le(i) });
        }
        for (k, &j) in free.iter().enumerate() {
            if lo[j].is_finite() {
                ineq.push(Cons { row: vec![(k, 1.0)], rhs: lo[j], id: ConstraintId::Lower(j) });
            }
            if hi[j].is_finite() {
                ineq.push(Cons { row: vec![(k, -1.0)], rhs: -hi[j], id: ConstraintId::Upper(j) });
            }
        }
        Some(Reduced { free, x_full, h, g, eq, ineq })
    }

    /// Stationarity residual of the unregularized reduced problem.
    fn kkt_residual(&self, out: &GiOut, g_scale: f64) -> f64 {
        let nf = self.free.len();
        let mut r = self.g.clone();
        for i in 0..nf {
            for j in 0..nf {
                r[i] += self.h[i * nf + j] * out.x[j];
            }
        }
        for (k, &u) in out.u_eq.iter().enumerate() {
            for &(j, v) in &self.eq[k].row {
                r[j] -= u * v;
            }
        }
        for (&k, &u) in out.active_in.iter().zip(&out.u_in) {
            for &(j, v) in &self.ineq[k].row {
                r[j] -= u * v;
            }
        }
        let neg_dual = out.u_in.iter().map(|&u| (-u).max(0.0)).fold(0.0, f64::max);
        r.iter().map(|v| v.abs()).fold(0.0, f64::max).max(neg_dual) / g_scale
    }
}

/// `H = L L'` with `J = L^{-T}` precomputed.
struct DenseChol {
    n: usize,
    /// Row-major `n x n`.
    j: Vec<f64>,
}

impl DenseChol {
    fn new(h: &[f64], n: usize) -> Option<Self> {
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..=i {
                let mut s = h[i * n + k];
                for m in 0..k {
                    s -= l[i * n + m] * l[k * n + m];
                }
                if i == k {
                    if s <= 0.0 {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + k] = s / l[k * n + k];
                }
            }
        }
        // inv = L^{-1} (lower), J = inv'
        let mut inv = vec![0.0; n * n];
        for col in 0..n {
            for i in col..n {
                let mut s = if i == col { 1.0 } else { 0.0 };
                for m in col..i {
                    s -= l[i * n + m] * inv[m * n + col];
                }
                inv[i * n + col] = s / l[i * n + i];
            }
        }
        let mut j = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                j[r * n + c] = inv[c * n + r];
            }
        }
        Some(DenseChol { n, j })
    }
}

#[derive(Debug)]
enum GiFail {
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
struct GiOut {
    x: Vec<f64>,
    u_eq: Vec<f64>,
    active_in: Vec<usize>,
    u_in: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Act {
    Eq(usize),
    In(usize),
}

/// Goldfarb-Idnani dual active-set method for
/// `min 1/2 x'Hx + g'x  s.t.  eq: n.x = b,  ineq: n.x >= b`, with `H` given
/// through its factor.
fn gi_solve(
    chol: &DenseChol,
    g: &[f64],
    eqs: &[Cons],
    ineqs: &[Cons],
    hint: &[bool],
    opts: &QpOptions,
) -> Result<GiOut, GiFail> {
    let n = chol.n;
    let mut st = GiState {
        n,
        j: chol.j.clone(),
        j_initial: &chol.j,
        r: vec![0.0; n * n],
        r_norm: 1.0,
        iq: 0,
        a: Vec::with_capacity(n + 1),
        u: vec![0.0; n + 1],
        d: vec![0.0; n],
        z: vec![0.0; n],
        rv: vec![0.0; n],
    };

    // unconstrained minimum: x = -J J' g
    let mut x = vec![0.0; n];
    {
        let mut jt_g = vec![0.0; n];
        for c in 0..n {
            let mut s = 0.0;
            for r in 0..n {
                s += st.j[r * n + c] * g[r];
            }
            jt_g[c] = s;
        }
        for r in 0..n {
            let mut s = 0.0;
            for c in 0..n {
                s += st.j[r * n + c] * jt_g[c];
            }
            x[r] = -s;
        }
    }

    for (i, c) in eqs.iter().enumerate() {
        st.compute_d(&c.row);
        st.update_z();
        st.update_r();
        let zn = sparse_dot(&c.row, &st.z);
        let resid = c.rhs - sparse_dot(&c.row, &x);
        if !st.direction_is_nonzero() {
            // dependent on rows already active
            if resid.abs() > opts.tol_feas * (1.0 + c.rhs.abs()) {
                return Err(GiFail::Infeasible);
            }
            continue;
        }
        let t2 = resid / zn;
        for k in 0..n {
            x[k] += t2 * st.z[k];
        }
        let iq = st.iq;
        st.u[iq] = t2;
        for k in 0..iq {
            st.u[k] -= t2 * st.rv[k];
        }
        st.a.push(Act::Eq(i));
        if !st.add_constraint() {
            st.a.pop();
        }
    }
    let n_eq_active = st.iq;

    let m = ineqs.len();
    let mut in_active = vec![false; m];
    let mut excluded = vec![false; m];
    let mut s = vec![0.0; m];
    let mut iters = 0usize;

    'outer: loop {
        iters += 1;
        if iters > opts.max_inner {
            return Err(GiFail::MaxIter);
        }
        st.refine(&mut x, eqs, ineqs);
        for (i, c) in ineqs.iter().enumerate() {
            s[i] = sparse_dot(&c.row, &x) - c.rhs;
        }
        let x_old = x.clone();
        let a_old = st.a.clone();
        let u_old = st.u.clone();

        'select: loop {
            let mut ip = usize::MAX;
            let mut best = -SELECT_FRACTION * opts.tol_feas;
            let mut best_hint = best;
            let mut ip_hint = usize::MAX;
            for i in 0..m {
                if in_active[i] || excluded[i] {
                    continue;
                }
                if s[i] < best {
                    best = s[i];
                    ip = i;
                }
                if hint[i] && s[i] < best_hint {
                    best_hint = s[i];
                    ip_hint = i;
                }
            }
            if ip_hint != usize::MAX {
                ip = ip_hint;
            }
            if ip == usize::MAX {
                break 'outer;
            }
            let iq0 = st.iq;
            st.u[iq0] = 0.0;
            st.a.push(Act::In(ip));
            let np = &ineqs[ip].row;

            loop {
                iters += 1;
                if iters > opts.max_inner {
                    return Err(GiFail::MaxIter);
                }
                st.compute_d(np);
                st.update_z();
                st.update_r();
                let iq = st.iq;

                // dual blocking step
                let mut t1 = f64::INFINITY;
                let mut l = usize::MAX;
                for k in n_eq_active..iq {
                    if st.rv[k] > 0.0 {
                        let ratio = st.u[k] / st.rv[k];
                        if ratio < t1 {
                            t1 = ratio;
                            l = k;
                        }
                    }
                }
                let zn = sparse_dot(np, &st.z);
                let t2 = if st.direction_is_nonzero() && zn > 0.0 {
                    -s[ip] / zn
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if t.is_infinite() {
                    return Err(GiFail::Infeasible);
                }
                if t2.is_infinite() {
                    // dual-only step, then drop the blocking constraint
                    for k in 0..iq {
                        st.u[k] -= t * st.rv[k];
                    }
                    st.u[iq] += t;
                    if let Act::In(dropped) = st.a[l] {
                        in_active[dropped] = false;
                    }
                    st.delete_constraint(l);
                    continue;
                }

                for k in 0..n {
                    x[k] += t * st.z[k];
                }
                for k in 0..iq {
                    st.u[k] -= t * st.rv[k];
                }
                st.u[iq] += t;

                if t2 <= t1 {
                    // full step: the constraint becomes active
                    if !st.add_constraint() {
                        excluded[ip] = true;
                        st.a.truncate(iq);
                        // restore the state from the start of this selection
                        x.copy_from_slice(&x_old);
                        st.restore(&a_old, &u_old, &mut in_active, ineqs.len());
                        st.rebuild(&eqs_rows(eqs), ineqs);
                        for (i, c) in ineqs.iter().enumerate() {
                            s[i] = sparse_dot(&c.row, &x) - c.rhs;
                        }
                        continue 'select;
                    }
                    in_active[ip] = true;
                    continue 'outer;
                }

                // partial step: drop blocking constraint, keep working on ip
                if let Act::In(dropped) = st.a[l] {
                    in_active[dropped] = false;
                }
                st.delete_constraint(l);
                s[ip] = sparse_dot(np, &x) - ineqs[ip].rhs;
            }
        }
    }

    st.refine(&mut x, eqs, ineqs);
    let mut u_eq = vec![0.0; eqs.len()];
    let mut active_in = Vec::new();
    let mut u_in = Vec::new();
    for k in 0..st.iq {
        match st.a[k] {
            Act::Eq(i) => u_eq[i] = st.u[k],
            Act::In(i) => {
                active_in.push(i);
                u_in.push(st.u[k]);
            }
        }
    }
    Ok(GiOut { x, u_eq, active_in, u_in })
}

fn eqs_rows(eqs: &[Cons]) -> Vec<&SparseRow> {
    eqs.iter().map(|c| &c.row).collect()
}

struct GiState<'a> {
    n: usize,
    j_initial: &'a [f64],
    /// Row-major orthogonal-ish factor, columns `iq..` span the null space of the active normals.
    j: Vec<f64>,
    /// Upper-triangular, row-major.
    r: Vec<f64>,
    r_norm: f64,
    iq: usize,
    a: Vec<Act>,
    u: Vec<f64>,
    d: Vec<f64>,
    z: Vec<f64>,
    rv: Vec<f64>,
}

impl GiState<'_> {
    fn compute_d(&mut self, np: &[(usize, f64)]) {
        let n = self.n;
        self.d.iter_mut().for_each(|v| *v = 0.0);
        for &(row, v) in np {
            let jr = &self.j[row * n..row * n + n];
            for (dc, &jv) in self.d.iter_mut().zip(jr) {
                *dc += jv * v;
            }
        }
    }

    fn update_z(&mut self) {
        let n = self.n;
        let iq = self.iq;
        for k in 0..n {
            let jr = &self.j[k * n..k * n + n];
            let mut s = 0.0;
            for c in iq..n {
                s += jr[c] * self.d[c];
            }
            self.z[k] = s;
        }
    }

    fn update_r(&mut self) {
        let n = self.n;
        let iq = self.iq;
        for i in (0..iq).rev() {
            let mut s = self.d[i];
            for c in i + 1..iq {
                s -= self.r[i * n + c] * self.rv[c];
            }
            self.rv[i] = s / self.r[i * n + i];
        }
    }

    /// The projected step direction is numerically distinct from zero.
    fn direction_is_nonzero(&self) -> bool {
        let tail: f64 = self.d[self.iq..].iter().map(|v| v * v).sum();
        let all: f64 = self.d.iter().map(|v| v * v).sum();
        all > 0.0 && tail > 1e-20 * all
    }

    fn add_constraint(&mut self) -> bool {
        let n = self.n;
        let iq = self.iq;
        for jj in (iq + 1..n).rev() {
            let mut cc = self.d[jj - 1];
            let mut ss = self.d[jj];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            self.d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                self.d[jj - 1] = -h;
            } else {
                self.d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[k * n + jj - 1];
                let t2 = self.j[k * n + jj];
                let a = t1 * cc + t2 * ss;
                self.j[k * n + jj - 1] = a;
                self.j[k * n + jj] = xny * (t1 + a) - t2;
            }
        }
        if iq >= n {
            return false;
        }
        self.iq += 1;
        for i in 0..self.iq {
            self.r[i * n + self.iq - 1] = self.d[i];
        }
        let diag = self.d[self.iq - 1].abs();
        if diag <= 1e-11 * self.r_norm {
            self.iq -= 1;
            for i in 0..=self.iq {
                self.r[i * n + self.iq] = 0.0;
            }
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    /// Removes the active constraint at position `qq` (the pending candidate
    /// in `a[iq]`, `u[iq]` shifts down with it).
    fn delete_constraint(&mut self, qq: usize) {
        let n = self.n;
        let iq = self.iq;
        for i in qq..iq - 1 {
            self.a[i] = self.a[i + 1];
            self.u[i] = self.u[i + 1];
            for jrow in 0..n {
                self.r[jrow * n + i] = self.r[jrow * n + i + 1];
            }
        }
        // candidate slot
        self.a[iq - 1] = self.a[iq];
        self.u[iq - 1] = self.u[iq];
        self.a.truncate(iq);
        self.u[iq] = 0.0;
        for jrow in 0..iq {
            self.r[jrow * n + iq - 1] = 0.0;
        }
        self.iq -= 1;
        let iq = self.iq;
        if iq == 0 {
            return;
        }
        for jj in qq..iq {
            let mut cc = self.r[jj * n + jj];
            let mut ss = self.r[(jj + 1) * n + jj];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1) * n + jj] = 0.0;
            if cc < 0.0 {
                self.r[jj * n + jj] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[jj * n + jj] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..iq {
                let t1 = self.r[jj * n + k];
                let t2 = self.r[(jj + 1) * n + k];
                let a = t1 * cc + t2 * ss;
                self.r[jj * n + k] = a;
                self.r[(jj + 1) * n + k] = xny * (t1 + a) - t2;
            }
            for k in 0..n {
                let t1 = self.j[k * n + jj];
                let t2 = self.j[k * n + jj + 1];
                let a = t1 * cc + t2 * ss;
                self.j[k * n + jj] = a;
                self.j[k * n + jj + 1] = xny * (a + t1) - t2;
            }
        }
    }

    /// Moves `x` by the smallest H-norm correction that makes every active
    /// constraint hold to round-off, undoing drift accumulated over many steps.
    fn refine(&mut self, x: &mut [f64], eqs: &[Cons], ineqs: &[Cons]) {
        let n = self.n;
        let iq = self.iq;
        if iq == 0 {
            return;
        }
        let mut y = vec![0.0; iq];
        for _ in 0..2 {
            let mut worst: f64 = 0.0;
            for (k, act) in self.a[..iq].iter().enumerate() {
                let c = match *act {
                    Act::Eq(i) => &eqs[i],
                    Act::In(i) => &ineqs[i],
                };
                y[k] = c.rhs - sparse_dot(&c.row, x);
                worst = worst.max(y[k].abs() / (1.0 + c.rhs.abs()));
            }
            if worst < 1e-15 {
                return;
            }
            // R' y = r
            for j in 0..iq {
                let mut v = y[j];
                for i in 0..j {
                    v -= self.r[i * n + j] * y[i];
                }
                y[j] = v / self.r[j * n + j];
            }
            for (k, xk) in x.iter_mut().enumerate() {
                let jr = &self.j[k * n..k * n + iq];
                *xk += jr.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }

    fn restore(&mut self, a_old: &[Act], u_old: &[f64], in_active: &mut [bool], m: usize) {
        debug_assert_eq!(in_active.len(), m);
        in_active.iter_mut().for_each(|v| *v = false);
        self.a = a_old.to_vec();
        self.u.copy_from_slice(u_old);
        for act in &self.a {
            if let Act::In(i) = act {
                in_active[*i] = true;
            }
        }
    }

    /// Refactors `J` and `R` for the current active list (used after a
    /// rollback, which is rare).
    fn rebuild(&mut self, eqs: &[&SparseRow], ineqs: &[Cons]) {
        let acts = std::mem::take(&mut self.a);
        let u = self.u.clone();
        self.j.copy_from_slice(self.j_initial);
        self.r.iter_mut().for_each(|v| *v = 0.0);
        self.r_norm = 1.0;
        self.iq = 0;
        for act in &acts {
            let row: &SparseRow = match *act {
                Act::Eq(i) => eqs[i],
                Act::In(i) => &ineqs[i].row,
            };
            self.compute_d(row);
            if self.add_constraint() {
                self.a.push(*act);
            }
        }
        self.u = u;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miqp::problem::Layout;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn continuous(n: usize) -> MiqpProblem {
        let names = (0..n).map(|i| format!("x{i}")).collect();
        MiqpProblem::with_layout(Layout::from_names(names).unwrap())
    }

    #[test]
    fn unconstrained_scalar() {
        // min x^2 - 2x
        let mut p = continuous(1);
        p.add_q(0, 0, 2.0);
        p.c[0] = -2.0;
        let s = solve_qp_relaxation(&p, &[]);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-7);
        assert!((s.objective + 1.0).abs() < 1e-9);
    }

    #[test]
    fn active_lower_bound() {
        let mut p = continuous(1);
        p.add_q(0, 0, 2.0);
        p.lower[0] = 3.0;
        let s = solve_qp_relaxation(&p, &[]);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 3.0).abs() < 1e-9);
        assert!((s.objective - 9.0).abs() < 1e-8);
        assert!(s.active.contains(&ConstraintId::Lower(0)));
    }

    #[test]
    fn linear_program_vertex() {
        // min -x - y  s.t. x + 2y <= 4, 3x + y <= 6, x,y >= 0  ->  (1.6, 1.2)
        let mut p = continuous(2);
        p.c = vec![-1.0, -1.0];
        p.lower = vec![0.0, 0.0];
        p.push_le(vec![(0, 1.0), (1, 2.0)], 4.0);
        p.push_le(vec![(0, 3.0), (1, 1.0)], 6.0);
        let s = solve_qp_relaxation(&p, &[]);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.6).abs() < 1e-6, "{:?}", s.x);
        assert!((s.x[1] - 1.2).abs() < 1e-6, "{:?}", s.x);
        assert!((s.objective + 2.8).abs() < 1e-7);
    }

    #[test]
    fn infeasible_box_and_row() {
        let mut p = continuous(2);
        p.add_q(0, 0, 1.0);
        p.lower = vec![0.0, 0.0];
        p.upper = vec![1.0, 1.0];
        p.push_le(vec![(0, -1.0), (1, -1.0)], -3.0);
        assert_eq!(solve_qp_relaxation(&p, &[]).status, QpStatus::Infeasible);
    }

    #[test]
    fn inconsistent_equalities() {
        let mut p = continuous(2);
        p.push_eq(vec![(0, 1.0), (1, 1.0)], 1.0);
        p.push_eq(vec![(0, 2.0), (1, 2.0)], 3.0);
        assert_eq!(solve_qp_relaxation(&p, &[]).status, QpStatus::Infeasible);
    }

    #[test]
    fn fixed_binary_is_substituted() {
        let mut p = continuous(2);
        p.set_binary(1);
        p.add_q(0, 0, 2.0);
        p.push_le(vec![(0, -1.0), (1, 4.0)], 0.0); // x >= 4 b
        let s = solve_qp_relaxation(&p, &[Some(true)]);
        assert!((s.x[0] - 4.0).abs() < 1e-8);
        assert_eq!(s.x[1], 1.0);
        let s = solve_qp_relaxation(&p, &[Some(false)]);
        assert!(s.x[0].abs() < 1e-6);
    }

    /// Builds a strictly convex QP whose optimum and multipliers are known
    /// by construction, then checks the construction with a dense KKT solve.
    fn planted_qp(seed: u64, n: usize, m_eq: usize, m_in: usize) -> (MiqpProblem, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
        let x_star: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut p = continuous(n);
        let mut grad = &h * DVector::from_column_slice(&x_star);
        let mut act_rows: Vec<Vec<f64>> = Vec::new();
        for _ in 0..m_eq {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lam: f64 = rng.random_range(-1.0..1.0);
            let rhs: f64 = a.iter().zip(&x_star).map(|(u, v)| u * v).sum();
            // stationarity: H x + g = sum lam a  (lam free for equalities)
            for i in 0..n {
                grad[i] -= lam * a[i];
            }
            act_rows.push(a.clone());
            p.push_eq(a.iter().copied().enumerate().collect(), rhs);
        }
        for k in 0..m_in {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ax: f64 = a.iter().zip(&x_star).map(|(u, v)| u * v).sum();
            if k % 2 == 0 {
                // active with a positive multiplier: a x <= b pushes the gradient by -mu a
                let mu: f64 = rng.random_range(0.1..1.0);
                for i in 0..n {
                    grad[i] += mu * a[i];
                }
                act_rows.push(a.clone());
                p.push_le(a.iter().copied().enumerate().collect(), ax);
            } else {
                p.push_le(a.iter().copied().enumerate().collect(), ax + rng.random_range(0.1..1.0));
            }
        }
        for i in 0..n {
            for j in 0..n {
                if h[(i, j)] != 0.0 {
                    p.q[i].push((j, h[(i, j)]));
                }
            }
            p.c[i] = -grad[i];
        }

        // independent check: solve the KKT system of the planted active set
        let na = act_rows.len();
        let mut kkt = DMatrix::zeros(n + na, n + na);
        let mut rhs = DVector::zeros(n + na);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        for (r, a) in act_rows.iter().enumerate() {
            for i in 0..n {
                kkt[(n + r, i)] = a[i];
                kkt[(i, n + r)] = a[i];
            }
            rhs[n + r] = a.iter().zip(&x_star).map(|(u, v)| u * v).sum();
        }
        for i in 0..n {
            rhs[i] = -p.c[i];
        }
        let sol = kkt.lu().solve(&rhs).expect("planted KKT system is regular");
        for i in 0..n {
            assert!((sol[i] - x_star[i]).abs() < 1e-9);
        }
        (p, x_star)
    }

    #[test]
    fn random_planted_qps_match_kkt_oracle() {
        for seed in 0..20 {
            let (p, x_star) = planted_qp(seed, 20, 3, 16);
            let s = solve_qp_relaxation(&p, &[]);
            assert_eq!(s.status, QpStatus::Optimal, "seed {seed}");
            let err = s.x.iter().zip(&x_star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-8, "seed {seed}: max error {err:.3e}");
            assert!((s.objective - p.objective(&x_star)).abs() < 1e-8 * (1.0 + p.objective(&x_star).abs()));
            assert!(s.kkt_residual <= 1e-8, "seed {seed}: residual {:.3e}", s.kkt_residual);
        }
    }

    #[test]
    fn warm_start_reaches_same_point() {
        let (p, _) = planted_qp(99, 15, 2, 12);
        let cold = solve_qp_relaxation(&p, &[]);
        let warm = solve_qp_with(
            &p,
            &[],
            &QpOptions::default(),
            WarmStart { x: Some(&cold.x), active: &cold.active },
        );
        for (a, b) in cold.x.iter().zip(&warm.x) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn psd_hessian_objective_matches_lp_oracle() {
        // min (x0 - x1)^2 + x2  over a box with x0 + x1 + x2 = 1:
        // any optimum has x2 = 0 and x0 = x1 = 1/2, objective 0
        let mut p = continuous(3);
        p.add_q(0, 0, 2.0);
        p.add_q(1, 1, 2.0);
        p.add_q(0, 1, -2.0);
        p.c[2] = 1.0;
        p.lower = vec![0.0; 3];
        p.upper = vec![1.0; 3];
        p.push_eq(vec![(0, 1.0), (1, 1.0), (2, 1.0)], 1.0);
        let s = solve_qp_relaxation(&p, &[]);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(s.objective.abs() < 1e-8);
        assert!((s.x[0] - 0.5).abs() < 1e-6 && (s.x[1] - 0.5).abs() < 1e-6);
    }
}
