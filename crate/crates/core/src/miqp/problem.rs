use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Sparse row: `(column, coefficient)` pairs with distinct columns.
pub type SparseRow = Vec<(usize, f64)>;

/// Column names with reverse lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    names: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut layout = Layout::new();
        for n in names {
            layout.push(n)?;
        }
        Ok(layout)
    }

    /// Appends a column and returns its index.
    pub fn push(&mut self, name: String) -> Result<usize> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Shape(format!("invalid column name {name:?}")));
        }
        let idx = self.names.len();
        if self.lookup.insert(name.clone(), idx).is_some() {
            return Err(Error::Shape(format!("duplicate column name {name}")));
        }
        self.names.push(name);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, col: usize) -> &str {
        &self.names[col]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    /// Column of `symbol[index]@stage` (or `symbol@stage` without an index).
    pub fn col(&self, symbol: &str, index: Option<usize>, stage: usize) -> Option<usize> {
        self.get(&column_name(symbol, index, stage))
    }
}

pub fn column_name(symbol: &str, index: Option<usize>, stage: usize) -> String {
    match index {
        Some(i) => format!("{symbol}[{i}]@{stage}"),
        None => format!("{symbol}@{stage}"),
    }
}

/// Mixed-integer QP
///
/// ```text
/// minimize    1/2 x'Qx + c'x + const0
/// subject to  A_eq x  = b_eq
///             A_in x <= b_in
///             lower <= x <= upper
///             x_j in {0,1}  for j in binary_idx
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct MiqpProblem {
    pub n_cont: usize,
    pub binary_idx: Vec<usize>,
    /// Symmetric, stored as sparse rows.
    pub q: Vec<SparseRow>,
    pub c: Vec<f64>,
    pub const0: f64,
    pub a_eq: Vec<SparseRow>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<SparseRow>,
    pub b_in: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub layout: Layout,
}

impl MiqpProblem {
    /// Empty problem over the given columns; all variables continuous and free.
    pub fn with_layout(layout: Layout) -> Self {
        let n = layout.len();
        MiqpProblem {
            n_cont: n,
            binary_idx: Vec::new(),
            q: vec![Vec::new(); n],
            c: vec![0.0; n],
            const0: 0.0,
            a_eq: Vec::new(),
            b_eq: Vec::new(),
            a_in: Vec::new(),
            b_in: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            layout,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_binary(&self) -> usize {
        self.binary_idx.len()
    }

    /// Marks `col` binary and sets its bounds to `[0,1]`.
    pub fn set_binary(&mut self, col: usize) {
        if !self.binary_idx.contains(&col) {
            self.binary_idx.push(col);
            self.binary_idx.sort_unstable();
            self.n_cont = self.n_vars() - self.binary_idx.len();
        }
        self.lower[col] = 0.0;
        self.upper[col] = 1.0;
    }

    /// Adds `v` to the symmetric entries `(i,j)` and `(j,i)` (once on the diagonal).
    pub fn add_q(&mut self, i: usize, j: usize, v: f64) {
        add_to_row(&mut self.q[i], j, v);
        if i != j {
            add_to_row(&mut self.q[j], i, v);
        }
    }

    pub fn push_eq(&mut self, row: SparseRow, rhs: f64) {
        self.a_eq.push(normalize_row(row));
        self.b_eq.push(rhs);
    }

    pub fn push_le(&mut self, row: SparseRow, rhs: f64) {
        self.a_in.push(normalize_row(row));
        self.b_in.push(rhs);
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for (i, row) in self.q.iter().enumerate() {
            for &(j, v) in row {
                quad += x[i] * v * x[j];
            }
        }
        0.5 * quad + dot_dense(&self.c, x) + self.const0
    }

    /// Largest violation of any constraint or bound, measured on rows scaled
    /// to unit infinity norm.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (row, &b) in self.a_eq.iter().zip(&self.b_eq) {
            let s = row_scale(row);
            worst = worst.max((sparse_dot(row, x) - b).abs() / s);
        }
        for (row, &b) in self.a_in.iter().zip(&self.b_in) {
            let s = row_scale(row);
            worst = worst.max((sparse_dot(row, x) - b) / s);
        }
        for j in 0..x.len() {
            worst = worst.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        worst
    }

    /// Largest distance of a binary variable from {0,1}.
    pub fn max_integrality_gap(&self, x: &[f64]) -> f64 {
        self.binary_idx
            .iter()
            .map(|&j| (x[j] - x[j].round()).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_well_formed(&self) -> Result<()> {
        let n = self.n_vars();
        let bad = |m: String| Err(Error::Shape(m));
        if self.q.len() != n || self.lower.len() != n || self.upper.len() != n {
            return bad("objective/bound vectors disagree with column count".into());
        }
        if self.layout.len() != n {
            return bad(format!("layout covers {} of {n} columns", self.layout.len()));
        }
        if self.a_eq.len() != self.b_eq.len() || self.a_in.len() != self.b_in.len() {
            return bad("constraint row/rhs count mismatch".into());
        }
        if self.n_cont + self.binary_idx.len() != n {
            return bad("n_cont + binaries != column count".into());
        }
        for rows in [&self.q, &self.a_eq, &self.a_in] {
            for row in rows.iter() {
                if row.iter().any(|&(j, v)| j >= n || !v.is_finite()) {
                    return bad("row entry out of range or non-finite".into());
                }
            }
        }
        for (i, row) in self.q.iter().enumerate() {
            for &(j, v) in row {
                let back = self.q[j].iter().find(|e| e.0 == i).map_or(0.0, |e| e.1);
                if (back - v).abs() > 1e-12 * v.abs().max(1.0) {
                    return bad(format!("Q not symmetric at ({i},{j})"));
                }
            }
        }
        for &j in &self.binary_idx {
            if j >= n || self.lower[j] < 0.0 || self.upper[j] > 1.0 {
                return bad(format!("binary column {j} must have bounds within [0,1]"));
            }
        }
        for j in 0..n {
            if self.lower[j] > self.upper[j] {
                return bad(format!("column {j}: lower > upper"));
            }
        }
        Ok(())
    }

    /// Plain-text dump (`MIQP v1`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let nnz = |rows: &[SparseRow]| rows.iter().map(Vec::len).sum::<usize>();
        let _ = writeln!(s, "MIQP v1");
        let _ = writeln!(
            s,
            "dims {} {} {} {}",
            self.n_vars(),
            self.a_eq.len(),
            self.a_in.len(),
            self.binary_idx.len()
        );
        let _ = writeln!(s, "const {}", fmt_f64(self.const0));
        let _ = writeln!(s, "Q {}", nnz(&self.q));
        write_triplets(&mut s, &self.q);
        let c_nz: Vec<_> = self.c.iter().enumerate().filter(|(_, &v)| v != 0.0).collect();
        let _ = writeln!(s, "c {}", c_nz.len());
        for (j, v) in c_nz {
            let _ = writeln!(s, "{j} {}", fmt_f64(*v));
        }
        let _ = writeln!(s, "Aeq {}", nnz(&self.a_eq));
        write_triplets(&mut s, &self.a_eq);
        let _ = writeln!(s, "beq {}", self.b_eq.len());
        for (i, v) in self.b_eq.iter().enumerate() {
            let _ = writeln!(s, "{i} {}", fmt_f64(*v));
        }
        let _ = writeln!(s, "Ain {}", nnz(&self.a_in));
        write_triplets(&mut s, &self.a_in);
        let _ = writeln!(s, "bin {}", self.b_in.len());
        for (i, v) in self.b_in.iter().enumerate() {
            let _ = writeln!(s, "{i} {}", fmt_f64(*v));
        }
        let _ = writeln!(s, "bounds {}", self.n_vars());
        for j in 0..self.n_vars() {
            let _ = writeln!(s, "{j} {} {}", fmt_f64(self.lower[j]), fmt_f64(self.upper[j]));
        }
        let _ = writeln!(s, "names {}", self.layout.len());
        for (j, name) in self.layout.names().iter().enumerate() {
            let _ = writeln!(s, "{j} {name}");
        }
        let _ = writeln!(s, "binaries {}", self.binary_idx.len());
        let list: Vec<String> = self.binary_idx.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{}", list.join(" "));
        let _ = writeln!(s, "end");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        TextReader::new(text, Path::new("<miqp>")).read()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TextReader::new(&text, path).read()
    }
}

fn add_to_row(row: &mut SparseRow, j: usize, v: f64) {
    match row.iter_mut().find(|e| e.0 == j) {
        Some(e) => e.1 += v,
        None => {
            row.push((j, v));
            row.sort_unstable_by_key(|e| e.0);
        }
    }
}

/// Merges duplicate columns, drops zeros, sorts by column.
fn normalize_row(row: SparseRow) -> SparseRow {
    let mut out: SparseRow = Vec::with_capacity(row.len());
    for (j, v) in row {
        add_to_row(&mut out, j, v);
    }
    out.retain(|e| e.1 != 0.0);
    out
}

pub(crate) fn sparse_dot(row: &[(usize, f64)], x: &[f64]) -> f64 {
    row.iter().map(|&(j, v)| v * x[j]).sum()
}

pub(crate) fn dot_dense(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_scale(row: &[(usize, f64)]) -> f64 {
    row.iter().map(|e| e.1.abs()).fold(0.0, f64::max).max(1e-300)
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

fn write_triplets(s: &mut String, rows: &[SparseRow]) {
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            let _ = writeln!(s, "{i} {j} {}", fmt_f64(v));
        }
    }
}

struct TextReader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    path: &'a Path,
    line_no: usize,
}

impl<'a> TextReader<'a> {
    fn new(text: &'a str, path: &'a Path) -> Self {
        TextReader {
            lines: text.lines().enumerate().peekable(),
            path,
            line_no: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line_no, msg)
    }

    fn next_line(&mut self) -> Result<Vec<&'a str>> {
        loop {
            match self.lines.next() {
                Some((i, l)) => {
                    self.line_no = i + 1;
                    let l = l.trim();
                    if l.is_empty() || l.starts_with('#') {
                        continue;
                    }
                    return Ok(l.split_whitespace().collect());
                }
                None => {
                    self.line_no += 1;
                    return Err(self.err("unexpected end of file"));
                }
            }
        }
    }

    fn num<T: std::str::FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse().map_err(|_| self.err(format!("bad number {tok:?}")))
    }

    fn float(&self, tok: &str) -> Result<f64> {
        match tok {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            _ => self.num(tok),
        }
    }

    fn section(&mut self, key: &str) -> Result<usize> {
        let toks = self.next_line()?;
        if toks.len() != 2 || toks[0] != key {
            return Err(self.err(format!("expected `{key} <count>`")));
        }
        self.num(toks[1])
    }

    fn triplets(&mut self, key: &str, n_rows: usize, n_cols: usize) -> Result<Vec<SparseRow>> {
        let nnz = self.section(key)?;
        let mut rows = vec![Vec::new(); n_rows];
        for _ in 0..nnz {
            let t = self.next_line()?;
            if t.len() != 3 {
                return Err(self.err("expected `<row> <col> <value>`"));
            }
            let (i, j): (usize, usize) = (self.num(t[0])?, self.num(t[1])?);
            if i >= n_rows || j >= n_cols {
                return Err(self.err(format!("entry ({i},{j}) out of range")));
            }
            rows[i].push((j, self.float(t[2])?));
        }
        Ok(rows)
    }

    fn vector(&mut self, key: &str, len: usize, sparse: bool) -> Result<Vec<f64>> {
        let count = self.section(key)?;
        if !sparse && count != len {
            return Err(self.err(format!("{key}: expected {len} entries, header says {count}")));
        }
        let mut v = vec![0.0; len];
        for _ in 0..count {
            let t = self.next_line()?;
            if t.len() != 2 {
                return Err(self.err("expected `<index> <value>`"));
            }
            let i: usize = self.num(t[0])?;
            if i >= len {
                return Err(self.err(format!("index {i} out of range")));
            }
            v[i] = self.float(t[1])?;
        }
        Ok(v)
    }

    fn read(mut self) -> Result<MiqpProblem> {
        let head = self.next_line()?;
        if head.first() != Some(&"MIQP") {
            return Err(self.err("missing `MIQP` header"));
        }
        if head.get(1) != Some(&"v1") || head.len() != 2 {
            return Err(Error::Version {
                expected: "MIQP v1".into(),
                found: head.join(" "),
            });
        }
        let dims = self.next_line()?;
        if dims.len() != 5 || dims[0] != "dims" {
            return Err(self.err("expected `dims <n> <m_eq> <m_in> <n_bin>`"));
        }
        let n: usize = self.num(dims[1])?;
        let m_eq: usize = self.num(dims[2])?;
        let m_in: usize = self.num(dims[3])?;
        let n_bin: usize = self.num(dims[4])?;

        let t = self.next_line()?;
        if t.len() != 2 || t[0] != "const" {
            return Err(self.err("expected `const <value>`"));
        }
        let const0 = self.float(t[1])?;
        let q = self.triplets("Q", n, n)?;
        let c = self.vector("c", n, true)?;
        let a_eq = self.triplets("Aeq", m_eq, n)?;
        let b_eq = self.vector("beq", m_eq, false)?;
        let a_in = self.triplets("Ain", m_in, n)?;
        let b_in = self.vector("bin", m_in, false)?;

        let count = self.section("bounds")?;
        if count != n {
            return Err(self.err("bounds count must equal column count"));
        }
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for _ in 0..n {
            let t = self.next_line()?;
            if t.len() != 3 {
                return Err(self.err("expected `<col> <lower> <upper>`"));
            }
            let j: usize = self.num(t[0])?;
            if j >= n {
                return Err(self.err("bound column out of range"));
            }
            lower[j] = self.float(t[1])?;
            upper[j] = self.float(t[2])?;
        }

        let count = self.section("names")?;
        let mut names = vec![String::new(); n];
        for _ in 0..count {
            let t = self.next_line()?;
            if t.len() != 2 {
                return Err(self.err("expected `<col> <name>`"));
            }
            let j: usize = self.num(t[0])?;
            if j >= n {
                return Err(self.err("name column out of range"));
            }
            names[j] = t[1].to_string();
        }
        if count == 0 {
            names = (0..n).map(|j| format!("x{j}")).collect();
        }
        let layout = Layout::from_names(names).map_err(|e| self.err(e.to_string()))?;

        let count = self.section("binaries")?;
        if count != n_bin {
            return Err(self.err("binary count disagrees with dims"));
        }
        let binary_idx = if n_bin == 0 {
            Vec::new()
        } else {
            let t = self.next_line()?;
            if t.len() != n_bin {
                return Err(self.err(format!("expected {n_bin} binary indices")));
            }
            t.iter().map(|s| self.num(s)).collect::<Result<Vec<usize>>>()?
        };
        let t = self.next_line()?;
        if t != ["end"] {
            return Err(self.err("expected `end`"));
        }

        let p = MiqpProblem {
            n_cont: n - n_bin.min(n),
            binary_idx,
            q,
            c,
            const0,
            a_eq,
            b_eq,
            a_in,
            b_in,
            lower,
            upper,
            layout,
        };
        p.check_well_formed().map_err(|e| self.err(e.to_string()))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MiqpProblem {
        let layout = Layout::from_names(vec!["x@0".into(), "d@0".into()]).unwrap();
        let mut p = MiqpProblem::with_layout(layout);
        p.add_q(0, 0, 2.0);
        p.c = vec![-2.0, 0.5];
        p.const0 = 1.25;
        p.push_le(vec![(0, 1.0), (1, -10.0)], 0.0);
        p.push_eq(vec![(0, 1.0), (0, 1.0)], 1.0);
        p.lower[0] = 0.0;
        p.upper[0] = f64::INFINITY;
        p.set_binary(1);
        p
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let p = tiny();
        let back = MiqpProblem::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.a_eq[0], vec![(0, 2.0)]);
    }

    #[test]
    fn text_errors_carry_line_numbers() {
        let text = tiny().to_text();
        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        match MiqpProblem::from_text(&truncated) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_version = text.replacen("MIQP v1", "MIQP v2", 1);
        assert!(matches!(MiqpProblem::from_text(&bad_version), Err(Error::Version { .. })));
        let bad_num = text.replacen("const 1.25", "const one", 1);
        match MiqpProblem::from_text(&bad_num) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("one"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn objective_and_violation() {
        let p = tiny();
        assert_eq!(p.objective(&[1.0, 0.0]), 1.0 - 2.0 + 1.25);
        assert_eq!(p.max_violation(&[0.5, 1.0]), 0.0);
        // x - 10 d <= 0 violated by 1 on a row of infinity norm 10
        assert!((p.max_violation(&[0.5 + 0.0, 0.0]) - 0.05).abs() < 1e-12);
        assert_eq!(p.max_integrality_gap(&[0.0, 0.25]), 0.25);
    }
}
