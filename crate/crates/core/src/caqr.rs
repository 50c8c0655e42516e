//! Recursive QR with the basis-kernel update, in a 1D and a 3D flavour.
//!
//! Both split `A = [A_L, A_R]` at `⌊n/2⌋` columns, factor the left half,
//! update the right half with `A_R − V_L·T_Lᵀ·V_Lᵀ·A_R`, factor its trailing
//! rows, and assemble `V`, `T` and `R` from the halves. Recursion stops at
//! `n ≤ b`. The 1D version keeps everything on a row-distributed layout with
//! a root and bottoms out in [`tsqr`]; the 3D version keeps rows cyclic,
//! runs every product as a 3D multiplication, and bottoms out in the 1D
//! version on a redistributed copy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::collectives::{balanced_sizes, gather, scatter, all_to_all_two_phase, Variant};
use crate::dense::{local_mm, local_mm_tn, local_sub, Matrix};
use crate::error::{Error, Result};
use crate::matmul::{cyclic_owners, mm_1d_broadcast, mm_1d_reduce, mm_3d_rows, DistMatrix};
use crate::sim::{Machine, ProcId};
use crate::tsqr::{check_input, tsqr, QrOutput};

/// Block-size thresholds for the recursion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffParams {
    pub delta: f64,
    pub epsilon: f64,
    /// Columns at or below which the 3D recursion stops.
    pub b: usize,
    /// Threshold handed to the 1D recursion in the 3D base case.
    pub b_star: usize,
}

fn log_p(p: usize) -> f64 {
    (p.max(2) as f64).log2()
}

fn clamp_ceil(x: f64, hi: usize) -> usize {
    ((x - 1e-9).ceil().max(1.0) as usize).min(hi.max(1))
}

/// `b = ⌈n/(log₂ P)^ε⌉`, clamped to `[1, n]`.
pub fn params_1d(n: usize, p: usize, epsilon: f64) -> usize {
    clamp_ceil(n as f64 / log_p(p).powf(epsilon), n)
}

/// `b = ⌈n/(nP/m)^δ⌉` with `nP/m` floored at one, and `b* = ⌈b/(log₂ P)^ε⌉`.
pub fn params_3d(m: usize, n: usize, p: usize, delta: f64, epsilon: f64) -> TradeoffParams {
    let ratio = (n as f64 * p as f64 / m as f64).max(1.0);
    let b = clamp_ceil(n as f64 / ratio.powf(delta), n);
    let b_star = clamp_ceil(b as f64 / log_p(p).powf(epsilon), b);
    TradeoffParams { delta, epsilon, b, b_star }
}

/// What a recursion did besides producing factors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgStats {
    /// Base-case invocations.
    pub leaves: usize,
    pub max_depth: usize,
    /// 3D multiplications run, and how many of them missed the grid hypothesis.
    pub mm3d_calls: usize,
    pub mm3d_hypothesis_misses: usize,
    /// Advisory notes on asymptotic hypotheses that do not hold.
    pub warnings: Vec<String>,
}

impl EgStats {
    fn warn(&mut self, w: String) {
        if !self.warnings.contains(&w) {
            self.warnings.push(w);
        }
    }

    fn enter(&mut self, depth: usize) {
        self.max_depth = self.max_depth.max(depth);
    }
}

/// Number of base cases for `n` columns and threshold `b`.
pub fn leaf_count(n: usize, b: usize) -> usize {
    if n <= b.max(1) {
        1
    } else {
        leaf_count(n / 2, b) + leaf_count(n - n / 2, b)
    }
}

fn split(n: usize) -> (usize, usize) {
    (n / 2, n - n / 2)
}

/// 1D recursive QR of a row-distributed `A` over `procs`, rooted at
/// `procs[root]`. Same layout requirements as [`tsqr`].
pub fn qr_1d_eg(m: &mut Machine, a: &DistMatrix, procs: &[ProcId], root: usize, b: usize) -> Result<(QrOutput, EgStats)> {
    if b == 0 {
        return Err(Error::Precondition("block size b must be at least 1".into()));
    }
    check_input(a, procs, root)?;
    let mut stats = EgStats::default();
    if a.cols() > b && procs.len() > b * b {
        stats.warn(format!("P = {} exceeds b² = {}", procs.len(), b * b));
    }
    let out = rec_1d(m, a, procs, root, b, 0, &mut stats)?;
    Ok((out, stats))
}

fn rec_1d(m: &mut Machine, a: &DistMatrix, procs: &[ProcId], root: usize, b: usize, depth: usize, stats: &mut EgStats) -> Result<QrOutput> {
    stats.enter(depth);
    let n = a.cols();
    if n <= b {
        stats.leaves += 1;
        return tsqr(m, a, procs, root);
    }
    let rp = procs[root];
    let (n1, n2) = split(n);
    let rows = a.rows();
    let a_r = a.col_block(n1..n);
    let left = rec_1d(m, &a.col_block(0..n1), procs, root, b, depth + 1, stats)?;

    let m1 = mm_1d_reduce(m, procs, root, &left.v, &a_r, Variant::Auto)?;
    let m2 = m.run_local(rp, |ops| local_mm_tn(&left.t, &m1, ops))?;
    let upd = mm_1d_broadcast(m, procs, root, &left.v, &m2, Variant::Auto)?;
    let b_full = a_r.map_local(|p, x| m.run_local(p, |ops| local_sub(x, upd.local(p), ops)))?;
    let b12 = b_full.local(rp).row_block(0..n1);

    let right = rec_1d(m, &b_full.row_range(n1..rows), procs, root, b, depth + 1, stats)?;

    let x = mm_1d_reduce(m, procs, root, &left.v.row_range(n1..rows), &right.v, Variant::Auto)?;
    let t12 = m.run_local(rp, |ops| -> Result<Matrix> {
        let y = local_mm(&left.t, &x, ops)?;
        let z = local_mm(&y, &right.t, ops)?;
        ops.add((n1 * n2) as u64);
        Ok(z.scale(-1.0))
    })?;

    let v = DistMatrix::hstack(&left.v, &DistMatrix::pad_top(&right.v, a.owners().to_vec())?)?;
    let mut t = Matrix::zeros(n, n);
    t.set_block(0, 0, &left.t);
    t.set_block(0, n1, &t12);
    t.set_block(n1, n1, &right.t);
    let mut r = Matrix::zeros(n, n);
    r.set_block(0, 0, &left.r);
    r.set_block(0, n1, &b12);
    r.set_block(n1, n1, &right.r);
    Ok(QrOutput { v, t, r })
}

/// Factors of the 3D recursion: `V` laid out like `A`, `T` and `R` laid out
/// like `A`'s leading `n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DistQrOutput {
    pub v: DistMatrix,
    pub t: DistMatrix,
    pub r: DistMatrix,
}

/// One collective that moves whole rows. Row lists name global rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transfer {
    /// `rows[k]` travel from `group[k]` to `group[root]`.
    Gather { group: Vec<ProcId>, root: usize, rows: Vec<Vec<usize>> },
    /// `rows[k]` travel from `group[root]` to `group[k]`.
    Scatter { group: Vec<ProcId>, root: usize, rows: Vec<Vec<usize>> },
    /// `rows[p][q]` travel from `group[p]` to `group[q]`.
    AllToAll { group: Vec<ProcId>, rows: Vec<Vec<Vec<usize>>> },
}

impl Transfer {
    pub fn inverse(&self) -> Transfer {
        match self {
            Transfer::Gather { group, root, rows } => Transfer::Scatter { group: group.clone(), root: *root, rows: rows.clone() },
            Transfer::Scatter { group, root, rows } => Transfer::Gather { group: group.clone(), root: *root, rows: rows.clone() },
            Transfer::AllToAll { group, rows } => {
                let n = group.len();
                let rows = (0..n).map(|q| (0..n).map(|p| rows[p][q].clone()).collect()).collect();
                Transfer::AllToAll { group: group.clone(), rows }
            }
        }
    }
}

/// Rows held by each processor, keyed by global index. Rows may differ in width.
type RowStore = Vec<BTreeMap<usize, Vec<f64>>>;

fn take_rows(store: &mut RowStore, p: ProcId, rows: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for i in rows {
        let row = store[p].remove(i).ok_or_else(|| Error::Layout(format!("processor {p} does not hold row {i}")))?;
        out.extend(row);
    }
    Ok(out)
}

fn put_rows(store: &mut RowStore, p: ProcId, rows: &[usize], data: &[f64], width: &dyn Fn(usize) -> usize) -> Result<()> {
    let mut at = 0;
    for &i in rows {
        let w = width(i);
        let row = data.get(at..at + w).ok_or_else(|| Error::Layout(format!("short payload for row {i}")))?;
        store[p].insert(i, row.to_vec());
        at += w;
    }
    if at != data.len() {
        return Err(Error::Layout(format!("{} unexpected words delivered to processor {p}", data.len() - at)));
    }
    Ok(())
}

fn execute(m: &mut Machine, store: &mut RowStore, t: &Transfer, width: &dyn Fn(usize) -> usize) -> Result<()> {
    match t {
        Transfer::Gather { group, root, rows } => {
            let blocks = group.iter().zip(rows).map(|(&p, r)| take_rows(store, p, r)).collect::<Result<_>>()?;
            let got = gather(m, group, *root, blocks)?;
            for (r, data) in rows.iter().zip(&got) {
                put_rows(store, group[*root], r, data, width)?;
            }
        }
        Transfer::Scatter { group, root, rows } => {
            let blocks = rows.iter().map(|r| take_rows(store, group[*root], r)).collect::<Result<_>>()?;
            let got = scatter(m, group, *root, blocks)?;
            for ((&p, r), data) in group.iter().zip(rows).zip(&got) {
                put_rows(store, p, r, data, width)?;
            }
        }
        Transfer::AllToAll { group, rows } => {
            let blocks = group
                .iter()
                .zip(rows)
                .map(|(&p, to)| to.iter().map(|r| take_rows(store, p, r)).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?;
            let (got, _) = all_to_all_two_phase(m, group, blocks)?;
            for (q, from) in got.iter().enumerate() {
                for (p, data) in from.iter().enumerate() {
                    put_rows(store, group[q], &rows[p][q], data, width)?;
                }
            }
        }
    }
    Ok(())
}

fn store_of(a: &DistMatrix) -> RowStore {
    (0..a.machine_procs())
        .map(|p| a.local_rows(p).iter().enumerate().map(|(k, &i)| (i, a.local(p).row(k).to_vec())).collect())
        .collect()
}

fn dist_of(store: &RowStore, rows: usize, cols: usize) -> Result<DistMatrix> {
    let mut owners = vec![usize::MAX; rows];
    let mut local = Vec::with_capacity(store.len());
    for (p, held) in store.iter().enumerate() {
        let mut data = Vec::with_capacity(held.len() * cols);
        for (&i, row) in held {
            owners[i] = p;
            data.extend_from_slice(&row[..cols]);
        }
        local.push(Matrix::from_vec(held.len(), cols, data)?);
    }
    if owners.contains(&usize::MAX) {
        return Err(Error::Layout("a row went missing in redistribution".into()));
    }
    DistMatrix::from_local(cols, owners, local)
}

/// How a base-case matrix was moved from row-cyclic to the 1D layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Redistribution {
    /// Processors that own rows (`min(P, m)`).
    pub p_prime: usize,
    /// Processors of the 1D call (`min(P, ⌊m/n⌋)`).
    pub p_star: usize,
    /// Representatives taking part in the top-rows exchange (`min(P*, n)`).
    pub p_dprime: usize,
    /// The 1D group, root first.
    pub reps: Vec<ProcId>,
    /// Phases in execution order; transfers within a phase are independent.
    pub phases: Vec<Vec<Transfer>>,
    rows: usize,
    cols: usize,
    offset: usize,
    procs: Vec<ProcId>,
}

impl Redistribution {
    /// Builds the plan for `rows × cols` with row `i` on `procs[(i + offset) mod P]`.
    pub fn plan(rows: usize, cols: usize, procs: &[ProcId], offset: usize) -> Result<Self> {
        if rows < cols || cols == 0 || procs.is_empty() {
            return Err(Error::Precondition(format!("base case needs m ≥ n ≥ 1 on a nonempty group, got {rows}x{cols}")));
        }
        let np = procs.len();
        let p_prime = np.min(rows);
        let p_star = np.min((rows / cols).max(1));
        let p_dprime = p_star.min(cols);
        let proc_of = |c: usize| procs[(c + offset) % np];
        let rows_of = |c: usize| (c..rows).step_by(np).collect::<Vec<_>>();
        let reps: Vec<ProcId> = (0..p_star).map(proc_of).collect();
        let mut held: Vec<Vec<usize>> = (0..p_star).map(|_| Vec::new()).collect();
        let mut phases = Vec::new();

        let mut phase_a = Vec::new();
        for (g, h) in held.iter_mut().enumerate() {
            let members: Vec<usize> = (g..p_prime).step_by(p_star).collect();
            let rows_per: Vec<Vec<usize>> = members.iter().map(|&c| rows_of(c)).collect();
            h.extend(rows_per.iter().flatten());
            h.sort_unstable();
            if members.len() > 1 {
                let mut moved = rows_per;
                moved[0].clear();
                phase_a.push(Transfer::Gather { group: members.iter().map(|&c| proc_of(c)).collect(), root: 0, rows: moved });
            }
        }
        if !phase_a.is_empty() {
            phases.push(phase_a);
        }

        if p_dprime > 1 {
            let up: Vec<Vec<usize>> = (0..p_dprime).map(|g| if g == 0 { Vec::new() } else { held[g].iter().copied().filter(|&i| i < cols).collect() }).collect();
            let mut spare = held[0].iter().copied().filter(|&i| i >= cols);
            let down: Vec<Vec<usize>> = up.iter().map(|u| spare.by_ref().take(u.len()).collect()).collect();
            if down.iter().zip(&up).any(|(d, u)| d.len() != u.len()) {
                return Err(Error::Layout("root representative lacks rows to swap for the leading rows".into()));
            }
            for g in 1..p_dprime {
                held[g].retain(|i| !up[g].contains(i));
                held[g].extend(&down[g]);
                held[g].sort_unstable();
                held[0].retain(|i| !down[g].contains(i));
                held[0].extend(&up[g]);
            }
            held[0].sort_unstable();
            let group: Vec<ProcId> = reps[..p_dprime].to_vec();
            if up.iter().any(|u| !u.is_empty()) {
                phases.push(vec![Transfer::Gather { group: group.clone(), root: 0, rows: up }, Transfer::Scatter { group, root: 0, rows: down }]);
            }
        }

        if held.iter().any(|h| h.len() < cols) {
            let target = balanced_sizes(rows, p_star);
            let mut plan = vec![vec![Vec::new(); p_star]; p_star];
            let mut takers = (0..p_star).filter(|&g| held[g].len() < target[g]).collect::<Vec<_>>().into_iter();
            let mut need = 0;
            let mut taker = None;
            for g in 0..p_star {
                while held[g].len() > target[g] {
                    if need == 0 {
                        let t = takers.next().ok_or_else(|| Error::Layout("balancing ran out of takers".into()))?;
                        need = target[t] - held[t].len();
                        taker = Some(t);
                    }
                    let t = taker.expect("taker chosen");
                    let i = held[g].pop().expect("donor holds surplus rows");
                    plan[g][t].push(i);
                    need -= 1;
                }
            }
            for r in plan.iter_mut().flatten() {
                r.sort_unstable();
            }
            phases.push(vec![Transfer::AllToAll { group: reps.clone(), rows: plan }]);
        }

        Ok(Redistribution { p_prime, p_star, p_dprime, reps, phases, rows, cols, offset, procs: procs.to_vec() })
    }

    /// True when no rows move.
    pub fn is_identity(&self) -> bool {
        self.phases.is_empty()
    }

    /// Moves `a` into the 1D layout over [`Redistribution::reps`].
    pub fn apply(&self, m: &mut Machine, a: &DistMatrix) -> Result<DistMatrix> {
        if a.owners() != cyclic_owners(self.rows, &self.procs, self.offset) || a.cols() != self.cols {
            return Err(Error::Layout("matrix does not match the planned row-cyclic layout".into()));
        }
        let mut store = store_of(a);
        let width = |_: usize| self.cols;
        for phase in &self.phases {
            for t in phase {
                execute(m, &mut store, t, &width)?;
            }
        }
        dist_of(&store, self.rows, self.cols)
    }

    /// Sends the 1D factors back: `V` rows to their cyclic owners, and rows
    /// of `T` and `R` riding with the leading rows of `V`.
    pub fn reverse(&self, m: &mut Machine, out: &QrOutput) -> Result<DistQrOutput> {
        let n = self.cols;
        let root = self.reps[0];
        let mut store = store_of(&out.v);
        for (i, row) in store[root].iter_mut().take_while(|(i, _)| **i < n) {
            row.extend_from_slice(out.t.row(*i));
            row.extend_from_slice(out.r.row(*i));
        }
        let width = |i: usize| if i < n { 3 * n } else { n };
        for phase in self.phases.iter().rev() {
            for t in phase.iter().rev() {
                execute(m, &mut store, &t.inverse(), &width)?;
            }
        }
        let v = dist_of(&store, self.rows, n)?;
        let top_owners = cyclic_owners(n, &self.procs, self.offset);
        let mut t = Vec::with_capacity(store.len());
        let mut r = Vec::with_capacity(store.len());
        for held in &store {
            let (mut td, mut rd) = (Vec::new(), Vec::new());
            for row in held.range(..n).map(|(_, row)| row) {
                td.extend_from_slice(&row[n..2 * n]);
                rd.extend_from_slice(&row[2 * n..]);
            }
            t.push(Matrix::from_vec(td.len() / n, n, td)?);
            r.push(Matrix::from_vec(rd.len() / n, n, rd)?);
        }
        let t = DistMatrix::from_local(n, top_owners.clone(), t)?;
        let r = DistMatrix::from_local(n, top_owners, r)?;
        Ok(DistQrOutput { v, t, r })
    }
}

/// Plans and applies the base-case redistribution of a row-cyclic `A`.
pub fn redistribute_base_case(m: &mut Machine, a: &DistMatrix, procs: &[ProcId], offset: usize) -> Result<(DistMatrix, Redistribution)> {
    let plan = Redistribution::plan(a.rows(), a.cols(), procs, offset)?;
    let moved = plan.apply(m, a)?;
    Ok((moved, plan))
}

/// 3D recursive QR of `A` with row `i` on `procs[(i + offset) mod P]`.
pub fn qr_3d_eg(m: &mut Machine, a: &DistMatrix, procs: &[ProcId], offset: usize, b: usize, b_star: usize) -> Result<(DistQrOutput, EgStats)> {
    if b_star == 0 || b_star > b {
        return Err(Error::Precondition(format!("need 1 ≤ b* ≤ b, got b = {b}, b* = {b_star}")));
    }
    if a.rows() < a.cols() || a.cols() == 0 {
        return Err(Error::Precondition(format!("need m ≥ n ≥ 1, got {}x{}", a.rows(), a.cols())));
    }
    if procs.is_empty() || a.owners() != cyclic_owners(a.rows(), procs, offset) {
        return Err(Error::Layout("input must be row-cyclic over the group".into()));
    }
    let mut stats = EgStats::default();
    let np = procs.len();
    if a.cols() > b && np > b * b {
        stats.warn(format!("P = {np} exceeds b² = {}", b * b));
    }
    let out = rec_3d(m, a, procs, offset, b, b_star, 0, &mut stats)?;
    Ok((out, stats))
}

fn zeros_like(rows: usize, cols: usize, owners: Vec<ProcId>, procs: usize) -> Result<DistMatrix> {
    DistMatrix::from_global(&Matrix::zeros(rows, cols), owners, procs)
}

fn stack_rows(top: &DistMatrix, bottom: &DistMatrix) -> Result<DistMatrix> {
    let owners = top.owners().iter().chain(bottom.owners()).copied().collect();
    let local = top.locals().iter().zip(bottom.locals()).map(|(x, y)| Matrix::vstack(x, y)).collect::<Result<_>>()?;
    DistMatrix::from_local(top.cols(), owners, local)
}

#[allow(clippy::too_many_arguments)]
fn rec_3d(
    m: &mut Machine,
    a: &DistMatrix,
    procs: &[ProcId],
    offset: usize,
    b: usize,
    b_star: usize,
    depth: usize,
    stats: &mut EgStats,
) -> Result<DistQrOutput> {
    stats.enter(depth);
    let (rows, n) = (a.rows(), a.cols());
    let np = procs.len();
    let mp = a.machine_procs();
    if n <= b {
        stats.leaves += 1;
        let (moved, plan) = redistribute_base_case(m, a, procs, offset)?;
        let bs = b_star.min(n);
        if n > bs && plan.p_star > bs * bs {
            stats.warn(format!("P* = {} exceeds b*² = {}", plan.p_star, bs * bs));
        }
        let (out, inner) = qr_1d_eg(m, &moved, &plan.reps, 0, bs)?;
        for w in inner.warnings {
            stats.warn(w);
        }
        return plan.reverse(m, &out);
    }
    let (n1, n2) = split(n);
    let top = |k: usize, off: usize| cyclic_owners(k, procs, off);
    let mm = |m: &mut Machine, x: &DistMatrix, tr: bool, y: &DistMatrix, owners: Vec<ProcId>, stats: &mut EgStats| {
        let (c, info) = mm_3d_rows(m, procs, x, tr, y, owners)?;
        stats.mm3d_calls += 1;
        if !info.hypothesis {
            stats.mm3d_hypothesis_misses += 1;
        }
        Ok::<_, Error>(c)
    };

    let a_r = a.col_block(n1..n);
    let left = rec_3d(m, &a.col_block(0..n1), procs, offset, b, b_star, depth + 1, stats)?;
    let m1 = mm(m, &left.v, true, &a_r, top(n1, offset), stats)?;
    let m2 = mm(m, &left.t, true, &m1, top(n1, offset), stats)?;
    let upd = mm(m, &left.v, false, &m2, a.owners().to_vec(), stats)?;
    let b_full = a_r.map_local(|p, x| m.run_local(p, |ops| local_sub(x, upd.local(p), ops)))?;
    let b12 = b_full.row_range(0..n1);

    let right = rec_3d(m, &b_full.row_range(n1..rows), procs, (offset + n1) % np, b, b_star, depth + 1, stats)?;

    let x = mm(m, &left.v.row_range(n1..rows), true, &right.v, top(n1, offset), stats)?;
    let y = mm(m, &left.t, false, &x, top(n1, offset), stats)?;
    let z = mm(m, &y, false, &right.t, top(n1, offset), stats)?;
    let t12 = z.map_local(|p, x| {
        m.run_local(p, |ops| {
            ops.add(x.len() as u64);
            Ok(x.scale(-1.0))
        })
    })?;

    let v = DistMatrix::hstack(&left.v, &DistMatrix::pad_top(&right.v, a.owners().to_vec())?)?;
    let lower = zeros_like(n2, n1, top(n2, offset + n1), mp)?;
    let t = stack_rows(&DistMatrix::hstack(&left.t, &t12)?, &DistMatrix::hstack(&lower, &right.t)?)?;
    let r = stack_rows(&DistMatrix::hstack(&left.r, &b12)?, &DistMatrix::hstack(&lower, &right.r)?)?;
    Ok(DistQrOutput { v, t, r })
}
