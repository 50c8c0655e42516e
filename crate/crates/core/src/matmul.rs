//! Distributed matrix multiplication: row-distributed matrices, balanced
//! partitions, processor grids, and the 0D, 1D, and 3D algorithms.
//!
//! The 3D algorithm works on an `I×J×K` brick split over a `Q×R×S` grid.
//! Grid processor `(q, r, s)` has index `q·R·S + r·S + s`. `A`'s block
//! `𝓘_q×𝓚_s` is flattened row-major and split evenly over the `R` processors
//! `(q, ·, s)`; `B`'s block `𝓚_s×𝓙_r` over `(·, r, s)`; and `C`'s block
//! `𝓘_q×𝓙_r` over `(q, r, ·)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::collectives::{self, all_gather, all_to_all_two_phase, balanced_sizes, reduce_scatter, Variant};
use crate::dense::{local_mm, local_mm_tn, Matrix};
use crate::error::{Error, Result};
use crate::sim::{Machine, ProcId};

/// Contiguous parts of `[0, N)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub parts: Vec<Range<usize>>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.parts.iter().map(Range::len).collect()
    }

    pub fn is_balanced(&self) -> bool {
        let s = self.sizes();
        s.iter().max().unwrap_or(&0) - s.iter().min().unwrap_or(&0) <= 1
    }
}

/// `k` contiguous parts of `[0, n)`, the first `n mod k` one larger.
pub fn balanced_partition(n: usize, k: usize) -> Partition {
    let mut at = 0;
    let parts = balanced_sizes(n, k)
        .into_iter()
        .map(|len| {
            let r = at..at + len;
            at += len;
            r
        })
        .collect();
    Partition { parts }
}

/// `P = Q·R·S + T` with `T` idle processors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub q: usize,
    pub r: usize,
    pub s: usize,
    pub t: usize,
}

impl GridShape {
    pub fn active(&self) -> usize {
        self.q * self.r * self.s
    }

    pub fn procs(&self) -> usize {
        self.active() + self.t
    }
}

/// Constant of the grid hypothesis `c·IJK/min(I,J,K)³ ≤ P ≤ IJK`.
pub const GRID_C: f64 = 2.0;

fn floor_eps(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// `ρ = (IJK/P)^{1/3}`, `Q = ⌊I/ρ⌋`, `R = ⌊J/ρ⌋`, `S = ⌊K/ρ⌋`, provided
/// `c·IJK/min(I,J,K)³ ≤ P ≤ IJK`. A single processor always gets `1×1×1`.
pub fn choose_grid(i: usize, j: usize, k: usize, p: usize) -> Result<GridShape> {
    if i == 0 || j == 0 || k == 0 || p == 0 {
        return Err(Error::GridHypothesis(format!("empty brick or machine: I={i}, J={j}, K={k}, P={p}")));
    }
    if p == 1 {
        return Ok(GridShape { q: 1, r: 1, s: 1, t: 0 });
    }
    let vol = (i * j * k) as f64;
    let mn = i.min(j).min(k) as f64;
    let lower = GRID_C * vol / (mn * mn * mn);
    if lower > p as f64 + 1e-9 {
        return Err(Error::GridHypothesis(format!("{GRID_C}·IJK/min(I,J,K)³ = {lower} > P = {p}")));
    }
    if p as f64 > vol {
        return Err(Error::GridHypothesis(format!("P = {p} > IJK = {vol}")));
    }
    let rho = (vol / p as f64).cbrt();
    let q = floor_eps(i as f64 / rho).max(1);
    let r = floor_eps(j as f64 / rho).max(1);
    let s = floor_eps(k as f64 / rho).max(1);
    if q * r * s > p {
        return Err(Error::GridHypothesis(format!("grid {q}x{r}x{s} exceeds P = {p}")));
    }
    Ok(GridShape { q, r, s, t: p - q * r * s })
}

/// [`choose_grid`] when its hypothesis holds; otherwise the same floors
/// clamped to `[1, dim]`, shrunk until they fit in `P`, then grown greedily
/// along the dimension with the largest per-processor extent.
pub fn fit_grid(i: usize, j: usize, k: usize, p: usize) -> GridShape {
    if let Ok(g) = choose_grid(i, j, k, p) {
        return g;
    }
    let dims = [i.max(1), j.max(1), k.max(1)];
    let rho = ((dims[0] * dims[1] * dims[2]) as f64 / p.max(1) as f64).cbrt().max(1e-300);
    let mut g: [usize; 3] = std::array::from_fn(|d| floor_eps(dims[d] as f64 / rho).clamp(1, dims[d]));
    let prod = |g: &[usize; 3]| g[0] * g[1] * g[2];
    while prod(&g) > p {
        let d = (0..3).max_by_key(|&d| (g[d], std::cmp::Reverse(d))).unwrap_or(0);
        g[d] -= 1;
    }
    loop {
        let extent = |d: usize| dims[d].div_ceil(g[d]);
        let cand = (0..3)
            .filter(|&d| g[d] < dims[d] && prod(&g) / g[d] * (g[d] + 1) <= p)
            .max_by_key(|&d| (extent(d), std::cmp::Reverse(d)));
        match cand {
            Some(d) => g[d] += 1,
            None => break,
        }
    }
    GridShape { q: g[0], r: g[1], s: g[2], t: p - prod(&g) }
}

/// Operand of a 3D multiplication `C = A·B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    A,
    B,
    C,
}

/// Partitions and shard assignment of a 3D multiplication.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub shape: GridShape,
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub i_part: Partition,
    pub j_part: Partition,
    pub k_part: Partition,
}

impl GridLayout {
    pub fn new(shape: GridShape, i: usize, j: usize, k: usize) -> Self {
        GridLayout {
            shape,
            i,
            j,
            k,
            i_part: balanced_partition(i, shape.q),
            j_part: balanced_partition(j, shape.r),
            k_part: balanced_partition(k, shape.s),
        }
    }

    pub fn active(&self) -> usize {
        self.shape.active()
    }

    pub fn index(&self, q: usize, r: usize, s: usize) -> usize {
        (q * self.shape.r + r) * self.shape.s + s
    }

    pub fn coords(&self, g: usize) -> (usize, usize, usize) {
        let s = g % self.shape.s;
        let r = (g / self.shape.s) % self.shape.r;
        (g / (self.shape.s * self.shape.r), r, s)
    }

    /// Global `(row, col)` positions of grid processor `g`'s shard of `which`,
    /// in storage order.
    pub fn shard(&self, which: Operand, g: usize) -> Vec<(usize, usize)> {
        let (q, r, s) = self.coords(g);
        let (rows, cols, parts, idx) = match which {
            Operand::A => (&self.i_part.parts[q], &self.k_part.parts[s], self.shape.r, r),
            Operand::B => (&self.k_part.parts[s], &self.j_part.parts[r], self.shape.q, q),
            Operand::C => (&self.i_part.parts[q], &self.j_part.parts[r], self.shape.s, s),
        };
        let flat = balanced_partition(rows.len() * cols.len(), parts).parts[idx].clone();
        let w = cols.len();
        flat.map(|f| (rows.start + f / w, cols.start + f % w)).collect()
    }

    /// Values of grid processor `g`'s shard taken from a global matrix.
    pub fn shard_values(&self, which: Operand, g: usize, m: &Matrix) -> Vec<f64> {
        self.shard(which, g).into_iter().map(|ij| m[ij]).collect()
    }

    /// Global `C` from its shards.
    pub fn assemble_c(&self, shards: &[Vec<f64>]) -> Matrix {
        let mut c = Matrix::zeros(self.i, self.j);
        for (g, vals) in shards.iter().enumerate() {
            for (ij, v) in self.shard(Operand::C, g).into_iter().zip(vals) {
                c[ij] = *v;
            }
        }
        c
    }

    /// Per-processor word bound:
    /// `(R−1)⌈⌈I/Q⌉⌈K/S⌉/R⌉ + (Q−1)⌈⌈J/R⌉⌈K/S⌉/Q⌉ + (S−1)⌈⌈I/Q⌉⌈J/R⌉/S⌉`.
    pub fn word_bound(&self) -> u64 {
        let GridShape { q, r, s, .. } = self.shape;
        let (iq, jr, ks) = (self.i.div_ceil(q), self.j.div_ceil(r), self.k.div_ceil(s));
        ((r - 1) * (iq * ks).div_ceil(r) + (q - 1) * (jr * ks).div_ceil(q) + (s - 1) * (iq * jr).div_ceil(s)) as u64
    }
}

/// Local product on one processor, no communication.
pub fn mm_0d(m: &mut Machine, proc: ProcId, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    m.run_local(proc, |ops| local_mm(a, b, ops))
}

/// 3D multiplication on grid-sharded operands. `procs[g]` is grid processor
/// `g`; processors past the grid stay idle. Shards are indexed by grid
/// processor and use [`GridLayout::shard`] order.
pub fn mm_3d(m: &mut Machine, procs: &[ProcId], layout: &GridLayout, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let g_n = layout.active();
    if procs.len() < g_n {
        return Err(Error::Layout(format!("grid of {g_n} processors on a group of {}", procs.len())));
    }
    for (which, shards) in [(Operand::A, &a), (Operand::B, &b)] {
        if shards.len() != g_n {
            return Err(Error::Layout(format!("{which:?} has {} shards for {g_n} grid processors", shards.len())));
        }
        for (g, sh) in shards.iter().enumerate() {
            if sh.len() != layout.shard(which, g).len() {
                return Err(Error::Layout(format!("{which:?} shard {g} has {} entries", sh.len())));
            }
        }
    }
    let GridShape { q: nq, r: nr, s: ns, .. } = layout.shape;
    let mut a_blocks: Vec<Vec<f64>> = vec![Vec::new(); g_n];
    let mut b_blocks: Vec<Vec<f64>> = vec![Vec::new(); g_n];
    let mut a = a;
    let mut b = b;
    for q in 0..nq {
        for s in 0..ns {
            let fiber: Vec<usize> = (0..nr).map(|r| layout.index(q, r, s)).collect();
            let group: Vec<ProcId> = fiber.iter().map(|&g| procs[g]).collect();
            let parts = fiber.iter().map(|&g| std::mem::take(&mut a[g])).collect();
            for (g, all) in fiber.iter().zip(all_gather(m, &group, parts)?) {
                a_blocks[*g] = all.concat();
            }
        }
    }
    for r in 0..nr {
        for s in 0..ns {
            let fiber: Vec<usize> = (0..nq).map(|q| layout.index(q, r, s)).collect();
            let group: Vec<ProcId> = fiber.iter().map(|&g| procs[g]).collect();
            let parts = fiber.iter().map(|&g| std::mem::take(&mut b[g])).collect();
            for (g, all) in fiber.iter().zip(all_gather(m, &group, parts)?) {
                b_blocks[*g] = all.concat();
            }
        }
    }
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(g_n);
    for g in 0..g_n {
        let (q, r, s) = layout.coords(g);
        let (iq, jr, ks) = (layout.i_part.parts[q].len(), layout.j_part.parts[r].len(), layout.k_part.parts[s].len());
        let ab = Matrix::from_vec(iq, ks, std::mem::take(&mut a_blocks[g]))?;
        let bb = Matrix::from_vec(ks, jr, std::mem::take(&mut b_blocks[g]))?;
        z.push(mm_0d(m, procs[g], &ab, &bb)?.into_vec());
    }
    let mut c: Vec<Vec<f64>> = vec![Vec::new(); g_n];
    for q in 0..nq {
        for r in 0..nr {
            let fiber: Vec<usize> = (0..ns).map(|s| layout.index(q, r, s)).collect();
            let group: Vec<ProcId> = fiber.iter().map(|&g| procs[g]).collect();
            let sizes = balanced_sizes(layout.i_part.parts[q].len() * layout.j_part.parts[r].len(), ns);
            let contrib = fiber
                .iter()
                .map(|&g| {
                    let zg = std::mem::take(&mut z[g]);
                    let mut at = 0;
                    sizes
                        .iter()
                        .map(|&len| {
                            let piece = zg[at..at + len].to_vec();
                            at += len;
                            piece
                        })
                        .collect()
                })
                .collect();
            for (g, piece) in fiber.iter().zip(reduce_scatter(m, &group, contrib)?) {
                c[*g] = piece;
            }
        }
    }
    Ok(c)
}

/// A matrix whose rows are each owned by one processor of a `P`-processor
/// machine. Each processor stores its rows in ascending global order.
#[derive(Clone, Debug, PartialEq)]
pub struct DistMatrix {
    rows: usize,
    cols: usize,
    owners: Vec<ProcId>,
    local: Vec<Matrix>,
    local_rows: Vec<Vec<usize>>,
}

impl DistMatrix {
    /// Distributes a global matrix by explicit per-row owners.
    pub fn from_global(a: &Matrix, owners: Vec<ProcId>, procs: usize) -> Result<Self> {
        if owners.len() != a.rows() {
            return Err(Error::Layout(format!("{} owners for {} rows", owners.len(), a.rows())));
        }
        let local_rows = rows_by_owner(&owners, procs)?;
        let local = local_rows.iter().map(|idx| a.select_rows(idx)).map(|mut x| {
            if x.rows() == 0 {
                x = Matrix::zeros(0, a.cols());
            }
            x
        });
        let local = local.collect();
        Ok(DistMatrix { rows: a.rows(), cols: a.cols(), owners, local, local_rows })
    }

    /// Builds from per-processor local row blocks that match `owners`.
    pub fn from_local(cols: usize, owners: Vec<ProcId>, local: Vec<Matrix>) -> Result<Self> {
        let procs = local.len();
        let local_rows = rows_by_owner(&owners, procs)?;
        for (p, (x, idx)) in local.iter().zip(&local_rows).enumerate() {
            if x.rows() != idx.len() || (x.rows() > 0 && x.cols() != cols) {
                return Err(Error::Layout(format!("processor {p} holds {}x{} for {} rows of width {cols}", x.rows(), x.cols(), idx.len())));
            }
        }
        let local = local.into_iter().map(|x| if x.rows() == 0 { Matrix::zeros(0, cols) } else { x }).collect();
        Ok(DistMatrix { rows: owners.len(), cols, owners, local, local_rows })
    }

    /// Row `i` on `procs[(i + offset) mod |procs|]`.
    pub fn row_cyclic(a: &Matrix, procs: &[ProcId], offset: usize, machine_procs: usize) -> Result<Self> {
        DistMatrix::from_global(a, cyclic_owners(a.rows(), procs, offset), machine_procs)
    }

    /// Contiguous row ranges: `counts[k]` rows on `procs[k]`, in order.
    pub fn block_row(a: &Matrix, procs: &[ProcId], counts: &[usize], machine_procs: usize) -> Result<Self> {
        if counts.len() != procs.len() || counts.iter().sum::<usize>() != a.rows() {
            return Err(Error::Layout(format!("row counts {counts:?} do not cover {} rows", a.rows())));
        }
        let owners = procs.iter().zip(counts).flat_map(|(&p, &c)| std::iter::repeat(p).take(c)).collect();
        DistMatrix::from_global(a, owners, machine_procs)
    }

    pub fn owned_by(a: &Matrix, proc: ProcId, machine_procs: usize) -> Result<Self> {
        DistMatrix::from_global(a, vec![proc; a.rows()], machine_procs)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn machine_procs(&self) -> usize {
        self.local.len()
    }

    pub fn owners(&self) -> &[ProcId] {
        &self.owners
    }

    pub fn local(&self, p: ProcId) -> &Matrix {
        &self.local[p]
    }

    pub fn locals(&self) -> &[Matrix] {
        &self.local
    }

    pub fn into_locals(self) -> Vec<Matrix> {
        self.local
    }

    /// Global indices of the rows processor `p` holds.
    pub fn local_rows(&self, p: ProcId) -> &[usize] {
        &self.local_rows[p]
    }

    /// Processors holding at least one row, ascending.
    pub fn holders(&self) -> Vec<ProcId> {
        (0..self.local.len()).filter(|&p| !self.local_rows[p].is_empty()).collect()
    }

    /// Assembles the global matrix (test and verification use; no messages).
    pub fn to_global(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (x, idx) in self.local.iter().zip(&self.local_rows) {
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(i).copy_from_slice(x.row(k));
            }
        }
        out
    }

    /// Columns `cols` of every local block; same owners.
    pub fn col_block(&self, cols: Range<usize>) -> DistMatrix {
        let local = self.local.iter().map(|x| x.col_block(cols.clone())).collect();
        DistMatrix { rows: self.rows, cols: cols.len(), owners: self.owners.clone(), local, local_rows: self.local_rows.clone() }
    }

    /// Global rows `range`, renumbered from zero; same owners.
    pub fn row_range(&self, range: Range<usize>) -> DistMatrix {
        let owners = self.owners[range.clone()].to_vec();
        let mut local = Vec::with_capacity(self.local.len());
        let mut local_rows = Vec::with_capacity(self.local.len());
        for (x, idx) in self.local.iter().zip(&self.local_rows) {
            let keep: Vec<usize> = (0..idx.len()).filter(|&k| range.contains(&idx[k])).collect();
            local.push(x.select_rows(&keep));
            local_rows.push(keep.iter().map(|&k| idx[k] - range.start).collect());
        }
        DistMatrix { rows: range.len(), cols: self.cols, owners, local, local_rows }
    }

    /// Replaces each processor's local block; shapes must match.
    pub fn map_local(&self, mut f: impl FnMut(ProcId, &Matrix) -> Result<Matrix>) -> Result<DistMatrix> {
        let mut out = self.clone();
        for p in 0..self.local.len() {
            if self.local_rows[p].is_empty() {
                continue;
            }
            let x = f(p, &self.local[p])?;
            if x.rows() != self.local_rows[p].len() {
                return Err(Error::Layout(format!("local map changed row count on processor {p}")));
            }
            out.cols = x.cols();
            out.local[p] = x;
        }
        Ok(out)
    }

    /// `[left, right]` side by side when both have the same owners.
    pub fn hstack(left: &DistMatrix, right: &DistMatrix) -> Result<DistMatrix> {
        if left.owners != right.owners {
            return Err(Error::Layout("hstack of differently distributed matrices".into()));
        }
        let local = left.local.iter().zip(&right.local).map(|(a, b)| Matrix::hstack(a, b)).collect::<Result<_>>()?;
        Ok(DistMatrix { rows: left.rows, cols: left.cols + right.cols, owners: left.owners.clone(), local, local_rows: left.local_rows.clone() })
    }

    /// Places `bottom` under the first `top_rows` rows of a zero matrix of
    /// `bottom.cols()` columns, i.e. `[0; bottom]`, with `owners` for all rows.
    pub fn pad_top(bottom: &DistMatrix, owners: Vec<ProcId>) -> Result<DistMatrix> {
        let top = owners.len() - bottom.rows;
        if owners[top..] != bottom.owners[..] {
            return Err(Error::Layout("padded rows must keep their owners".into()));
        }
        let procs = bottom.local.len();
        let local_rows = rows_by_owner(&owners, procs)?;
        let local = local_rows
            .iter()
            .enumerate()
            .map(|(p, idx)| {
                let zeros = idx.iter().filter(|&&i| i < top).count();
                let z = Matrix::zeros(zeros, bottom.cols);
                Matrix::vstack(&z, &bottom.local[p]).map(|x| if x.rows() == 0 { Matrix::zeros(0, bottom.cols) } else { x })
            })
            .collect::<Result<_>>()?;
        Ok(DistMatrix { rows: owners.len(), cols: bottom.cols, owners, local, local_rows })
    }
}

fn rows_by_owner(owners: &[ProcId], procs: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); procs];
    for (i, &p) in owners.iter().enumerate() {
        if p >= procs {
            return Err(Error::ProcOutOfRange { proc: p, procs });
        }
        out[p].push(i);
    }
    Ok(out)
}

/// Owners of `rows` rows dealt cyclically over `procs` starting at `offset`.
pub fn cyclic_owners(rows: usize, procs: &[ProcId], offset: usize) -> Vec<ProcId> {
    (0..rows).map(|i| procs[(i + offset) % procs.len()]).collect()
}

/// `Xᵀ·B` for row-distributed `X` (`K×I`) and `B` (`K×J`) with matching
/// layouts, reduced onto `procs[root]`. Every member of `procs` takes part
/// in the reduction; members without rows contribute zeros.
pub fn mm_1d_reduce(m: &mut Machine, procs: &[ProcId], root: usize, x: &DistMatrix, b: &DistMatrix, variant: Variant) -> Result<Matrix> {
    if x.owners != b.owners {
        return Err(Error::Layout("mm_1d_reduce operands must share a row layout".into()));
    }
    let (i, j) = (x.cols, b.cols);
    let mut parts = Vec::with_capacity(procs.len());
    for &p in procs {
        if x.local_rows[p].is_empty() {
            parts.push(vec![0.0; i * j]);
        } else {
            parts.push(m.run_local(p, |ops| local_mm_tn(&x.local[p], &b.local[p], ops))?.into_vec());
        }
    }
    if let Some(p) = x.holders().into_iter().find(|p| !procs.contains(p)) {
        return Err(Error::Layout(format!("processor {p} holds rows but is outside the group")));
    }
    let sum = collectives::reduce(m, procs, root, parts, variant)?;
    Matrix::from_vec(i, j, sum)
}

/// `A·B` for row-distributed `A` (`I×K`) and `B` (`K×J`) on `procs[root]`.
/// `B` is broadcast, then every holder multiplies locally; `C` has `A`'s layout.
pub fn mm_1d_broadcast(m: &mut Machine, procs: &[ProcId], root: usize, a: &DistMatrix, b: &Matrix, variant: Variant) -> Result<DistMatrix> {
    if a.cols != b.rows() {
        return Err(Error::DimensionMismatch(format!("{}x{} times {}x{}", a.rows, a.cols, b.rows(), b.cols())));
    }
    if let Some(p) = a.holders().into_iter().find(|p| !procs.contains(p)) {
        return Err(Error::Layout(format!("processor {p} holds rows but is outside the group")));
    }
    let mut copies = collectives::broadcast(m, procs, root, b.as_slice().to_vec(), variant)?;
    let mut local = Vec::with_capacity(a.local.len());
    for p in 0..a.local.len() {
        if a.local_rows[p].is_empty() {
            local.push(Matrix::zeros(0, b.cols()));
            continue;
        }
        let rank = procs.iter().position(|&x| x == p).expect("holder is a member");
        let bp = Matrix::from_vec(b.rows(), b.cols(), std::mem::take(&mut copies[rank]))?;
        local.push(m.run_local(p, |ops| local_mm(&a.local[p], &bp, ops))?);
    }
    Ok(DistMatrix { rows: a.rows, cols: b.cols(), owners: a.owners.clone(), local, local_rows: a.local_rows.clone() })
}

/// Summary of one row-layout 3D multiplication.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mm3dInfo {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub grid: GridShape,
    /// Whether [`choose_grid`]'s hypothesis held.
    pub hypothesis: bool,
}

/// `op(A)·B` for row-distributed operands, where `op(A) = Aᵀ` when
/// `transpose_a`. One two-phase AlltoAll moves both operands into the grid
/// layout, [`mm_3d`] multiplies, and a second AlltoAll returns `C` with row
/// `i` on `out_owners[i]`. The grid comes from [`fit_grid`] over `procs`.
pub fn mm_3d_rows(
    m: &mut Machine,
    procs: &[ProcId],
    a: &DistMatrix,
    transpose_a: bool,
    b: &DistMatrix,
    out_owners: Vec<ProcId>,
) -> Result<(DistMatrix, Mm3dInfo)> {
    let (i, k) = if transpose_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let j = b.cols;
    if b.rows != k || out_owners.len() != i {
        return Err(Error::DimensionMismatch(format!("op(A) is {i}x{k}, B is {}x{j}, C has {} owners", b.rows, out_owners.len())));
    }
    let n = procs.len();
    let rank_of = rank_map(procs, a.local.len());
    for &p in a.owners.iter().chain(&b.owners).chain(&out_owners) {
        if rank_of[p].is_none() {
            return Err(Error::Layout(format!("processor {p} is outside the group")));
        }
    }
    let hypothesis = choose_grid(i, j, k, n).is_ok();
    let grid = fit_grid(i, j, k, n);
    let layout = GridLayout::new(grid, i, j, k);
    let g_n = layout.active();

    // position of each global row within its owner's local block
    let pos = |d: &DistMatrix| -> Vec<usize> {
        let mut v = vec![0; d.rows];
        for idx in &d.local_rows {
            for (kk, &r) in idx.iter().enumerate() {
                v[r] = kk;
            }
        }
        v
    };
    let (a_pos, b_pos) = (pos(a), pos(b));
    let a_shards: Vec<Vec<(usize, usize)>> = (0..g_n).map(|g| layout.shard(Operand::A, g)).collect();
    let b_shards: Vec<Vec<(usize, usize)>> = (0..g_n).map(|g| layout.shard(Operand::B, g)).collect();

    // forward: blocks[src][dst] = A entries then B entries, in dst shard order
    let mut blocks: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n]; n];
    let a_entry = |(r, c): (usize, usize)| if transpose_a { (c, r) } else { (r, c) };
    for g in 0..g_n {
        for &rc in &a_shards[g] {
            let (ar, ac) = a_entry(rc);
            let src = a.owners[ar];
            blocks[rank_of[src].unwrap_or(0)][g].push(a.local[src][(a_pos[ar], ac)]);
        }
        for &(br, bc) in &b_shards[g] {
            let src = b.owners[br];
            blocks[rank_of[src].unwrap_or(0)][g].push(b.local[src][(b_pos[br], bc)]);
        }
    }
    let (recv, _) = all_to_all_two_phase(m, procs, blocks)?;
    let mut a_in: Vec<Vec<f64>> = Vec::with_capacity(g_n);
    let mut b_in: Vec<Vec<f64>> = Vec::with_capacity(g_n);
    for g in 0..g_n {
        let mut cursor = vec![0usize; n];
        let mut take = |src: ProcId| {
            let s = rank_of[src].unwrap_or(0);
            let v = recv[g][s][cursor[s]];
            cursor[s] += 1;
            v
        };
        a_in.push(a_shards[g].iter().map(|&rc| take(a.owners[a_entry(rc).0])).collect());
        b_in.push(b_shards[g].iter().map(|&(br, _)| take(b.owners[br])).collect());
    }
    let c_shards = mm_3d(m, procs, &layout, a_in, b_in)?;

    // backward: C entries to row owners, in source shard order
    let c_idx: Vec<Vec<(usize, usize)>> = (0..g_n).map(|g| layout.shard(Operand::C, g)).collect();
    let mut blocks: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n]; n];
    for g in 0..g_n {
        for (&(r, _), v) in c_idx[g].iter().zip(&c_shards[g]) {
            blocks[g][rank_of[out_owners[r]].unwrap_or(0)].push(*v);
        }
    }
    let (recv, _) = all_to_all_two_phase(m, procs, blocks)?;
    let local_rows = rows_by_owner(&out_owners, a.local.len())?;
    let mut out_pos = vec![0; i];
    for idx in &local_rows {
        for (kk, &r) in idx.iter().enumerate() {
            out_pos[r] = kk;
        }
    }
    let mut local: Vec<Matrix> = local_rows.iter().map(|idx| Matrix::zeros(idx.len(), j)).collect();
    for (d, from) in recv.into_iter().enumerate() {
        let p = procs[d];
        for (g, vals) in from.into_iter().enumerate().take(g_n) {
            let mut it = vals.into_iter();
            for &(r, c) in c_idx[g].iter().filter(|(r, _)| out_owners[*r] == p) {
                local[p][(out_pos[r], c)] = it.next().ok_or_else(|| Error::Layout("short AlltoAll block".into()))?;
            }
        }
    }
    let c = DistMatrix { rows: i, cols: j, owners: out_owners, local, local_rows };
    Ok((c, Mm3dInfo { i, j, k, grid, hypothesis }))
}

fn rank_map(procs: &[ProcId], machine_procs: usize) -> Vec<Option<usize>> {
    let mut v = vec![None; machine_procs];
    for (r, &p) in procs.iter().enumerate() {
        if p < machine_procs {
            v[p] = Some(r);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::OpCount;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..=1.0))
    }

    fn rel_err(x: &Matrix, y: &Matrix) -> f64 {
        x.sub(y).unwrap().frobenius_norm() / y.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn partitions() {
        assert_eq!(balanced_partition(10, 4).sizes(), vec![3, 3, 2, 2]);
        assert_eq!(balanced_partition(4, 4).sizes(), vec![1, 1, 1, 1]);
        assert_eq!(balanced_partition(3, 5).sizes(), vec![1, 1, 1, 0, 0]);
        assert!(balanced_partition(17, 5).is_balanced());
    }

    #[test]
    fn grids() {
        assert_eq!(choose_grid(8, 8, 8, 8).unwrap(), GridShape { q: 2, r: 2, s: 2, t: 0 });
        assert_eq!(choose_grid(4, 4, 16, 16).unwrap(), GridShape { q: 1, r: 1, s: 6, t: 10 });
        assert_eq!(choose_grid(1, 1, 1, 1).unwrap(), GridShape { q: 1, r: 1, s: 1, t: 0 });
        assert!(matches!(choose_grid(2, 2, 64, 8), Err(Error::GridHypothesis(_))));
        assert!(matches!(choose_grid(2, 2, 2, 9), Err(Error::GridHypothesis(_))));
        for (i, j, k, p) in [(2, 2, 64, 8), (1, 3, 200, 16), (5, 5, 5, 200), (30, 2, 2, 7)] {
            let g = fit_grid(i, j, k, p);
            assert!(g.active() <= p && g.q <= i && g.r <= j && g.s <= k && g.active() >= 1);
            assert_eq!(g.procs(), p);
        }
    }

    #[test]
    fn mm_0d_local() {
        let mut m = Machine::new(2).unwrap();
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let c = mm_0d(&mut m, 1, &a, &Matrix::identity(2)).unwrap();
        assert_eq!(c, a);
        assert_eq!(m.trace().message_count(), 0);
        assert_eq!(m.critical_path_counts().ops, 12);
    }

    fn run_3d(i: usize, j: usize, k: usize, shape: GridShape) -> (Matrix, Matrix, Machine) {
        let a = random(i, k, 1);
        let b = random(k, j, 2);
        let layout = GridLayout::new(shape, i, j, k);
        let mut m = Machine::new(shape.procs()).unwrap();
        let procs = m.all_procs();
        let sa = (0..layout.active()).map(|g| layout.shard_values(Operand::A, g, &a)).collect();
        let sb = (0..layout.active()).map(|g| layout.shard_values(Operand::B, g, &b)).collect();
        let c = mm_3d(&mut m, &procs, &layout, sa, sb).unwrap();
        let oracle = local_mm(&a, &b, &mut OpCount::default()).unwrap();
        (layout.assemble_c(&c), oracle, m)
    }

    #[test]
    fn mm_3d_examples() {
        let (c, oracle, m) = run_3d(5, 3, 4, GridShape { q: 1, r: 1, s: 1, t: 0 });
        assert_eq!(c, oracle);
        assert_eq!(m.trace().message_count(), 0);

        let shape = choose_grid(8, 8, 8, 8).unwrap();
        let (c, oracle, m) = run_3d(8, 8, 8, shape);
        assert!(rel_err(&c, &oracle) <= 1e-12);
        let layout = GridLayout::new(shape, 8, 8, 8);
        assert!(m.critical_path_counts().words <= layout.word_bound());

        let (c, oracle, _) = run_3d(7, 5, 9, GridShape { q: 2, r: 1, s: 3, t: 2 });
        assert!(rel_err(&c, &oracle) <= 1e-12);
    }

    #[test]
    fn mm_1d_examples() {
        let x = Matrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]);
        let y = Matrix::from_rows(&[[1.0], [1.0], [2.0], [2.0]]);
        let mut m = Machine::new(2).unwrap();
        let dx = DistMatrix::block_row(&x, &[0, 1], &[2, 2], 2).unwrap();
        let dy = DistMatrix::block_row(&y, &[0, 1], &[2, 2], 2).unwrap();
        let c = mm_1d_reduce(&mut m, &[0, 1], 0, &dx, &dy, Variant::Auto).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[17.0]]));
        assert_eq!(m.critical_path_counts().messages, 1);
        assert_eq!(m.critical_path_counts().words, 1);

        let x = random(32, 3, 3);
        let y = random(32, 2, 4);
        let mut m = Machine::new(4).unwrap();
        let procs = m.all_procs();
        let dx = DistMatrix::row_cyclic(&x, &procs, 0, 4).unwrap();
        let dy = DistMatrix::row_cyclic(&y, &procs, 0, 4).unwrap();
        let c = mm_1d_reduce(&mut m, &procs, 2, &dx, &dy, Variant::Auto).unwrap();
        let oracle = local_mm_tn(&x, &y, &mut OpCount::default()).unwrap();
        assert!(rel_err(&c, &oracle) <= 1e-12);
        assert!(m.critical_path_counts().words <= 2 * 3 * 2);

        let a = random(32, 2, 5);
        let b = random(2, 2, 6);
        let mut m = Machine::new(4).unwrap();
        let da = DistMatrix::block_row(&a, &procs, &[8, 8, 8, 8], 4).unwrap();
        let c = mm_1d_broadcast(&mut m, &procs, 0, &da, &b, Variant::Auto).unwrap();
        let oracle = local_mm(&a, &b, &mut OpCount::default()).unwrap();
        assert!(rel_err(&c.to_global(), &oracle) <= 1e-12);
        assert!(m.critical_path_counts().words <= 2 * 2 * 2);

        let mut m = Machine::new(1).unwrap();
        let da = DistMatrix::owned_by(&a, 0, 1).unwrap();
        let c = mm_1d_broadcast(&mut m, &[0], 0, &da, &b, Variant::Auto).unwrap();
        assert_eq!(c.to_global(), oracle);
    }

    #[test]
    fn mm_3d_rows_matches_oracle() {
        for (i, j, k, p, t) in [(6, 5, 40, 4, true), (9, 7, 4, 5, false), (12, 12, 12, 8, false), (3, 20, 2, 6, true)] {
            let a_glob = if t { random(k, i, 7) } else { random(i, k, 7) };
            let b = random(k, j, 8);
            let mut m = Machine::new(p).unwrap();
            let procs = m.all_procs();
            let da = DistMatrix::row_cyclic(&a_glob, &procs, 1, p).unwrap();
            let db = DistMatrix::row_cyclic(&b, &procs, 3, p).unwrap();
            let (c, info) = mm_3d_rows(&mut m, &procs, &da, t, &db, cyclic_owners(i, &procs, 2)).unwrap();
            let a = if t { a_glob.transpose() } else { a_glob };
            let oracle = local_mm(&a, &b, &mut OpCount::default()).unwrap();
            assert!(rel_err(&c.to_global(), &oracle) <= 1e-12, "{i} {j} {k} {p}");
            assert_eq!(c.owners(), &cyclic_owners(i, &procs, 2)[..]);
            assert!(info.grid.active() <= p);
        }
    }

    #[test]
    fn dist_matrix_views() {
        let a = random(7, 3, 9);
        let d = DistMatrix::row_cyclic(&a, &[0, 2, 1], 1, 3).unwrap();
        assert_eq!(d.to_global(), a);
        assert_eq!(d.local_rows(2), &[0, 3, 6]);
        assert_eq!(d.row_range(2..7).to_global(), a.row_block(2..7));
        assert_eq!(d.col_block(1..3).to_global(), a.col_block(1..3));
        let padded = DistMatrix::pad_top(&d.row_range(2..7), d.owners().to_vec()).unwrap();
        let mut expect = a.clone();
        expect.set_block(0, 0, &Matrix::zeros(2, 3));
        assert_eq!(padded.to_global(), expect);
        assert!(DistMatrix::block_row(&a, &[0, 1], &[3, 3], 2).is_err());
    }
}
