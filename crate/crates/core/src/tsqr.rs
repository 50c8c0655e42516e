//! Tall-skinny QR over a binomial reduction tree.
//!
//! The upsweep factors each processor's rows locally, then follows the
//! binomial Reduce pattern, merging stacked pairs of R-factors with a local
//! QR. The downsweep walks the tree back from the root starting at `I`,
//! producing `W`, the leading `n` columns of the implied orthogonal factor.
//! The root turns `W` into a Householder basis through a signed LU of its top
//! `n×n` block, broadcasts `U`, and every other processor solves `V_p = W_p·U⁻¹`.

use crate::collectives::{binomial_schedule, broadcast, Variant};
use crate::dense::{
    apply_q_block, local_householder_qr, pack_upper, signed_lu, tri_solve, unpack_upper, Diag, Matrix, Side, TriSolve, Uplo,
};
use crate::error::{Error, Result};
use crate::matmul::DistMatrix;
use crate::sim::{Machine, Outgoing, ProcId};

/// Local factors a processor keeps from one merge of the upsweep.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeFactor {
    pub depth: usize,
    /// Processor whose R-factor was merged.
    pub partner: ProcId,
    pub v: Matrix,
    pub t: Matrix,
}

/// State left by the upsweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TsqrTreeState {
    pub procs: Vec<ProcId>,
    pub root: usize,
    pub n: usize,
    /// Per rank: the leaf factors `(V⁽⁰⁾, T⁽⁰⁾)` of the local QR.
    pub leaf: Vec<(Matrix, Matrix)>,
    /// Per rank: merge factors in the order they were produced.
    pub merges: Vec<Vec<MergeFactor>>,
    /// The root's final R-factor.
    pub r: Matrix,
}

impl TsqrTreeState {
    /// Number of stored factors on a rank, leaf included.
    pub fn stored(&self, rank: usize) -> usize {
        1 + self.merges[rank].len()
    }
}

/// Householder factors of a distributed QR: `V` laid out like `A`, `T` and `R`
/// on the root.
#[derive(Clone, Debug, PartialEq)]
pub struct QrOutput {
    pub v: DistMatrix,
    pub t: Matrix,
    pub r: Matrix,
}

pub(crate) fn check_input(a: &DistMatrix, procs: &[ProcId], root: usize) -> Result<()> {
    let n = a.cols();
    if root >= procs.len() {
        return Err(Error::Precondition(format!("root rank {root} outside a group of {}", procs.len())));
    }
    for &p in procs {
        if a.local_rows(p).len() < n {
            return Err(Error::Precondition(format!("processor {p} owns {} rows, fewer than n = {n}", a.local_rows(p).len())));
        }
    }
    if let Some(p) = a.holders().into_iter().find(|p| !procs.contains(p)) {
        return Err(Error::Layout(format!("processor {p} holds rows but is outside the group")));
    }
    let rp = procs[root];
    if a.local_rows(rp)[..n] != (0..n).collect::<Vec<_>>()[..] {
        return Err(Error::Precondition(format!("root processor {rp} must own the leading {n} rows first")));
    }
    Ok(())
}

/// Local QRs, then the binomial-tree reduction of R-factors to `procs[root]`.
pub fn tsqr_upsweep(m: &mut Machine, a: &DistMatrix, procs: &[ProcId], root: usize) -> Result<TsqrTreeState> {
    check_input(a, procs, root)?;
    let n = a.cols();
    let np = procs.len();
    let rank = |v: usize| (v + root) % np;
    let mut leaf = Vec::with_capacity(np);
    let mut rs = Vec::with_capacity(np);
    for &p in procs {
        let f = m.run_local(p, |ops| local_householder_qr(a.local(p), ops))?;
        leaf.push((f.v, f.t));
        rs.push(Some(f.r));
    }
    let mut merges = vec![Vec::new(); np];
    let schedule = binomial_schedule(np);
    for (depth, level) in schedule.iter().enumerate().rev() {
        let msgs = level
            .iter()
            .map(|e| {
                let r = rs[rank(e.child)].take().expect("child still holds its R-factor");
                Outgoing::new(procs[rank(e.child)], procs[rank(e.parent)], pack_upper(&r))
            })
            .collect();
        let got = m.round(msgs)?;
        for (e, packed) in level.iter().zip(got) {
            let (pr, cr) = (rank(e.parent), rank(e.child));
            let theirs = unpack_upper(n, &packed)?;
            let mine = rs[pr].take().expect("parent holds its R-factor");
            let stacked = Matrix::vstack(&mine, &theirs)?;
            let f = m.run_local(procs[pr], |ops| local_householder_qr(&stacked, ops))?;
            merges[pr].push(MergeFactor { depth, partner: procs[cr], v: f.v, t: f.t });
            rs[pr] = Some(f.r);
        }
    }
    let r = rs[root].take().expect("root holds the final R-factor");
    Ok(TsqrTreeState { procs: procs.to_vec(), root, n, leaf, merges, r })
}

/// Per rank, the slab `W_p` of the leading `n` columns of the tree's
/// orthogonal factor.
pub fn tsqr_apply_tree(m: &mut Machine, state: &TsqrTreeState) -> Result<Vec<Matrix>> {
    let n = state.n;
    let np = state.procs.len();
    let procs = &state.procs;
    let rank = |v: usize| (v + state.root) % np;
    let mut bs: Vec<Option<Matrix>> = vec![None; np];
    bs[state.root] = Some(Matrix::identity(n));
    let schedule = binomial_schedule(np);
    let mut next_merge: Vec<usize> = state.merges.iter().map(Vec::len).collect();
    for (depth, level) in schedule.iter().enumerate() {
        let mut msgs = Vec::with_capacity(level.len());
        for e in level {
            let pr = rank(e.parent);
            next_merge[pr] -= 1;
            let f = &state.merges[pr][next_merge[pr]];
            debug_assert_eq!(f.depth, depth);
            let b = bs[pr].take().expect("parent holds its block");
            let padded = Matrix::vstack(&b, &Matrix::zeros(n, n))?;
            let out = m.run_local(procs[pr], |ops| apply_q_block(&f.v, &f.t, &padded, false, ops))?;
            bs[pr] = Some(out.row_block(0..n));
            msgs.push(Outgoing::new(procs[pr], procs[rank(e.child)], out.row_block(n..2 * n).into_vec()));
        }
        let got = m.round(msgs)?;
        for (e, data) in level.iter().zip(got) {
            bs[rank(e.child)] = Some(Matrix::from_vec(n, n, data)?);
        }
    }
    let mut w = Vec::with_capacity(np);
    for (k, &p) in procs.iter().enumerate() {
        let (v0, t0) = &state.leaf[k];
        let b = bs[k].take().expect("every rank ends with a block");
        let padded = Matrix::vstack(&b, &Matrix::zeros(v0.rows() - n, n))?;
        w.push(m.run_local(p, |ops| apply_q_block(v0, t0, &padded, false, ops))?);
    }
    Ok(w)
}

/// Rebuilds the Householder representation from the upsweep state.
pub fn tsqr_downsweep(m: &mut Machine, a: &DistMatrix, state: &TsqrTreeState) -> Result<QrOutput> {
    let n = state.n;
    let procs = &state.procs;
    let root = state.root;
    let rp = procs[root];
    let mut w = tsqr_apply_tree(m, state)?;

    let wr = std::mem::replace(&mut w[root], Matrix::zeros(0, 0));
    let (t, vr, r, u) = m.run_local(rp, |ops| -> Result<_> {
        let x = wr.row_block(0..n);
        let lu = signed_lu(&x, ops)?;
        let us = Matrix::from_fn(n, n, |i, j| lu.u[(i, j)] * lu.s[j]);
        ops.add((n * (n + 1) / 2) as u64);
        let t = tri_solve(&lu.l, &us, TriSolve::new(Side::Right, Uplo::Lower, true, Diag::Unit), ops)?;
        let rest = tri_solve(&lu.u, &wr.row_block(n..wr.rows()), TriSolve::RIGHT_UPPER, ops)?;
        let vr = Matrix::vstack(&lu.l, &rest)?;
        let neg: Vec<f64> = lu.s.iter().map(|s| -s).collect();
        let r = state.r.scale_rows(&neg);
        ops.add((n * (n + 1) / 2) as u64);
        Ok((t.upper(), vr, r, lu.u))
    })?;

    let copies = broadcast(m, procs, root, pack_upper(&u), Variant::Auto)?;
    let mut local: Vec<Matrix> = a.locals().iter().map(|x| Matrix::zeros(0, x.cols())).collect();
    for (k, &p) in procs.iter().enumerate() {
        if k == root {
            local[p] = vr.clone();
            continue;
        }
        let uk = unpack_upper(n, &copies[k])?;
        local[p] = m.run_local(p, |ops| tri_solve(&uk, &w[k], TriSolve::RIGHT_UPPER, ops))?;
    }
    let v = DistMatrix::from_local(n, a.owners().to_vec(), local)?;
    Ok(QrOutput { v, t, r })
}

/// TSQR of a row-distributed `A` over `procs` with root rank `root`. Every
/// member must own at least `n` rows and the root must own rows `0..n` as its
/// first local rows.
pub fn tsqr(m: &mut Machine, a: &DistMatrix, procs: &[ProcId], root: usize) -> Result<QrOutput> {
    let state = tsqr_upsweep(m, a, procs, root)?;
    tsqr_downsweep(m, a, &state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::HouseholderFactors;
    use crate::sim::{CostVector, OpCount};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..=1.0))
    }

    fn factors(out: &QrOutput) -> HouseholderFactors {
        HouseholderFactors { v: out.v.to_global(), t: out.t.clone(), r: out.r.clone() }
    }

    fn run(a: &Matrix, p: usize) -> (QrOutput, Machine) {
        let mut m = Machine::new(p).unwrap();
        let procs = m.all_procs();
        let counts = crate::collectives::balanced_sizes(a.rows(), p);
        let d = DistMatrix::block_row(a, &procs, &counts, p).unwrap();
        let out = tsqr(&mut m, &d, &procs, 0).unwrap();
        (out, m)
    }

    fn check(a: &Matrix, out: &QrOutput) {
        let f = factors(out);
        assert!(f.v.is_unit_lower_trapezoidal());
        assert!(f.t.is_upper_triangular() && f.r.is_upper_triangular());
        let res = f.reconstruct().unwrap().sub(a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(res <= 1e-10, "residual {res}");
        let q = f.q_columns(a.rows()).unwrap();
        let orth = crate::dense::local_mm_tn(&q, &q, &mut OpCount::default()).unwrap().sub(&Matrix::identity(a.rows())).unwrap().frobenius_norm();
        assert!(orth <= 1e-10, "orthogonality {orth}");
    }

    #[test]
    fn single_processor_is_local_qr_plus_reconstruction() {
        let a = random(6, 3, 1);
        let (out, m) = run(&a, 1);
        check(&a, &out);
        assert_eq!(m.trace().message_count(), 0);
        let oracle = local_householder_qr(&a, &mut OpCount::default()).unwrap();
        for i in 0..3 {
            assert!((out.r[(i, i)].abs() - oracle.r[(i, i)].abs()).abs() <= 1e-12);
        }
    }

    #[test]
    fn scalar_walkthrough() {
        // local QR gives R⁽⁰⁾ = −a and W = −1; signed LU of −1 has S = −1, U = −2
        let a = Matrix::from_rows(&[[3.0]]);
        let (out, _) = run(&a, 1);
        assert_eq!(out.r, Matrix::from_rows(&[[-3.0]]));
        let q = factors(&out).q_columns(1).unwrap();
        assert_eq!(q, Matrix::from_rows(&[[-1.0]]));
        assert_eq!(out.v.to_global(), Matrix::from_rows(&[[1.0]]));
    }

    #[test]
    fn column_of_ones() {
        let a = Matrix::from_rows(&[[1.0], [1.0], [1.0], [1.0]]);
        let (out, m) = run(&a, 2);
        assert!((out.r[(0, 0)].abs() - 2.0).abs() <= 1e-14);
        check(&a, &out);
        assert_eq!(m.critical_path_counts().messages, 3);
    }

    #[test]
    fn random_matches_oracle_up_to_signs() {
        let a = random(64, 8, 2);
        let (out, _) = run(&a, 4);
        check(&a, &out);
        let oracle = local_householder_qr(&a, &mut OpCount::default()).unwrap();
        for i in 0..8 {
            let d = if out.r[(i, i)] * oracle.r[(i, i)] < 0.0 { -1.0 } else { 1.0 };
            for j in i..8 {
                assert!((d * out.r[(i, j)] - oracle.r[(i, j)]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn upsweep_structure() {
        let n = 3;
        for p in [1, 2, 5, 8] {
            let a = random(4 * p, n, 3);
            let mut m = Machine::new(p).unwrap();
            let procs = m.all_procs();
            let d = DistMatrix::block_row(&a, &procs, &vec![4; p], p).unwrap();
            let state = tsqr_upsweep(&mut m, &d, &procs, 0).unwrap();
            let l = crate::collectives::ceil_log2(p) as usize;
            assert!((0..p).all(|k| (1..=l + 1).contains(&state.stored(k))));
            assert_eq!(state.merges.iter().map(Vec::len).sum::<usize>(), p - 1);
            let cp = m.critical_path_counts();
            assert_eq!(cp.messages, l as u64);
            assert_eq!(cp.words, (l * n * (n + 1) / 2) as u64);
            if p == 2 {
                assert_eq!(state.merges[0][0].v.rows(), 2 * n);
            }
        }
    }

    #[test]
    fn w_is_orthonormal() {
        let a = random(64, 8, 4);
        let mut m = Machine::new(4).unwrap();
        let procs = m.all_procs();
        let d = DistMatrix::block_row(&a, &procs, &[16; 4], 4).unwrap();
        let state = tsqr_upsweep(&mut m, &d, &procs, 0).unwrap();
        let w = tsqr_apply_tree(&mut m, &state).unwrap();
        let mut all = Matrix::zeros(0, 8);
        for wp in &w {
            all = Matrix::vstack(&all, wp).unwrap();
        }
        let wtw = crate::dense::local_mm_tn(&all, &all, &mut OpCount::default()).unwrap();
        assert!(wtw.sub(&Matrix::identity(8)).unwrap().frobenius_norm() <= 1e-10);
    }

    #[test]
    fn nonzero_root_and_uneven_rows() {
        let a = random(23, 3, 5);
        let mut m = Machine::new(3).unwrap();
        // processor 2 is the root and owns rows 0..3
        let owners: Vec<usize> = (0..23).map(|i| if i < 8 { 2 } else if i < 15 { 0 } else { 1 }).collect();
        let d = DistMatrix::from_global(&a, owners, 3).unwrap();
        let out = tsqr(&mut m, &d, &[0, 1, 2], 2).unwrap();
        check(&a, &out);
        assert_eq!(out.v.owners(), d.owners());
    }

    #[test]
    fn rejects_bad_layouts() {
        let a = random(8, 3, 6);
        let mut m = Machine::new(2).unwrap();
        let d = DistMatrix::block_row(&a, &[0, 1], &[6, 2], 2).unwrap();
        assert!(tsqr(&mut m, &d, &[0, 1], 0).is_err());
        let d = DistMatrix::block_row(&a, &[1, 0], &[4, 4], 2).unwrap();
        assert!(tsqr(&mut m, &d, &[0, 1], 0).is_err());
        assert_eq!(m.critical_path_counts(), CostVector::default());
    }
}
