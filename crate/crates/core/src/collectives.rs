//! The eight collectives over a processor group.
//!
//! A group is a slice of distinct processor ids; "rank" means a position in
//! that slice and roots are given as ranks. Data is indexed by rank. Blocks
//! packed into one message are split again by the receiver using their sizes,
//! which every participant knows in advance.
//!
//! Rooted collectives have a binomial-tree variant. Broadcast, Reduce, and
//! AllReduce also have a bidirectional-exchange variant built from
//! ReduceScatter and AllGather (recursive halving and doubling). [`Variant::Auto`]
//! picks whichever has the smaller word bound: binomial when
//! `B·⌈log₂P⌉ ≤ B + P`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Machine, Outgoing, ProcId};

/// `⌈log₂ n⌉`, with `0` for `n ≤ 1`.
pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// Sizes of `parts` contiguous parts of `total`; the first `total mod parts`
/// are one larger.
pub fn balanced_sizes(total: usize, parts: usize) -> Vec<usize> {
    assert!(parts >= 1, "at least one part");
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    Auto,
    Binomial,
    Bidirectional,
}

impl Variant {
    /// Resolves `Auto` for a `b`-word block on `p` processors.
    pub fn resolve(self, b: usize, p: usize) -> Variant {
        match self {
            Variant::Auto => select_variant(b, p),
            v => v,
        }
    }
}

/// Binomial when `B·⌈log₂P⌉ ≤ B + P`, else bidirectional exchange.
pub fn select_variant(b: usize, p: usize) -> Variant {
    if b * ceil_log2(p) as usize <= b + p {
        Variant::Binomial
    } else {
        Variant::Bidirectional
    }
}

/// One edge of the binomial tree, in virtual ranks (root = 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeEdge {
    pub parent: usize,
    pub child: usize,
    /// Virtual ranks in the child's subtree.
    pub subtree: Range<usize>,
}

/// Binomial-tree edges grouped by depth. The segment `[lo, hi)` is split at
/// `mid = lo + ⌈(hi−lo)/2⌉`; `lo` is linked to `mid` and both halves recurse
/// one level deeper. There are `⌈log₂ n⌉` depths and every virtual rank has at
/// most one edge per depth.
pub fn binomial_schedule(n: usize) -> Vec<Vec<TreeEdge>> {
    fn rec(lo: usize, hi: usize, depth: usize, out: &mut Vec<Vec<TreeEdge>>) {
        if hi - lo <= 1 {
            return;
        }
        let mid = lo + (hi - lo).div_ceil(2);
        if out.len() <= depth {
            out.push(Vec::new());
        }
        out[depth].push(TreeEdge { parent: lo, child: mid, subtree: mid..hi });
        rec(lo, mid, depth + 1, out);
        rec(mid, hi, depth + 1, out);
    }
    let mut out = Vec::new();
    rec(0, n, 0, &mut out);
    out
}

/// Halving structure of the bidirectional exchange: per level, the
/// `(A, B)` set pairs with `|A| = ⌈n/2⌉`, lower ranks in `A`.
fn bidir_levels(n: usize) -> Vec<Vec<(Range<usize>, Range<usize>)>> {
    let mut levels = Vec::new();
    let mut segs = vec![0..n];
    loop {
        let level: Vec<_> = segs
            .iter()
            .filter(|s| s.len() > 1)
            .map(|s| {
                let mid = s.start + s.len().div_ceil(2);
                (s.start..mid, mid..s.end)
            })
            .collect();
        if level.is_empty() {
            return levels;
        }
        segs = level.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
        levels.push(level);
    }
}

/// Pairs of the exchange step: `A[i] ↔ B[i]`, plus `A_last ↔ B_last` when
/// `|A| > |B|` (that pair is returned separately).
fn pairs(a: &Range<usize>, b: &Range<usize>) -> (Vec<(usize, usize)>, Option<(usize, usize)>) {
    let main = (0..b.len()).map(|i| (a.start + i, b.start + i)).collect();
    let extra = (a.len() > b.len()).then(|| (a.end - 1, b.end - 1));
    (main, extra)
}

fn check_group(m: &Machine, procs: &[ProcId]) -> Result<()> {
    if procs.is_empty() {
        return Err(Error::Precondition("empty processor group".into()));
    }
    let mut seen = vec![false; m.procs()];
    for &p in procs {
        if p >= m.procs() {
            return Err(Error::ProcOutOfRange { proc: p, procs: m.procs() });
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(Error::Precondition(format!("processor {p} appears twice in a group")));
        }
    }
    Ok(())
}

fn check_root(procs: &[ProcId], root: usize) -> Result<()> {
    if root < procs.len() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("root rank {root} outside a group of {}", procs.len())))
    }
}

fn check_len<T>(what: &str, v: &[T], n: usize) -> Result<()> {
    if v.len() == n {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!("{what}: {} entries for {n} ranks", v.len())))
    }
}

/// Sends lists of blocks in one round; each receiver gets the blocks back
/// split at the senders' sizes. Endpoints are ranks.
fn send_blocks(m: &mut Machine, procs: &[ProcId], msgs: Vec<(usize, usize, Vec<Vec<f64>>)>) -> Result<Vec<Vec<Vec<f64>>>> {
    let sizes: Vec<Vec<usize>> = msgs.iter().map(|(_, _, b)| b.iter().map(Vec::len).collect()).collect();
    let out = msgs
        .into_iter()
        .map(|(s, d, blocks)| Outgoing::new(procs[s], procs[d], blocks.concat()))
        .collect();
    let flat = m.round(out)?;
    Ok(flat
        .into_iter()
        .zip(sizes)
        .map(|(data, sizes)| {
            let mut at = 0;
            sizes
                .into_iter()
                .map(|len| {
                    let b = data[at..at + len].to_vec();
                    at += len;
                    b
                })
                .collect()
        })
        .collect())
}

fn add_into(m: &mut Machine, proc: ProcId, acc: &mut [f64], x: &[f64]) -> Result<()> {
    if acc.len() != x.len() {
        return Err(Error::DimensionMismatch(format!("adding blocks of {} and {} words", acc.len(), x.len())));
    }
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
    if !x.is_empty() {
        m.compute(proc, x.len() as u64);
    }
    Ok(())
}

/// Root's block `q` ends up at rank `q` (binomial tree).
pub fn scatter(m: &mut Machine, procs: &[ProcId], root: usize, blocks: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    check_group(m, procs)?;
    check_root(procs, root)?;
    let n = procs.len();
    check_len("scatter blocks", &blocks, n)?;
    let rank = |v: usize| (v + root) % n;
    let mut held: Vec<Option<Vec<f64>>> = blocks.into_iter().map(Some).collect();
    for level in binomial_schedule(n) {
        let mut msgs = Vec::new();
        for e in &level {
            let payload: Vec<Vec<f64>> = e.subtree.clone().map(|v| held[rank(v)].clone().unwrap_or_default()).collect();
            msgs.push((rank(e.parent), rank(e.child), payload));
        }
        let got = send_blocks(m, procs, msgs)?;
        for (e, blocks) in level.iter().zip(got) {
            for (v, b) in e.subtree.clone().zip(blocks) {
                held[rank(v)] = Some(b);
            }
        }
    }
    Ok(held.into_iter().map(Option::unwrap_or_default).collect())
}

/// Rank `q`'s block ends up at the root; returns all blocks in rank order.
pub fn gather(m: &mut Machine, procs: &[ProcId], root: usize, blocks: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    check_group(m, procs)?;
    check_root(procs, root)?;
    let n = procs.len();
    check_len("gather blocks", &blocks, n)?;
    let rank = |v: usize| (v + root) % n;
    let mut held = blocks;
    for level in binomial_schedule(n).into_iter().rev() {
        let mut msgs = Vec::new();
        for e in &level {
            let payload = e.subtree.clone().map(|v| std::mem::take(&mut held[rank(v)])).collect();
            msgs.push((rank(e.child), rank(e.parent), payload));
        }
        let got = send_blocks(m, procs, msgs)?;
        for (e, blocks) in level.iter().zip(got) {
            for (v, b) in e.subtree.clone().zip(blocks) {
                held[rank(v)] = b;
            }
        }
    }
    Ok(held)
}

/// Every rank ends with the root's block; returns the per-rank copies.
pub fn broadcast(m: &mut Machine, procs: &[ProcId], root: usize, block: Vec<f64>, variant: Variant) -> Result<Vec<Vec<f64>>> {
    check_group(m, procs)?;
    check_root(procs, root)?;
    let n = procs.len();
    match variant.resolve(block.len(), n) {
        Variant::Bidirectional => {
            let mut pieces = Vec::with_capacity(n);
            let mut at = 0;
            for len in balanced_sizes(block.len(), n) {
                pieces.push(block[at..at + len].to_vec());
                at += len;
            }
            let mine = scatter(m, procs, root, pieces)?;
            let all = all_gather(m, procs, mine)?;
            Ok(all.into_iter().map(|blocks| blocks.concat()).collect())
        }
        _ => {
            let rank = |v: usize| (v + root) % n;
            let mut held: Vec<Option<Vec<f64>>> = vec![None; n];
            held[root] = Some(block);
            for level in binomial_schedule(n) {
                let msgs = level
                    .iter()
                    .map(|e| (rank(e.parent), rank(e.child), vec![held[rank(e.parent)].clone().unwrap_or_default()]))
                    .collect();
                let got = send_blocks(m, procs, msgs)?;
                for (e, mut b) in level.iter().zip(got) {
                    held[rank(e.child)] = b.pop();
                }
            }
            Ok(held.into_iter().map(Option::unwrap_or_default).collect())
        }
    }
}

/// Elementwise sum of the ranks' equal-length blocks, delivered at the root.
pub fn reduce(m: &mut Machine, procs: &[ProcId], root: usize, blocks: Vec<Vec<f64>>, variant: Variant) -> Result<Vec<f64>> {
    check_group(m, procs)?;
    check_root(procs, root)?;
    let n = procs.len();
    check_len("reduce blocks", &blocks, n)?;
    let b = blocks[0].len();
    if let Some(bad) = blocks.iter().find(|x| x.len() != b) {
        return Err(Error::DimensionMismatch(format!("reduce blocks of {b} and {} words", bad.len())));
    }
    match variant.resolve(b, n) {
        Variant::Bidirectional => {
            let sizes = balanced_sizes(b, n);
            let split: Vec<Vec<Vec<f64>>> = blocks.iter().map(|x| split_sizes(x, &sizes)).collect();
            let summed = reduce_scatter(m, procs, split)?;
            Ok(gather(m, procs, root, summed)?.concat())
        }
        _ => {
            let rank = |v: usize| (v + root) % n;
            let mut held = blocks;
            for level in binomial_schedule(n).into_iter().rev() {
                let msgs = level
                    .iter()
                    .map(|e| (rank(e.child), rank(e.parent), vec![std::mem::take(&mut held[rank(e.child)])]))
                    .collect();
                let got = send_blocks(m, procs, msgs)?;
                for (e, mut x) in level.iter().zip(got) {
                    let x = x.pop().unwrap_or_default();
                    let p = rank(e.parent);
                    add_into(m, procs[p], &mut held[p], &x)?;
                }
            }
            Ok(std::mem::take(&mut held[root]))
        }
    }
}

fn split_sizes(x: &[f64], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut at = 0;
    sizes
        .iter()
        .map(|&len| {
            let b = x[at..at + len].to_vec();
            at += len;
            b
        })
        .collect()
}

/// Every rank ends with every rank's block (bidirectional exchange);
/// returns, per rank, the blocks in rank order.
pub fn all_gather(m: &mut Machine, procs: &[ProcId], blocks: Vec<Vec<f64>>) -> Result<Vec<Vec<Vec<f64>>>> {
    check_group(m, procs)?;
    let n = procs.len();
    check_len("all-gather blocks", &blocks, n)?;
    let mut held: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; n];
    for (p, b) in blocks.into_iter().enumerate() {
        held[p][p] = Some(b);
    }
    let take = |held: &Vec<Vec<Option<Vec<f64>>>>, p: usize, set: &Range<usize>| -> Vec<Vec<f64>> {
        set.clone().map(|q| held[p][q].clone().unwrap_or_default()).collect()
    };
    for level in bidir_levels(n).into_iter().rev() {
        let mut msgs = Vec::new();
        let mut extra = Vec::new();
        for (a, b) in &level {
            let (main, ex) = pairs(a, b);
            for (x, y) in main {
                msgs.push((x, y, take(&held, x, a)));
                msgs.push((y, x, take(&held, y, b)));
            }
            if let Some((x, y)) = ex {
                extra.push((y, x, take(&held, y, b)));
            }
        }
        for round in [msgs, extra] {
            let meta: Vec<(usize, usize)> = round.iter().map(|(s, d, _)| (*s, *d)).collect();
            let sets: Vec<Range<usize>> = meta.iter().map(|&(s, _)| set_of(&level, s)).collect();
            let got = send_blocks(m, procs, round)?;
            for (((_, d), set), blocks) in meta.into_iter().zip(sets).zip(got) {
                for (q, blk) in set.zip(blocks) {
                    held[d][q] = Some(blk);
                }
            }
        }
    }
    Ok(held.into_iter().map(|row| row.into_iter().map(Option::unwrap_or_default).collect()).collect())
}

fn set_of(level: &[(Range<usize>, Range<usize>)], rank: usize) -> Range<usize> {
    level
        .iter()
        .find_map(|(a, b)| {
            if a.contains(&rank) {
                Some(a.clone())
            } else if b.contains(&rank) {
                Some(b.clone())
            } else {
                None
            }
        })
        .expect("rank belongs to a segment")
}

/// `blocks[p][q]` is rank `p`'s contribution to rank `q`; rank `q` ends with
/// `Σ_p blocks[p][q]` (bidirectional exchange, recursive halving).
pub fn reduce_scatter(m: &mut Machine, procs: &[ProcId], blocks: Vec<Vec<Vec<f64>>>) -> Result<Vec<Vec<f64>>> {
    check_group(m, procs)?;
    let n = procs.len();
    check_len("reduce-scatter rows", &blocks, n)?;
    for row in &blocks {
        check_len("reduce-scatter blocks", row, n)?;
        for (q, b) in row.iter().enumerate() {
            if b.len() != blocks[0][q].len() {
                return Err(Error::DimensionMismatch(format!("contributions to rank {q} differ in size")));
            }
        }
    }
    let mut held = blocks;
    let take = |held: &mut Vec<Vec<Vec<f64>>>, p: usize, set: &Range<usize>| -> Vec<Vec<f64>> {
        set.clone().map(|q| std::mem::take(&mut held[p][q])).collect()
    };
    for level in bidir_levels(n) {
        let mut msgs = Vec::new();
        let mut extra = Vec::new();
        for (a, b) in &level {
            let (main, ex) = pairs(a, b);
            for (x, y) in main {
                msgs.push((x, y, take(&mut held, x, b)));
                msgs.push((y, x, take(&mut held, y, a)));
            }
            if let Some((x, y)) = ex {
                extra.push((x, y, take(&mut held, x, b)));
            }
        }
        let mut received = Vec::new();
        for round in [msgs, extra] {
            let meta: Vec<(usize, usize)> = round.iter().map(|(s, d, _)| (*s, *d)).collect();
            let got = send_blocks(m, procs, round)?;
            received.extend(meta.into_iter().zip(got));
        }
        for ((_, d), blocks) in received {
            let set = set_of(&level, d);
            let mut acc: Vec<f64> = set.clone().flat_map(|q| held[d][q].iter().copied().collect::<Vec<_>>()).collect();
            let incoming = blocks.concat();
            add_into(m, procs[d], &mut acc, &incoming)?;
            let sizes: Vec<usize> = set.clone().map(|q| held[d][q].len()).collect();
            for (q, b) in set.zip(split_sizes(&acc, &sizes)) {
                held[d][q] = b;
            }
        }
    }
    Ok(held.into_iter().enumerate().map(|(p, mut row)| std::mem::take(&mut row[p])).collect())
}

/// Elementwise sum of the ranks' blocks, delivered everywhere.
pub fn all_reduce(m: &mut Machine, procs: &[ProcId], blocks: Vec<Vec<f64>>, variant: Variant) -> Result<Vec<Vec<f64>>> {
    check_group(m, procs)?;
    let n = procs.len();
    check_len("all-reduce blocks", &blocks, n)?;
    let b = blocks[0].len();
    match variant.resolve(b, n) {
        Variant::Bidirectional => {
            if let Some(bad) = blocks.iter().find(|x| x.len() != b) {
                return Err(Error::DimensionMismatch(format!("all-reduce blocks of {b} and {} words", bad.len())));
            }
            let sizes = balanced_sizes(b, n);
            let split = blocks.iter().map(|x| split_sizes(x, &sizes)).collect();
            let summed = reduce_scatter(m, procs, split)?;
            Ok(all_gather(m, procs, summed)?.into_iter().map(|x| x.concat()).collect())
        }
        _ => {
            let sum = reduce(m, procs, 0, blocks, Variant::Binomial)?;
            broadcast(m, procs, 0, sum, Variant::Binomial)
        }
    }
}

/// Radix-2 index AlltoAll. `blocks[p][q]` goes from rank `p` to rank `q`; the
/// result is indexed `[q][p]`. Step `i` sends from `p` to `p + 2^i` every held
/// block whose label `(q − p) mod P` has bit `i` set.
pub fn all_to_all_index(m: &mut Machine, procs: &[ProcId], blocks: Vec<Vec<Vec<f64>>>) -> Result<Vec<Vec<Vec<f64>>>> {
    check_group(m, procs)?;
    let n = procs.len();
    check_len("alltoall rows", &blocks, n)?;
    for row in &blocks {
        check_len("alltoall blocks", row, n)?;
    }
    // held[h] = blocks currently at rank h, tagged (origin, dest)
    let mut held: Vec<Vec<(usize, usize, Vec<f64>)>> = vec![Vec::new(); n];
    for (p, row) in blocks.into_iter().enumerate() {
        for (q, b) in row.into_iter().enumerate() {
            held[p].push((p, q, b));
        }
    }
    for i in 0..ceil_log2(n) {
        let shift = 1usize << i;
        let mut moving: Vec<Vec<(usize, usize, Vec<f64>)>> = vec![Vec::new(); n];
        for h in 0..n {
            let (go, stay): (Vec<_>, Vec<_>) = std::mem::take(&mut held[h]).into_iter().partition(|(p, q, _)| ((q + n - p) % n) >> i & 1 == 1);
            held[h] = stay;
            moving[h] = go;
        }
        let tags: Vec<Vec<(usize, usize)>> = moving.iter().map(|v| v.iter().map(|(p, q, _)| (*p, *q)).collect()).collect();
        let msgs = moving
            .into_iter()
            .enumerate()
            .map(|(h, v)| (h, (h + shift) % n, v.into_iter().map(|(_, _, b)| b).collect()))
            .collect();
        let got = send_blocks(m, procs, msgs)?;
        for (h, (tags, blocks)) in tags.into_iter().zip(got).enumerate() {
            let d = (h + shift) % n;
            held[d].extend(tags.into_iter().zip(blocks).map(|((p, q), b)| (p, q, b)));
        }
    }
    let mut out: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n]; n];
    for (h, list) in held.into_iter().enumerate() {
        for (p, q, b) in list {
            debug_assert_eq!(q, h);
            out[q][p] = b;
        }
    }
    Ok(out)
}

/// Largest blocks of the two index phases of [`all_to_all_two_phase`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoPhaseStats {
    pub first: usize,
    pub second: usize,
}

/// AlltoAll for unbalanced blocks: element `k` of block `p → q` is first sent
/// to rank `(p + q + k) mod P`, then on to `q`, each phase an index AlltoAll.
pub fn all_to_all_two_phase(
    m: &mut Machine,
    procs: &[ProcId],
    blocks: Vec<Vec<Vec<f64>>>,
) -> Result<(Vec<Vec<Vec<f64>>>, TwoPhaseStats)> {
    check_group(m, procs)?;
    let n = procs.len();
    check_len("alltoall rows", &blocks, n)?;
    for row in &blocks {
        check_len("alltoall blocks", row, n)?;
    }
    let sizes: Vec<Vec<usize>> = blocks.iter().map(|row| row.iter().map(Vec::len).collect()).collect();
    // phase one: deal elements to intermediates, tagged (q, k)
    let mut first: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n]; n];
    let mut first_tags: Vec<Vec<Vec<(usize, usize)>>> = vec![vec![Vec::new(); n]; n];
    for (p, row) in blocks.into_iter().enumerate() {
        for (q, b) in row.into_iter().enumerate() {
            for (k, x) in b.into_iter().enumerate() {
                let r = (p + q + k) % n;
                first[p][r].push(x);
                first_tags[p][r].push((q, k));
            }
        }
    }
    let stats1 = first.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let mid = all_to_all_index(m, procs, first)?;
    // at intermediate r: mid[r][p] carries elements tagged first_tags[p][r]
    let mut second: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n]; n];
    let mut second_tags: Vec<Vec<Vec<(usize, usize)>>> = vec![vec![Vec::new(); n]; n];
    for (r, from) in mid.into_iter().enumerate() {
        for (p, data) in from.into_iter().enumerate() {
            for (x, &(q, k)) in data.into_iter().zip(&first_tags[p][r]) {
                second[r][q].push(x);
                second_tags[r][q].push((p, k));
            }
        }
    }
    let stats2 = second.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let fin = all_to_all_index(m, procs, second)?;
    let mut out: Vec<Vec<Vec<f64>>> = (0..n).map(|q| (0..n).map(|p| vec![0.0; sizes[p][q]]).collect()).collect();
    for (q, from) in fin.into_iter().enumerate() {
        for (r, data) in from.into_iter().enumerate() {
            for (x, &(p, k)) in data.into_iter().zip(&second_tags[r][q]) {
                out[q][p][k] = x;
            }
        }
    }
    Ok((out, TwoPhaseStats { first: stats1, second: stats2 }))
}

/// Upper bounds on the two phase sizes: `(P−1)/2 + max_p Σ_q B_pq/P` and
/// `(P−1)/2 + max_q Σ_p B_pq/P`.
pub fn two_phase_bounds(sizes: &[Vec<usize>]) -> (f64, f64) {
    let n = sizes.len();
    let pf = n as f64;
    let out_max = sizes.iter().map(|r| r.iter().sum::<usize>()).max().unwrap_or(0) as f64;
    let in_max = (0..n).map(|q| sizes.iter().map(|r| r[q]).sum::<usize>()).max().unwrap_or(0) as f64;
    ((pf - 1.0) / 2.0 + out_max / pf, (pf - 1.0) / 2.0 + in_max / pf)
}
