//! Critical-path costs of the collectives evaluated from their recursive
//! schedules, without running them.
//!
//! Each schedule is replayed on per-processor clocks for three weightings
//! (operations, words, messages). A message of `w` words advances its sender
//! to `src + c` and its receiver to `max(src, dst) + c`, with clocks read
//! before the round. All values use root `0` and equal blocks of `b` words.

use crate::sim::CostVector;

use super::CollectiveKind;
use crate::collectives::Variant;

struct Clocks {
    ops: Vec<u64>,
    words: Vec<u64>,
    msgs: Vec<u64>,
}

impl Clocks {
    fn new(n: usize) -> Self {
        Clocks { ops: vec![0; n], words: vec![0; n], msgs: vec![0; n] }
    }

    fn round(&mut self, sends: &[(usize, usize, u64)]) {
        let sends: Vec<_> = sends.iter().copied().filter(|s| s.2 > 0).collect();
        for (clock, weight) in [(&mut self.ops, None), (&mut self.words, Some(true)), (&mut self.msgs, Some(false))] {
            let before = clock.clone();
            for &(s, d, w) in &sends {
                let c = match weight {
                    None => 0,
                    Some(true) => w,
                    Some(false) => 1,
                };
                clock[s] = clock[s].max(before[s] + c);
                clock[d] = clock[d].max(before[s].max(before[d]) + c);
            }
        }
    }

    fn add(&mut self, p: usize, ops: u64) {
        self.ops[p] += ops;
    }

    fn max(&self) -> CostVector {
        let top = |v: &Vec<u64>| v.iter().copied().max().unwrap_or(0);
        CostVector { ops: top(&self.ops), words: top(&self.words), messages: top(&self.msgs) }
    }
}

fn sum(sizes: &[u64], lo: usize, hi: usize) -> u64 {
    sizes[lo..hi].iter().sum()
}

fn halve(lo: usize, hi: usize) -> usize {
    lo + (hi - lo).div_ceil(2)
}

fn scatter(c: &mut Clocks, sizes: &[u64], lo: usize, hi: usize) {
    if hi - lo > 1 {
        let mid = halve(lo, hi);
        c.round(&[(lo, mid, sum(sizes, mid, hi))]);
        scatter(c, sizes, lo, mid);
        scatter(c, sizes, mid, hi);
    }
}

fn gather(c: &mut Clocks, sizes: &[u64], lo: usize, hi: usize) {
    if hi - lo > 1 {
        let mid = halve(lo, hi);
        gather(c, sizes, lo, mid);
        gather(c, sizes, mid, hi);
        c.round(&[(mid, lo, sum(sizes, mid, hi))]);
    }
}

fn tree_broadcast(c: &mut Clocks, b: u64, lo: usize, hi: usize) {
    if hi - lo > 1 {
        let mid = halve(lo, hi);
        c.round(&[(lo, mid, b)]);
        tree_broadcast(c, b, lo, mid);
        tree_broadcast(c, b, mid, hi);
    }
}

fn tree_reduce(c: &mut Clocks, b: u64, lo: usize, hi: usize) {
    if hi - lo > 1 {
        let mid = halve(lo, hi);
        tree_reduce(c, b, lo, mid);
        tree_reduce(c, b, mid, hi);
        c.round(&[(mid, lo, b)]);
        if b > 0 {
            c.add(lo, b);
        }
    }
}

fn all_gather(c: &mut Clocks, sizes: &[u64], lo: usize, hi: usize) {
    if hi - lo > 1 {
        let mid = halve(lo, hi);
        all_gather(c, sizes, lo, mid);
        all_gather(c, sizes, mid, hi);
        let (wa, wb) = (sum(sizes, lo, mid), sum(sizes, mid, hi));
        let swaps: Vec<_> = (0..hi - mid).flat_map(|i| [(lo + i, mid + i, wa), (mid + i, lo + i, wb)]).collect();
        c.round(&swaps);
        if mid - lo > hi - mid {
            c.round(&[(hi - 1, mid - 1, wb)]);
        }
    }
}

fn reduce_scatter(c: &mut Clocks, sizes: &[u64], lo: usize, hi: usize) {
    if hi - lo > 1 {
        let mid = halve(lo, hi);
        let (wa, wb) = (sum(sizes, lo, mid), sum(sizes, mid, hi));
        let swaps: Vec<_> = (0..hi - mid).flat_map(|i| [(lo + i, mid + i, wb), (mid + i, lo + i, wa)]).collect();
        c.round(&swaps);
        let extra = mid - lo > hi - mid;
        if extra {
            c.round(&[(mid - 1, hi - 1, wb)]);
        }
        for &(_, d, w) in &swaps {
            if w > 0 {
                c.add(d, w);
            }
        }
        if extra && wb > 0 {
            c.add(hi - 1, wb);
        }
        reduce_scatter(c, sizes, lo, mid);
        reduce_scatter(c, sizes, mid, hi);
    }
}

fn index_all_to_all(c: &mut Clocks, p: usize, b: u64) {
    let mut bit = 1;
    while bit < p {
        let labels = (0..p).filter(|l| l & bit != 0).count() as u64;
        let sends: Vec<_> = (0..p).map(|x| (x, (x + bit) % p, labels * b)).collect();
        c.round(&sends);
        bit <<= 1;
    }
}

fn ceil_log2(p: usize) -> u64 {
    let mut d = 0;
    while (1usize << d) < p {
        d += 1;
    }
    d
}

/// Whether the binomial tree wins the word-bound comparison `B·⌈log₂P⌉ ≤ B + P`.
pub fn prefers_binomial(p: usize, b: usize) -> bool {
    b as u64 * ceil_log2(p) <= (b + p) as u64
}

fn split_evenly(b: usize, p: usize) -> Vec<u64> {
    (0..p).map(|i| (b / p + usize::from(i < b % p)) as u64).collect()
}

/// Expected critical-path costs of `kind` on `p` processors with `b`-word
/// blocks. `None` for the two-phase AlltoAll, whose schedule depends on data
/// sizes beyond `b`.
pub fn collective_cost(kind: CollectiveKind, variant: Variant, p: usize, b: usize) -> Option<CostVector> {
    let mut c = Clocks::new(p);
    let uniform = vec![b as u64; p];
    let binomial = match variant {
        Variant::Auto => prefers_binomial(p, b),
        Variant::Binomial => true,
        Variant::Bidirectional => false,
    };
    let pieces = split_evenly(b, p);
    match kind {
        CollectiveKind::Scatter => scatter(&mut c, &uniform, 0, p),
        CollectiveKind::Gather => gather(&mut c, &uniform, 0, p),
        CollectiveKind::AllGather => all_gather(&mut c, &uniform, 0, p),
        CollectiveKind::ReduceScatter => reduce_scatter(&mut c, &uniform, 0, p),
        CollectiveKind::AllToAll => index_all_to_all(&mut c, p, b as u64),
        CollectiveKind::AllToAllTwoPhase => return None,
        CollectiveKind::Broadcast if binomial => tree_broadcast(&mut c, b as u64, 0, p),
        CollectiveKind::Broadcast => {
            scatter(&mut c, &pieces, 0, p);
            all_gather(&mut c, &pieces, 0, p);
        }
        CollectiveKind::Reduce if binomial => tree_reduce(&mut c, b as u64, 0, p),
        CollectiveKind::Reduce => {
            reduce_scatter(&mut c, &pieces, 0, p);
            gather(&mut c, &pieces, 0, p);
        }
        CollectiveKind::AllReduce if binomial => {
            tree_reduce(&mut c, b as u64, 0, p);
            tree_broadcast(&mut c, b as u64, 0, p);
        }
        CollectiveKind::AllReduce => {
            reduce_scatter(&mut c, &pieces, 0, p);
            all_gather(&mut c, &pieces, 0, p);
        }
    }
    Some(c.max())
}

/// The looser bidirectional-exchange recurrence
/// `W(P) = W(⌈P/2⌉) + (⌈P/2⌉ + 2⌊P/2⌋)·B`, `W(1) = 0`.
pub fn exchange_word_bound(p: usize, b: usize) -> u64 {
    if p <= 1 {
        0
    } else {
        exchange_word_bound(p.div_ceil(2), b) + ((p.div_ceil(2) + 2 * (p / 2)) * b) as u64
    }
}
