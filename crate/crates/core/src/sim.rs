//! Deterministic simulation of a `P`-processor distributed-memory machine.
//!
//! Algorithms drive a [`Machine`] by logging local computation with
//! [`Machine::compute`] and moving data with [`Machine::round`]. A round is a
//! set of point-to-point messages issued concurrently; within a round every
//! processor sends at most one message and receives at most one message
//! (full-duplex, single port). Payloads are real `f64` data and are handed
//! back to the caller as the receiver's copy.
//!
//! Nothing is timed while the algorithm runs. The recorded [`Trace`] is
//! replayed afterwards under any [`CostParams`]: a processor's events execute
//! in issue order, a compute event of `f` operations takes `γ·f`, and a message
//! of `w` words occupies its sender for `α + wβ` starting at the sender's ready
//! time, and completes at the receiver at
//! `max(sender ready, receiver ready) + α + wβ`. Replays are longest-path
//! evaluations over the event DAG, so they are exact and deterministic.

use std::ops::{Add, Range};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a processor, in `[0, P)`.
pub type ProcId = usize;

/// Index into a trace's payload store.
pub type PayloadId = usize;

/// Per-operation, per-word, and per-message time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub gamma: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl CostParams {
    pub const UNIT: CostParams = CostParams { gamma: 1.0, beta: 1.0, alpha: 1.0 };

    pub fn new(gamma: f64, beta: f64, alpha: f64) -> Result<Self> {
        for (name, v) in [("gamma", gamma), ("beta", beta), ("alpha", alpha)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Precondition(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(CostParams { gamma, beta, alpha })
    }
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams::UNIT
    }
}

/// Operations, words, and messages along critical paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CostVector {
    pub ops: u64,
    pub words: u64,
    pub messages: u64,
}

impl CostVector {
    pub fn new(ops: u64, words: u64, messages: u64) -> Self {
        CostVector { ops, words, messages }
    }

    /// `γ·ops + β·words + α·messages`.
    pub fn weighted(&self, costs: &CostParams) -> f64 {
        costs.gamma * self.ops as f64 + costs.beta * self.words as f64 + costs.alpha * self.messages as f64
    }
}

/// Running operation count handed to local kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount(pub u64);

impl OpCount {
    #[inline]
    pub fn add(&mut self, n: u64) {
        self.0 += n;
    }

    pub fn get(&self) -> u64 {
        self.0
    }
}

/// One point-to-point message inside a round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub src: ProcId,
    pub dst: ProcId,
    pub words: u64,
    pub payload: PayloadId,
}

/// A unit of the global issue order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Compute { proc: ProcId, ops: u64 },
    Round(Vec<Message>),
}

/// Per-processor view of a step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Event {
    Compute { step: usize, ops: u64 },
    Send { step: usize, peer: ProcId, words: u64, payload: PayloadId },
    Recv { step: usize, peer: ProcId, words: u64, payload: PayloadId },
}

impl Event {
    pub fn step(&self) -> usize {
        match *self {
            Event::Compute { step, .. } | Event::Send { step, .. } | Event::Recv { step, .. } => step,
        }
    }
}

/// Outgoing message handed to [`Machine::round`].
#[derive(Clone, Debug)]
pub struct Outgoing {
    pub src: ProcId,
    pub dst: ProcId,
    pub data: Vec<f64>,
}

impl Outgoing {
    pub fn new(src: ProcId, dst: ProcId, data: Vec<f64>) -> Self {
        Outgoing { src, dst, data }
    }
}

/// Everything a simulated run did, in issue order.
#[derive(Clone, Debug)]
pub struct Trace {
    procs: usize,
    steps: Vec<Step>,
    next_payload: PayloadId,
    payload_base: PayloadId,
    payloads: Option<Vec<Vec<f64>>>,
}

impl PartialEq for Trace {
    /// Structural equality: processors, steps, and payload numbering. Payload
    /// contents are not compared.
    fn eq(&self, other: &Self) -> bool {
        self.procs == other.procs && self.steps == other.steps && self.next_payload - self.payload_base == other.next_payload - other.payload_base
    }
}

impl Trace {
    fn new(procs: usize, retain_payloads: bool) -> Self {
        Trace {
            procs,
            steps: Vec::new(),
            next_payload: 0,
            payload_base: 0,
            payloads: retain_payloads.then(Vec::new),
        }
    }

    pub fn procs(&self) -> usize {
        self.procs
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Data carried by a message, if payloads are retained.
    pub fn payload(&self, id: PayloadId) -> Option<&[f64]> {
        let idx = id.checked_sub(self.payload_base)?;
        self.payloads.as_ref()?.get(idx).map(Vec::as_slice)
    }

    pub fn message_count(&self) -> usize {
        self.messages().count()
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.steps.iter().flat_map(|s| match s {
            Step::Round(msgs) => msgs.as_slice(),
            Step::Compute { .. } => &[],
        })
    }

    /// Total words over all send events and over all receive events.
    pub fn words_sent_received(&self) -> (u64, u64) {
        let sent = self.messages().map(|m| m.words).sum();
        let received = self.events().into_iter().flatten().map(|e| match e {
            Event::Recv { words, .. } => words,
            _ => 0,
        });
        (sent, received.sum())
    }

    pub fn total_ops(&self) -> u64 {
        self.steps
            .iter()
            .map(|s| match s {
                Step::Compute { ops, .. } => *ops,
                Step::Round(_) => 0,
            })
            .sum()
    }

    /// Per-processor event lists in program order.
    pub fn events(&self) -> Vec<Vec<Event>> {
        let mut out = vec![Vec::new(); self.procs];
        for (step, s) in self.steps.iter().enumerate() {
            match s {
                Step::Compute { proc, ops } => out[*proc].push(Event::Compute { step, ops: *ops }),
                Step::Round(msgs) => {
                    for m in msgs {
                        out[m.src].push(Event::Send { step, peer: m.dst, words: m.words, payload: m.payload });
                        out[m.dst].push(Event::Recv { step, peer: m.src, words: m.words, payload: m.payload });
                    }
                }
            }
        }
        out
    }

    /// A sub-trace of consecutive steps, with payload ids renumbered from 0.
    pub fn segment(&self, range: Range<usize>) -> Trace {
        let steps: Vec<Step> = self.steps[range].to_vec();
        let first = steps
            .iter()
            .find_map(|s| match s {
                Step::Round(msgs) => msgs.first().map(|m| m.payload),
                Step::Compute { .. } => None,
            })
            .unwrap_or(self.next_payload);
        let end = steps
            .iter()
            .filter_map(|s| match s {
                Step::Round(msgs) => msgs.last().map(|m| m.payload + 1),
                Step::Compute { .. } => None,
            })
            .max()
            .unwrap_or(first);
        let steps = steps
            .into_iter()
            .map(|s| match s {
                Step::Round(msgs) => Step::Round(
                    msgs.into_iter()
                        .map(|m| Message { payload: m.payload - first, ..m })
                        .collect(),
                ),
                c => c,
            })
            .collect();
        let payloads = self.payloads.as_ref().map(|p| p[first - self.payload_base..end - self.payload_base].to_vec());
        Trace { procs: self.procs, steps, next_payload: end - first, payload_base: 0, payloads }
    }

    fn longest_paths<T>(&self, compute: impl Fn(u64) -> T, message: impl Fn(u64) -> T) -> Vec<T>
    where
        T: Copy + Default + PartialOrd + Add<Output = T>,
    {
        fn max<T: PartialOrd>(a: T, b: T) -> T {
            if b > a {
                b
            } else {
                a
            }
        }
        let mut clock = vec![T::default(); self.procs];
        let mut before = clock.clone();
        for step in &self.steps {
            match step {
                Step::Compute { proc, ops } => clock[*proc] = clock[*proc] + compute(*ops),
                Step::Round(msgs) => {
                    for m in msgs {
                        before[m.src] = clock[m.src];
                        before[m.dst] = clock[m.dst];
                    }
                    for m in msgs {
                        let c = message(m.words);
                        clock[m.src] = max(clock[m.src], before[m.src] + c);
                        clock[m.dst] = max(clock[m.dst], max(before[m.src], before[m.dst]) + c);
                    }
                }
            }
        }
        clock
    }

    /// Per-processor finish times under `costs`.
    pub fn clocks(&self, costs: &CostParams) -> Vec<f64> {
        self.longest_paths(|ops| costs.gamma * ops as f64, |w| costs.alpha + costs.beta * w as f64)
    }

    /// Longest weighted path through the event DAG.
    pub fn makespan(&self, costs: &CostParams) -> f64 {
        self.clocks(costs).into_iter().fold(0.0, f64::max)
    }

    /// Each resource's own maximum over all paths.
    pub fn critical_path_counts(&self) -> CostVector {
        let max = |v: Vec<u64>| v.into_iter().max().unwrap_or(0);
        CostVector {
            ops: max(self.longest_paths(|ops| ops, |_| 0)),
            words: max(self.longest_paths(|_| 0, |w| w)),
            messages: max(self.longest_paths(|_| 0, |_| 1)),
        }
    }

    /// Serializes the trace with clocks and critical-path counts under `costs`.
    pub fn to_json(&self, costs: &CostParams) -> Result<String> {
        let clocks = self.clocks(costs);
        let doc = TraceDoc {
            schema: TRACE_SCHEMA.to_string(),
            procs: self.procs,
            steps: self.steps.len(),
            costs: *costs,
            makespan: clocks.iter().copied().fold(0.0, f64::max),
            clocks,
            critical_path: self.critical_path_counts(),
            events: self.events(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Rebuilds a trace from [`Trace::to_json`] output. Payload contents are
    /// not part of the document.
    pub fn from_json(text: &str) -> Result<Trace> {
        let doc: TraceDoc = serde_json::from_str(text)?;
        if doc.schema != TRACE_SCHEMA {
            return Err(Error::Parse(format!("unknown trace schema {:?}", doc.schema)));
        }
        if doc.events.len() != doc.procs {
            return Err(Error::Parse(format!("{} event lists for {} processors", doc.events.len(), doc.procs)));
        }
        let mut computes: Vec<Option<(ProcId, u64)>> = vec![None; doc.steps];
        let mut sends: Vec<Vec<Message>> = vec![Vec::new(); doc.steps];
        let mut recvs: Vec<Vec<Message>> = vec![Vec::new(); doc.steps];
        for (proc, events) in doc.events.iter().enumerate() {
            let mut last = None;
            for e in events {
                let step = e.step();
                if step >= doc.steps || last.is_some_and(|l| l > step) {
                    return Err(Error::Parse(format!("event out of order on processor {proc} at step {step}")));
                }
                last = Some(step);
                match *e {
                    Event::Compute { ops, .. } => {
                        if computes[step].replace((proc, ops)).is_some() {
                            return Err(Error::Parse(format!("two compute events at step {step}")));
                        }
                    }
                    Event::Send { peer, words, payload, .. } => sends[step].push(Message { src: proc, dst: peer, words, payload }),
                    Event::Recv { peer, words, payload, .. } => recvs[step].push(Message { src: peer, dst: proc, words, payload }),
                }
            }
        }
        let mut steps = Vec::with_capacity(doc.steps);
        let mut next_payload = 0;
        for (step, ((compute, mut s), mut r)) in computes.into_iter().zip(sends).zip(recvs).enumerate() {
            match compute {
                Some((proc, ops)) => {
                    if !s.is_empty() || !r.is_empty() {
                        return Err(Error::Parse(format!("step {step} mixes computation and messages")));
                    }
                    steps.push(Step::Compute { proc, ops });
                }
                None => {
                    s.sort_by_key(|m| m.payload);
                    r.sort_by_key(|m| m.payload);
                    if s != r {
                        return Err(Error::UnmatchedMessage(format!("send and receive events disagree at step {step}")));
                    }
                    if s.is_empty() {
                        return Err(Error::Parse(format!("step {step} has no events")));
                    }
                    next_payload = next_payload.max(s.iter().map(|m| m.payload + 1).max().unwrap_or(0));
                    steps.push(Step::Round(s));
                }
            }
        }
        Ok(Trace { procs: doc.procs, steps, next_payload, payload_base: 0, payloads: None })
    }
}

/// Schema tag written into every serialized trace.
pub const TRACE_SCHEMA: &str = "caqr-trace/1";

#[derive(Serialize, Deserialize)]
struct TraceDoc {
    schema: String,
    procs: usize,
    steps: usize,
    costs: CostParams,
    clocks: Vec<f64>,
    makespan: f64,
    critical_path: CostVector,
    events: Vec<Vec<Event>>,
}

/// The simulated machine: `P` processors and the trace of what they did.
#[derive(Debug)]
pub struct Machine {
    trace: Trace,
}

impl Machine {
    /// A machine that keeps a copy of every message payload.
    pub fn new(procs: usize) -> Result<Self> {
        Self::with_payload_retention(procs, true)
    }

    pub fn with_payload_retention(procs: usize, retain: bool) -> Result<Self> {
        if procs == 0 {
            return Err(Error::NoProcessors);
        }
        Ok(Machine { trace: Trace::new(procs, retain) })
    }

    pub fn procs(&self) -> usize {
        self.trace.procs
    }

    pub fn all_procs(&self) -> Vec<ProcId> {
        (0..self.procs()).collect()
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    /// Number of steps issued so far; useful to mark trace segments.
    pub fn mark(&self) -> usize {
        self.trace.steps.len()
    }

    fn check_proc(&self, proc: ProcId) -> Result<()> {
        if proc < self.procs() {
            Ok(())
        } else {
            Err(Error::ProcOutOfRange { proc, procs: self.procs() })
        }
    }

    /// Logs `ops` arithmetic operations on `proc`. Zero-op events are logged too.
    pub fn compute(&mut self, proc: ProcId, ops: u64) {
        assert!(proc < self.procs(), "processor {proc} out of range");
        self.trace.steps.push(Step::Compute { proc, ops });
    }

    /// Runs a local kernel on `proc` and logs the operations it counted.
    pub fn run_local<T>(&mut self, proc: ProcId, kernel: impl FnOnce(&mut OpCount) -> T) -> T {
        let mut ops = OpCount::default();
        let out = kernel(&mut ops);
        self.compute(proc, ops.get());
        out
    }

    /// A single message from `src` to `dst`; returns the receiver's copy.
    pub fn exchange(&mut self, src: ProcId, dst: ProcId, data: Vec<f64>) -> Result<Vec<f64>> {
        let mut out = self.round(vec![Outgoing::new(src, dst, data)])?;
        Ok(out.pop().unwrap_or_default())
    }

    /// Issues concurrent messages. Each processor may send at most one and
    /// receive at most one message per round. Empty payloads are elided and
    /// come back empty. Returns the receivers' copies in input order.
    pub fn round(&mut self, outgoing: Vec<Outgoing>) -> Result<Vec<Vec<f64>>> {
        let procs = self.procs();
        let mut sending = vec![false; procs];
        let mut receiving = vec![false; procs];
        for o in &outgoing {
            self.check_proc(o.src)?;
            self.check_proc(o.dst)?;
            if o.src == o.dst {
                return Err(Error::SelfSend(o.src));
            }
            if o.data.is_empty() {
                continue;
            }
            if std::mem::replace(&mut sending[o.src], true) {
                return Err(Error::PortConflict { proc: o.src, role: "sends" });
            }
            if std::mem::replace(&mut receiving[o.dst], true) {
                return Err(Error::PortConflict { proc: o.dst, role: "receives" });
            }
        }
        let mut msgs = Vec::new();
        let mut delivered = Vec::with_capacity(outgoing.len());
        for o in outgoing {
            if o.data.is_empty() {
                delivered.push(Vec::new());
                continue;
            }
            let payload = self.trace.next_payload;
            self.trace.next_payload += 1;
            msgs.push(Message { src: o.src, dst: o.dst, words: o.data.len() as u64, payload });
            match self.trace.payloads.as_mut() {
                Some(store) => {
                    store.push(o.data);
                    delivered.push(store.last().cloned().unwrap_or_default());
                }
                None => delivered.push(o.data),
            }
        }
        if !msgs.is_empty() {
            self.trace.steps.push(Step::Round(msgs));
        }
        Ok(delivered)
    }

    pub fn makespan(&self, costs: &CostParams) -> f64 {
        self.trace.makespan(costs)
    }

    pub fn critical_path_counts(&self) -> CostVector {
        self.trace.critical_path_counts()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn costs(gamma: f64, beta: f64, alpha: f64) -> CostParams {
        CostParams::new(gamma, beta, alpha).unwrap()
    }

    #[test]
    fn new_machine() {
        let m = Machine::new(1).unwrap();
        assert_eq!(m.procs(), 1);
        assert_eq!(m.makespan(&CostParams::UNIT), 0.0);
        let m = Machine::new(4).unwrap();
        assert_eq!(m.trace().clocks(&CostParams::UNIT), vec![0.0; 4]);
        assert!(matches!(Machine::new(0), Err(Error::NoProcessors)));
    }

    #[test]
    fn compute_advances_clock() {
        let mut m = Machine::new(1).unwrap();
        m.compute(0, 5);
        assert_eq!(m.makespan(&costs(2.0, 0.0, 0.0)), 10.0);
        m.compute(0, 0);
        assert_eq!(m.trace().len(), 2);
        assert_eq!(m.makespan(&costs(2.0, 0.0, 0.0)), 10.0);

        let mut m = Machine::new(1).unwrap();
        m.compute(0, 3);
        m.compute(0, 4);
        assert_eq!(m.makespan(&costs(3.0, 0.0, 0.0)), 21.0);
    }

    #[test]
    fn exchange_timing() {
        let mut m = Machine::new(2).unwrap();
        let got = m.exchange(0, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
        assert_eq!(m.trace().clocks(&costs(0.0, 1.0, 10.0))[1], 13.0);
        assert_eq!(m.makespan(&costs(0.0, 1.0, 10.0)), 13.0);

        // sender busy until t = 7
        let mut m = Machine::new(2).unwrap();
        m.compute(0, 7);
        m.exchange(0, 1, vec![0.0; 3]).unwrap();
        assert_eq!(m.trace().clocks(&costs(1.0, 1.0, 10.0))[1], 20.0);

        let mut m = Machine::new(2).unwrap();
        assert!(matches!(m.exchange(1, 1, vec![1.0]), Err(Error::SelfSend(1))));
        assert!(matches!(m.exchange(0, 2, vec![1.0]), Err(Error::ProcOutOfRange { .. })));
    }

    #[test]
    fn makespan_is_deterministic() {
        let mut m = Machine::new(3).unwrap();
        m.compute(0, 4);
        m.exchange(0, 2, vec![1.0; 5]).unwrap();
        m.compute(2, 1);
        m.exchange(2, 1, vec![1.0; 2]).unwrap();
        let c = costs(0.5, 0.25, 3.0);
        assert_eq!(m.makespan(&c).to_bits(), m.makespan(&c).to_bits());
    }

    #[test]
    fn round_port_rules() {
        let mut m = Machine::new(3).unwrap();
        let err = m.round(vec![Outgoing::new(0, 1, vec![1.0]), Outgoing::new(0, 2, vec![1.0])]);
        assert!(matches!(err, Err(Error::PortConflict { proc: 0, .. })));
        let err = m.round(vec![Outgoing::new(0, 2, vec![1.0]), Outgoing::new(1, 2, vec![1.0])]);
        assert!(matches!(err, Err(Error::PortConflict { proc: 2, .. })));
        // swap counts as one message on each path
        m.round(vec![Outgoing::new(0, 1, vec![1.0; 5]), Outgoing::new(1, 0, vec![2.0; 5])]).unwrap();
        assert_eq!(m.critical_path_counts(), CostVector::new(0, 5, 1));
        // empty payloads are elided
        let before = m.trace().len();
        let got = m.round(vec![Outgoing::new(2, 0, vec![])]).unwrap();
        assert_eq!(got, vec![Vec::<f64>::new()]);
        assert_eq!(m.trace().len(), before);
    }

    #[test]
    fn critical_path_counts_basic() {
        let m = Machine::new(3).unwrap();
        assert_eq!(m.critical_path_counts(), CostVector::default());

        // P = 2 reduce of B-word blocks: one message, B additions at the root
        let b = 6;
        let mut m = Machine::new(2).unwrap();
        let got = m.exchange(1, 0, vec![1.0; b]).unwrap();
        m.compute(0, got.len() as u64);
        assert_eq!(m.critical_path_counts(), CostVector::new(b as u64, b as u64, 1));
    }

    #[test]
    fn conservation_and_payload_fidelity() {
        let mut m = Machine::new(4).unwrap();
        let data: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        m.exchange(0, 3, data.clone()).unwrap();
        m.round(vec![Outgoing::new(3, 1, vec![0.1; 2]), Outgoing::new(1, 2, vec![0.2; 4])]).unwrap();
        let (sent, received) = m.trace().words_sent_received();
        assert_eq!(sent, 13);
        assert_eq!(sent, received);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(m.trace().payload(0).unwrap()), bits(&data));
    }

    #[test]
    fn json_round_trip() {
        let mut m = Machine::new(3).unwrap();
        m.compute(1, 9);
        m.round(vec![Outgoing::new(0, 1, vec![1.0; 2]), Outgoing::new(1, 2, vec![1.0; 3])]).unwrap();
        m.exchange(2, 0, vec![4.0]).unwrap();
        let json = m.trace().to_json(&CostParams::UNIT).unwrap();
        let back = Trace::from_json(&json).unwrap();
        assert_eq!(&back, m.trace());
        assert_eq!(back.to_json(&CostParams::UNIT).unwrap(), json);
    }

    #[test]
    fn json_rejects_unmatched() {
        let mut m = Machine::new(2).unwrap();
        m.exchange(0, 1, vec![1.0; 2]).unwrap();
        let json = m.trace().to_json(&CostParams::UNIT).unwrap();
        let broken = json.replacen("\"recv\"", "\"compute\"", 1);
        assert!(Trace::from_json(&broken).is_err());
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        let mut doc = doc;
        doc["events"][1] = serde_json::json!([]);
        assert!(matches!(Trace::from_json(&doc.to_string()), Err(Error::UnmatchedMessage(_))));
    }

    #[test]
    fn segment_rebases_payloads() {
        let mut m = Machine::new(2).unwrap();
        m.exchange(0, 1, vec![1.0]).unwrap();
        let mark = m.mark();
        m.exchange(1, 0, vec![2.0, 3.0]).unwrap();
        let seg = m.trace().segment(mark..m.mark());
        assert_eq!(seg.steps(), &[Step::Round(vec![Message { src: 1, dst: 0, words: 2, payload: 0 }])]);
        assert_eq!(seg.payload(0), Some(&[2.0, 3.0][..]));
    }
}
