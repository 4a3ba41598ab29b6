//! Routing topology, TDMA schedule, and deterministic packet-transit semantics.
//!
//! A network is a connected DAG of directed links plus a fixed repeating
//! slot schedule. Given one up/down assignment to every link (a
//! [`TopologyRealization`]), packet transit is fully deterministic: the
//! packet starts at the source and in each slot moves over its node's
//! scheduled link if that link is up, otherwise it stays put and retries
//! at the node's next scheduled slot (hop-by-hop routing).

use std::sync::atomic::{AtomicU8, Ordering};

use thiserror::Error;

pub type NodeId = usize;

/// Maximum number of directed links. Estimator tables are sized 2^E, so
/// this cap turns a silent exponential blowup into a clear error.
pub const MAX_EDGES: usize = 20;

/// Maximum prediction horizon (tables are sized 2^H).
pub const MAX_HORIZON: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
}

impl Edge {
    pub fn new(from: NodeId, to: NodeId) -> Self {
        Edge { from, to }
    }
}

#[derive(Debug, Clone)]
pub struct RoutingTopology {
    pub node_count: usize,
    pub edges: Vec<Edge>,
    pub source: NodeId,
    pub sink: NodeId,
}

impl RoutingTopology {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_index(&self, from: NodeId, to: NodeId) -> Option<usize> {
        self.edges.iter().position(|e| e.from == from && e.to == to)
    }
}

/// Repeating slot schedule. `slots[t]` holds the indices (into the
/// topology's edge list) of the links scheduled in slot `t mod T`.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub slots: Vec<Vec<usize>>,
}

impl Schedule {
    pub fn period(&self) -> usize {
        self.slots.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TimingConfig {
    /// Slots per sample interval: t_k = k * slots_per_sample + phase.
    pub slots_per_sample: u64,
    /// Slot index of the first packet generation time t_0.
    pub phase: u64,
    /// Transit window length in slots; the delivery deadline is t_k + deadline.
    pub deadline: u64,
}

impl TimingConfig {
    pub fn sample_slot(&self, sample: usize) -> u64 {
        sample as u64 * self.slots_per_sample + self.phase
    }

    pub fn deadline_slot(&self, sample: usize) -> u64 {
        self.sample_slot(sample) + self.deadline
    }
}

/// One up/down assignment to all E links.
///
/// The canonical integer encoding reads the edge list left to right as a
/// bit string: edge 0 is the most significant bit. Enumeration in
/// ascending integer order is therefore lexicographic on the up/down
/// string, and every probability table in the crate is indexed this way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TopologyRealization {
    mask: u32,
    width: u8,
}

impl TopologyRealization {
    pub fn from_mask(mask: u32, width: usize) -> Self {
        debug_assert!(width <= MAX_EDGES);
        debug_assert!(width == 32 || mask < (1 << width));
        TopologyRealization {
            mask,
            width: width as u8,
        }
    }

    pub fn all_up(width: usize) -> Self {
        Self::from_mask(((1u64 << width) - 1) as u32, width)
    }

    pub fn all_down(width: usize) -> Self {
        Self::from_mask(0, width)
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut mask = 0u32;
        for &b in bits {
            mask = (mask << 1) | b as u32;
        }
        Self::from_mask(mask, bits.len())
    }

    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn is_up(&self, edge: usize) -> bool {
        debug_assert!(edge < self.width());
        (self.mask >> (self.width() - 1 - edge)) & 1 == 1
    }

    pub fn with_edge(&self, edge: usize, up: bool) -> Self {
        let bit = 1u32 << (self.width() - 1 - edge);
        let mask = if up { self.mask | bit } else { self.mask & !bit };
        TopologyRealization { mask, ..*self }
    }

    pub fn up_count(&self) -> u32 {
        self.mask.count_ones()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryOutcome {
    pub delivered: bool,
    pub arrival_slot: Option<u64>,
    pub visited_nodes: Vec<NodeId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("routing graph contains a directed cycle")]
    CyclicGraph,
    #[error("routing graph is not connected")]
    DisconnectedGraph,
    #[error("source node {source_node} cannot reach sink node {sink_node}")]
    SourceCannotReachSink { source_node: NodeId, sink_node: NodeId },
    #[error("sink node {sink} has outgoing edge to node {to}")]
    SinkHasOutgoingEdge { sink: NodeId, to: NodeId },
    #[error("node {node} is not the sink but has no outgoing edges")]
    NonSinkWithoutOutgoing { node: NodeId },
    #[error("slot {slot} violates unicast: node {node} has more than one scheduled outgoing link")]
    UnicastViolation { slot: usize, node: NodeId },
    #[error("deadline {deadline} exceeds the sample interval {slots_per_sample}")]
    DeadlineExceedsSample { deadline: u64, slots_per_sample: u64 },
    #[error("{edges} edges exceeds the supported maximum of {max}")]
    TooManyEdges { edges: usize, max: usize },
    #[error("duplicate edge ({from}, {to})")]
    DuplicateEdge { from: NodeId, to: NodeId },
    #[error("edge ({from}, {to}) is a self loop")]
    SelfLoopEdge { from: NodeId, to: NodeId },
    #[error("node id {node} out of range for {node_count} nodes")]
    InvalidNodeId { node: NodeId, node_count: usize },
    #[error("source and sink are the same node {node}")]
    SourceEqualsSink { node: NodeId },
    #[error("slot {slot} schedules link ({from}, {to}) which is not a topology edge")]
    UnknownScheduledLink { slot: usize, from: NodeId, to: NodeId },
    #[error("slot {slot} references edge index {index} out of range")]
    ScheduledLinkIndexOutOfRange { slot: usize, index: usize },
    #[error("schedule has no slots")]
    EmptySchedule,
    #[error("slots_per_sample must be positive")]
    ZeroSlotsPerSample,
    #[error("deadline must be positive")]
    ZeroDeadline,
}

/// Checks every structural invariant of a topology/schedule/timing triple.
pub fn validate(
    topology: &RoutingTopology,
    schedule: &Schedule,
    timing: &TimingConfig,
) -> Result<(), ValidationError> {
    let m = topology.node_count;
    for node in [topology.source, topology.sink] {
        if node >= m {
            return Err(ValidationError::InvalidNodeId {
                node,
                node_count: m,
            });
        }
    }
    if topology.source == topology.sink {
        return Err(ValidationError::SourceEqualsSink {
            node: topology.source,
        });
    }
    if topology.edge_count() > MAX_EDGES {
        return Err(ValidationError::TooManyEdges {
            edges: topology.edge_count(),
            max: MAX_EDGES,
        });
    }
    for (i, e) in topology.edges.iter().enumerate() {
        if e.from >= m || e.to >= m {
            let node = if e.from >= m { e.from } else { e.to };
            return Err(ValidationError::InvalidNodeId {
                node,
                node_count: m,
            });
        }
        if e.from == e.to {
            return Err(ValidationError::SelfLoopEdge {
                from: e.from,
                to: e.to,
            });
        }
        if topology.edges[..i].contains(e) {
            return Err(ValidationError::DuplicateEdge {
                from: e.from,
                to: e.to,
            });
        }
        if e.from == topology.sink {
            return Err(ValidationError::SinkHasOutgoingEdge {
                sink: topology.sink,
                to: e.to,
            });
        }
    }

    // Acyclicity via Kahn's algorithm on the directed graph.
    let mut indegree = vec![0usize; m];
    for e in &topology.edges {
        indegree[e.to] += 1;
    }
    let mut queue: Vec<NodeId> = (0..m).filter(|&n| indegree[n] == 0).collect();
    let mut seen = 0;
    while let Some(n) = queue.pop() {
        seen += 1;
        for e in topology.edges.iter().filter(|e| e.from == n) {
            indegree[e.to] -= 1;
            if indegree[e.to] == 0 {
                queue.push(e.to);
            }
        }
    }
    if seen != m {
        return Err(ValidationError::CyclicGraph);
    }

    // Weak connectivity.
    let mut reached = vec![false; m];
    let mut stack = vec![0usize];
    reached[0] = true;
    while let Some(n) = stack.pop() {
        for e in &topology.edges {
            for next in [e.from, e.to] {
                if (e.from == n || e.to == n) && !reached[next] {
                    reached[next] = true;
                    stack.push(next);
                }
            }
        }
    }
    if reached.iter().any(|r| !r) {
        return Err(ValidationError::DisconnectedGraph);
    }

    // Directed reachability source -> sink.
    let mut fwd = vec![false; m];
    fwd[topology.source] = true;
    let mut stack = vec![topology.source];
    while let Some(n) = stack.pop() {
        for e in topology.edges.iter().filter(|e| e.from == n) {
            if !fwd[e.to] {
                fwd[e.to] = true;
                stack.push(e.to);
            }
        }
    }
    if !fwd[topology.sink] {
        return Err(ValidationError::SourceCannotReachSink {
            source_node: topology.source,
            sink_node: topology.sink,
        });
    }

    // Only the sink may lack outgoing edges.
    for node in 0..m {
        if node != topology.sink && !topology.edges.iter().any(|e| e.from == node) {
            return Err(ValidationError::NonSinkWithoutOutgoing { node });
        }
    }

    if schedule.slots.is_empty() {
        return Err(ValidationError::EmptySchedule);
    }
    for (slot, links) in schedule.slots.iter().enumerate() {
        let mut senders = Vec::new();
        for &idx in links {
            let Some(e) = topology.edges.get(idx).copied() else {
                return Err(ValidationError::ScheduledLinkIndexOutOfRange { slot, index: idx });
            };
            if senders.contains(&e.from) {
                return Err(ValidationError::UnicastViolation { slot, node: e.from });
            }
            senders.push(e.from);
        }
    }

    if timing.slots_per_sample == 0 {
        return Err(ValidationError::ZeroSlotsPerSample);
    }
    if timing.deadline == 0 {
        return Err(ValidationError::ZeroDeadline);
    }
    if timing.deadline > timing.slots_per_sample {
        return Err(ValidationError::DeadlineExceedsSample {
            deadline: timing.deadline,
            slots_per_sample: timing.slots_per_sample,
        });
    }
    Ok(())
}

/// Enumerates all 2^E realizations in ascending (lexicographic) order.
pub fn enumerate_realizations(
    topology: &RoutingTopology,
) -> Result<Vec<TopologyRealization>, ValidationError> {
    let e = topology.edge_count();
    if e > MAX_EDGES {
        return Err(ValidationError::TooManyEdges {
            edges: e,
            max: MAX_EDGES,
        });
    }
    Ok((0..1u32 << e)
        .map(|m| TopologyRealization::from_mask(m, e))
        .collect())
}

// Memo cell states for the delivered-bit cache.
const MEMO_UNKNOWN: u8 = 0;
const MEMO_LOST: u8 = 1;
const MEMO_DELIVERED: u8 = 2;

/// A validated topology + schedule + timing triple with a memoized
/// delivered-bit table.
///
/// The delivered bit of sample k depends on t_k only through t_k mod T,
/// so outcomes are cached per (phase, realization). The cache is a table
/// of atomics: concurrent readers race benignly on idempotent inserts.
pub struct NetworkModel {
    topology: RoutingTopology,
    schedule: Schedule,
    timing: TimingConfig,
    memo: Box<[AtomicU8]>,
}

impl std::fmt::Debug for NetworkModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkModel")
            .field("topology", &self.topology)
            .field("schedule", &self.schedule)
            .field("timing", &self.timing)
            .finish()
    }
}

impl NetworkModel {
    pub fn new(
        topology: RoutingTopology,
        schedule: Schedule,
        timing: TimingConfig,
    ) -> Result<Self, ValidationError> {
        validate(&topology, &schedule, &timing)?;
        let states = schedule.period() << topology.edge_count();
        let memo = (0..states).map(|_| AtomicU8::new(MEMO_UNKNOWN)).collect();
        Ok(NetworkModel {
            topology,
            schedule,
            timing,
            memo,
        })
    }

    pub fn topology(&self) -> &RoutingTopology {
        &self.topology
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn timing(&self) -> &TimingConfig {
        &self.timing
    }

    pub fn edge_count(&self) -> usize {
        self.topology.edge_count()
    }

    pub fn realization_count(&self) -> usize {
        1 << self.topology.edge_count()
    }

    /// Walks a packet through slots [t_start, t_deadline). The packet is
    /// delivered iff it sits at the sink strictly before the deadline slot.
    pub fn simulate_packet(
        &self,
        realization: TopologyRealization,
        t_start: u64,
        t_deadline: u64,
    ) -> DeliveryOutcome {
        debug_assert_eq!(realization.width(), self.edge_count());
        debug_assert!(t_start <= t_deadline);
        let period = self.schedule.period() as u64;
        let mut node = self.topology.source;
        let mut visited = vec![node];
        let mut arrival = None;
        for t in t_start..t_deadline {
            let slot = &self.schedule.slots[(t % period) as usize];
            let hop = slot.iter().copied().find(|&idx| {
                self.topology.edges[idx].from == node && realization.is_up(idx)
            });
            if let Some(idx) = hop {
                node = self.topology.edges[idx].to;
                visited.push(node);
                if node == self.topology.sink {
                    arrival = Some(t);
                    break;
                }
            }
        }
        DeliveryOutcome {
            delivered: arrival.is_some(),
            arrival_slot: arrival,
            visited_nodes: visited,
        }
    }

    /// Delivered bit of sample `k` under `realization`, memoized.
    pub fn delivered(&self, realization: TopologyRealization, sample: usize) -> bool {
        let period = self.schedule.period() as u64;
        let phase = (self.timing.sample_slot(sample) % period) as usize;
        let cell = &self.memo[(phase << self.edge_count()) + realization.mask() as usize];
        match cell.load(Ordering::Relaxed) {
            MEMO_DELIVERED => true,
            MEMO_LOST => false,
            _ => {
                let out = self.simulate_packet(
                    realization,
                    self.timing.sample_slot(sample),
                    self.timing.deadline_slot(sample),
                );
                let value = if out.delivered {
                    MEMO_DELIVERED
                } else {
                    MEMO_LOST
                };
                cell.store(value, Ordering::Relaxed);
                out.delivered
            }
        }
    }

    /// The consistency predicate: whether a claimed delivery bit matches
    /// what the realization would actually produce at sample `k`.
    pub fn delivery_indicator(
        &self,
        realization: TopologyRealization,
        sample: usize,
        claimed: bool,
    ) -> bool {
        self.delivered(realization, sample) == claimed
    }
}
