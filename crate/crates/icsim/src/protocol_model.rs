//! The noiseless-protocol contract, its canonical chunked form, and a
//! zero-noise reference executor used as the correctness oracle.
//!
//! A protocol fixes, independently of all inputs, which directed links carry
//! a bit in each round; only the bit values may depend on what a party has
//! seen. Chunking groups the base rounds into blocks of exactly 5K scheduled
//! bits: every chunk opens with one all-pairs coverage round (2m bits, so
//! each party addresses every neighbor at least once per chunk), carries as
//! many base rounds as fit, and closes with round-robin virtual zeros up to
//! the 5K budget. Dummy chunks of pure padding are appended at the end.

use crate::topology::Graph;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("chunk budget K={0} must be a positive multiple of the link count {1}")]
    BadChunkBudget(usize, usize),
    #[error("base round {0} carries {1} bits, exceeding the 5K-2m chunk budget {2}")]
    RoundTooWide(usize, usize, usize),
    #[error("schedule references link ({0}, {1}) absent from the graph")]
    UnknownLink(usize, usize),
    #[error("duplicate send on link ({1}, {2}) in round {0}")]
    DuplicateSend(usize, usize, usize),
    #[error("protocol descriptor invalid: {0}")]
    Descriptor(String),
}

/// A party's visibility into previously exchanged bits, addressed by base
/// schedule position. Returns the concrete bit when the party has it (own
/// sends included); `None` when the slot is unknown or was silent.
pub trait View {
    fn base_bit(&self, base_round: usize, from: usize, to: usize) -> Option<bool>;
}

/// A view with nothing in it; protocols must still produce some bit.
pub struct EmptyView;

impl View for EmptyView {
    fn base_bit(&self, _: usize, _: usize, _: usize) -> Option<bool> {
        None
    }
}

/// Built-in next-bit rules. All are total on any prefix-consistent view.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum ProtocolKind {
    /// Every directed link sends a schedule-determined pseudorandom bit each
    /// round; bit values never depend on the view.
    RandomBits { rounds: usize, seed: u64 },
    /// A token walks the closed DFS walk of the BFS spanning tree; each party
    /// XORs its input bit into the token the first time it sends. After a
    /// full lap the token equals the XOR of all inputs.
    XorToken,
    /// The root's input bit is broadcast down the tree, then echoes are
    /// XOR-aggregated back up.
    BroadcastEcho,
    /// Explicit input-independent bit table.
    Table { bits: Vec<TableEntry> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TableEntry {
    pub round: usize,
    pub from: usize,
    pub to: usize,
    pub bit: bool,
}

/// A fixed-order noiseless protocol over a graph.
#[derive(Debug, Clone)]
pub struct NoiselessProtocol {
    pub graph: Graph,
    /// Per round, the sorted list of directed sends (from, to).
    pub schedule: Vec<Vec<(usize, usize)>>,
    pub inputs: Vec<Vec<bool>>,
    pub kind: ProtocolKind,
    /// For the token walk: the walk steps and each party's first sending round.
    walk: Vec<(usize, usize)>,
    first_send: Vec<Option<usize>>,
    table: BTreeMap<(usize, usize, usize), bool>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl NoiselessProtocol {
    /// Total scheduled transmissions CC(Π).
    pub fn cc(&self) -> usize {
        self.schedule.iter().map(|r| r.len()).sum()
    }

    pub fn random_bits(graph: Graph, rounds: usize, seed: u64) -> NoiselessProtocol {
        let mut dirs = Vec::new();
        for &(u, v) in graph.links() {
            dirs.push((u, v));
            dirs.push((v, u));
        }
        dirs.sort_unstable();
        let schedule = vec![dirs; rounds];
        let n = graph.party_count();
        NoiselessProtocol {
            graph,
            schedule,
            inputs: vec![vec![]; n],
            kind: ProtocolKind::RandomBits { rounds, seed },
            walk: vec![],
            first_send: vec![None; n],
            table: BTreeMap::new(),
        }
    }

    /// One closed DFS walk of the BFS spanning tree, one bit per round.
    pub fn xor_token(graph: Graph, inputs: Vec<bool>) -> NoiselessProtocol {
        let n = graph.party_count();
        assert_eq!(inputs.len(), n, "xor-token needs one input bit per party");
        let tree = crate::topology::build_spanning_tree(&graph);
        let mut walk = Vec::new();
        fn visit(u: usize, tree: &crate::topology::SpanningTree, walk: &mut Vec<(usize, usize)>) {
            for &c in &tree.children[u] {
                walk.push((u, c));
                visit(c, tree, walk);
                walk.push((c, u));
            }
        }
        visit(tree.root, &tree, &mut walk);
        let mut first_send = vec![None; n];
        for (t, &(u, _)) in walk.iter().enumerate() {
            if first_send[u].is_none() {
                first_send[u] = Some(t);
            }
        }
        let schedule = walk.iter().map(|&s| vec![s]).collect();
        NoiselessProtocol {
            graph,
            schedule,
            inputs: inputs.into_iter().map(|b| vec![b]).collect(),
            kind: ProtocolKind::XorToken,
            walk,
            first_send,
            table: BTreeMap::new(),
        }
    }

    /// The XOR of all inputs: what the token carries after its lap.
    pub fn xor_of_inputs(&self) -> bool {
        self.inputs.iter().filter(|i| !i.is_empty()).fold(false, |acc, i| acc ^ i[0])
    }

    pub fn broadcast_echo(graph: Graph, root_input: bool) -> NoiselessProtocol {
        let n = graph.party_count();
        let tree = crate::topology::build_spanning_tree(&graph);
        let d = tree.depth as usize;
        // Down: edge (parent -> c) in round level(c)-2. Up: (c -> parent) in
        // round 2d - 1 - level(c), after c has heard all its children.
        let mut schedule = vec![Vec::new(); (2 * d).saturating_sub(2)];
        for c in 0..n {
            if let Some(p) = tree.parent[c] {
                let lv = tree.level[c] as usize;
                schedule[lv - 2].push((p, c));
                schedule[2 * d - 1 - lv].push((c, p));
            }
        }
        for r in schedule.iter_mut() {
            r.sort_unstable();
        }
        let mut inputs = vec![vec![]; n];
        inputs[tree.root] = vec![root_input];
        NoiselessProtocol {
            graph,
            schedule,
            inputs,
            kind: ProtocolKind::BroadcastEcho,
            walk: vec![],
            first_send: vec![None; n],
            table: BTreeMap::new(),
        }
    }

    pub fn from_table(graph: Graph, bits: Vec<TableEntry>) -> Result<NoiselessProtocol, ProtocolError> {
        let mut table = BTreeMap::new();
        let rounds = bits.iter().map(|e| e.round + 1).max().unwrap_or(0);
        let mut schedule = vec![Vec::new(); rounds];
        for e in &bits {
            if !graph.has_edge(e.from, e.to) {
                return Err(ProtocolError::UnknownLink(e.from, e.to));
            }
            if table.insert((e.round, e.from, e.to), e.bit).is_some() {
                return Err(ProtocolError::DuplicateSend(e.round, e.from, e.to));
            }
            schedule[e.round].push((e.from, e.to));
        }
        for r in schedule.iter_mut() {
            r.sort_unstable();
        }
        let n = graph.party_count();
        Ok(NoiselessProtocol {
            graph,
            schedule,
            inputs: vec![vec![]; n],
            kind: ProtocolKind::Table { bits },
            walk: vec![],
            first_send: vec![None; n],
            table,
        })
    }

    /// The bit `from` sends to `to` in `base_round`, computed from the
    /// sender's view. Total: missing view entries read as 0.
    pub fn next_bit(&self, base_round: usize, from: usize, to: usize, view: &dyn View) -> bool {
        match &self.kind {
            ProtocolKind::RandomBits { seed, .. } => {
                let h = splitmix(
                    seed ^ splitmix(base_round as u64 ^ splitmix((from as u64) << 32 | to as u64)),
                );
                h & 1 == 1
            }
            ProtocolKind::XorToken => {
                let incoming = if base_round == 0 {
                    false
                } else {
                    let (a, b) = self.walk[base_round - 1];
                    debug_assert_eq!(b, from);
                    view.base_bit(base_round - 1, a, b).unwrap_or(false)
                };
                let contrib = self.first_send[from] == Some(base_round) && !self.inputs[from].is_empty();
                incoming ^ (contrib && self.inputs[from][0])
            }
            ProtocolKind::BroadcastEcho => {
                let tree = crate::topology::build_spanning_tree(&self.graph);
                let received = |party: usize| -> bool {
                    match tree.parent[party] {
                        None => self.inputs[party].first().copied().unwrap_or(false),
                        Some(p) => {
                            let lv = tree.level[party] as usize;
                            view.base_bit(lv - 2, p, party).unwrap_or(false)
                        }
                    }
                };
                if tree.parent[to] == Some(from) {
                    received(from)
                } else {
                    // Echo upward: own broadcast bit XOR children's echoes.
                    let d = tree.depth as usize;
                    let mut acc = received(from);
                    for &c in &tree.children[from] {
                        let lv = tree.level[c] as usize;
                        acc ^= view.base_bit(2 * d - 1 - lv, c, from).unwrap_or(false);
                    }
                    acc
                }
            }
            ProtocolKind::Table { .. } => {
                self.table.get(&(base_round, from, to)).copied().unwrap_or(false)
            }
        }
    }
}

/// Why a chunk slot exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotSource {
    /// Carries the base protocol's bit for this round.
    Base { round: usize },
    /// The chunk-opening all-pairs exchange; carries 0.
    Coverage,
    /// Round-robin padding up to the 5K budget; carries 0.
    Virtual,
}

/// One scheduled send inside a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSend {
    pub from: usize,
    pub to: usize,
    pub source: SlotSource,
}

/// Round-by-round layout of one chunk. `link_slots[link]` lists, in slot
/// order, each (round_in_chunk, position_in_round) where the link carries a
/// bit in either direction; this is the per-link transcript slot order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkLayout {
    pub rounds: Vec<Vec<ChunkSend>>,
    pub link_slots: Vec<Vec<(usize, usize)>>,
}

impl ChunkLayout {
    fn finalize(rounds: Vec<Vec<ChunkSend>>, graph: &Graph) -> ChunkLayout {
        let mut link_slots = vec![Vec::new(); graph.link_count()];
        for (ri, sends) in rounds.iter().enumerate() {
            for (pi, s) in sends.iter().enumerate() {
                let l = graph.link_id(s.from, s.to).expect("send on a non-edge");
                link_slots[l].push((ri, pi));
            }
        }
        ChunkLayout { rounds, link_slots }
    }

    pub fn bit_count(&self) -> usize {
        self.rounds.iter().map(|r| r.len()).sum()
    }

    /// Number of transcript symbols this chunk contributes on a link.
    pub fn slot_count(&self, link: usize) -> usize {
        self.link_slots[link].len()
    }
}

/// The chunked protocol: content chunks holding the base schedule plus
/// trailing all-padding dummy chunks. Chunk indices are 1-based; indices
/// beyond `num_chunks` reuse the dummy layout (parties deep in recovery may
/// simulate arbitrarily far past the content).
#[derive(Debug, Clone)]
pub struct ChunkedProtocol {
    pub base: NoiselessProtocol,
    pub k_chunk: usize,
    pub num_content_chunks: usize,
    pub num_chunks: usize,
    content: Vec<ChunkLayout>,
    dummy: ChunkLayout,
    /// base round -> (content chunk index - 1, round_in_chunk)
    base_round_pos: Vec<(usize, usize)>,
}

pub fn chunk_protocol(
    base: NoiselessProtocol,
    k_chunk: usize,
    dummy_chunks: Option<usize>,
) -> Result<ChunkedProtocol, ProtocolError> {
    let graph = base.graph.clone();
    let m = graph.link_count();
    if k_chunk == 0 || k_chunk % m != 0 {
        return Err(ProtocolError::BadChunkBudget(k_chunk, m));
    }
    let budget = 5 * k_chunk;
    let coverage_bits = 2 * m;

    let mut all_dirs = Vec::new();
    for &(u, v) in graph.links() {
        all_dirs.push((u, v));
        all_dirs.push((v, u));
    }
    all_dirs.sort_unstable();
    let coverage_round: Vec<ChunkSend> = all_dirs
        .iter()
        .map(|&(from, to)| ChunkSend { from, to, source: SlotSource::Coverage })
        .collect();

    // Virtual rounds filling `deficit` bits round-robin over directed links.
    let pad_rounds = |deficit: usize| -> Vec<Vec<ChunkSend>> {
        let mut rounds = Vec::new();
        let mut left = deficit;
        while left > 0 {
            let take = left.min(all_dirs.len());
            rounds.push(
                all_dirs[..take]
                    .iter()
                    .map(|&(from, to)| ChunkSend { from, to, source: SlotSource::Virtual })
                    .collect(),
            );
            left -= take;
        }
        rounds
    };

    let mut content = Vec::new();
    let mut base_round_pos = Vec::with_capacity(base.schedule.len());
    let mut cur_rounds: Vec<Vec<ChunkSend>> = vec![coverage_round.clone()];
    let mut cur_bits = coverage_bits;
    let close =
        |rounds: &mut Vec<Vec<ChunkSend>>, bits: usize, content: &mut Vec<ChunkLayout>| {
            let mut r = std::mem::take(rounds);
            r.extend(pad_rounds(budget - bits));
            content.push(ChunkLayout::finalize(r, &graph));
        };
    for (br, sends) in base.schedule.iter().enumerate() {
        if sends.is_empty() {
            // An idle base round occupies no chunk space.
            base_round_pos.push((content.len(), usize::MAX));
            continue;
        }
        if sends.len() > budget - coverage_bits {
            return Err(ProtocolError::RoundTooWide(br, sends.len(), budget - coverage_bits));
        }
        if cur_bits + sends.len() > budget {
            close(&mut cur_rounds, cur_bits, &mut content);
            cur_rounds = vec![coverage_round.clone()];
            cur_bits = coverage_bits;
        }
        base_round_pos.push((content.len(), cur_rounds.len()));
        cur_rounds.push(
            sends
                .iter()
                .map(|&(from, to)| ChunkSend { from, to, source: SlotSource::Base { round: br } })
                .collect(),
        );
        cur_bits += sends.len();
    }
    if cur_bits > coverage_bits || content.is_empty() {
        close(&mut cur_rounds, cur_bits, &mut content);
    }

    let mut dummy_rounds = vec![coverage_round];
    dummy_rounds.extend(pad_rounds(budget - coverage_bits));
    let dummy = ChunkLayout::finalize(dummy_rounds, &graph);

    let num_content_chunks = content.len();
    let extra = dummy_chunks.unwrap_or(num_content_chunks);
    Ok(ChunkedProtocol {
        base,
        k_chunk,
        num_content_chunks,
        num_chunks: num_content_chunks + extra,
        content,
        dummy,
        base_round_pos,
    })
}

impl ChunkedProtocol {
    /// Layout of 1-based chunk `index`; indices past the content (including
    /// past `num_chunks`) share the dummy layout.
    pub fn layout(&self, index: usize) -> &ChunkLayout {
        assert!(index >= 1);
        if index <= self.num_content_chunks {
            &self.content[index - 1]
        } else {
            &self.dummy
        }
    }

    /// Where a base round landed: (1-based chunk index, round_in_chunk).
    /// Idle base rounds have no slot.
    pub fn base_round_position(&self, base_round: usize) -> Option<(usize, usize)> {
        let &(c, r) = self.base_round_pos.get(base_round)?;
        (r != usize::MAX).then_some((c + 1, r))
    }

    pub fn graph(&self) -> &Graph {
        &self.base.graph
    }

    /// The bit a party sends at one chunk slot, or None when the slot does
    /// not belong to it. Coverage, virtual, and dummy-chunk slots carry 0.
    pub fn simulate_chunk_slot(
        &self,
        party: usize,
        to: usize,
        chunk_index: usize,
        round_in_chunk: usize,
        view: &dyn View,
    ) -> Option<bool> {
        let layout = self.layout(chunk_index);
        let sends = layout.rounds.get(round_in_chunk)?;
        let send = sends.iter().find(|s| s.from == party && s.to == to)?;
        match send.source {
            SlotSource::Base { round } if chunk_index <= self.num_content_chunks => {
                Some(self.base.next_bit(round, party, to, view))
            }
            _ => Some(false),
        }
    }
}

/// Oracle transcripts: for each link, the symbols of each chunk in slot
/// order. Zero noise makes both endpoints' copies identical, so one copy per
/// link suffices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleTranscripts {
    pub per_link: Vec<Vec<Vec<Option<bool>>>>,
    pub cc: usize,
}

struct OracleView<'a> {
    cp: &'a ChunkedProtocol,
    per_link: &'a [Vec<Vec<Option<bool>>>],
    current: &'a [Vec<Option<bool>>],
}

impl View for OracleView<'_> {
    fn base_bit(&self, base_round: usize, from: usize, to: usize) -> Option<bool> {
        let (chunk, rin) = self.cp.base_round_position(base_round)?;
        let link = self.cp.graph().link_id(from, to)?;
        let layout = self.cp.layout(chunk);
        let slot = layout.link_slots[link].iter().position(|&(r, p)| {
            r == rin && layout.rounds[r][p].from == from
        })?;
        let chunk_syms = if chunk <= self.per_link[link].len() {
            &self.per_link[link][chunk - 1]
        } else {
            &self.current[link]
        };
        chunk_syms.get(slot).copied().flatten()
    }
}

/// Executes every chunk with zero noise, producing ground-truth transcripts.
pub fn run_noiseless_oracle(cp: &ChunkedProtocol) -> OracleTranscripts {
    let graph = cp.graph();
    let m = graph.link_count();
    let mut per_link: Vec<Vec<Vec<Option<bool>>>> = vec![Vec::new(); m];
    let mut cc = 0usize;
    for chunk in 1..=cp.num_chunks {
        let layout = cp.layout(chunk);
        let mut current: Vec<Vec<Option<bool>>> = vec![Vec::new(); m];
        for rin in 0..layout.rounds.len() {
            // Decide all bits of the round against the pre-round view, then
            // deliver simultaneously.
            let decided: Vec<(usize, bool)> = layout.rounds[rin]
                .iter()
                .enumerate()
                .map(|(_, s)| {
                    let view = OracleView { cp, per_link: &per_link, current: &current };
                    let l = graph.link_id(s.from, s.to).unwrap();
                    let bit = cp
                        .simulate_chunk_slot(s.from, s.to, chunk, rin, &view)
                        .expect("scheduled slot must produce a bit");
                    (l, bit)
                })
                .collect();
            for (l, bit) in decided {
                current[l].push(Some(bit));
                cc += 1;
            }
        }
        for l in 0..m {
            debug_assert_eq!(current[l].len(), layout.slot_count(l));
            per_link[l].push(std::mem::take(&mut current[l]));
        }
    }
    OracleTranscripts { per_link, cc }
}

/// Config-facing protocol description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum ProtocolDescriptor {
    RandomBits { rounds: usize, seed: u64 },
    XorToken { inputs: Vec<bool> },
    BroadcastEcho { input: bool },
    Table { bits: Vec<TableEntry> },
}

impl ProtocolDescriptor {
    pub fn build(&self, graph: Graph) -> Result<NoiselessProtocol, ProtocolError> {
        match self {
            ProtocolDescriptor::RandomBits { rounds, seed } => {
                Ok(NoiselessProtocol::random_bits(graph, *rounds, *seed))
            }
            ProtocolDescriptor::XorToken { inputs } => {
                if inputs.len() != graph.party_count() {
                    return Err(ProtocolError::Descriptor(format!(
                        "xor-token needs {} input bits, got {}",
                        graph.party_count(),
                        inputs.len()
                    )));
                }
                Ok(NoiselessProtocol::xor_token(graph, inputs.clone()))
            }
            ProtocolDescriptor::BroadcastEcho { input } => {
                Ok(NoiselessProtocol::broadcast_echo(graph, *input))
            }
            ProtocolDescriptor::Table { bits } => NoiselessProtocol::from_table(graph, bits.clone()),
        }
    }
}
