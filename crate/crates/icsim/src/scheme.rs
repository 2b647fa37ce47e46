//! The noise-resilient execution engine: three scheme variants that wrap a
//! chunked protocol with per-link transcript verification, network-wide
//! status agreement, chunk simulation, and rewind.
//!
//! Variant A draws all hash seeds from one shared randomness stream and
//! withstands noise committed in advance. Variant B exchanges private
//! randomness per link over the (noisy) network first, then runs with wider
//! hashes keyed off each endpoint's own view of that exchange, which makes
//! the hashes safe against noise chosen adaptively during the run. Variant C
//! keeps the shared stream but compresses each wide digest through a second,
//! freshly-keyed short hash whose key rides along in the exchange, paying a
//! few extra bits per iteration instead of a wider wire format.
//!
//! Every iteration runs four phases on a fixed round budget: a verification
//! exchange per link (counters and transcript-prefix hashes, driving
//! truncation back to a common prefix after divergence), a two-sweep
//! aggregation of per-party readiness over a spanning tree, one listen round
//! plus 5K rounds of chunk simulation, and a rewind wave that pulls
//! overgrown links back level. An omniscient observer scores every iteration
//! against a global progress potential; its findings ship in the run report.

use crate::channel::{
    bot_spoof_pattern, Adversary, AdversarySpec, BudgetLedger, ChannelEngine, DirectionExposure,
    MeetingPointsExposure, Symbol, TraceRow,
};
use crate::ecc::{decode, encode, CodeSpec};
use crate::gf2::{Field, FixedMul};
use crate::hashing::{append_u32_be, ip_hash, serialize_chunk, HashParams, PowerStream, StreamHasher};
use crate::instrument::{
    HashCompare, Instrument, InvariantViolations, LinkObs, MpEndpointReport, PotentialConstants,
};
use crate::protocol_model::{run_noiseless_oracle, ChunkedProtocol, OracleTranscripts, View};
use crate::topology::{build_spanning_tree, RoundSchedule, SpanningTree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("chunked protocol uses K={got}, but this variant needs K={expected}")]
    ChunkBudgetMismatch { expected: usize, got: usize },
    #[error("epsilon must be a finite non-negative rate, got {0}")]
    BadEpsilon(f64),
    #[error("{0}")]
    BadConstants(String),
}

/// Which scheme variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantTag {
    A,
    B,
    C,
}

fn ceil_log2(x: usize) -> usize {
    assert!(x >= 1);
    (usize::BITS - (x - 1).leading_zeros()) as usize
}

/// All width parameters of one variant, derived from the link count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeVariant {
    pub tag: VariantTag,
    /// Chunk budget K; always a multiple of the link count.
    pub k_chunk: usize,
    /// Width of the (outer) transcript hash.
    pub outer_bits: usize,
    /// Bits per hash block actually sent on the wire.
    pub wire_bits: usize,
    /// Fresh per-direction key bits prepended to each exchange (variant C).
    pub s2_bits: usize,
    /// Whether hash seeds come from one shared stream.
    pub shared_randomness: bool,
}

impl SchemeVariant {
    pub fn derive(tag: VariantTag, link_count: usize) -> SchemeVariant {
        let m = link_count;
        assert!(m >= 1);
        let lm = ceil_log2(m).max(1);
        match tag {
            VariantTag::A => SchemeVariant {
                tag,
                k_chunk: m,
                outer_bits: 8,
                wire_bits: 8,
                s2_bits: 0,
                shared_randomness: true,
            },
            VariantTag::B => SchemeVariant {
                tag,
                k_chunk: m * lm,
                outer_bits: 8 * lm,
                wire_bits: 8 * lm,
                s2_bits: 0,
                shared_randomness: false,
            },
            VariantTag::C => {
                let ll = ceil_log2(lm.max(2));
                SchemeVariant {
                    tag,
                    k_chunk: m * ll,
                    outer_bits: 8 * lm,
                    wire_bits: 8,
                    s2_bits: 8 * ll,
                    shared_randomness: true,
                }
            }
        }
    }

    /// Per-direction bit count of one verification exchange: the fresh key
    /// prefix plus five hash blocks.
    pub fn exchange_bits(&self) -> usize {
        self.s2_bits + 5 * self.wire_bits
    }
}

/// Everything a single run needs beyond the chunked protocol itself.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SchemeConfig {
    pub variant: VariantTag,
    pub epsilon: f64,
    #[serde(default = "default_adversary")]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub trial_seed: u64,
    #[serde(default)]
    pub record_trace: bool,
    #[serde(default)]
    pub keep_iteration_snapshots: bool,
    #[serde(default = "PotentialConstants::default")]
    pub constants: PotentialConstants,
}

fn default_adversary() -> AdversarySpec {
    AdversarySpec::Null
}

/// Outcome of one run, stable across replays of the same config and seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub variant: VariantTag,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "K")]
    pub k_chunk: usize,
    pub num_chunks: usize,
    pub iterations: u64,
    pub cc: u64,
    pub err: u64,
    /// Communication of the underlying noiseless protocol.
    pub base_cc: u64,
    pub budget_valid: bool,
    /// Both endpoints of every link hold the content chunks verbatim.
    pub correct: bool,
    pub violations: InvariantViolations,
    pub max_cc_ratio_tenths: u64,
    pub cc_bound_exceeded: u64,
    pub final_soundness: Option<bool>,
}

fn pack_bits(bits: &[bool]) -> u128 {
    bits.iter()
        .enumerate()
        .fold(0u128, |acc, (i, &b)| acc | (u128::from(b) << i))
}

fn draw_bits(rng: &mut ChaCha20Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.gen()).collect()
}

/// Domain-separated deterministic RNG: 8 seed bytes, up to 16 label bytes,
/// and an 8-byte index fill the 32-byte key.
fn rng_for(trial_seed: u64, label: &str, index: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&trial_seed.to_le_bytes());
    let lb = label.as_bytes();
    assert!(lb.len() <= 16);
    key[8..8 + lb.len()].copy_from_slice(lb);
    key[24..].copy_from_slice(&index.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// Expands a short fresh key into an inner-hash seed: the key halves feed the
/// powering generator over a field half the key wide.
fn expand_inner_seed(key: &[bool], inner: HashParams) -> Vec<bool> {
    let half = key.len() / 2;
    let field = Field::new(half as u32);
    let stream = PowerStream::new(field, pack_bits(&key[..half]), pack_bits(&key[half..]));
    stream.bits(0, inner.seed_len() as u128)
}

/// One endpoint's transcript of a link: chunks of ternary symbols plus, per
/// chunk boundary, the cached field evaluation of the serialized prefix so
/// hashes never rescan the transcript.
struct Transcript {
    chunks: Vec<Vec<Option<bool>>>,
    /// evals[i] = (evaluation, x^len) of the serialized first i chunks.
    evals: Vec<(u128, u128)>,
}

impl Transcript {
    fn new() -> Transcript {
        Transcript { chunks: Vec::new(), evals: vec![(0, 1)] }
    }

    fn len(&self) -> usize {
        self.chunks.len()
    }

    fn prefix_eval(&self, chunks: usize) -> u128 {
        self.evals[chunks].0
    }

    fn append(&mut self, hasher: &StreamHasher, symbols: Vec<Option<bool>>) {
        let mut bits = Vec::with_capacity(2 * symbols.len() + 32);
        serialize_chunk(&symbols, self.chunks.len() as u32 + 1, &mut bits);
        let &(eval, pow) = self.evals.last().unwrap();
        self.evals.push(hasher.extend_eval(eval, pow, &bits));
        self.chunks.push(symbols);
    }

    fn truncate_to(&mut self, chunks: usize) {
        self.chunks.truncate(chunks);
        self.evals.truncate(chunks + 1);
    }
}

/// Hash-seed positions for one endpoint of one link: ten seed slices per
/// iteration (five per direction), advanced by one fixed multiplication per
/// iteration instead of rematerializing stream offsets.
struct SeedSource {
    hasher: Rc<StreamHasher>,
    step: Rc<FixedMul>,
    w: [u128; 10],
}

impl SeedSource {
    fn advance(&mut self) {
        for w in self.w.iter_mut() {
            *w = self.step.mul(*w);
        }
    }
}

/// One endpoint's live state on a link.
struct EndpointState {
    transcript: Transcript,
    /// Iterations since the last agreement on this link.
    k: u32,
    /// Disagreements observed on the peer's counter hash.
    e: u32,
    /// Believed matches for the endpoint's two truncation candidates.
    mpc1: u32,
    mpc2: u32,
    /// Link status after the last verification exchange: ready to simulate.
    simulate: bool,
    seeds: SeedSource,
}

struct LinkRuntime {
    u: usize,
    v: usize,
    endpoints: [EndpointState; 2],
    /// Longest common chunk prefix of the two endpoint transcripts.
    g: usize,
}

/// A pending chunk being assembled during the simulation phase.
struct Pending {
    ci: usize,
    slots: Vec<Option<bool>>,
}

/// What one party can see of past base-protocol bits: its own link
/// transcripts plus the chunk currently in flight.
struct PartyView<'a> {
    cp: &'a ChunkedProtocol,
    links: &'a [LinkRuntime],
    pending: &'a [[Option<Pending>; 2]],
    party: usize,
}

impl View for PartyView<'_> {
    fn base_bit(&self, base_round: usize, from: usize, to: usize) -> Option<bool> {
        if self.party != from && self.party != to {
            return None;
        }
        let link = self.cp.graph().link_id(from, to)?;
        let lr = &self.links[link];
        let ep = if self.party == lr.u { 0 } else { 1 };
        let (chunk, rin) = self.cp.base_round_position(base_round)?;
        let layout = self.cp.layout(chunk);
        let slot = layout.link_slots[link]
            .iter()
            .position(|&(r, p)| r == rin && layout.rounds[r][p].from == from)?;
        let t = &lr.endpoints[ep].transcript;
        if chunk <= t.len() {
            return t.chunks[chunk - 1].get(slot).copied().flatten();
        }
        if let Some(pd) = &self.pending[link][ep] {
            if pd.ci == chunk {
                return pd.slots.get(slot).copied().flatten();
            }
        }
        None
    }
}

/// Precomputed half of one link's verification exchange, from one endpoint's
/// perspective: its counter and candidate prefixes, the bits it will send,
/// and the hash blocks it expects the peer's values to produce.
struct MpSide {
    k: u32,
    ktilde: u32,
    t1: usize,
    t2: usize,
    /// Fresh key prefix plus five wire blocks.
    sent: Vec<bool>,
    /// Per comparison block, the hash of this endpoint's own value under the
    /// peer's seed slice. For variant C these are outer digests awaiting the
    /// received inner key.
    expected: Vec<Vec<bool>>,
    s2: Vec<bool>,
}

/// The full simulator for one run.
pub struct Engine<'a> {
    cp: &'a ChunkedProtocol,
    variant: SchemeVariant,
    tree: SpanningTree,
    schedule: RoundSchedule,
    channel: ChannelEngine,
    links: Vec<LinkRuntime>,
    party_rng: Vec<ChaCha20Rng>,
    instrument: Instrument,
    iterations_total: u64,
    iteration: u64,
    corrupted_links: Vec<bool>,
    baseline_taken: bool,
    oracle: OracleTranscripts,
    inner_params: Option<HashParams>,
}

pub fn run_scheme(cp: &ChunkedProtocol, cfg: SchemeConfig) -> Result<RunReport, SchemeError> {
    Ok(Engine::new(cp, cfg)?.run())
}

impl<'a> Engine<'a> {
    pub fn new(cp: &'a ChunkedProtocol, cfg: SchemeConfig) -> Result<Engine<'a>, SchemeError> {
        let graph = cp.graph();
        let m = graph.link_count();
        let n = graph.party_count();
        let variant = SchemeVariant::derive(cfg.variant, m);
        if variant.k_chunk != cp.k_chunk {
            return Err(SchemeError::ChunkBudgetMismatch {
                expected: variant.k_chunk,
                got: cp.k_chunk,
            });
        }
        if !cfg.epsilon.is_finite() || cfg.epsilon < 0.0 {
            return Err(SchemeError::BadEpsilon(cfg.epsilon));
        }
        cfg.constants.validate().map_err(SchemeError::BadConstants)?;

        let tree = build_spanning_tree(graph);
        let schedule =
            RoundSchedule::new(variant.exchange_bits(), tree.depth, variant.k_chunk, n);
        let iterations_total = 100 * cp.num_chunks as u64;
        // A transcript gains at most one chunk per iteration, so this bounds
        // the serialized length of any transcript a hash will ever see.
        let max_slot = (0..m)
            .map(|l| {
                (1..=cp.num_content_chunks + 1)
                    .map(|c| cp.layout(c).slot_count(l))
                    .max()
                    .unwrap()
            })
            .max()
            .unwrap();
        let input_len = iterations_total as usize * (2 * max_slot + 32);
        let params = HashParams::new(input_len, variant.outer_bits);

        let code_spec = CodeSpec::new(256);
        let init_rounds = if variant.shared_randomness {
            0
        } else {
            code_spec.block_len_bits() as u64
        };
        let per_iter_cc = 2 * m * variant.exchange_bits() + 2 * (n - 1) + 5 * variant.k_chunk;
        let nominal_cc = init_rounds * m as u64 + iterations_total * per_iter_cc as u64;
        let shape = crate::channel::RunShape {
            party_count: n,
            link_count: m,
            k_chunk: variant.k_chunk,
            epsilon: cfg.epsilon,
            schedule,
            iterations: iterations_total,
            init_rounds,
            nominal_cc,
        };

        // The adversary commits against the run shape before any protocol
        // randomness is drawn.
        let adversary = match &cfg.adversary {
            AdversarySpec::BotSpoof { victim, seed } => {
                let dirs: Vec<usize> = graph
                    .links()
                    .iter()
                    .enumerate()
                    .filter_map(|(l, &(u, v))| {
                        if v == *victim {
                            Some(2 * l)
                        } else if u == *victim {
                            Some(2 * l + 1)
                        } else {
                            None
                        }
                    })
                    .collect();
                Adversary::Oblivious(bot_spoof_pattern(&shape, &dirs, *seed))
            }
            spec => spec.build(&shape),
        };
        let mut channel =
            ChannelEngine::new(adversary, cfg.epsilon, variant.k_chunk, 2 * m, cfg.record_trace);
        let mut party_rng: Vec<ChaCha20Rng> =
            (0..n).map(|p| rng_for(cfg.trial_seed, "party", p as u64)).collect();

        let seed_len = params.seed_len() as u128;
        let field = Field::new(128);
        let links: Vec<LinkRuntime> = if variant.shared_randomness {
            let mut crs = rng_for(cfg.trial_seed, "crs", 0);
            let x: u128 = crs.gen();
            let y: u128 = crs.gen();
            let stream = PowerStream::new(field, x, y);
            let hasher = Rc::new(StreamHasher::new(stream, params));
            let stride = m as u128 * 10 * seed_len;
            let step = Rc::new(FixedMul::new(field, field.pow(x, stride)));
            graph
                .links()
                .iter()
                .enumerate()
                .map(|(l, &(u, v))| {
                    let mut w = [0u128; 10];
                    for (q, wq) in w.iter_mut().enumerate() {
                        *wq = field.pow(x, (l as u128 * 10 + q as u128) * seed_len + 1);
                    }
                    let mk = || EndpointState {
                        transcript: Transcript::new(),
                        k: 0,
                        e: 0,
                        mpc1: 0,
                        mpc2: 0,
                        simulate: true,
                        seeds: SeedSource { hasher: Rc::clone(&hasher), step: Rc::clone(&step), w },
                    };
                    LinkRuntime { u, v, endpoints: [mk(), mk()], g: 0 }
                })
                .collect()
        } else {
            // Per-link private randomness, sent by the lower endpoint through
            // the noisy channel behind an error-correcting code. Each
            // endpoint keys its hashes off its own view of the exchange.
            let msgs: Vec<Vec<bool>> = graph
                .links()
                .iter()
                .map(|&(u, _)| draw_bits(&mut party_rng[u], 256))
                .collect();
            let codes: Vec<Vec<bool>> = msgs.iter().map(|msg| encode(msg, code_spec)).collect();
            let mut words: Vec<Vec<Option<bool>>> = vec![Vec::new(); m];
            for r in 0..code_spec.block_len_bits() {
                let mut em = vec![Symbol::Silence; 2 * m];
                for l in 0..m {
                    em[2 * l] = Symbol::from_bit(codes[l][r]);
                }
                let obs = channel.step_round(&em);
                for l in 0..m {
                    words[l].push(obs[2 * l].as_bit());
                }
            }
            graph
                .links()
                .iter()
                .enumerate()
                .map(|(l, &(u, v))| {
                    let decoded = decode(&words[l], code_spec).bits;
                    let endpoints = [&msgs[l], &decoded].map(|bits| {
                        let x = pack_bits(&bits[..128]);
                        let y = pack_bits(&bits[128..]);
                        let stream = PowerStream::new(field, x, y);
                        let hasher = Rc::new(StreamHasher::new(stream, params));
                        let step = Rc::new(FixedMul::new(field, field.pow(x, 10 * seed_len)));
                        let mut w = [0u128; 10];
                        for (q, wq) in w.iter_mut().enumerate() {
                            *wq = field.pow(x, q as u128 * seed_len + 1);
                        }
                        EndpointState {
                            transcript: Transcript::new(),
                            k: 0,
                            e: 0,
                            mpc1: 0,
                            mpc2: 0,
                            simulate: true,
                            seeds: SeedSource { hasher, step, w },
                        }
                    });
                    LinkRuntime { u, v, endpoints, g: 0 }
                })
                .collect()
        };

        let inner_params = (variant.s2_bits > 0)
            .then(|| HashParams::new(variant.outer_bits, variant.wire_bits));
        let instrument = Instrument::new(
            cfg.constants,
            variant.k_chunk,
            m,
            cfg.keep_iteration_snapshots,
        );
        let oracle = run_noiseless_oracle(cp);

        Ok(Engine {
            cp,
            variant,
            tree,
            schedule,
            channel,
            links,
            party_rng,
            instrument,
            iterations_total,
            iteration: 0,
            corrupted_links: vec![false; m],
            baseline_taken: false,
            oracle,
            inner_params,
        })
    }

    pub fn variant(&self) -> &SchemeVariant {
        &self.variant
    }

    pub fn iterations_total(&self) -> u64 {
        self.iterations_total
    }

    pub fn instrument(&self) -> &Instrument {
        &self.instrument
    }

    pub fn ledger(&self) -> &BudgetLedger {
        self.channel.ledger()
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.channel.trace()
    }

    pub fn link_lengths(&self, link: usize) -> [usize; 2] {
        [0, 1].map(|ep| self.links[link].endpoints[ep].transcript.len())
    }

    pub fn link_common_prefix(&self, link: usize) -> usize {
        self.links[link].g
    }

    /// Both endpoints' (k, e) verification counters on a link.
    pub fn link_counters(&self, link: usize) -> [(u32, u32); 2] {
        [0, 1].map(|ep| {
            let s = &self.links[link].endpoints[ep];
            (s.k, s.e)
        })
    }

    pub fn link_simulate(&self, link: usize) -> [bool; 2] {
        [0, 1].map(|ep| self.links[link].endpoints[ep].simulate)
    }

    /// Test harness: plants a length divergence on one link. Both endpoints
    /// get `common` all-zero chunks; endpoint 0 gets `extra` more.
    pub fn inject_divergence(&mut self, link: usize, common: usize, extra: usize) {
        for ep in 0..2 {
            let hasher = Rc::clone(&self.links[link].endpoints[ep].seeds.hasher);
            let st = &mut self.links[link].endpoints[ep];
            st.transcript = Transcript::new();
            st.k = 0;
            st.e = 0;
            st.mpc1 = 0;
            st.mpc2 = 0;
            st.simulate = true;
            let total = common + if ep == 0 { extra } else { 0 };
            for i in 0..total {
                let slots = self.cp.layout(i + 1).slot_count(link);
                st.transcript.append(&hasher, vec![Some(false); slots]);
            }
        }
        self.links[link].g = common;
    }

    fn dir(&self, link: usize, ep: usize) -> usize {
        2 * link + ep
    }

    fn dir_between(&self, from: usize, to: usize) -> usize {
        let l = self.cp.graph().link_id(from, to).expect("tree edge is a graph edge");
        self.dir(l, usize::from(from > to))
    }

    /// Steps the channel one round and marks links the noise touched.
    fn step(&mut self, emissions: &[Symbol]) -> Vec<Symbol> {
        let obs = self.channel.step_round(emissions);
        for (d, (&sent, &seen)) in emissions.iter().zip(&obs).enumerate() {
            if sent != seen {
                self.corrupted_links[d / 2] = true;
            }
        }
        obs
    }

    fn live_min(&self, party: usize) -> usize {
        self.cp
            .graph()
            .neighbors(party)
            .iter()
            .map(|&w| {
                let l = self.cp.graph().link_id(party, w).unwrap();
                let ep = usize::from(party > w);
                self.links[l].endpoints[ep].transcript.len()
            })
            .min()
            .expect("every party has a neighbor")
    }

    fn link_obs(&self) -> Vec<LinkObs> {
        self.links
            .iter()
            .map(|lr| LinkObs {
                len: [lr.endpoints[0].transcript.len(), lr.endpoints[1].transcript.len()],
                g: lr.g,
                k: [lr.endpoints[0].k, lr.endpoints[1].k],
                e: [lr.endpoints[0].e, lr.endpoints[1].e],
            })
            .collect()
    }

    pub fn run(&mut self) -> RunReport {
        while self.iteration < self.iterations_total {
            self.iterate_once();
        }
        self.report()
    }

    pub fn report(&self) -> RunReport {
        let graph = self.cp.graph();
        let content = self.cp.num_content_chunks;
        let correct = self.links.iter().enumerate().all(|(l, lr)| {
            lr.endpoints.iter().all(|ep| {
                ep.transcript.len() >= content
                    && ep.transcript.chunks[..content] == self.oracle.per_link[l][..content]
            })
        });
        let ledger = self.channel.ledger();
        RunReport {
            variant: self.variant.tag,
            n: graph.party_count(),
            m: graph.link_count(),
            k_chunk: self.variant.k_chunk,
            num_chunks: self.cp.num_chunks,
            iterations: self.iteration,
            cc: ledger.cc,
            err: ledger.err,
            base_cc: self.cp.base.cc() as u64,
            budget_valid: ledger.budget_valid(),
            correct,
            violations: self.instrument.violations(),
            max_cc_ratio_tenths: self.instrument.max_cc_ratio_tenths(),
            cc_bound_exceeded: self.instrument.cc_bound_exceeded(),
            final_soundness: self.instrument.final_soundness(self.cp.num_chunks),
        }
    }

    pub fn iterate_once(&mut self) {
        if !self.baseline_taken {
            let obs = self.link_obs();
            let ledger = *self.channel.ledger();
            self.instrument.baseline(&obs, ledger.cc, ledger.err);
            self.baseline_taken = true;
        }
        self.corrupted_links.iter_mut().for_each(|b| *b = false);

        let statuses = self.meeting_points_phase();
        let net = self.flag_passing_phase(&statuses);
        self.simulation_phase(&net);
        self.rewind_phase();

        for lr in self.links.iter_mut() {
            for ep in lr.endpoints.iter_mut() {
                ep.seeds.advance();
            }
        }
        self.iteration += 1;
        let obs = self.link_obs();
        let ledger = *self.channel.ledger();
        let corrupted = self.corrupted_links.clone();
        self.instrument.finish_iteration(&obs, ledger.cc, ledger.err, &corrupted);
    }

    /// Builds one endpoint's half of a link's verification exchange from its
    /// current state. The counter was already bumped for this iteration.
    fn mp_build_side(&self, link: usize, ep: usize, s2: Vec<bool>) -> MpSide {
        let st = &self.links[link].endpoints[ep];
        let hasher = &st.seeds.hasher;
        let k = st.k;
        let ktilde = k.next_power_of_two();
        let len = st.transcript.len();
        let c = len / ktilde as usize;
        let t1 = c * ktilde as usize;
        let t2 = t1.saturating_sub(ktilde as usize);

        let mut kb = Vec::with_capacity(32);
        append_u32_be(k, &mut kb);
        let k_dual = hasher.dual(hasher.eval_bits(&kb));
        let t1_dual = hasher.dual(st.transcript.prefix_eval(t1));
        let t2_dual = hasher.dual(st.transcript.prefix_eval(t2));

        let send_inputs = [k_dual, t1_dual, t1_dual, t2_dual, t2_dual];
        let recv_inputs = [k_dual, t1_dual, t2_dual, t1_dual, t2_dual];
        let q_send = 5 * ep;
        let q_recv = 5 * (1 - ep);

        let inner = self
            .inner_params
            .map(|p| (p, expand_inner_seed(&s2, p)));
        let mut sent = s2.clone();
        for j in 0..5 {
            let block = hasher.hash_dual(st.seeds.w[q_send + j], send_inputs[j]);
            match &inner {
                Some((p, seed)) => sent.extend(ip_hash(&block, seed, *p)),
                None => sent.extend(block),
            }
        }
        let expected = (0..5)
            .map(|j| hasher.hash_dual(st.seeds.w[q_recv + j], recv_inputs[j]))
            .collect();
        MpSide { k, ktilde, t1, t2, sent, expected, s2 }
    }

    /// The per-link verification exchange. Returns each party's readiness.
    fn meeting_points_phase(&mut self) -> Vec<bool> {
        let m = self.links.len();
        let n = self.cp.graph().party_count();
        let ex = self.variant.exchange_bits();
        let s2n = self.variant.s2_bits;
        let wire = self.variant.wire_bits;

        for lr in self.links.iter_mut() {
            for ep in lr.endpoints.iter_mut() {
                ep.k += 1;
            }
        }
        // Fresh inner keys drawn in a fixed order: links ascending, lower
        // endpoint first.
        let fresh: Vec<[Vec<bool>; 2]> = (0..m)
            .map(|l| {
                let (u, v) = (self.links[l].u, self.links[l].v);
                [u, v].map(|p| draw_bits(&mut self.party_rng[p], s2n))
            })
            .collect();
        let sides: Vec<[MpSide; 2]> = (0..m)
            .map(|l| {
                let [a, b] = fresh[l].clone();
                [self.mp_build_side(l, 0, a), self.mp_build_side(l, 1, b)]
            })
            .collect();

        // True-equality of candidate prefixes: equal lengths inside the
        // common prefix.
        let gs: Vec<usize> = self.links.iter().map(|lr| lr.g).collect();
        let truly = |l: usize, ep: usize| -> [bool; 5] {
            let g = gs[l];
            let (me, peer) = (&sides[l][ep], &sides[l][1 - ep]);
            let eqp = |a: usize, b: usize| a == b && a <= g;
            [
                me.k == peer.k,
                eqp(me.t1, peer.t1),
                eqp(me.t2, peer.t1),
                eqp(me.t1, peer.t2),
                eqp(me.t2, peer.t2),
            ]
        };

        // Show an adaptive adversary the full phase before it starts.
        let exposure = MeetingPointsExposure {
            iteration: self.iteration,
            phase_start_round: self.channel.round(),
            directions: (0..2 * m)
                .map(|d| {
                    let (l, ep) = (d / 2, d % 2);
                    let sender = &sides[l][ep];
                    let receiver = &sides[l][1 - ep];
                    let mut expected = sender.s2.clone();
                    let inner = self
                        .inner_params
                        .map(|p| (p, expand_inner_seed(&sender.s2, p)));
                    for block in &receiver.expected {
                        match &inner {
                            Some((p, seed)) => expected.extend(ip_hash(block, seed, *p)),
                            None => expected.extend(block.clone()),
                        }
                    }
                    let t = truly(l, 1 - ep);
                    DirectionExposure {
                        dir_link: d,
                        sent: sender.sent.clone(),
                        receiver_expected: expected,
                        comparisons: (0..5)
                            .map(|j| (s2n + j * wire, wire, t[j]))
                            .collect(),
                    }
                })
                .collect(),
        };
        self.channel.expose_meeting_points(&exposure);

        // Run the wire rounds, collecting what arrived and what was touched.
        let mut got: Vec<Vec<Option<bool>>> = vec![Vec::with_capacity(ex); 2 * m];
        let mut touched: Vec<Vec<bool>> = vec![Vec::with_capacity(ex); 2 * m];
        for b in 0..ex {
            let em: Vec<Symbol> = (0..2 * m)
                .map(|d| Symbol::from_bit(sides[d / 2][d % 2].sent[b]))
                .collect();
            let obs = self.step(&em);
            for d in 0..2 * m {
                got[d].push(obs[d].as_bit());
                touched[d].push(obs[d] != em[d]);
            }
        }

        // Receiver processing, then state application per endpoint.
        for l in 0..m {
            let mut reports: [MpEndpointReport; 2] =
                [MpEndpointReport::default(), MpEndpointReport::default()];
            let mut truncations: [Option<usize>; 2] = [None, None];
            for ep in 0..2 {
                let inbound = 2 * l + (1 - ep);
                let received = &got[inbound];
                let marked = &touched[inbound];
                let me = &sides[l][ep];

                let s2_corrupt = marked[..s2n].iter().any(|&b| b);
                let expected: Vec<Option<Vec<bool>>> = match self.inner_params {
                    None => me.expected.iter().map(|b| Some(b.clone())).collect(),
                    Some(p) => {
                        let key: Option<Vec<bool>> =
                            received[..s2n].iter().copied().collect();
                        match key {
                            Some(key) => {
                                let seed = expand_inner_seed(&key, p);
                                me.expected
                                    .iter()
                                    .map(|b| Some(ip_hash(b, &seed, p)))
                                    .collect()
                            }
                            None => vec![None; 5],
                        }
                    }
                };
                let t = truly(l, ep);
                let cmp: Vec<HashCompare> = (0..5)
                    .map(|j| {
                        let range = s2n + j * wire..s2n + (j + 1) * wire;
                        let rx: Option<Vec<bool>> =
                            received[range.clone()].iter().copied().collect();
                        let believed = matches!((&rx, &expected[j]), (Some(a), Some(b)) if a == b);
                        HashCompare {
                            believed_equal: believed,
                            truly_equal: t[j],
                            wire_corrupted: s2_corrupt || marked[range].iter().any(|&b| b),
                        }
                    })
                    .collect();

                let st = &mut self.links[l].endpoints[ep];
                if !cmp[0].believed_equal {
                    st.e += 1;
                }
                if st.k == 1 && st.e == 0 && cmp[1].believed_equal {
                    // Transcripts verified equal: resume simulating.
                    st.k = 0;
                    st.mpc1 = 0;
                    st.mpc2 = 0;
                    st.simulate = true;
                    reports[ep] = MpEndpointReport {
                        comparisons: vec![cmp[0], cmp[1]],
                        bumped: None,
                        true_match1: false,
                        true_match2: false,
                        counters_zeroed: true,
                    };
                    continue;
                }
                let bumped = if cmp[1].believed_equal || cmp[3].believed_equal {
                    st.mpc1 += 1;
                    Some(1)
                } else if cmp[2].believed_equal || cmp[4].believed_equal {
                    st.mpc2 += 1;
                    Some(2)
                } else {
                    None
                };
                let mut consumed = vec![cmp[0], cmp[1], cmp[3]];
                if bumped != Some(1) {
                    consumed.push(cmp[2]);
                    consumed.push(cmp[4]);
                }
                let mut zeroed = false;
                if 2 * st.e >= st.k {
                    st.k = 0;
                    st.e = 0;
                    st.mpc1 = 0;
                    st.mpc2 = 0;
                    zeroed = true;
                } else if st.k == me.ktilde {
                    // Cut-point boundary: transition to a candidate the peer
                    // credibly shares, if either got enough votes.
                    if 5 * st.mpc1 > 2 * st.k {
                        truncations[ep] = Some(me.t1);
                        st.k = 0;
                        st.e = 0;
                        zeroed = true;
                    } else if 5 * st.mpc2 > 2 * st.k {
                        truncations[ep] = Some(me.t2);
                        st.k = 0;
                        st.e = 0;
                        zeroed = true;
                    }
                    st.mpc1 = 0;
                    st.mpc2 = 0;
                }
                st.simulate = false;
                reports[ep] = MpEndpointReport {
                    comparisons: consumed,
                    bumped,
                    true_match1: t[1] || t[3],
                    true_match2: t[2] || t[4],
                    counters_zeroed: zeroed,
                };
            }
            for ep in 0..2 {
                if let Some(to) = truncations[ep] {
                    self.links[l].endpoints[ep].transcript.truncate_to(to);
                }
            }
            let lr = &mut self.links[l];
            lr.g = lr
                .g
                .min(lr.endpoints[0].transcript.len())
                .min(lr.endpoints[1].transcript.len());
            self.instrument.record_meeting_points(l, &reports);
        }

        // A party is ready only when every link verified equal at the same
        // length.
        let mut status = vec![true; n];
        for lr in &self.links {
            for (party, ep) in [(lr.u, 0), (lr.v, 1)] {
                if !lr.endpoints[ep].simulate {
                    status[party] = false;
                }
            }
        }
        for p in 0..n {
            if status[p] {
                let lo = self.live_min(p);
                for &w in self.cp.graph().neighbors(p) {
                    let l = self.cp.graph().link_id(p, w).unwrap();
                    let ep = usize::from(p > w);
                    if self.links[l].endpoints[ep].transcript.len() > lo {
                        status[p] = false;
                    }
                }
            }
        }
        status
    }

    /// Aggregates readiness up the spanning tree and broadcasts the result
    /// back down; every party ends with its network-wide go/no-go bit.
    fn flag_passing_phase(&mut self, status: &[bool]) -> Vec<bool> {
        let n = self.cp.graph().party_count();
        let d = self.tree.depth as usize;
        let dirs = 2 * self.links.len();
        let mut up_and = vec![true; n];
        let mut net = vec![false; n];
        for p in 0..2 * d {
            let mut em = vec![Symbol::Silence; dirs];
            for u in 0..n {
                let lam = self.tree.level[u] as usize;
                if lam > 1 && p == d - lam {
                    let parent = self.tree.parent[u].unwrap();
                    em[self.dir_between(u, parent)] =
                        Symbol::from_bit(status[u] && up_and[u]);
                }
                if lam == 1 && p == d {
                    net[u] = status[u] && up_and[u];
                }
                let relay = (lam == 1 && p == d) || (lam > 1 && p == d + lam - 1);
                if relay {
                    for &c in &self.tree.children[u].clone() {
                        em[self.dir_between(u, c)] = Symbol::from_bit(net[u]);
                    }
                }
            }
            let obs = self.step(&em);
            for u in 0..n {
                let lam = self.tree.level[u] as usize;
                for &c in &self.tree.children[u] {
                    if p + lam + 1 == d {
                        let bit = obs[self.dir_between(c, u)].as_bit().unwrap_or(false);
                        up_and[u] &= bit;
                    }
                }
                if lam > 1 && p + 2 == d + lam {
                    let parent = self.tree.parent[u].unwrap();
                    let bit = obs[self.dir_between(parent, u)].as_bit().unwrap_or(false);
                    net[u] = bit && status[u];
                }
            }
        }
        net
    }

    /// One listen round, then 5K rounds in which every undisturbed ready
    /// endpoint simulates its next chunk independently per link.
    fn simulation_phase(&mut self, net: &[bool]) {
        let m = self.links.len();
        let graph = self.cp.graph();

        // Listen round: parties that are not ready raise a stop mark on all
        // their links.
        let mut em = vec![Symbol::Silence; 2 * m];
        for (l, lr) in self.links.iter().enumerate() {
            for (party, ep) in [(lr.u, 0), (lr.v, 1)] {
                if !net[party] {
                    em[2 * l + ep] = Symbol::One;
                }
            }
        }
        let obs = self.step(&em);
        let mut active = vec![[false; 2]; m];
        let mut pending: Vec<[Option<Pending>; 2]> = (0..m).map(|_| [None, None]).collect();
        for (l, lr) in self.links.iter().enumerate() {
            for (party, ep) in [(lr.u, 0), (lr.v, 1)] {
                if net[party] && obs[2 * l + (1 - ep)] != Symbol::One {
                    active[l][ep] = true;
                    let ci = lr.endpoints[ep].transcript.len() + 1;
                    let slots = self.cp.layout(ci).slot_count(l);
                    pending[l][ep] = Some(Pending { ci, slots: Vec::with_capacity(slots) });
                }
            }
        }

        for rc in 0..5 * self.variant.k_chunk {
            // Decide all emissions against the pre-round view.
            let mut em = vec![Symbol::Silence; 2 * m];
            for l in 0..m {
                let (u, v) = (self.links[l].u, self.links[l].v);
                for (party, other, ep) in [(u, v, 0), (v, u, 1)] {
                    let Some(pd) = &pending[l][ep] else { continue };
                    let layout = self.cp.layout(pd.ci);
                    if rc >= layout.rounds.len() {
                        continue;
                    }
                    let sends = layout.rounds[rc]
                        .iter()
                        .any(|s| s.from == party && s.to == other);
                    if sends {
                        let view = PartyView {
                            cp: self.cp,
                            links: &self.links,
                            pending: &pending,
                            party,
                        };
                        let bit = self
                            .cp
                            .simulate_chunk_slot(party, other, pd.ci, rc, &view)
                            .expect("scheduled slot must produce a bit");
                        em[2 * l + ep] = Symbol::from_bit(bit);
                    }
                }
            }
            let obs = self.step(&em);
            // Deliver in slot order: own sends verbatim, peer slots as heard.
            for l in 0..m {
                let (u, v) = (self.links[l].u, self.links[l].v);
                for (party, ep) in [(u, 0), (v, 1)] {
                    let Some(pd) = &mut pending[l][ep] else { continue };
                    let layout = self.cp.layout(pd.ci);
                    if rc >= layout.rounds.len() {
                        continue;
                    }
                    for s in &layout.rounds[rc] {
                        if graph.link_id(s.from, s.to) != Some(l) {
                            continue;
                        }
                        if s.from == party {
                            pd.slots.push(em[2 * l + ep].as_bit());
                        } else {
                            pd.slots.push(obs[2 * l + (1 - ep)].as_bit());
                        }
                    }
                }
            }
        }

        for (l, slot) in pending.into_iter().enumerate() {
            for (ep, pd) in slot.into_iter().enumerate() {
                let Some(pd) = pd else { continue };
                assert_eq!(pd.slots.len(), self.cp.layout(pd.ci).slot_count(l));
                let hasher = Rc::clone(&self.links[l].endpoints[ep].seeds.hasher);
                self.links[l].endpoints[ep]
                    .transcript
                    .append(&hasher, pd.slots);
            }
            let lr = &mut self.links[l];
            let min_len = lr.endpoints[0].transcript.len().min(lr.endpoints[1].transcript.len());
            while lr.g < min_len
                && lr.endpoints[0].transcript.chunks[lr.g] == lr.endpoints[1].transcript.chunks[lr.g]
            {
                lr.g += 1;
            }
        }
    }

    /// Pulls overgrown links back level: any ready endpoint one chunk above
    /// its party's shortest link drops that chunk and tells the peer to do
    /// the same; the wave has a round per party to cross the network.
    fn rewind_phase(&mut self) {
        let m = self.links.len();
        let mut rewound = vec![[false; 2]; m];
        for _ in 0..self.schedule.rounds_rewind {
            let mut em = vec![Symbol::Silence; 2 * m];
            let mut initiated: Vec<(usize, usize)> = Vec::new();
            for (l, lr) in self.links.iter().enumerate() {
                for (party, ep) in [(lr.u, 0), (lr.v, 1)] {
                    let st = &lr.endpoints[ep];
                    if st.simulate
                        && !rewound[l][ep]
                        && st.transcript.len() > self.live_min(party)
                    {
                        em[2 * l + ep] = Symbol::One;
                        initiated.push((l, ep));
                    }
                }
            }
            let obs = self.step(&em);
            for &(l, ep) in &initiated {
                let st = &mut self.links[l].endpoints[ep];
                let len = st.transcript.len();
                st.transcript.truncate_to(len - 1);
                rewound[l][ep] = true;
            }
            for l in 0..m {
                for ep in 0..2 {
                    if obs[2 * l + (1 - ep)] == Symbol::One
                        && self.links[l].endpoints[ep].simulate
                        && !rewound[l][ep]
                    {
                        let st = &mut self.links[l].endpoints[ep];
                        let len = st.transcript.len();
                        st.transcript.truncate_to(len.saturating_sub(1));
                        rewound[l][ep] = true;
                    }
                }
                let lr = &mut self.links[l];
                lr.g = lr
                    .g
                    .min(lr.endpoints[0].transcript.len())
                    .min(lr.endpoints[1].transcript.len());
            }
        }
    }
}
