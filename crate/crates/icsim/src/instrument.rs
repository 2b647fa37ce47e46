//! Omniscient-observer accounting over a run: per-link progress and
//! divergence, wrong-match and hash-collision tracking, and the global
//! potential whose per-iteration growth is the engine's live correctness
//! oracle.
//!
//! Everything here is read-only with respect to the protocol: the engine
//! feeds observations in, and nothing flows back into party decisions. The
//! potential is kept in integer tenths (the only fractional coefficient is
//! 0.9) so every report is exact and byte-stable.

use serde::{Deserialize, Serialize};

/// Weights of the potential terms. The inequalities in `validate` are the
/// ones the monotonicity argument leans on; the defaults satisfy all of them
/// with room to spare.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct PotentialConstants {
    pub c1: i64,
    pub c2: i64,
    pub c3: i64,
    pub c4: i64,
    pub c5: i64,
    pub c6: i64,
    pub c7: i64,
}

impl Default for PotentialConstants {
    fn default() -> PotentialConstants {
        PotentialConstants {
            c1: 4,
            c2: 8,
            c3: 128,
            c4: 512,
            c5: 4096,
            c6: 65536,
            c7: 1 << 21,
        }
    }
}

impl PotentialConstants {
    pub fn validate(&self) -> Result<(), String> {
        let PotentialConstants { c1, c2, c3, c4, c5, c6, c7 } = *self;
        let checks: [(bool, &str); 9] = [
            (2 <= c1 && c1 < c2 && c2 < c3 && c3 < c4 && c4 < c5 && c5 < c6 && c6 < c7, "chain 2 <= C1 < ... < C7"),
            (2 * c2 > 5, "C2 > 2.5"),
            (c3 > 8 * c2 + 1, "C3 > 8*C2 + 1"),
            (c4 > 20, "C4 > 20"),
            (c4 >= 20 * (2 * c1 + 2), "0.05*C4 >= 2*C1 + 2"),
            (c5 > 28 * c3 + 1, "C5 > 28*C3 + 1"),
            (c5 > 2 * c2 + 1, "C5 > 2*C2 + 1"),
            (c6 >= 2 * c3, "C6 >= 2*C3"),
            (c7 >= 32 * c6, "C7 large against C6"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(format!("potential constants violate: {what}"));
            }
        }
        Ok(())
    }
}

/// One hash comparison as the observer saw it: what the party concluded,
/// whether the compared values were really equal, and whether the transmitted
/// hash bits were touched by the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashCompare {
    pub believed_equal: bool,
    pub truly_equal: bool,
    pub wire_corrupted: bool,
}

impl HashCompare {
    /// A collision is a believed match between genuinely different values
    /// with clean wire bits; corrupted bits are already charged as errors.
    pub fn is_collision(&self) -> bool {
        self.believed_equal && !self.truly_equal && !self.wire_corrupted
    }
}

/// What one endpoint did in one verification exchange.
#[derive(Debug, Clone, Default)]
pub struct MpEndpointReport {
    pub comparisons: Vec<HashCompare>,
    /// Which counter the endpoint bumped, if any (1 or 2).
    pub bumped: Option<u8>,
    /// Whether the endpoint's first truncation candidate truly equals one of
    /// the peer's two candidates, and likewise for the second.
    pub true_match1: bool,
    pub true_match2: bool,
    /// The endpoint reset its phase counter k (agreement, back-off reset, or
    /// a transition). Clearing only the match votes at a cut-point boundary
    /// does not count: the wrong-match tally must keep pace with k.
    pub counters_zeroed: bool,
}

impl MpEndpointReport {
    pub fn collision_count(&self) -> u64 {
        self.comparisons.iter().filter(|c| c.is_collision()).count() as u64
    }

    /// One wrong-match tick: a counter bump the truth does not support, or a
    /// true match the endpoint failed to credit. At most 1 per exchange.
    pub fn wrong_match(&self) -> bool {
        match self.bumped {
            Some(1) => !self.true_match1,
            Some(2) => !self.true_match2,
            _ => self.true_match1 || self.true_match2,
        }
    }
}

/// Live per-link protocol state, as sampled at an iteration boundary.
/// Endpoint 0 is the lower party id.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct LinkObs {
    pub len: [usize; 2],
    /// Longest common chunk prefix of the two transcripts.
    pub g: usize,
    pub k: [u32; 2],
    pub e: [u32; 2],
}

/// Per-link derived quantities at an iteration boundary.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct LinkSnapshot {
    pub g: usize,
    /// max(|T| on either side) - g.
    pub b: usize,
    pub phi_tenths: i64,
    pub wm: [u64; 2],
}

/// The full observer state at one iteration boundary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PotentialSnapshot {
    pub iteration: u64,
    pub per_link: Vec<LinkSnapshot>,
    pub g_star: usize,
    pub h_star: usize,
    pub b_star: usize,
    /// Cumulative channel corruptions plus hash collisions.
    pub ehc: u64,
    pub phi_tenths: i64,
    /// Links with an error or collision inside the iteration just ended.
    pub noisy_links: usize,
    pub cc: u64,
    pub err: u64,
}

fn phi_link_tenths(c: &PotentialConstants, obs: &LinkObs, wm: [u64; 2], b: usize) -> i64 {
    let k_sum = (obs.k[0] + obs.k[1]) as i64;
    let e_sum = (obs.e[0] + obs.e[1]) as i64;
    let wm_sum = (wm[0] + wm[1]) as i64;
    let b = b as i64;
    if obs.k[0] == obs.k[1] {
        10 * (c.c3 * b - c.c2 * k_sum + c.c5 * e_sum + 2 * c.c6 * wm_sum)
    } else {
        // 0.9 * C4 * k_sum in tenths.
        10 * c.c3 * b + 9 * c.c4 * k_sum - 10 * c.c4 * e_sum + 10 * c.c6 * wm_sum
    }
}

/// Invariant failures found while observing, with the iteration they first
/// occurred in.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct InvariantViolations {
    pub potential_growth: u64,
    pub first_potential_growth: Option<u64>,
    pub link_bound: u64,
    pub first_link_bound: Option<u64>,
}

impl InvariantViolations {
    pub fn any(&self) -> bool {
        self.potential_growth > 0 || self.link_bound > 0
    }
}

/// The observer. Feed it meeting-points outcomes as they happen and a
/// [`LinkObs`] sweep at every iteration boundary.
pub struct Instrument {
    constants: PotentialConstants,
    k_chunk: usize,
    m: usize,
    wm: Vec<[u64; 2]>,
    collisions: u64,
    /// Links with a collision inside the current iteration.
    iter_collision_links: Vec<bool>,
    snapshots: Vec<PotentialSnapshot>,
    violations: InvariantViolations,
    /// Per-iteration communication against the 10*(1+l)*K reference; the
    /// worst observed ratio numerator/denominator, in tenths.
    max_cc_ratio_tenths: u64,
    cc_bound_exceeded: u64,
    keep_all: bool,
}

impl Instrument {
    pub fn new(constants: PotentialConstants, k_chunk: usize, link_count: usize, keep_all: bool) -> Instrument {
        constants.validate().expect("default-shaped potential constants");
        Instrument {
            constants,
            k_chunk,
            m: link_count,
            wm: vec![[0, 0]; link_count],
            collisions: 0,
            iter_collision_links: vec![false; link_count],
            snapshots: Vec::new(),
            violations: InvariantViolations::default(),
            max_cc_ratio_tenths: 0,
            cc_bound_exceeded: 0,
            keep_all,
        }
    }

    pub fn wm(&self, link: usize) -> [u64; 2] {
        self.wm[link]
    }

    pub fn collisions(&self) -> u64 {
        self.collisions
    }

    pub fn violations(&self) -> InvariantViolations {
        self.violations
    }

    /// Worst per-iteration CC / ((1+l)K) seen, in tenths.
    pub fn max_cc_ratio_tenths(&self) -> u64 {
        self.max_cc_ratio_tenths
    }

    /// Iterations whose communication exceeded 10*(1+l)*K.
    pub fn cc_bound_exceeded(&self) -> u64 {
        self.cc_bound_exceeded
    }

    pub fn snapshots(&self) -> &[PotentialSnapshot] {
        &self.snapshots
    }

    pub fn last_snapshot(&self) -> Option<&PotentialSnapshot> {
        self.snapshots.last()
    }

    /// Accounts one verification exchange on `link` (endpoint 0 = lower id).
    pub fn record_meeting_points(&mut self, link: usize, reports: &[MpEndpointReport; 2]) {
        for (side, rep) in reports.iter().enumerate() {
            let coll = rep.collision_count();
            self.collisions += coll;
            if coll > 0 {
                self.iter_collision_links[link] = true;
            }
            if rep.wrong_match() {
                self.wm[link][side] += 1;
            }
            if rep.counters_zeroed {
                self.wm[link][side] = 0;
            }
        }
    }

    fn build_snapshot(
        &self,
        iteration: u64,
        links: &[LinkObs],
        cc: u64,
        err: u64,
        noisy_links: usize,
    ) -> PotentialSnapshot {
        assert_eq!(links.len(), self.m);
        let c = &self.constants;
        let k = self.k_chunk as i64;
        let m = self.m as i64;
        let mut per_link = Vec::with_capacity(self.m);
        let mut phi: i64 = 0;
        let mut g_star = usize::MAX;
        let mut h_star = 0usize;
        for (l, obs) in links.iter().enumerate() {
            let h = obs.len[0].max(obs.len[1]);
            let b = h - obs.g;
            let phi_link = phi_link_tenths(c, obs, self.wm[l], b);
            // 10 * (K/m) * G in tenths; K is a multiple of m by construction.
            phi += 10 * (k / m) * obs.g as i64 - k * phi_link;
            g_star = g_star.min(obs.g);
            h_star = h_star.max(h);
            per_link.push(LinkSnapshot { g: obs.g, b, phi_tenths: phi_link, wm: self.wm[l] });
        }
        let b_star = h_star - g_star;
        let ehc = err + self.collisions;
        phi += -10 * c.c1 * k * b_star as i64 + 10 * c.c7 * k * ehc as i64;
        PotentialSnapshot {
            iteration,
            per_link,
            g_star,
            h_star,
            b_star,
            ehc,
            phi_tenths: phi,
            noisy_links,
            cc,
            err,
        }
    }

    /// Takes the pre-run snapshot. Must be called once before iterations.
    pub fn baseline(&mut self, links: &[LinkObs], cc: u64, err: u64) {
        assert!(self.snapshots.is_empty());
        let snap = self.build_snapshot(0, links, cc, err, 0);
        self.check_link_bounds(&snap, 0);
        self.snapshots.push(snap);
    }

    fn check_link_bounds(&mut self, snap: &PotentialSnapshot, iteration: u64) {
        for link in &snap.per_link {
            if (link.phi_tenths as i128) < 10 * link.b as i128 {
                self.violations.link_bound += 1;
                self.violations.first_link_bound.get_or_insert(iteration);
            }
        }
    }

    /// Closes an iteration: snapshots the state, checks the growth and
    /// per-link bounds, and resets per-iteration scratch. `noisy_links` is
    /// the number of links that saw a channel corruption this iteration; the
    /// collision-affected links recorded since the previous boundary are
    /// merged in here.
    pub fn finish_iteration(
        &mut self,
        links: &[LinkObs],
        cc: u64,
        err: u64,
        corrupted_links: &[bool],
    ) -> &PotentialSnapshot {
        let prev = self.snapshots.last().expect("baseline before iterations");
        let iteration = prev.iteration + if self.snapshots.len() == 1 { 0 } else { 1 };
        let prev_phi = prev.phi_tenths;
        let prev_cc = prev.cc;
        let noisy = corrupted_links
            .iter()
            .zip(&self.iter_collision_links)
            .filter(|&(&a, &b)| a || b)
            .count();
        let snap = self.build_snapshot(iteration, links, cc, err, noisy);

        if snap.phi_tenths - prev_phi < 10 * self.k_chunk as i64 {
            self.violations.potential_growth += 1;
            self.violations.first_potential_growth.get_or_insert(iteration);
        }
        self.check_link_bounds(&snap, iteration);
        let cc_iter = cc - prev_cc;
        let denom = (1 + noisy as u64) * self.k_chunk as u64;
        self.max_cc_ratio_tenths = self.max_cc_ratio_tenths.max(10 * cc_iter / denom);
        if cc_iter > 10 * denom {
            self.cc_bound_exceeded += 1;
        }

        self.iter_collision_links.iter_mut().for_each(|b| *b = false);
        if !self.keep_all && self.snapshots.len() > 1 {
            self.snapshots.remove(self.snapshots.len() - 1);
            let slot = self.snapshots.len();
            self.snapshots.push(snap);
            debug_assert_eq!(slot, 1);
        } else {
            self.snapshots.push(snap);
        }
        self.snapshots.last().unwrap()
    }

    /// Per-iteration CSV (phi in tenths).
    pub fn csv(&self) -> String {
        let mut out = String::from("iteration,phi_tenths,delta_phi_tenths,g_star,h_star,b_star,ehc,noisy_links,cc,err\n");
        for pair in self.snapshots.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                b.iteration,
                b.phi_tenths,
                b.phi_tenths - a.phi_tenths,
                b.g_star,
                b.h_star,
                b.b_star,
                b.ehc,
                b.noisy_links,
                b.cc,
                b.err
            ));
        }
        out
    }

    /// Termination sanity: a high final potential with negligible error and
    /// collision mass forces full progress. Returns None when the antecedent
    /// does not hold, otherwise whether the conclusion does.
    pub fn final_soundness(&self, num_chunks: usize) -> Option<bool> {
        let snap = self.last_snapshot()?;
        let needed = 10 * (100 * num_chunks * self.k_chunk) as i64;
        if snap.phi_tenths >= needed && snap.ehc * self.constants.c7 as u64 <= num_chunks as u64 {
            Some(snap.g_star >= num_chunks)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(len: usize, m: usize) -> Vec<LinkObs> {
        vec![LinkObs { len: [len, len], g: len, k: [0, 0], e: [0, 0] }; m]
    }

    #[test]
    fn default_constants_validate() {
        PotentialConstants::default().validate().unwrap();
        let mut bad = PotentialConstants::default();
        bad.c3 = bad.c2; // breaks the chain
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fresh_state_has_zero_potential() {
        let mut ins = Instrument::new(PotentialConstants::default(), 4, 2, true);
        ins.baseline(&flat(0, 2), 0, 0);
        assert_eq!(ins.snapshots()[0].phi_tenths, 0);
        assert_eq!(ins.snapshots()[0].b_star, 0);
    }

    #[test]
    fn clean_simulate_iteration_gains_exactly_k() {
        // All links advance one fully agreed chunk: delta = (K/m)*m = K.
        let m = 3;
        let k_chunk = 6;
        let mut ins = Instrument::new(PotentialConstants::default(), k_chunk, m, true);
        ins.baseline(&flat(0, m), 0, 0);
        let s = ins.finish_iteration(&flat(1, m), 10, 0, &vec![false; m]);
        assert_eq!(s.phi_tenths, 10 * k_chunk as i64);
        assert_eq!(ins.violations().potential_growth, 0);
    }

    #[test]
    fn one_chunk_divergence_link_formula() {
        // Equal counters k on both sides, no E/WM: phi_link = C3*B - C2*2k.
        let c = PotentialConstants::default();
        let obs = LinkObs { len: [5, 4], g: 4, k: [3, 3], e: [0, 0] };
        assert_eq!(phi_link_tenths(&c, &obs, [0, 0], 1), 10 * (c.c3 - c.c2 * 6));
        // Unequal counters use the 0.9*C4 branch.
        let obs2 = LinkObs { len: [5, 4], g: 4, k: [3, 2], e: [1, 0] };
        assert_eq!(
            phi_link_tenths(&c, &obs2, [1, 0], 1),
            10 * c.c3 + 9 * c.c4 * 5 - 10 * c.c4 + 10 * c.c6
        );
    }

    #[test]
    fn collision_definition() {
        let mk = |believed, truly, corrupt| HashCompare {
            believed_equal: believed,
            truly_equal: truly,
            wire_corrupted: corrupt,
        };
        assert!(mk(true, false, false).is_collision());
        assert!(!mk(true, true, false).is_collision()); // honest match
        assert!(!mk(true, false, true).is_collision()); // corruption already charged
        assert!(!mk(false, false, false).is_collision()); // honest mismatch
    }

    #[test]
    fn wrong_match_rules() {
        let base = MpEndpointReport::default();
        // No bump, no true match: clean.
        assert!(!base.wrong_match());
        // Bump 1 without truth behind it.
        let r = MpEndpointReport { bumped: Some(1), ..base.clone() };
        assert!(r.wrong_match());
        // Bump 1 with truth: clean.
        let r = MpEndpointReport { bumped: Some(1), true_match1: true, ..base.clone() };
        assert!(!r.wrong_match());
        // Missed true match.
        let r = MpEndpointReport { true_match2: true, ..base.clone() };
        assert!(r.wrong_match());
    }

    #[test]
    fn wm_accumulates_and_zeroes() {
        let mut ins = Instrument::new(PotentialConstants::default(), 2, 1, true);
        let wrong = MpEndpointReport { bumped: Some(1), ..Default::default() };
        ins.record_meeting_points(0, &[wrong.clone(), MpEndpointReport::default()]);
        assert_eq!(ins.wm(0), [1, 0]);
        ins.record_meeting_points(0, &[wrong.clone(), MpEndpointReport::default()]);
        assert_eq!(ins.wm(0), [2, 0]);
        let reset = MpEndpointReport { counters_zeroed: true, ..Default::default() };
        ins.record_meeting_points(0, &[reset, MpEndpointReport::default()]);
        assert_eq!(ins.wm(0), [0, 0]);
    }

    #[test]
    fn collisions_feed_ehc_and_noisy_links() {
        let mut ins = Instrument::new(PotentialConstants::default(), 2, 2, true);
        ins.baseline(&flat(0, 2), 0, 0);
        let colliding = MpEndpointReport {
            comparisons: vec![HashCompare { believed_equal: true, truly_equal: false, wire_corrupted: false }],
            ..Default::default()
        };
        ins.record_meeting_points(1, &[colliding, MpEndpointReport::default()]);
        let snap = ins.finish_iteration(&flat(1, 2), 4, 0, &[true, false]);
        assert_eq!(snap.ehc, 1);
        assert_eq!(snap.noisy_links, 2); // one corrupted link + one colliding link
    }

    #[test]
    fn growth_violation_detected() {
        let mut ins = Instrument::new(PotentialConstants::default(), 2, 1, true);
        ins.baseline(&flat(3, 1), 0, 0);
        // Nothing changes: delta = 0 < K.
        ins.finish_iteration(&flat(3, 1), 1, 0, &[false]);
        assert_eq!(ins.violations().potential_growth, 1);
        assert_eq!(ins.violations().first_potential_growth, Some(0));
    }

    #[test]
    fn link_bound_holds_on_plain_divergence() {
        // B = 2, everything else zero: phi_link = 2*C3 >= B.
        let mut ins = Instrument::new(PotentialConstants::default(), 2, 1, true);
        let obs = [LinkObs { len: [5, 3], g: 3, k: [0, 0], e: [0, 0] }];
        ins.baseline(&obs, 0, 0);
        assert_eq!(ins.violations().link_bound, 0);
        assert_eq!(ins.snapshots()[0].per_link[0].b, 2);
    }

    #[test]
    fn csv_shape_and_determinism() {
        let build = || {
            let mut ins = Instrument::new(PotentialConstants::default(), 2, 1, true);
            ins.baseline(&flat(0, 1), 0, 0);
            ins.finish_iteration(&flat(1, 1), 12, 1, &[true]);
            ins.finish_iteration(&flat(2, 1), 24, 1, &[false]);
            ins.csv()
        };
        let a = build();
        assert_eq!(a, build());
        let lines: Vec<&str> = a.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("iteration,phi_tenths,delta_phi_tenths"));
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("1,"));
    }

    #[test]
    fn soundness_gate() {
        let k_chunk = 2;
        let num_chunks = 1;
        let mut ins = Instrument::new(PotentialConstants::default(), k_chunk, 1, false);
        ins.baseline(&flat(0, 1), 0, 0);
        for i in 0..100 {
            ins.finish_iteration(&flat(i + 1, 1), (i as u64 + 1) * 10, 0, &[false]);
        }
        // phi = 100 * K * 10 tenths, EHC = 0, g_star = 100 >= 1.
        assert_eq!(ins.final_soundness(num_chunks), Some(true));
    }
}
