//! Communication graphs, the BFS spanning tree used for flag passing, and the
//! fixed per-iteration round budget every party agrees on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("party count {0} too small (need at least 2)")]
    TooFewParties(usize),
    #[error("edge ({0}, {1}) out of range or a self-loop")]
    BadEdge(usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph disconnected; components: {0:?}")]
    Disconnected(Vec<Vec<usize>>),
    #[error("edge list parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// An undirected, connected, simple graph over parties 0..n.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    /// Sorted list of (u, v) pairs with u < v; index in this list is the
    /// link id used throughout the crate.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new(n: usize, mut edges: Vec<(usize, usize)>) -> Result<Graph, TopologyError> {
        if n < 2 {
            return Err(TopologyError::TooFewParties(n));
        }
        for e in edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
            if e.0 == e.1 || e.1 >= n {
                return Err(TopologyError::BadEdge(e.0, e.1));
            }
        }
        edges.sort_unstable();
        if let Some(w) = edges.windows(2).find(|w| w[0] == w[1]) {
            return Err(TopologyError::DuplicateEdge(w[0].0, w[0].1));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for a in adjacency.iter_mut() {
            a.sort_unstable();
        }
        let g = Graph { n, edges, adjacency };
        let comps = g.components();
        if comps.len() != 1 {
            return Err(TopologyError::Disconnected(comps));
        }
        Ok(g)
    }

    fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &self.adjacency[v] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn party_count(&self) -> usize {
        self.n
    }

    pub fn link_count(&self) -> usize {
        self.edges.len()
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Link id of the undirected edge {u, v}.
    pub fn link_id(&self, u: usize, v: usize) -> Option<usize> {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).ok()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        assert!(v < self.n, "party id {v} out of range");
        &self.adjacency[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.link_id(u, v).is_some()
    }

    // Generators.

    pub fn path(n: usize) -> Graph {
        Graph::new(n, (0..n - 1).map(|i| (i, i + 1)).collect()).unwrap()
    }

    pub fn ring(n: usize) -> Graph {
        assert!(n >= 3, "a ring needs at least 3 parties");
        let mut e: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        e.push((0, n - 1));
        Graph::new(n, e).unwrap()
    }

    pub fn star(n: usize, center: usize) -> Graph {
        assert!(center < n);
        Graph::new(n, (0..n).filter(|&i| i != center).map(|i| (center, i)).collect()).unwrap()
    }

    pub fn complete(n: usize) -> Graph {
        let mut e = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                e.push((u, v));
            }
        }
        Graph::new(n, e).unwrap()
    }

    /// G(n, p) conditioned on connectivity: resamples with an advancing seed
    /// until the draw is connected.
    pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Graph {
        use rand::{Rng, SeedableRng};
        let mut attempt = 0u64;
        loop {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed.wrapping_add(attempt));
            let mut e = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.gen_bool(p) {
                        e.push((u, v));
                    }
                }
            }
            if let Ok(g) = Graph::new(n, e) {
                return g;
            }
            attempt += 1;
        }
    }

    /// Parses the edge-list format: first line "n m", then m lines "u v".
    pub fn parse_edge_list(text: &str) -> Result<Graph, TopologyError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (lno, header) = lines.next().ok_or(TopologyError::Parse {
            line: 0,
            reason: "empty input".into(),
        })?;
        let mut it = header.split_whitespace();
        let parse_num = |tok: Option<&str>, line: usize| -> Result<usize, TopologyError> {
            tok.ok_or(TopologyError::Parse { line, reason: "missing field".into() })?
                .parse()
                .map_err(|e| TopologyError::Parse { line, reason: format!("{e}") })
        };
        let n = parse_num(it.next(), lno + 1)?;
        let m = parse_num(it.next(), lno + 1)?;
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let (lno, l) = lines.next().ok_or(TopologyError::Parse {
                line: 0,
                reason: format!("expected {m} edge lines"),
            })?;
            let mut it = l.split_whitespace();
            let u = parse_num(it.next(), lno + 1)?;
            let v = parse_num(it.next(), lno + 1)?;
            edges.push((u, v));
        }
        Graph::new(n, edges)
    }

    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{} {}\n", self.n, self.edges.len());
        for &(u, v) in &self.edges {
            s.push_str(&format!("{u} {v}\n"));
        }
        s
    }
}

/// BFS spanning tree rooted at the lowest party id; levels are 1-based at the
/// root, and `depth` is the maximum level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanningTree {
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub level: Vec<u32>,
    pub depth: u32,
}

pub fn build_spanning_tree(g: &Graph) -> SpanningTree {
    let n = g.party_count();
    let root = 0;
    let mut parent = vec![None; n];
    let mut level = vec![0u32; n];
    let mut children = vec![Vec::new(); n];
    level[root] = 1;
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for &w in g.neighbors(v) {
            if w != root && level[w] == 0 {
                level[w] = level[v] + 1;
                parent[w] = Some(v);
                children[v].push(w);
                queue.push_back(w);
            }
        }
    }
    let depth = *level.iter().max().unwrap();
    SpanningTree { root, parent, children, level, depth }
}

/// Fixed phase lengths of one iteration; identical for every party and every
/// iteration of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub rounds_meeting_points: usize,
    pub rounds_flag_passing: usize,
    pub rounds_simulation: usize,
    pub rounds_rewind: usize,
}

impl RoundSchedule {
    /// `exchange_bits` is the per-direction bit count of one full
    /// meeting-points exchange (five hash widths, plus any fresh seed bits).
    pub fn new(exchange_bits: usize, tree_depth: u32, k_chunk: usize, n: usize) -> RoundSchedule {
        RoundSchedule {
            rounds_meeting_points: exchange_bits,
            rounds_flag_passing: 2 * tree_depth as usize,
            rounds_simulation: 1 + 5 * k_chunk,
            rounds_rewind: n,
        }
    }

    pub fn iteration_length(&self) -> usize {
        self.rounds_meeting_points
            + self.rounds_flag_passing
            + self.rounds_simulation
            + self.rounds_rewind
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_malformed_graphs() {
        assert_eq!(Graph::new(1, vec![]), Err(TopologyError::TooFewParties(1)));
        assert_eq!(Graph::new(3, vec![(0, 0)]), Err(TopologyError::BadEdge(0, 0)));
        assert_eq!(Graph::new(3, vec![(0, 3)]), Err(TopologyError::BadEdge(0, 3)));
        assert_eq!(
            Graph::new(3, vec![(0, 1), (1, 0), (1, 2)]),
            Err(TopologyError::DuplicateEdge(0, 1))
        );
        assert_eq!(
            Graph::new(4, vec![(0, 1), (2, 3)]),
            Err(TopologyError::Disconnected(vec![vec![0, 1], vec![2, 3]]))
        );
    }

    #[test]
    fn neighbor_lists_sorted() {
        let g = Graph::path(3);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(0), &[1]);
        let k4 = Graph::complete(4);
        assert_eq!(k4.neighbors(3), &[0, 1, 2]);
    }

    #[test]
    fn bfs_tree_on_path() {
        let t = build_spanning_tree(&Graph::path(3));
        assert_eq!(t.root, 0);
        assert_eq!(t.level, vec![1, 2, 3]);
        assert_eq!(t.depth, 3);
    }

    #[test]
    fn bfs_tree_on_star_with_offset_center() {
        let t = build_spanning_tree(&Graph::star(4, 2));
        assert_eq!(t.root, 0);
        assert_eq!(t.parent[2], Some(0));
        assert_eq!(t.parent[1], Some(2));
        assert_eq!(t.parent[3], Some(2));
        assert_eq!(t.depth, 3);
    }

    #[test]
    fn bfs_tree_single_edge() {
        let t = build_spanning_tree(&Graph::path(2));
        assert_eq!(t.depth, 2);
        assert_eq!(t.children[0], vec![1]);
    }

    #[test]
    fn levels_match_bfs_distance() {
        // Independent shortest-path check on a few topologies.
        for g in [Graph::ring(7), Graph::complete(5), Graph::erdos_renyi(9, 0.3, 42)] {
            let t = build_spanning_tree(&g);
            let n = g.party_count();
            let mut dist = vec![usize::MAX; n];
            dist[0] = 0;
            let mut q = std::collections::VecDeque::from([0usize]);
            while let Some(v) = q.pop_front() {
                for &w in g.neighbors(v) {
                    if dist[w] == usize::MAX {
                        dist[w] = dist[v] + 1;
                        q.push_back(w);
                    }
                }
            }
            for v in 0..n {
                assert_eq!(t.level[v] as usize - 1, dist[v]);
            }
            // Tree edges must be graph edges, exactly n-1 of them.
            let tree_edges = t.parent.iter().enumerate().filter_map(|(v, p)| p.map(|p| (v, p)));
            assert_eq!(tree_edges.clone().count(), n - 1);
            for (v, p) in tree_edges {
                assert!(g.has_edge(v, p));
            }
        }
    }

    #[test]
    fn deterministic_tree() {
        let a = build_spanning_tree(&Graph::ring(8));
        let b = build_spanning_tree(&Graph::ring(8));
        assert_eq!(a, b);
    }

    #[test]
    fn edge_list_roundtrip() {
        let g = Graph::star(5, 1);
        let parsed = Graph::parse_edge_list(&g.to_edge_list()).unwrap();
        assert_eq!(g, parsed);
        assert!(matches!(
            Graph::parse_edge_list("3 1\n0"),
            Err(TopologyError::Parse { .. })
        ));
    }

    #[test]
    fn link_ids_are_sorted_positions() {
        let g = Graph::ring(4);
        assert_eq!(g.links(), &[(0, 1), (0, 3), (1, 2), (2, 3)]);
        assert_eq!(g.link_id(3, 0), Some(1));
        assert_eq!(g.link_id(0, 2), None);
    }

    #[test]
    fn erdos_renyi_connected_and_deterministic() {
        let a = Graph::erdos_renyi(10, 0.25, 7);
        let b = Graph::erdos_renyi(10, 0.25, 7);
        assert_eq!(a, b);
        assert_eq!(a.components().len(), 1);
    }

    #[test]
    fn round_schedule_totals() {
        let rs = RoundSchedule::new(40, 3, 5, 6);
        assert_eq!(rs.rounds_simulation, 26);
        assert_eq!(rs.rounds_flag_passing, 6);
        assert_eq!(rs.iteration_length(), 40 + 6 + 26 + 6);
    }
}
