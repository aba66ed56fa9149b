//! Connected undirected networks.
//!
//! Nodes are `0..n` internally; the text format and any user-facing output
//! use 1-based labels. Every undirected edge `{i, j}` with `i < j` at edge
//! index `q` is viewed as two arcs: `(i, j)` at arc index `q` and `(j, i)` at
//! arc index `q + E`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ConsensusError, Result};
use crate::rng::Stream;

/// An undirected, connected, simple graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list, validating every invariant.
    ///
    /// Edges may be given in any order and orientation; they are stored as
    /// `(min, max)` pairs sorted lexicographically, which fixes the arc
    /// enumeration.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n < 2 {
            return Err(ConsensusError::param(format!(
                "graph needs at least 2 nodes, got {n}"
            )));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(ConsensusError::param(format!(
                    "edge ({}, {}) references a node outside 1..={n}",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(ConsensusError::param(format!("self-loop at node {}", a + 1)));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        if let Some(w) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(ConsensusError::param(format!(
                "duplicate edge ({}, {})",
                w[0].0 + 1,
                w[0].1 + 1
            )));
        }
        let e = canon.len();
        if e < n - 1 || e > max_edges(n) {
            return Err(ConsensusError::param(format!(
                "edge count {e} outside [{}, {}] for {n} nodes",
                n - 1,
                max_edges(n)
            )));
        }

        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &canon {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let g = Graph {
            n,
            edges: canon,
            neighbors,
        };
        if !g.is_connected() {
            return Err(ConsensusError::param("graph is not connected"));
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of undirected edges `E`.
    pub fn e(&self) -> usize {
        self.edges.len()
    }

    /// Number of arcs, `2E`.
    pub fn arcs(&self) -> usize {
        2 * self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Tail and head of arc `q` in the fixed enumeration.
    pub fn arc(&self, q: usize) -> (usize, usize) {
        let e = self.edges.len();
        if q < e {
            self.edges[q]
        } else {
            let (i, j) = self.edges[q - e];
            (j, i)
        }
    }

    /// `2E / N`.
    pub fn average_degree(&self) -> f64 {
        average_degree(self)
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n
    }

    /// Renders the edge-list text format: `N E` then one 1-based `i j` per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {}\n", self.n, self.e());
        for &(i, j) in &self.edges {
            let _ = writeln!(out, "{} {}", i + 1, j + 1);
        }
        out
    }

    /// Parses the edge-list text format. Blank lines and `#` comments are skipped.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        let (hline, header) = lines.next().ok_or(ConsensusError::Parse {
            line: 1,
            msg: "missing \"N E\" header".into(),
        })?;
        let (n, e) = parse_pair(header, hline)?;

        let mut edges = Vec::with_capacity(e);
        for (line, l) in lines {
            let (a, b) = parse_pair(l, line)?;
            if a == 0 || b == 0 {
                return Err(ConsensusError::Parse {
                    line,
                    msg: "node labels are 1-based".into(),
                });
            }
            edges.push((a - 1, b - 1));
        }
        if edges.len() != e {
            return Err(ConsensusError::Parse {
                line: hline,
                msg: format!("header declares {e} edges, found {}", edges.len()),
            });
        }
        Graph::from_edges(n, &edges)
    }

    pub fn read_edge_list(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConsensusError::io(path, e))?;
        Graph::parse_edge_list(&text)
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| ConsensusError::io(path, e))
    }
}

fn parse_pair(s: &str, line: usize) -> Result<(usize, usize)> {
    let mut it = s.split_whitespace();
    let mut next = || -> Result<usize> {
        it.next()
            .ok_or_else(|| ConsensusError::Parse {
                line,
                msg: "expected two integers".into(),
            })?
            .parse::<usize>()
            .map_err(|e| ConsensusError::Parse {
                line,
                msg: e.to_string(),
            })
    };
    let a = next()?;
    let b = next()?;
    if it.next().is_some() {
        return Err(ConsensusError::Parse {
            line,
            msg: "trailing tokens".into(),
        });
    }
    Ok((a, b))
}

/// `N(N-1)/2`.
pub fn max_edges(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

pub fn average_degree(g: &Graph) -> f64 {
    2.0 * g.e() as f64 / g.n() as f64
}

/// Star on `n` nodes centred at node 0 (node 1 in 1-based labels).
pub fn star(n: usize) -> Result<Graph> {
    if n < 2 {
        return Err(ConsensusError::param(format!("star needs n >= 2, got {n}")));
    }
    let edges: Vec<_> = (1..n).map(|j| (0, j)).collect();
    Graph::from_edges(n, &edges)
}

pub fn complete(n: usize) -> Result<Graph> {
    if n < 2 {
        return Err(ConsensusError::param(format!(
            "complete graph needs n >= 2, got {n}"
        )));
    }
    Graph::from_edges(n, &complete_edges(n))
}

fn complete_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Random connected graph with exactly `e` edges.
///
/// Starts from the complete graph and repeatedly picks a uniformly random
/// remaining edge, deleting it unless it is a bridge, until `e` edges
/// remain. A connected graph with more than `n - 1` edges always contains
/// a non-bridge, so the loop terminates.
pub fn gen_random_connected(n: usize, e: usize, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(ConsensusError::param(format!("need n >= 2, got {n}")));
    }
    if e < n - 1 || e > max_edges(n) {
        return Err(ConsensusError::param(format!(
            "infeasible edge count {e} for {n} nodes (need {}..={})",
            n - 1,
            max_edges(n)
        )));
    }
    let mut stream = Stream::new(seed);
    let mut remaining = complete_edges(n);
    let mut adj = vec![vec![true; n]; n];
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = false;
    }
    let mut lists: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).collect())
        .collect();
    let mut visit = VisitMarks::new(n);

    while remaining.len() > e {
        let k = stream.index(remaining.len());
        let (u, v) = remaining[k];
        adj[u][v] = false;
        adj[v][u] = false;
        if reachable(&lists, &adj, u, v, &mut visit) {
            remaining.swap_remove(k);
            remove_from(&mut lists[u], v);
            remove_from(&mut lists[v], u);
        } else {
            adj[u][v] = true;
            adj[v][u] = true;
        }
    }
    Graph::from_edges(n, &remaining)
}

fn remove_from(list: &mut Vec<usize>, x: usize) {
    if let Some(p) = list.iter().position(|&y| y == x) {
        list.swap_remove(p);
    }
}

/// Generation-stamped visited marks, reused across the many searches of the generator.
struct VisitMarks {
    stamp: Vec<u32>,
    current: u32,
    queue: VecDeque<usize>,
}

impl VisitMarks {
    fn new(n: usize) -> Self {
        VisitMarks {
            stamp: vec![0; n],
            current: 0,
            queue: VecDeque::with_capacity(n),
        }
    }
}

/// Breadth-first search from `src` for `dst`, skipping adjacency entries
/// already cleared in `adj`. Exits as soon as `dst` is seen, which in dense
/// graphs is usually at the first level.
fn reachable(
    lists: &[Vec<usize>],
    adj: &[Vec<bool>],
    src: usize,
    dst: usize,
    marks: &mut VisitMarks,
) -> bool {
    marks.current += 1;
    let cur = marks.current;
    marks.queue.clear();
    marks.queue.push_back(src);
    marks.stamp[src] = cur;
    while let Some(u) = marks.queue.pop_front() {
        for &w in &lists[u] {
            if !adj[u][w] || marks.stamp[w] == cur {
                continue;
            }
            if w == dst {
                return true;
            }
            marks.stamp[w] = cur;
            marks.queue.push_back(w);
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_graph() {
        let g = gen_random_connected(2, 1, 99).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.arc(0), (0, 1));
        assert_eq!(g.arc(1), (1, 0));
        assert_eq!(g.average_degree(), 1.0);
    }

    #[test]
    fn tree_when_e_is_n_minus_one() {
        for seed in 0..20 {
            let g = gen_random_connected(4, 3, seed).unwrap();
            assert_eq!(g.e(), 3);
        }
    }

    #[test]
    fn handshake_identity() {
        let g = gen_random_connected(50, 500, 7).unwrap();
        assert_eq!(g.degrees().iter().sum::<usize>(), 1000);
        assert_eq!(g.average_degree(), 20.0);
        assert_eq!(average_degree(&g), 20.0);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_random_connected(30, 60, 5).unwrap();
        let b = gen_random_connected(30, 60, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_sizes_rejected() {
        assert!(gen_random_connected(5, 3, 0).is_err());
        assert!(gen_random_connected(5, 11, 0).is_err());
        assert!(gen_random_connected(1, 0, 0).is_err());
        assert!(star(1).is_err());
        assert!(complete(0).is_err());
    }

    #[test]
    fn star_and_complete() {
        assert_eq!(star(3).unwrap().edges(), &[(0, 1), (0, 2)]);
        assert_eq!(star(2).unwrap().e(), 1);
        assert_eq!(star(5).unwrap().degrees(), vec![4, 1, 1, 1, 1]);
        assert!((star(5).unwrap().average_degree() - 8.0 / 5.0).abs() < 1e-15);
        assert_eq!(complete(3).unwrap().e(), 3);
        assert_eq!(complete(2).unwrap().e(), 1);
        assert_eq!(complete(10).unwrap().e(), 45);
    }

    #[test]
    fn invalid_edge_lists() {
        assert!(Graph::from_edges(3, &[(0, 1)]).is_err()); // too few / disconnected
        assert!(Graph::from_edges(4, &[(0, 1), (2, 3), (0, 1)]).is_err()); // duplicate
        assert!(Graph::from_edges(3, &[(0, 0), (0, 1)]).is_err()); // self-loop
        assert!(Graph::from_edges(4, &[(0, 1), (2, 3), (1, 0)]).is_err()); // duplicate reversed
        assert!(Graph::from_edges(4, &[(0, 1), (1, 2), (0, 2)]).is_err()); // disconnected node 3
    }

    #[test]
    fn edge_list_text_format() {
        let g = star(4).unwrap();
        let text = g.to_edge_list();
        assert_eq!(text, "4 3\n1 2\n1 3\n1 4\n");
        assert_eq!(Graph::parse_edge_list(&text).unwrap(), g);

        let commented = "# star\n4 3\n\n2 1\n1 3 # spoke\n4 1\n";
        assert_eq!(Graph::parse_edge_list(commented).unwrap(), g);

        assert!(Graph::parse_edge_list("").is_err());
        assert!(Graph::parse_edge_list("3 2\n1 2\n").is_err());
        assert!(Graph::parse_edge_list("3 2\n0 1\n1 2\n").is_err());
        assert!(Graph::parse_edge_list("3 2\n1 2 3\n2 3\n").is_err());
    }
}
