//! Static communication topologies and diffusion-target sampling.
//!
//! The adjacency is directed: entry `(i, j) > 0` means device `j` may send
//! its model to device `i`, i.e. `j` is an *in-neighbor* of `i` and `i`
//! aggregates from `j`. The exponential graph connects `j -> i` whenever
//! `i = j + 2^k (mod n)` for some `k >= 0` with `2^k < n`, which gives every
//! device exactly `floor(log2(n-1)) + 1` in- and out-neighbors. Ring and star
//! variants are symmetric.
//!
//! Both query directions are exposed because they differ on the exponential
//! digraph: [`TopologyMatrix::in_neighbors`] is the set a device aggregates
//! from, [`TopologyMatrix::out_neighbors`] is the set of devices that cache
//! its model and therefore the pool that diffusion targets are drawn from.

use rand::Rng;
use thiserror::Error;

use crate::rng::Stream;

/// Topology construction and query errors.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("topology requires at least 2 devices, got {0}")]
    TooFewDevices(usize),
    #[error("device index {index} out of range for {n} devices")]
    IndexOutOfRange { index: usize, n: usize },
}

/// Kind of static communication graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    /// `j -> i` iff `i = j + 2^k (mod n)`; O(log n) neighbors per device.
    Exponential,
    /// Bidirectional nearest neighbors.
    Ring,
    /// Hub device 0 connected to every leaf.
    Star,
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopologyKind::Exponential => write!(f, "exponential"),
            TopologyKind::Ring => write!(f, "ring"),
            TopologyKind::Star => write!(f, "star"),
        }
    }
}

/// Row-stochastic adjacency of the communication graph.
///
/// Row `i` holds the static transfer weights from each in-neighbor `j` to
/// `i`. The diagonal is always positive and positive entries of a row are
/// uniform `1 / (in_degree + 1)`; runtime aggregation weights override these,
/// so the static values only encode adjacency.
#[derive(Debug, Clone)]
pub struct TopologyMatrix {
    n: usize,
    kind: TopologyKind,
    adjacency: Vec<f64>,
    in_neighbors: Vec<Vec<usize>>,
    out_neighbors: Vec<Vec<usize>>,
}

/// Offsets `2^k < n`, ascending.
fn power_offsets(n: usize) -> Vec<usize> {
    let mut offs = Vec::new();
    let mut p = 1usize;
    while p < n {
        offs.push(p);
        p *= 2;
    }
    offs
}

/// Build the requested topology over `n >= 2` devices.
pub fn build_topology(kind: TopologyKind, n: usize) -> Result<TopologyMatrix, TopologyError> {
    if n < 2 {
        return Err(TopologyError::TooFewDevices(n));
    }
    // In-neighbor lists in ascending-offset order; sets never contain `i`.
    let in_lists: Vec<Vec<usize>> = (0..n)
        .map(|i| match kind {
            TopologyKind::Exponential => {
                let mut seen = vec![false; n];
                let mut list = Vec::new();
                for o in power_offsets(n) {
                    let j = (i + n - o % n) % n;
                    if j != i && !seen[j] {
                        seen[j] = true;
                        list.push(j);
                    }
                }
                list
            }
            TopologyKind::Ring => {
                let fwd = (i + 1) % n;
                let bwd = (i + n - 1) % n;
                if fwd == bwd {
                    vec![fwd]
                } else {
                    vec![fwd, bwd]
                }
            }
            TopologyKind::Star => {
                if i == 0 {
                    (1..n).collect()
                } else {
                    vec![0]
                }
            }
        })
        .collect();

    let mut adjacency = vec![0.0; n * n];
    for (i, list) in in_lists.iter().enumerate() {
        let w = 1.0 / (list.len() + 1) as f64;
        adjacency[i * n + i] = w;
        for &j in list {
            adjacency[i * n + j] = w;
        }
    }
    let out_lists: Vec<Vec<usize>> = (0..n)
        .map(|i| match kind {
            TopologyKind::Exponential => {
                let mut seen = vec![false; n];
                let mut list = Vec::new();
                for o in power_offsets(n) {
                    let j = (i + o) % n;
                    if j != i && !seen[j] {
                        seen[j] = true;
                        list.push(j);
                    }
                }
                list
            }
            // Symmetric kinds: out = in.
            _ => in_lists[i].clone(),
        })
        .collect();

    Ok(TopologyMatrix {
        n,
        kind,
        adjacency,
        in_neighbors: in_lists,
        out_neighbors: out_lists,
    })
}

impl TopologyMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    /// Static transfer weight from `j` to `i`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n + j]
    }

    fn check(&self, i: usize) -> Result<(), TopologyError> {
        if i >= self.n {
            return Err(TopologyError::IndexOutOfRange { index: i, n: self.n });
        }
        Ok(())
    }

    /// Devices `i` aggregates from: `{ j : weight(i, j) > 0, j != i }`,
    /// ascending-offset order.
    pub fn in_neighbors(&self, i: usize) -> Result<&[usize], TopologyError> {
        self.check(i)?;
        Ok(&self.in_neighbors[i])
    }

    /// Devices that cache `i`'s model: `{ j : weight(j, i) > 0, j != i }`,
    /// ascending-offset order. Diffusion targets come from this set.
    pub fn out_neighbors(&self, i: usize) -> Result<&[usize], TopologyError> {
        self.check(i)?;
        Ok(&self.out_neighbors[i])
    }

    /// One uniformly random diffusion target among `i`'s out-neighbors.
    pub fn sample_diffusion_target(&self, i: usize, rng: &mut Stream) -> Result<usize, TopologyError> {
        self.check(i)?;
        let outs = &self.out_neighbors[i];
        debug_assert!(!outs.is_empty());
        Ok(outs[rng.gen_range(0..outs.len())])
    }

    /// Dump the adjacency as CSV, one row per device.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{}", self.weight(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}
