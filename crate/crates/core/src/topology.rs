//! A small transit-stub physical network.
//!
//! Each autonomous system has a ring of transit routers with stub routers
//! hanging off it; neighbouring systems are joined by a single transit link.
//! The media server and every peer sit behind one access link attached to a
//! router. Core links are assumed uncongested, so only access links carry a
//! bandwidth.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::time::SimDuration;

/// An endpoint of the network. `NodeId(0)` is the media server; peer `p`
/// lives at `NodeId(p + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const SERVER: NodeId = NodeId(0);

    pub fn peer(peer: u32) -> NodeId {
        NodeId(peer + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterKind {
    Transit,
    Stub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessLink {
    pub router: usize,
    pub delay: SimDuration,
    pub up_bps: u64,
    pub down_bps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyParams {
    pub as_count: u32,
    pub routers_per_as: u32,
    pub peer_count: u32,
    pub seed: u64,
    pub access_delay_ms: (f64, f64),
    pub core_delay_ms: (f64, f64),
    pub peer_up_bps: u64,
    pub peer_down_bps: u64,
    pub server_up_bps: u64,
}

impl Default for TopologyParams {
    fn default() -> Self {
        TopologyParams {
            as_count: 2,
            routers_per_as: 4,
            peer_count: 100,
            seed: 0,
            access_delay_ms: (5.0, 10.0),
            core_delay_ms: (1.0, 5.0),
            peer_up_bps: 512_000,
            peer_down_bps: 512_000,
            server_up_bps: 20_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTopology {
    as_count: u32,
    routers_per_as: u32,
    routers: Vec<RouterKind>,
    core_edges: Vec<(usize, usize, SimDuration)>,
    access: Vec<AccessLink>,
    /// All-pairs router distances in microseconds.
    dist: Vec<Vec<u64>>,
}

fn uniform_delay(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> SimDuration {
    let ms = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    SimDuration::from_secs_f64(ms / 1_000.0)
}

pub fn generate_topology(params: &TopologyParams) -> Result<NetworkTopology> {
    if params.peer_count == 0 {
        return Err(Error::invalid("topology.peer_count", "must be at least 1"));
    }
    if params.as_count == 0 {
        return Err(Error::invalid("topology.as_count", "must be at least 1"));
    }
    if params.routers_per_as == 0 {
        return Err(Error::invalid("topology.routers_per_as", "must be at least 1"));
    }
    let (lo, hi) = params.access_delay_ms;
    if !(lo >= 0.0 && hi >= lo) {
        return Err(Error::invalid("topology.access_delay_ms", "need 0 <= min <= max"));
    }
    let (clo, chi) = params.core_delay_ms;
    if !(clo >= 0.0 && chi >= clo) {
        return Err(Error::invalid("topology.core_delay_ms", "need 0 <= min <= max"));
    }
    let mut rng = seeds::substream(params.seed, "topology");
    let r = params.routers_per_as as usize;
    let transit_per_as = r.div_ceil(2);

    let mut routers = Vec::new();
    let mut core_edges = Vec::new();
    for a in 0..params.as_count as usize {
        let base = a * r;
        for i in 0..r {
            routers.push(if i < transit_per_as { RouterKind::Transit } else { RouterKind::Stub });
        }
        // transit ring
        if transit_per_as == 2 {
            core_edges.push((base, base + 1, uniform_delay(&mut rng, params.core_delay_ms)));
        } else if transit_per_as > 2 {
            for i in 0..transit_per_as {
                let j = (i + 1) % transit_per_as;
                core_edges.push((base + i, base + j, uniform_delay(&mut rng, params.core_delay_ms)));
            }
        }
        for i in transit_per_as..r {
            let up = base + rng.random_range(0..transit_per_as);
            core_edges.push((up, base + i, uniform_delay(&mut rng, params.core_delay_ms)));
        }
        if a > 0 {
            core_edges.push((base - r, base, uniform_delay(&mut rng, params.core_delay_ms)));
        }
    }

    let mut access = Vec::with_capacity(params.peer_count as usize + 1);
    access.push(AccessLink {
        router: 0,
        delay: uniform_delay(&mut rng, params.access_delay_ms),
        up_bps: params.server_up_bps,
        down_bps: params.server_up_bps,
    });
    for _ in 0..params.peer_count {
        access.push(AccessLink {
            router: rng.random_range(0..routers.len()),
            delay: uniform_delay(&mut rng, params.access_delay_ms),
            up_bps: params.peer_up_bps,
            down_bps: params.peer_down_bps,
        });
    }
    Ok(NetworkTopology::assemble(params.as_count, params.routers_per_as, routers, core_edges, access))
}

impl NetworkTopology {
    fn assemble(
        as_count: u32,
        routers_per_as: u32,
        routers: Vec<RouterKind>,
        core_edges: Vec<(usize, usize, SimDuration)>,
        access: Vec<AccessLink>,
    ) -> Self {
        let n = routers.len();
        let mut adj = vec![Vec::new(); n];
        for &(a, b, d) in &core_edges {
            adj[a].push((b, d.0));
            adj[b].push((a, d.0));
        }
        let dist = (0..n).map(|src| dijkstra(&adj, src)).collect();
        NetworkTopology { as_count, routers_per_as, routers, core_edges, access, dist }
    }

    /// A single router with the server and every peer attached to it.
    /// `peers` lists `(access delay, up bps, down bps)` per peer.
    pub fn star(server_delay: SimDuration, server_up_bps: u64, peers: &[(SimDuration, u64, u64)]) -> Self {
        let mut access = vec![AccessLink { router: 0, delay: server_delay, up_bps: server_up_bps, down_bps: server_up_bps }];
        access.extend(peers.iter().map(|&(delay, up_bps, down_bps)| AccessLink { router: 0, delay, up_bps, down_bps }));
        NetworkTopology::assemble(1, 1, vec![RouterKind::Transit], Vec::new(), access)
    }

    pub fn as_count(&self) -> u32 {
        self.as_count
    }

    pub fn routers_per_as(&self) -> u32 {
        self.routers_per_as
    }

    pub fn router_count(&self) -> usize {
        self.routers.len()
    }

    pub fn core_edges(&self) -> &[(usize, usize, SimDuration)] {
        &self.core_edges
    }

    /// Number of peers (endpoints other than the server).
    pub fn peer_count(&self) -> u32 {
        self.access.len() as u32 - 1
    }

    pub fn access_link(&self, node: NodeId) -> Result<&AccessLink> {
        self.access.get(node.0 as usize).ok_or(Error::UnknownNode(node.0))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &AccessLink)> {
        self.access.iter().enumerate().map(|(i, l)| (NodeId(i as u32), l))
    }

    /// One-way delay between two endpoints: both access links plus the
    /// shortest core path between their routers.
    pub fn path_latency(&self, a: NodeId, b: NodeId) -> Result<SimDuration> {
        let la = self.access_link(a)?;
        let lb = self.access_link(b)?;
        if a == b {
            return Ok(SimDuration::ZERO);
        }
        Ok(SimDuration(la.delay.0 + self.dist[la.router][lb.router] + lb.delay.0))
    }

    /// Line-oriented dump: endpoints first (`0` server, then peers), then
    /// routers, then access and core edges. Delays in milliseconds.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let endpoints = self.access.len();
        for (i, l) in self.access.iter().enumerate() {
            let kind = if i == 0 { "server" } else { "peer" };
            writeln!(out, "NODE {i} {kind} {} {} {}", ms(l.delay), l.up_bps, l.down_bps).unwrap();
        }
        for (i, k) in self.routers.iter().enumerate() {
            let kind = match k {
                RouterKind::Transit => "transit",
                RouterKind::Stub => "stub",
            };
            writeln!(out, "NODE {} {kind} 0.000 0 0", endpoints + i).unwrap();
        }
        for (i, l) in self.access.iter().enumerate() {
            writeln!(out, "EDGE {i} {} {}", endpoints + l.router, ms(l.delay)).unwrap();
        }
        for &(a, b, d) in &self.core_edges {
            writeln!(out, "EDGE {} {} {}", endpoints + a, endpoints + b, ms(d)).unwrap();
        }
        out
    }
}

fn ms(d: SimDuration) -> String {
    format!("{}.{:03}", d.0 / 1_000, d.0 % 1_000)
}

fn dijkstra(adj: &[Vec<(usize, u64)>], src: usize) -> Vec<u64> {
    let mut dist = vec![u64::MAX; adj.len()];
    let mut heap = BinaryHeap::new();
    dist[src] = 0;
    heap.push(Reverse((0u64, src)));
    while let Some(Reverse((d, u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((nd, v)));
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(as_count: u32, routers: u32, peers: u32, seed: u64) -> TopologyParams {
        TopologyParams { as_count, routers_per_as: routers, peer_count: peers, seed, ..Default::default() }
    }

    #[test]
    fn smallest_topology_is_a_star() {
        let t = generate_topology(&params(1, 1, 1, 7)).unwrap();
        assert_eq!(t.router_count(), 1);
        assert!(t.core_edges().is_empty());
        assert_eq!(t.peer_count(), 1);
        let s = t.access_link(NodeId::SERVER).unwrap().delay;
        let p = t.access_link(NodeId::peer(0)).unwrap().delay;
        assert_eq!(t.path_latency(NodeId::SERVER, NodeId::peer(0)).unwrap(), s + p);
    }

    #[test]
    fn same_seed_same_dump() {
        let a = generate_topology(&params(2, 4, 50, 1)).unwrap();
        let b = generate_topology(&params(2, 4, 50, 1)).unwrap();
        assert_eq!(a.dump(), b.dump());
        let c = generate_topology(&params(2, 4, 50, 2)).unwrap();
        assert_ne!(a.dump(), c.dump());
    }

    #[test]
    fn access_delays_and_bandwidth_defaults() {
        for seed in 0..20 {
            let t = generate_topology(&params(3, 5, 80, seed)).unwrap();
            for (id, l) in t.nodes() {
                assert!(l.delay >= SimDuration::from_millis(5) && l.delay <= SimDuration::from_millis(10));
                if id == NodeId::SERVER {
                    assert_eq!(l.up_bps, 20_000_000);
                } else {
                    assert_eq!((l.up_bps, l.down_bps), (512_000, 512_000));
                }
            }
        }
    }

    #[test]
    fn zero_peers_rejected() {
        assert!(generate_topology(&params(1, 1, 0, 0)).is_err());
    }

    #[test]
    fn latency_is_symmetric_with_zero_diagonal() {
        let t = generate_topology(&params(2, 4, 30, 3)).unwrap();
        for a in 0..=30 {
            for b in 0..=30 {
                let (a, b) = (NodeId(a), NodeId(b));
                assert_eq!(t.path_latency(a, b).unwrap(), t.path_latency(b, a).unwrap());
            }
            assert_eq!(t.path_latency(NodeId(a), NodeId(a)).unwrap(), SimDuration::ZERO);
        }
        assert!(matches!(t.path_latency(NodeId(0), NodeId(31)), Err(Error::UnknownNode(31))));
    }

    #[test]
    fn latency_matches_floyd_warshall() {
        let t = generate_topology(&params(3, 4, 10, 11)).unwrap();
        let n = t.router_count();
        let mut fw = vec![vec![u64::MAX / 4; n]; n];
        for (i, row) in fw.iter_mut().enumerate() {
            row[i] = 0;
        }
        for &(a, b, d) in t.core_edges() {
            fw[a][b] = fw[a][b].min(d.0);
            fw[b][a] = fw[b][a].min(d.0);
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if fw[i][k] + fw[k][j] < fw[i][j] {
                        fw[i][j] = fw[i][k] + fw[k][j];
                    }
                }
            }
        }
        for a in 0..=10u32 {
            for b in 0..=10u32 {
                if a == b {
                    continue;
                }
                let (la, lb) = (t.access_link(NodeId(a)).unwrap(), t.access_link(NodeId(b)).unwrap());
                let expect = la.delay.0 + fw[la.router][lb.router] + lb.delay.0;
                assert_eq!(t.path_latency(NodeId(a), NodeId(b)).unwrap().0, expect);
            }
        }
    }

    #[test]
    fn dump_lists_every_node_and_edge() {
        let t = generate_topology(&params(2, 3, 4, 5)).unwrap();
        let dump = t.dump();
        let nodes = dump.lines().filter(|l| l.starts_with("NODE ")).count();
        let edges = dump.lines().filter(|l| l.starts_with("EDGE ")).count();
        assert_eq!(nodes, 5 + 6);
        assert_eq!(edges, 5 + t.core_edges().len());
        assert!(dump.starts_with("NODE 0 server "));
    }
}
