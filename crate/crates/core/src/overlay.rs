//! Arrival-window sessions, per-session distribution trees and
//! cross-session shortcut neighbours.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::time::{SimDuration, SimTime};
use crate::topology::{NetworkTopology, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PeerId(pub u32);

impl PeerId {
    pub fn node(self) -> NodeId {
        NodeId::peer(self.0)
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Parent {
    Server,
    Peer(PeerId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: SessionId,
    pub window_start: SimTime,
    pub width: SimDuration,
    pub members: BTreeSet<PeerId>,
    pub tree: BTreeMap<PeerId, Parent>,
}

impl Session {
    pub fn window_contains(&self, t: SimTime) -> bool {
        self.window_start <= t && t < self.window_start + self.width
    }

    pub fn children(&self, parent: Parent) -> impl Iterator<Item = PeerId> + '_ {
        self.tree.iter().filter(move |(_, p)| **p == parent).map(|(c, _)| *c)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Membership {
    arrival: SimTime,
    session: SessionId,
    shortcuts: Vec<PeerId>,
    live: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    width: SimDuration,
    max_children: usize,
    sessions: BTreeMap<SessionId, Session>,
    peers: BTreeMap<PeerId, Membership>,
}

impl Overlay {
    /// `max_children` is how many streams a peer's uplink can forward.
    pub fn new(width: SimDuration, max_children: usize) -> Self {
        assert!(width.0 > 0, "session width must be positive");
        Overlay { width, max_children, sessions: BTreeMap::new(), peers: BTreeMap::new() }
    }

    pub fn width(&self) -> SimDuration {
        self.width
    }

    /// Puts an arriving peer into the session whose window holds
    /// `arrival`, attaching it under the closest member with a free
    /// forwarding slot, or under the server.
    pub fn assign_session(&mut self, peer: PeerId, arrival: SimTime, topo: &NetworkTopology) -> Result<&Session> {
        assert!(!self.peers.contains_key(&peer), "peer {peer} already assigned");
        let id = SessionId((arrival.0 / self.width.0) as u32);
        let width = self.width;
        let session = self.sessions.entry(id).or_insert_with(|| Session {
            id,
            window_start: SimTime(id.0 as u64 * width.0),
            width,
            members: BTreeSet::new(),
            tree: BTreeMap::new(),
        });
        let mut best: Option<(SimDuration, PeerId)> = None;
        for &m in &session.members {
            let kids = session.tree.values().filter(|p| **p == Parent::Peer(m)).count();
            if kids >= self.max_children {
                continue;
            }
            let lat = topo.path_latency(peer.node(), m.node())?;
            if best.is_none_or(|b| (lat, m) < b) {
                best = Some((lat, m));
            }
        }
        let parent = best.map_or(Parent::Server, |(_, m)| Parent::Peer(m));
        session.members.insert(peer);
        session.tree.insert(peer, parent);
        self.peers.insert(peer, Membership { arrival, session: id, shortcuts: Vec::new(), live: true });
        Ok(&self.sessions[&id])
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn session_of(&self, peer: PeerId) -> Option<SessionId> {
        self.peers.get(&peer).map(|m| m.session)
    }

    pub fn arrival_of(&self, peer: PeerId) -> Option<SimTime> {
        self.peers.get(&peer).map(|m| m.arrival)
    }

    pub fn is_live(&self, peer: PeerId) -> bool {
        self.peers.get(&peer).is_some_and(|m| m.live)
    }

    /// Live members of `peer`'s session other than `peer` itself.
    pub fn session_mates(&self, peer: PeerId) -> impl Iterator<Item = PeerId> + '_ {
        self.session_of(peer)
            .and_then(|s| self.sessions.get(&s))
            .into_iter()
            .flat_map(|s| s.members.iter().copied())
            .filter(move |m| *m != peer)
    }

    pub fn parent(&self, peer: PeerId) -> Option<Parent> {
        let s = self.session_of(peer)?;
        self.sessions.get(&s)?.tree.get(&peer).copied()
    }

    pub fn live_peers(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.peers.iter().filter(|(_, m)| m.live).map(|(p, _)| *p)
    }

    /// Replaces `peer`'s shortcut list with up to `k` live peers drawn
    /// uniformly without replacement from other sessions.
    pub fn refresh_shortcuts(&mut self, peer: PeerId, k: usize, rng: &mut impl Rng) -> Vec<PeerId> {
        let Some(own) = self.session_of(peer) else {
            return Vec::new();
        };
        let eligible: Vec<PeerId> =
            self.peers.iter().filter(|(_, m)| m.live && m.session != own).map(|(p, _)| *p).collect();
        let mut picked: Vec<PeerId> = eligible.choose_multiple(rng, k.min(eligible.len())).copied().collect();
        picked.sort_unstable();
        if let Some(m) = self.peers.get_mut(&peer) {
            m.shortcuts = picked.clone();
        }
        picked
    }

    /// Current shortcut list with departed peers purged.
    pub fn shortcuts(&mut self, peer: PeerId) -> Vec<PeerId> {
        let Some(own) = self.session_of(peer) else {
            return Vec::new();
        };
        let list = self.peers.get(&peer).map(|m| m.shortcuts.clone()).unwrap_or_default();
        let kept: Vec<PeerId> = list.into_iter().filter(|p| self.is_live(*p)).collect();
        debug_assert!(kept.iter().all(|p| self.session_of(*p) != Some(own)));
        if let Some(m) = self.peers.get_mut(&peer) {
            m.shortcuts.clone_from(&kept);
        }
        kept
    }

    /// Removes `peer` from its session and hands its children to its
    /// parent. Returns the reparented children.
    pub fn handle_departure(&mut self, peer: PeerId) -> Vec<PeerId> {
        let Some(m) = self.peers.get_mut(&peer) else {
            return Vec::new();
        };
        if !m.live {
            return Vec::new();
        }
        m.live = false;
        m.shortcuts.clear();
        let session = self.sessions.get_mut(&m.session).expect("member's session exists");
        session.members.remove(&peer);
        let parent = session.tree.remove(&peer).unwrap_or(Parent::Server);
        let children: Vec<PeerId> = session.children(Parent::Peer(peer)).collect();
        for c in &children {
            session.tree.insert(*c, parent);
        }
        children
    }

    /// True when every session tree reaches the server from each member
    /// without revisiting a node, and tree keys equal the member set.
    pub fn trees_are_rooted(&self) -> bool {
        self.sessions.values().all(|s| {
            if s.tree.keys().copied().collect::<BTreeSet<_>>() != s.members {
                return false;
            }
            s.members.iter().all(|&start| {
                let mut cur = start;
                for _ in 0..=s.members.len() {
                    match s.tree.get(&cur) {
                        Some(Parent::Server) => return true,
                        Some(Parent::Peer(p)) if s.members.contains(p) => cur = *p,
                        _ => return false,
                    }
                }
                false
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use crate::topology::{generate_topology, TopologyParams};

    fn topo(peers: u32) -> NetworkTopology {
        generate_topology(&TopologyParams { peer_count: peers, seed: 3, ..Default::default() }).unwrap()
    }

    fn secs(s: u64) -> SimTime {
        SimTime(s * 1_000_000)
    }

    #[test]
    fn arrivals_in_one_window_share_a_session() {
        let t = topo(4);
        let mut o = Overlay::new(SimDuration::from_secs(120), 1);
        let a = o.assign_session(PeerId(0), secs(10), &t).unwrap().id;
        let b = o.assign_session(PeerId(1), secs(100), &t).unwrap().id;
        let c = o.assign_session(PeerId(2), secs(130), &t).unwrap().id;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(o.parent(PeerId(0)), Some(Parent::Server));
        assert_eq!(o.parent(PeerId(1)), Some(Parent::Peer(PeerId(0))));
        assert_eq!(o.parent(PeerId(2)), Some(Parent::Server));
    }

    #[test]
    fn full_parents_push_new_members_to_the_server() {
        let t = topo(3);
        let mut o = Overlay::new(SimDuration::from_secs(120), 0);
        o.assign_session(PeerId(0), secs(0), &t).unwrap();
        o.assign_session(PeerId(1), secs(1), &t).unwrap();
        assert_eq!(o.parent(PeerId(1)), Some(Parent::Server));
    }

    #[test]
    fn parent_is_closest_member_with_a_slot() {
        let t = topo(6);
        let mut o = Overlay::new(SimDuration::from_secs(120), 5);
        for p in 0..5 {
            o.assign_session(PeerId(p), secs(p as u64), &t).unwrap();
        }
        let Some(Parent::Peer(chosen)) = o.parent(PeerId(4)) else { panic!("expected peer parent") };
        let best = (0..4)
            .map(|m| (t.path_latency(NodeId::peer(4), NodeId::peer(m)).unwrap(), m))
            .min()
            .unwrap();
        assert_eq!(chosen, PeerId(best.1));
    }

    #[test]
    fn poisson_arrivals_satisfy_window_predicate() {
        use rand_distr::{Distribution, Exp};
        let t = topo(200);
        let mut rng = seeds::substream(9, "arrivals");
        let exp = Exp::new(1.0 / 9.0).unwrap();
        let mut o = Overlay::new(SimDuration::from_secs(120), 1);
        let mut now = 0.0;
        for p in 0..200 {
            now += exp.sample(&mut rng);
            o.assign_session(PeerId(p), SimTime::from_secs_f64(now), &t).unwrap();
        }
        for p in 0..200 {
            let s = o.session(o.session_of(PeerId(p)).unwrap()).unwrap();
            assert!(s.members.contains(&PeerId(p)));
            assert!(s.window_contains(o.arrival_of(PeerId(p)).unwrap()));
        }
        let total: usize = o.sessions().map(|s| s.members.len()).sum();
        assert_eq!(total, 200);
        assert!(o.trees_are_rooted());
    }

    #[test]
    fn shortcuts_come_from_other_sessions_only() {
        let t = topo(10);
        let mut o = Overlay::new(SimDuration::from_secs(120), 1);
        o.assign_session(PeerId(0), secs(0), &t).unwrap();
        o.assign_session(PeerId(1), secs(5), &t).unwrap();
        let mut rng = seeds::substream(1, "overlay");
        assert!(o.refresh_shortcuts(PeerId(0), 5, &mut rng).is_empty());

        for p in 2..5 {
            o.assign_session(PeerId(p), secs(200 + p as u64), &t).unwrap();
        }
        let list = o.refresh_shortcuts(PeerId(0), 5, &mut rng);
        assert_eq!(list, vec![PeerId(2), PeerId(3), PeerId(4)]);

        for p in 5..10 {
            o.assign_session(PeerId(p), secs(400 + p as u64), &t).unwrap();
        }
        let a = o.clone().refresh_shortcuts(PeerId(0), 5, &mut seeds::substream(4, "overlay"));
        let b = o.clone().refresh_shortcuts(PeerId(0), 5, &mut seeds::substream(4, "overlay"));
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|p| o.session_of(*p) != o.session_of(PeerId(0))));
    }

    #[test]
    fn departed_shortcuts_are_purged_lazily() {
        let t = topo(3);
        let mut o = Overlay::new(SimDuration::from_secs(120), 1);
        o.assign_session(PeerId(0), secs(0), &t).unwrap();
        o.assign_session(PeerId(1), secs(200), &t).unwrap();
        o.assign_session(PeerId(2), secs(201), &t).unwrap();
        o.refresh_shortcuts(PeerId(0), 5, &mut seeds::substream(0, "x"));
        o.handle_departure(PeerId(1));
        assert_eq!(o.shortcuts(PeerId(0)), vec![PeerId(2)]);
    }

    #[test]
    fn leaf_departure_reparents_nobody() {
        let t = topo(3);
        let mut o = Overlay::new(SimDuration::from_secs(120), 1);
        for p in 0..3 {
            o.assign_session(PeerId(p), secs(p as u64), &t).unwrap();
        }
        // with one slot per peer the tree is a chain 0 <- 1 <- 2
        assert!(o.handle_departure(PeerId(2)).is_empty());
        assert!(o.trees_are_rooted());
    }

    #[test]
    fn internal_departure_moves_children_to_grandparent() {
        let t = topo(4);
        let mut o = Overlay::new(SimDuration::from_secs(120), 2);
        o.assign_session(PeerId(0), secs(0), &t).unwrap();
        o.assign_session(PeerId(1), secs(1), &t).unwrap();
        o.assign_session(PeerId(2), secs(2), &t).unwrap();
        o.assign_session(PeerId(3), secs(3), &t).unwrap();
        // find an internal node with two children
        let s = o.session(SessionId(0)).unwrap().clone();
        let (node, kids) = (0..4)
            .map(|p| (PeerId(p), s.children(Parent::Peer(PeerId(p))).collect::<Vec<_>>()))
            .find(|(_, k)| k.len() == 2)
            .expect("a node with two children");
        let grand = o.parent(node).unwrap();
        let moved = o.handle_departure(node);
        assert_eq!(moved, kids);
        for k in kids {
            assert_eq!(o.parent(k), Some(grand));
        }
        assert!(o.trees_are_rooted());
    }

    #[test]
    fn random_churn_keeps_trees_rooted() {
        let t = topo(50);
        let mut rng = seeds::substream(5, "churn");
        let mut o = Overlay::new(SimDuration::from_secs(120), 2);
        let mut joined = Vec::new();
        let mut next = 0u32;
        let mut now = 0u64;
        for _ in 0..200 {
            now += rng.random_range(1..20);
            if next < 50 && (joined.is_empty() || rng.random_bool(0.6)) {
                o.assign_session(PeerId(next), secs(now), &t).unwrap();
                joined.push(PeerId(next));
                next += 1;
            } else if !joined.is_empty() {
                let i = rng.random_range(0..joined.len());
                o.handle_departure(joined.swap_remove(i));
            }
            assert!(o.trees_are_rooted());
            for p in o.live_peers().collect::<Vec<_>>() {
                let s = o.session(o.session_of(p).unwrap()).unwrap();
                assert!(s.window_contains(o.arrival_of(p).unwrap()));
            }
        }
    }
}
