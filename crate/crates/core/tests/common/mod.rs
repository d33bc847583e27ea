#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wmsn_core::model::Topology;
use wmsn_core::scenario::NodeConfig;
use wmsn_core::{NodeId, Scenario};

/// Sensing and periodic capture off on every node.
pub fn quiet(mut sc: Scenario) -> Scenario {
    for n in &mut sc.nodes {
        n.sampling = false;
        n.multimedia_period_s = None;
    }
    sc
}

/// Nodes 0..n on the x axis, `spacing` apart, gateway at 0.
pub fn line(n: u16, spacing: f64, duration_s: f64) -> Scenario {
    let mut sc = Scenario::new(duration_s);
    sc.nodes.push(NodeConfig::gateway(0, 0.0, 0.0));
    for i in 1..n {
        sc.nodes.push(NodeConfig::sensor(i, spacing * i as f64, 0.0));
    }
    quiet(sc)
}

/// `cols` x `rows` grid, ids row-major, gateway at 0.
pub fn grid(cols: u16, rows: u16, spacing: f64, duration_s: f64) -> Scenario {
    let mut sc = Scenario::new(duration_s);
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            let (x, y) = (spacing * c as f64, spacing * r as f64);
            sc.nodes.push(if id == 0 { NodeConfig::gateway(id, x, y) } else { NodeConfig::sensor(id, x, y) });
        }
    }
    quiet(sc)
}

/// Hop distances to `dest` over links usable by both radios.
pub fn bfs(topology: &Topology, dest: NodeId) -> BTreeMap<NodeId, u16> {
    let mut dist = BTreeMap::from([(dest, 0u16)]);
    let mut q = VecDeque::from([dest]);
    while let Some(u) = q.pop_front() {
        let d = dist[&u];
        for v in topology.nodes().collect::<Vec<_>>() {
            if v != u && !dist.contains_key(&v) && topology.mesh_links(u).unwrap().contains(&v) {
                dist.insert(v, d + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

/// Random connected unit-disk graph of `n` nodes in a square; retries until
/// the BFS tree from the gateway spans every node.
pub fn random_connected(n: u16, seed: u64, duration_s: f64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 60.0 * (n as f64).sqrt();
    loop {
        let mut sc = Scenario::new(duration_s);
        sc.seed = seed;
        for i in 0..n {
            let (x, y) = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            sc.nodes.push(if i == 0 { NodeConfig::gateway(i, x, y) } else { NodeConfig::sensor(i, x, y) });
        }
        let sc = quiet(sc);
        if bfs(&sc.topology(), NodeId(0)).len() == n as usize {
            return sc;
        }
    }
}
