#![allow(dead_code)]

use dinl::graph::{
    build_spt, edge_cost, reverse_dijkstra, CostWeights, Edge, EdgeAttr, NetworkGraph, NodeId,
    NodeRole,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RANDOM_COST_WEIGHTS: CostWeights = CostWeights {
    alpha: 1.0,
    beta: 1.0,
    gamma: 1.0,
    epsilon: CostWeights::DEFAULT_EPSILON,
    bits_per_scalar: 1,
};

/// Random DAG with at most 8 nodes and 16 edges whose link costs lie in
/// [0, 10]. Every node has at least one out-edge toward the fusion end of a
/// random order, so every node reaches the fusion node. With `integer_costs`
/// only latency varies, in whole units, which produces many ties.
pub fn random_dag(seed: u64, integer_costs: bool) -> (NetworkGraph, CostWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8usize);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let fusion = order[n - 1];

    let mut roles = vec![NodeRole::Relay; n];
    roles[fusion] = NodeRole::Fusion;
    for &v in &order[..n - 1] {
        if rng.random_bool(0.5) {
            roles[v] = NodeRole::Sensor;
        }
    }
    if !roles.contains(&NodeRole::Sensor) {
        roles[order[0]] = NodeRole::Sensor;
    }

    let attr = |rng: &mut ChaCha8Rng| {
        if integer_costs {
            EdgeAttr {
                capacity: 1e12,
                latency: f64::from(rng.random_range(0..=9u32)),
                reliability: 1.0,
                width: 1,
            }
        } else {
            EdgeAttr {
                capacity: rng.random_range(1.0..100.0),
                latency: rng.random_range(0.0..8.0),
                reliability: rng.random_range(0.0..=1.0),
                width: 1,
            }
        }
    };
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..n - 1 {
        let j = rng.random_range(i + 1..n);
        pairs.push((order[i], order[j]));
    }
    let extra = rng.random_range(0..=16 - pairs.len());
    for _ in 0..extra {
        let i = rng.random_range(0..n - 1);
        let j = rng.random_range(i + 1..n);
        let p = (order[i], order[j]);
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(a, b)| Edge {
            from: NodeId(a),
            to: NodeId(b),
            attr: attr(&mut rng),
        })
        .collect();
    let g = NetworkGraph::new(roles, edges).expect("generator produces valid DAGs");
    let mut w = RANDOM_COST_WEIGHTS;
    if integer_costs {
        w.alpha = 0.0;
        w.gamma = 0.0;
    }
    (g, w)
}

/// Every simple path from `v` to the fusion node with its additive cost.
pub fn all_paths(g: &NetworkGraph, w: &CostWeights, v: NodeId) -> Vec<(Vec<NodeId>, f64)> {
    fn walk(
        g: &NetworkGraph,
        w: &CostWeights,
        path: &mut Vec<NodeId>,
        cost: f64,
        out: &mut Vec<(Vec<NodeId>, f64)>,
    ) {
        let cur = *path.last().unwrap();
        if cur == g.fusion() {
            out.push((path.clone(), cost));
            return;
        }
        for e in g.out_edges(cur) {
            if path.contains(&e.to) {
                continue;
            }
            path.push(e.to);
            walk(g, w, path, cost + edge_cost(&e.attr, w), out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(g, w, &mut vec![v], 0.0, &mut out);
    out
}

pub fn path_cost(g: &NetworkGraph, w: &CostWeights, path: &[NodeId]) -> f64 {
    path.windows(2)
        .map(|p| edge_cost(&g.find_edge(p[0], p[1]).unwrap().attr, w))
        .sum()
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Checks Dijkstra distances, selected paths and the path-sum optimality of
/// the tree against exhaustive enumeration.
pub fn check_against_brute_force(g: &NetworkGraph, w: &CostWeights) -> Result<(), String> {
    let sp = reverse_dijkstra(g, w).map_err(|e| e.to_string())?;
    let spt = build_spt(g, w).map_err(|e| e.to_string())?;
    let n = g.node_count();
    let mut per_sensor_paths = Vec::new();

    for v in (0..n).map(NodeId) {
        let paths = all_paths(g, w, v);
        let best = paths.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        if !close(sp.distance[v.0], best, 1e-12) {
            return Err(format!(
                "node {}: dijkstra {} vs brute {}",
                v.0, sp.distance[v.0], best
            ));
        }
        if g.role(v) == NodeRole::Sensor {
            per_sensor_paths.push(paths);
        }
    }

    // The selected path of each data node attains its distance and uses tree edges only.
    let mut selected_sum = 0.0;
    for j in g.data_nodes() {
        let path = sp.path(j).ok_or("data node without a path")?;
        if *path.last().unwrap() != g.fusion() {
            return Err(format!("path of {} does not end at the fusion node", j.0));
        }
        let c = path_cost(g, w, &path);
        if !close(c, sp.distance[j.0], 1e-12) {
            return Err(format!(
                "path of {} costs {c}, distance {}",
                j.0, sp.distance[j.0]
            ));
        }
        if path.windows(2).any(|p| !spt.contains(p[0], p[1])) {
            return Err(format!("path of {} leaves the tree", j.0));
        }
        selected_sum += c;
    }

    // No combination of single-path routings has a smaller total cost.
    let combos: f64 = per_sensor_paths.iter().map(|p| p.len() as f64).product();
    let best_sum = if combos <= 50_000.0 {
        let mut best = f64::INFINITY;
        let mut idx = vec![0usize; per_sensor_paths.len()];
        loop {
            let total: f64 = idx
                .iter()
                .zip(&per_sensor_paths)
                .map(|(&i, p)| p[i].1)
                .sum();
            best = best.min(total);
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] < per_sensor_paths[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
        best
    } else {
        per_sensor_paths
            .iter()
            .map(|p| p.iter().map(|x| x.1).fold(f64::INFINITY, f64::min))
            .sum()
    };
    if !close(selected_sum, best_sum, 1e-12) {
        return Err(format!(
            "tree path sum {selected_sum} vs best routing {best_sum}"
        ));
    }

    // Tree: one out-edge per non-fusion tree node.
    for v in spt.active_nodes() {
        let k = spt.children(v).len();
        if (v == g.fusion() && k != 0) || (v != g.fusion() && k != 1) {
            return Err(format!("node {} has {k} tree successors", v.0));
        }
    }
    Ok(())
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` wrt every entry of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}
