// scratch diagnostic: equilibrium dynamics probe
use std::collections::BTreeMap;
use repstream::id::PeerId;
use repstream::scenario::{PolicyMix, ScenarioSpec};
use repstream::sim::Engine;

fn main() {
    let mix = PolicyMix { altruistic: 0.7, free_rider: 0.2, malicious: 0.1 };
    let spec = ScenarioSpec::basic(120_000, 42, 99, mix);
    let engine = Engine::new(spec).unwrap();
    let source = engine.source();
    let log = engine.run().unwrap();
    for (class, s) in &log.class_summary {
        println!(
            "{class}: n={} mean_rep={:.4} incl={:.3} detached={:.2} leafish={:.2}",
            s.population, s.mean_final_reputation, s.report_inclusion_fraction,
            s.fraction_detached, s.fraction_leaf_or_detached
        );
    }
    // depth analysis from the final snapshot
    let (_, edges) = log.topology_snapshots.last().unwrap();
    let parent_of: BTreeMap<PeerId, PeerId> = edges.iter().copied().collect();
    let depth = |mut p: PeerId| -> usize {
        let mut d = 0;
        while let Some(q) = parent_of.get(&p) {
            d += 1;
            p = *q;
            if d > 200 { return usize::MAX; }
        }
        if p == source { d } else { usize::MAX }
    };
    let class_of: BTreeMap<PeerId, &str> =
        log.roster.iter().map(|o| (o.peer, o.class)).collect();
    let mut by_depth: BTreeMap<usize, (usize, f64, Vec<&str>)> = BTreeMap::new();
    for o in &log.roster {
        let d = depth(o.peer);
        let e = by_depth.entry(d).or_default();
        e.0 += 1;
        e.1 += o.final_reputation;
        e.2.push(class_of[&o.peer]);
    }
    for (d, (n, sum, classes)) in &by_depth {
        let mut counts = BTreeMap::new();
        for c in classes { *counts.entry(*c).or_insert(0) += 1; }
        println!("depth {d}: n={n} mean_rep={:.4} {counts:?}", sum / *n as f64);
    }
    // how many altruistic peers above/below 0.8
    let (mut hi, mut lo) = (0, 0);
    for o in &log.roster {
        if o.class == "altruistic" {
            if o.final_reputation > 0.8 { hi += 1 } else { lo += 1 }
        }
    }
    println!("altruistic >0.8: {hi}, <=0.8: {lo}");
}
