//! Static buffer planning: tensor lifetimes from graph traversal and
//! deterministic first-fit address assignment with reuse.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::graph_ir::{Bundle, DataSource, SkipSource, WeightSource};
use crate::tiler::RuntimeParams;

pub const ALIGN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Assignment {
    pub address: usize,
    pub size: usize,
}

/// Inclusive lifetime interval [first def bundle index, last use index].
pub type Lifetime = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryPlan {
    pub assignments: BTreeMap<usize, Assignment>,
    pub arena_size: usize,
    pub lifetimes: BTreeMap<usize, Lifetime>,
}

/// Every bundle index that reads bundle `b`'s output.
fn consumers_of(bundles: &[Bundle], b: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for c in bundles {
        let mut reads = false;
        match &c.input {
            DataSource::ModelInput => {}
            DataSource::Bundle(s) => reads |= s.bundle == b,
            DataSource::Concat(parts) => reads |= parts.iter().any(|s| s.bundle == b),
        }
        if let Some(SkipSource::Bundle(s)) = c.skip_source {
            reads |= s == b;
        }
        if let WeightSource::BundleOutput { bundle, .. } = &c.weights {
            reads |= *bundle == b;
        }
        if reads {
            out.push(c.id);
        }
    }
    out
}

/// Lifetime of each bundle output: `[def, max consumer index]` (or `[def,
/// def]` for the terminal output).
pub fn compute_lifetimes(bundles: &[Bundle]) -> BTreeMap<usize, Lifetime> {
    let mut map = BTreeMap::new();
    for b in bundles {
        let mut last = b.id;
        for c in consumers_of(bundles, b.id) {
            assert!(c > b.id, "consumer {c} precedes producer {}", b.id);
            last = last.max(c);
        }
        map.insert(b.id, (b.id, last));
    }
    map
}

fn overlap(a: Lifetime, b: Lifetime) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGN) * ALIGN
}

/// Deterministic first-fit packing over lifetime intervals: buffers are
/// placed in order of first definition (ties by id) at the lowest aligned
/// address not conflicting with any temporally-overlapping earlier placement.
pub fn assign_addresses(
    lifetimes: &BTreeMap<usize, Lifetime>,
    sizes: &BTreeMap<usize, usize>,
) -> MemoryPlan {
    let mut order: Vec<usize> = lifetimes.keys().copied().collect();
    order.sort_by_key(|id| (lifetimes[id].0, *id));

    let mut placed: Vec<(usize, Assignment)> = Vec::new(); // (id, slot)
    let mut assignments = BTreeMap::new();
    let mut arena_size = 0usize;
    for id in order {
        let size = sizes[&id];
        let lt = lifetimes[&id];
        let mut conflicts: Vec<Assignment> = placed
            .iter()
            .filter(|(other, _)| overlap(lifetimes[other], lt))
            .map(|&(_, a)| a)
            .collect();
        conflicts.sort_by_key(|a| a.address);
        let mut address = 0usize;
        for c in conflicts {
            if address + size <= c.address {
                break;
            }
            address = address.max(align_up(c.address + c.size));
        }
        let a = Assignment { address, size };
        arena_size = arena_size.max(address + size);
        placed.push((id, a));
        assignments.insert(id, a);
    }
    MemoryPlan { assignments, arena_size, lifetimes: lifetimes.clone() }
}

fn output_size(b: &Bundle) -> usize {
    b.out_shape.iter().product::<usize>() * b.out_format.byte_width()
}

/// Plan all bundle outputs of a lowered model.
pub fn plan_memory(bundles: &[Bundle]) -> MemoryPlan {
    let lifetimes = compute_lifetimes(bundles);
    let sizes: BTreeMap<usize, usize> =
        bundles.iter().map(|b| (b.id, output_size(b))).collect();
    assign_addresses(&lifetimes, &sizes)
}

/// Check the plan's core invariant: overlapping address ranges imply
/// disjoint lifetimes. Returns the offending pair if violated.
pub fn soundness_violation(plan: &MemoryPlan) -> Option<(usize, usize)> {
    let items: Vec<(&usize, &Assignment)> = plan.assignments.iter().collect();
    for (i, (ida, a)) in items.iter().enumerate() {
        for (idb, b) in items.iter().skip(i + 1) {
            let addr_overlap = a.address < b.address + b.size && b.address < a.address + a.size;
            if addr_overlap && overlap(plan.lifetimes[ida], plan.lifetimes[idb]) {
                return Some((**ida, **idb));
            }
        }
    }
    None
}

#[derive(Serialize)]
struct ExportEntry<'a> {
    id: usize,
    address: usize,
    size: usize,
    lifetime: [usize; 2],
    params: &'a RuntimeParams,
}

/// Deterministic JSON export of the plan plus each bundle's runtime
/// parameters — the equivalent of the generated configuration header.
pub fn export_plan(bundles: &[Bundle], plan: &MemoryPlan, params: &[RuntimeParams]) -> String {
    let entries: Vec<ExportEntry> = bundles
        .iter()
        .zip(params)
        .map(|(b, p)| {
            let a = plan.assignments[&b.id];
            let lt = plan.lifetimes[&b.id];
            ExportEntry { id: b.id, address: a.address, size: a.size, lifetime: [lt.0, lt.1], params: p }
        })
        .collect();
    #[derive(Serialize)]
    struct Export<'a> {
        arena_size: usize,
        bundles: Vec<ExportEntry<'a>>,
    }
    serde_json::to_string_pretty(&Export { arena_size: plan.arena_size, bundles: entries })
        .expect("plan serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::{lower_to_bundles, parse_model};

    fn chain_lifetimes(n: usize) -> BTreeMap<usize, Lifetime> {
        (0..n).map(|i| (i, (i, (i + 1).min(n - 1)))).collect()
    }

    #[test]
    fn chain_lifetimes_are_inclusive() {
        assert_eq!(
            chain_lifetimes(3),
            BTreeMap::from([(0, (0, 1)), (1, (1, 2)), (2, (2, 2))])
        );
    }

    #[test]
    fn chain_ping_pongs_two_slots() {
        // each output overlaps only its neighbor, so two slots suffice
        let lifetimes = chain_lifetimes(5);
        let sizes: BTreeMap<usize, usize> = (0..5).map(|i| (i, 100)).collect();
        let plan = assign_addresses(&lifetimes, &sizes);
        let slot = |i: usize| plan.assignments[&i].address;
        assert_eq!(slot(0), 0);
        assert_eq!(slot(1), 112); // 100 aligned up to 16
        assert_eq!(slot(2), 0);
        assert_eq!(slot(3), 112);
        assert_eq!(slot(4), 0);
        assert_eq!(plan.arena_size, 212);
        assert!(soundness_violation(&plan).is_none());
    }

    #[test]
    fn long_skip_blocks_reuse() {
        // bundle 0 feeds both 1 and 4: its slot stays live across 1..4
        let mut lifetimes = chain_lifetimes(5);
        lifetimes.insert(0, (0, 4));
        let sizes: BTreeMap<usize, usize> = (0..5).map(|i| (i, 16)).collect();
        let plan = assign_addresses(&lifetimes, &sizes);
        let a0 = plan.assignments[&0];
        for i in 1..5 {
            let a = plan.assignments[&i];
            assert!(a.address >= a0.address + a0.size || a.address + a.size <= a0.address);
        }
        assert!(soundness_violation(&plan).is_none());
    }

    #[test]
    fn single_buffer_plan() {
        let lifetimes = BTreeMap::from([(0usize, (0usize, 0usize))]);
        let sizes = BTreeMap::from([(0usize, 40usize)]);
        let plan = assign_addresses(&lifetimes, &sizes);
        assert_eq!(plan.assignments[&0], Assignment { address: 0, size: 40 });
        assert_eq!(plan.arena_size, 40);
    }

    #[test]
    fn soundness_detects_overlap() {
        let plan = MemoryPlan {
            assignments: BTreeMap::from([
                (0, Assignment { address: 0, size: 32 }),
                (1, Assignment { address: 16, size: 32 }),
            ]),
            arena_size: 48,
            lifetimes: BTreeMap::from([(0, (0, 1)), (1, (1, 1))]),
        };
        assert_eq!(soundness_violation(&plan), Some((0, 1)));
    }

    #[test]
    fn model_plan_is_sound_and_exports() {
        let doc = crate::models::resnet50_json(32, 0);
        let graph = parse_model(&doc).unwrap();
        let bundles = lower_to_bundles(&graph).unwrap();
        let plan = plan_memory(&bundles);
        assert!(soundness_violation(&plan).is_none());
        // residual chains must need less than the sum of all outputs
        let total: usize = bundles
            .iter()
            .map(|b| b.out_shape.iter().product::<usize>() * b.out_format.byte_width())
            .sum();
        assert!(plan.arena_size < total);
        let config = crate::tiler::CgraConfig { rows: 7, ..Default::default() };
        let params: Vec<_> = bundles
            .iter()
            .map(|b| crate::tiler::compute_runtime_params(b, &config).unwrap())
            .collect();
        let j1 = export_plan(&bundles, &plan, &params);
        let j2 = export_plan(&bundles, &plan, &params);
        assert_eq!(j1, j2, "export must be byte-stable");
        let v: serde_json::Value = serde_json::from_str(&j1).unwrap();
        assert!(v["arena_size"].as_u64().unwrap() > 0);
        assert_eq!(v["bundles"].as_array().unwrap().len(), bundles.len());
    }

    #[test]
    fn weight_producer_lifetime_covers_consumer() {
        // attention bundles read earlier bundle outputs as weights
        let doc = crate::models::attention_json(4, 8, 1, 0);
        let graph = parse_model(&doc).unwrap();
        let bundles = lower_to_bundles(&graph).unwrap();
        let lifetimes = compute_lifetimes(&bundles);
        for b in &bundles {
            if let crate::graph_ir::WeightSource::BundleOutput { bundle, .. } = &b.weights {
                assert!(lifetimes[bundle].1 >= b.id);
            }
        }
        assert!(soundness_violation(&plan_memory(&bundles)).is_none());
    }
}
