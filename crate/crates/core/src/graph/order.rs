use std::collections::{BTreeMap, BTreeSet};

use super::{Function, NodeId, Operand};
use crate::error::{Error, Result};

/// Nodes that must run before `id`.
///
/// Besides data inputs and the predicate, a Save into placeholder `P` runs
/// after every other node that reads `P`, so readers observe the value bound
/// at the start of execution.
pub fn dependencies(f: &Function, id: NodeId) -> BTreeSet<NodeId> {
    let node = f.node(id);
    let mut deps: BTreeSet<NodeId> = node.operands().filter_map(Operand::node).collect();
    if let Some(target) = node.save_target() {
        for (other, n) in f.nodes() {
            if other != id && n.reads().any(|o| o == Operand::Storage(target)) {
                deps.insert(other);
            }
        }
    }
    deps
}

/// Dependency map for every live node.
pub(crate) fn dependency_map(f: &Function) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
    f.nodes().map(|(id, _)| (id, dependencies(f, id))).collect()
}

/// Kahn's algorithm, always taking the ready node with the smallest id.
pub fn topological_order(f: &Function) -> Result<Vec<NodeId>> {
    let deps = dependency_map(f);
    for (id, ds) in &deps {
        if let Some(missing) = ds.iter().find(|d| !f.contains(**d)) {
            return Err(Error::Type(format!("node {id} references removed node {missing}")));
        }
    }
    let mut users: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut pending: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (&id, ds) in &deps {
        pending.insert(id, ds.len());
        for &d in ds {
            users.entry(d).or_default().push(id);
        }
    }
    let mut ready: BTreeSet<NodeId> = pending.iter().filter(|(_, &c)| c == 0).map(|(&id, _)| id).collect();
    let mut order = Vec::with_capacity(deps.len());
    while let Some(id) = ready.pop_first() {
        order.push(id);
        for &u in users.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
            let c = pending.get_mut(&u).unwrap();
            *c -= 1;
            if *c == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() != deps.len() {
        let done: BTreeSet<NodeId> = order.iter().copied().collect();
        // Walk backwards through unscheduled dependencies until one repeats.
        let mut cur = *deps.keys().find(|id| !done.contains(id)).unwrap();
        let mut seen = BTreeSet::new();
        while seen.insert(cur) {
            cur = *deps[&cur].iter().find(|d| !done.contains(d)).unwrap();
        }
        return Err(Error::Cycle(cur.to_string()));
    }
    Ok(order)
}
