//! Linear scheduling of a lowered function.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{dependencies, topological_order, Function, NodeId, Operand};

fn out_bytes(f: &Function, id: NodeId) -> usize {
    f.node(id).ty.as_ref().map_or(0, |t| t.size_bytes())
}

/// Node users through inputs or predicates, deduplicated.
fn readers(f: &Function) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
    let mut out: BTreeMap<NodeId, BTreeSet<NodeId>> = f.nodes().map(|(id, _)| (id, BTreeSet::new())).collect();
    for (id, n) in f.nodes() {
        for o in n.operands() {
            if let Operand::Node(src) = o {
                out.entry(src).or_default().insert(id);
            }
        }
    }
    out
}

/// Peak bytes of node results live at once when running `order`.
///
/// A result becomes live when its node runs and dies after its last reader;
/// a result nobody reads dies immediately.
pub fn peak_memory(f: &Function, order: &[NodeId]) -> usize {
    let readers = readers(f);
    let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut last_read: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (&src, rs) in &readers {
        if let Some(l) = rs.iter().filter_map(|r| pos.get(r)).max() {
            last_read.insert(src, *l);
        }
    }
    let mut dies_at: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (&src, &l) in &last_read {
        dies_at.entry(l).or_default().push(src);
    }
    let (mut live, mut peak) = (0usize, 0usize);
    for (i, &id) in order.iter().enumerate() {
        live += out_bytes(f, id);
        peak = peak.max(live);
        for d in dies_at.get(&i).into_iter().flatten() {
            live -= out_bytes(f, *d);
        }
        if !last_read.contains_key(&id) {
            live -= out_bytes(f, id);
        }
    }
    peak
}

/// The id-order topological schedule.
pub fn naive_order(f: &Function) -> Result<Vec<NodeId>> {
    topological_order(f)
}

#[derive(Clone, Copy)]
enum Score {
    /// Bytes released minus bytes newly held.
    Net,
    /// Bytes released only.
    Freed,
}

fn greedy(f: &Function, score: Score) -> Result<Vec<NodeId>> {
    let readers = readers(f);
    let deps: BTreeMap<NodeId, BTreeSet<NodeId>> = f.nodes().map(|(id, _)| (id, dependencies(f, id))).collect();
    let mut pending_readers: BTreeMap<NodeId, usize> = readers.iter().map(|(&k, v)| (k, v.len())).collect();
    let mut done: BTreeSet<NodeId> = BTreeSet::new();
    let mut order = Vec::with_capacity(deps.len());
    while order.len() < deps.len() {
        let mut best: Option<(i64, usize, NodeId)> = None;
        for (&id, ds) in &deps {
            if done.contains(&id) || !ds.iter().all(|d| done.contains(d)) {
                continue;
            }
            let srcs: BTreeSet<NodeId> = f.node(id).operands().filter_map(Operand::node).collect();
            let freed: usize = srcs.iter().filter(|s| pending_readers[s] == 1).map(|&s| out_bytes(f, s)).sum();
            let held = if readers[&id].is_empty() { 0 } else { out_bytes(f, id) };
            let gain = match score {
                Score::Net => freed as i64 - held as i64,
                Score::Freed => freed as i64,
            };
            let key = (-gain, out_bytes(f, id), id);
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
        let Some((_, _, id)) = best else {
            let stuck = deps.keys().find(|k| !done.contains(k)).unwrap();
            return Err(Error::Cycle(stuck.to_string()));
        };
        for s in f.node(id).operands().filter_map(Operand::node).collect::<BTreeSet<_>>() {
            *pending_readers.get_mut(&s).unwrap() -= 1;
        }
        done.insert(id);
        order.push(id);
    }
    Ok(order)
}

/// Depth-first post-order from the sinks, so each chain retires before the next starts.
fn depth_first(f: &Function) -> Result<Vec<NodeId>> {
    let readers = readers(f);
    let mut order = Vec::new();
    let mut state: BTreeMap<NodeId, u8> = BTreeMap::new();
    fn visit(f: &Function, id: NodeId, state: &mut BTreeMap<NodeId, u8>, order: &mut Vec<NodeId>) -> Result<()> {
        match state.get(&id) {
            Some(2) => return Ok(()),
            Some(1) => return Err(Error::Cycle(id.to_string())),
            _ => {}
        }
        state.insert(id, 1);
        // Heavier prerequisites first: their results are held for less time.
        let mut ds: Vec<NodeId> = dependencies(f, id).into_iter().collect();
        ds.sort_by_key(|&d| (std::cmp::Reverse(out_bytes(f, d)), d));
        for d in ds {
            visit(f, d, state, order)?;
        }
        state.insert(id, 2);
        order.push(id);
        Ok(())
    }
    let mut sinks: Vec<NodeId> = readers.iter().filter(|(_, r)| r.is_empty()).map(|(&k, _)| k).collect();
    // A Save into a placeholder must follow that placeholder's readers,
    // which dependency tracking already ensures.
    sinks.sort();
    for s in sinks {
        visit(f, s, &mut state, &mut order)?;
    }
    for id in f.node_ids() {
        visit(f, id, &mut state, &mut order)?;
    }
    Ok(order)
}

/// Memory-minimizing schedule.
///
/// The primary heuristic is greedy: among ready nodes pick the one that
/// releases the most bytes (net of its own result), breaking ties by smaller
/// result and then lower id. A bytes-released-only greedy, depth-first
/// order and the id-order schedule are also scored and the candidate with
/// the lowest peak wins, so the result is never worse than id order.
pub fn schedule(f: &Function) -> Result<Vec<NodeId>> {
    let naive = naive_order(f)?;
    let mut best_peak = peak_memory(f, &naive);
    let mut best = naive;
    for cand in [greedy(f, Score::Net)?, greedy(f, Score::Freed)?, depth_first(f)?] {
        let p = peak_memory(f, &cand);
        if p < best_peak {
            best_peak = p;
            best = cand;
        }
    }
    Ok(best)
}
