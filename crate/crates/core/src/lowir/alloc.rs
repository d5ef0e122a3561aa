//! Static placement of every buffer into one arena.

use std::collections::BTreeMap;
use std::ops::Range;

use super::{IRFunction, Mutability, ValueRef};

/// Offset alignment of every buffer, one cache line.
pub const ALIGNMENT: usize = 64;

fn align_up(x: usize, a: usize) -> usize {
    x.div_ceil(a) * a
}

/// A buffer live over the inclusive step range `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
    pub size: usize,
}

impl Interval {
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// First-fit placement of buffers visited in `order`: each takes the lowest
/// aligned offset clear of every already placed buffer it is live with.
fn first_fit(intervals: &[Interval], order: &[usize], align: usize) -> (Vec<usize>, usize) {
    let mut offsets = vec![0usize; intervals.len()];
    let mut placed: Vec<usize> = Vec::new();
    let mut arena = 0usize;
    for &i in order {
        let iv = intervals[i];
        let mut busy: Vec<(usize, usize)> = placed
            .iter()
            .filter(|&&j| intervals[j].overlaps(&iv))
            .map(|&j| (offsets[j], offsets[j] + intervals[j].size))
            .collect();
        busy.sort_unstable();
        let mut at = 0usize;
        for (off, end) in busy {
            if at + iv.size <= off {
                break;
            }
            at = at.max(align_up(end, align));
        }
        offsets[i] = at;
        arena = arena.max(at + iv.size);
        placed.push(i);
    }
    (offsets, arena)
}

/// Static placement with first fit.
///
/// Buffers are placed in three deterministic visit orders: by start
/// (linear scan, ties larger first), by size, and by size times lifetime.
/// The plan with the smallest arena wins, earlier orders on ties. Returns
/// the offsets and the arena size, the highest end of any placed buffer.
pub fn plan_intervals(intervals: &[Interval], align: usize) -> (Vec<usize>, usize) {
    use std::cmp::Reverse;
    let idx: Vec<usize> = (0..intervals.len()).collect();
    let by = |key: &dyn Fn(&Interval) -> (usize, Reverse<usize>)| {
        let mut o = idx.clone();
        o.sort_by_key(|&i| (key(&intervals[i]), i));
        o
    };
    let orders = [
        by(&|iv| (iv.start, Reverse(iv.size))),
        by(&|iv| (0, Reverse(iv.size))),
        by(&|iv| (0, Reverse(iv.size * (iv.end - iv.start + 1)))),
    ];
    orders
        .iter()
        .map(|o| first_fit(intervals, o, align))
        .min_by_key(|(_, arena)| *arena)
        .expect("at least one order")
}

/// Byte layout of a whole program.
///
/// The arena starts with the constant weights, then the mutable weights,
/// then the activation region planned by [`plan_intervals`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryPlan {
    pub arena_size: usize,
    pub offsets: BTreeMap<ValueRef, usize>,
    pub constant_region: Range<usize>,
    pub mutable_region: Range<usize>,
    pub activation_region: Range<usize>,
}

impl MemoryPlan {
    pub fn offset(&self, v: ValueRef) -> usize {
        self.offsets[&v]
    }
}

/// Assign an offset to every weight and activation of `ir`.
pub fn allocate(ir: &IRFunction) -> MemoryPlan {
    let mut offsets = BTreeMap::new();
    let mut cursor = 0usize;
    let region = |m: Mutability, cursor: &mut usize, offsets: &mut BTreeMap<ValueRef, usize>| {
        let start = *cursor;
        for (i, w) in ir.weights.iter().enumerate().filter(|(_, w)| w.mutability == m) {
            *cursor = align_up(*cursor, ALIGNMENT);
            offsets.insert(ValueRef::Weight(i as u32), *cursor);
            *cursor += w.ty.size_bytes();
        }
        start..*cursor
    };
    let constant_region = region(Mutability::Constant, &mut cursor, &mut offsets);
    let mutable_region = region(Mutability::Mutable, &mut cursor, &mut offsets);
    let base = align_up(cursor, ALIGNMENT);

    let lifetimes = ir.lifetimes();
    let acts: Vec<u32> = lifetimes.keys().copied().collect();
    let intervals: Vec<Interval> = acts
        .iter()
        .map(|a| {
            let (start, end) = lifetimes[a];
            Interval { start, end, size: ir.activations[*a as usize].ty.size_bytes() }
        })
        .collect();
    let (rel, size) = plan_intervals(&intervals, ALIGNMENT);
    for (a, off) in acts.iter().zip(rel) {
        offsets.insert(ValueRef::Act(*a), base + off);
    }
    let activation_region = base..base + size;
    MemoryPlan { arena_size: activation_region.end, offsets, constant_region, mutable_region, activation_region }
}
