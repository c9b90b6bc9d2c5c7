//! Exact replica averages on tree-indexed (hierarchical) overlap models.
//!
//! For `m` replicas drawn from a measure on the leaves of a depth-`r` tree,
//! the replica overlap matrix is fixed by the chain of partitions
//! `P_1 >= P_2 >= ... >= P_r`, where `P_l` groups replicas that share their
//! depth-`l` ancestor. Writing `Q(C)` for the mass of configurations whose
//! chain is at least as coarse as `C` at every level, `Q` factorizes over the
//! tree into products of child power sums and costs O(K) per distinct block
//! shape. The exact chain masses follow by Mobius inversion over the
//! coarsening order, and the replica average is a finite sum over chains.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{usage, Result};
use crate::function::{Observable, ReplicaOverlaps};
use crate::measure::{Hierarchy, MeasureSample, OverlapModel};
use crate::stats::CompensatedSum;

/// Replica counts above this fall back to enumeration or Monte Carlo.
pub const MAX_CASCADE_REPLICAS: usize = 5;

/// Set partitions of `0..m` as restricted growth strings.
fn set_partitions(m: usize) -> Vec<Vec<u8>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    let mut rgs = vec![0u8; m];
    fn rec(i: usize, max: u8, rgs: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if i == rgs.len() {
            out.push(rgs.clone());
            return;
        }
        for b in 0..=max + 1 {
            rgs[i] = b;
            rec(i + 1, max.max(b), rgs, out);
        }
    }
    rgs[0] = 0;
    rec(1, 0, &mut rgs, &mut out);
    out
}

/// Bitmask of the replica pairs a partition joins.
fn pair_mask(rgs: &[u8]) -> u32 {
    let m = rgs.len();
    let mut mask = 0u32;
    let mut bit = 0;
    for a in 0..m {
        for b in a + 1..m {
            if rgs[a] == rgs[b] {
                mask |= 1 << bit;
            }
            bit += 1;
        }
    }
    mask
}

#[derive(Debug)]
struct Shape {
    /// Leaf level: block size. Inner levels: child shape ids at the next level.
    leaf_size: usize,
    children: Vec<usize>,
}

/// Chain enumeration and shape DAG for a fixed (replicas, depth).
#[derive(Debug)]
pub struct ChainTable {
    replicas: usize,
    depth: usize,
    /// `masks[c][l]` = pair mask of `P_{l+1}` in chain `c`.
    masks: Vec<Vec<u32>>,
    /// Common-ancestor depth of each replica pair, per chain.
    pair_depth: Vec<Vec<u8>>,
    /// Shapes per level 0..=depth.
    shapes: Vec<Vec<Shape>>,
    root_shape: Vec<usize>,
    /// Chains in coarsest-first order.
    order: Vec<usize>,
    /// Strictly coarser chains of each chain.
    coarser: Vec<Vec<usize>>,
}

impl ChainTable {
    fn build(m: usize, depth: usize) -> Self {
        let parts = set_partitions(m);
        let part_masks: Vec<u32> = parts.iter().map(|p| pair_mask(p)).collect();
        // chains of partition indices, each level refining the previous
        let mut chains: Vec<Vec<usize>> = Vec::new();
        fn extend(
            chain: &mut Vec<usize>,
            depth: usize,
            masks: &[u32],
            out: &mut Vec<Vec<usize>>,
        ) {
            if chain.len() == depth {
                out.push(chain.clone());
                return;
            }
            for (i, &mi) in masks.iter().enumerate() {
                let ok = match chain.last() {
                    Some(&prev) => mi & !masks[prev] == 0,
                    None => true,
                };
                if ok {
                    chain.push(i);
                    extend(chain, depth, masks, out);
                    chain.pop();
                }
            }
        }
        extend(&mut Vec::new(), depth, &part_masks, &mut chains);

        let masks: Vec<Vec<u32>> = chains
            .iter()
            .map(|c| c.iter().map(|&p| part_masks[p]).collect())
            .collect();

        let pair_depth: Vec<Vec<u8>> = masks
            .iter()
            .map(|cm| {
                let mut out = Vec::new();
                let mut bit = 0;
                for _a in 0..m {
                    for _b in _a + 1..m {
                        let d = cm.iter().take_while(|&&mask| mask & (1 << bit) != 0).count();
                        out.push(d as u8);
                        bit += 1;
                    }
                }
                out
            })
            .collect();

        let mut interners: Vec<HashMap<(usize, Vec<usize>), usize>> = vec![HashMap::new(); depth + 1];
        let mut shapes: Vec<Vec<Shape>> = (0..=depth).map(|_| Vec::new()).collect();
        let mut root_shape = Vec::with_capacity(chains.len());
        for chain in &chains {
            // blocks at level l: level 0 is the single block of all replicas
            let block_of = |level: usize, replica: usize| -> u8 {
                if level == 0 {
                    0
                } else {
                    parts[chain[level - 1]][replica]
                }
            };
            fn intern(
                level: usize,
                members: &[usize],
                depth: usize,
                block_of: &dyn Fn(usize, usize) -> u8,
                interners: &mut Vec<HashMap<(usize, Vec<usize>), usize>>,
                shapes: &mut Vec<Vec<Shape>>,
            ) -> usize {
                let (leaf_size, children) = if level == depth {
                    (members.len(), Vec::new())
                } else {
                    let mut groups: Vec<(u8, Vec<usize>)> = Vec::new();
                    for &r in members {
                        let b = block_of(level + 1, r);
                        match groups.iter_mut().find(|g| g.0 == b) {
                            Some(g) => g.1.push(r),
                            None => groups.push((b, vec![r])),
                        }
                    }
                    let mut kids: Vec<usize> = groups
                        .iter()
                        .map(|g| intern(level + 1, &g.1, depth, block_of, interners, shapes))
                        .collect();
                    kids.sort_unstable();
                    (0, kids)
                };
                let key = (leaf_size, children.clone());
                let next = shapes[level].len();
                let id = *interners[level].entry(key).or_insert(next);
                if id == next {
                    shapes[level].push(Shape {
                        leaf_size,
                        children,
                    });
                }
                id
            }
            let all: Vec<usize> = (0..m).collect();
            root_shape.push(intern(0, &all, depth, &block_of, &mut interners, &mut shapes));
        }

        let weight = |c: usize| -> u32 { masks[c].iter().map(|m| m.count_ones()).sum() };
        let mut order: Vec<usize> = (0..chains.len()).collect();
        order.sort_by_key(|&c| std::cmp::Reverse(weight(c)));
        let coarser: Vec<Vec<usize>> = (0..chains.len())
            .map(|c| {
                (0..chains.len())
                    .filter(|&d| {
                        d != c && masks[c].iter().zip(&masks[d]).all(|(mc, md)| mc & !md == 0)
                    })
                    .collect()
            })
            .collect();

        Self {
            replicas: m,
            depth,
            masks,
            pair_depth,
            shapes,
            root_shape,
            order,
            coarser,
        }
    }

    pub fn chains(&self) -> usize {
        self.masks.len()
    }

    pub fn replicas(&self) -> usize {
        self.replicas
    }

    /// Overlap matrix realized by chain `c`.
    fn overlaps(&self, c: usize, h: &Hierarchy) -> ReplicaOverlaps {
        let m = self.replicas;
        let mut r = ReplicaOverlaps::new(m);
        let mut idx = 0;
        for a in 0..m {
            r.set(a, a, h.self_overlap());
            for b in a + 1..m {
                r.set(a, b, h.q_at(self.pair_depth[c][idx] as usize));
                idx += 1;
            }
        }
        r
    }
}

fn table(m: usize, depth: usize) -> Arc<ChainTable> {
    type Cache = Mutex<HashMap<(usize, usize), Arc<ChainTable>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = cache.lock().expect("chain cache").get(&(m, depth)) {
        return Arc::clone(t);
    }
    let built = Arc::new(ChainTable::build(m, depth));
    cache
        .lock()
        .expect("chain cache")
        .entry((m, depth))
        .or_insert(built)
        .clone()
}

/// Exact masses of every replica chain for one hierarchical measure.
pub struct ChainMasses<'a> {
    table: Arc<ChainTable>,
    hierarchy: &'a Hierarchy,
    masses: Vec<f64>,
}

impl<'a> ChainMasses<'a> {
    pub fn new(sample: &'a MeasureSample, replicas: usize) -> Result<Self> {
        let h = match sample.overlaps() {
            OverlapModel::Hierarchical(h) => h,
            OverlapModel::ExplicitGram(_) => {
                return usage("cascade averages need a hierarchical overlap model")
            }
        };
        if replicas > MAX_CASCADE_REPLICAS {
            return usage(format!(
                "cascade averages support at most {MAX_CASCADE_REPLICAS} replicas"
            ));
        }
        let table = table(replicas, h.depth());
        let masses = chain_masses(&table, h, sample.weights().as_slice());
        Ok(Self {
            table,
            hierarchy: h,
            masses,
        })
    }

    pub fn replicas(&self) -> usize {
        self.table.replicas
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Exact `<g>` for an observable on exactly `replicas()` replicas.
    pub fn average(&self, obs: &Observable) -> Result<f64> {
        if obs.replicas() != self.table.replicas {
            return usage("observable replica count does not match the chain table");
        }
        let mut acc = CompensatedSum::new();
        for (c, &mass) in self.masses.iter().enumerate() {
            if mass != 0.0 {
                acc.add(mass * obs.eval(&self.table.overlaps(c, self.hierarchy)));
            }
        }
        Ok(acc.value())
    }
}

fn chain_masses(t: &ChainTable, h: &Hierarchy, weights: &[f64]) -> Vec<f64> {
    let depth = t.depth;
    // values[l][shape][node at depth l]
    let mut values: Vec<Vec<Vec<f64>>> = (0..=depth).map(|_| Vec::new()).collect();
    let leaf = &t.shapes[depth];
    let max_size = leaf.iter().map(|s| s.leaf_size).max().unwrap_or(0);
    let mut by_size: Vec<Vec<f64>> = vec![Vec::new(); max_size + 1];
    for s in leaf {
        by_size[s.leaf_size] = Vec::with_capacity(weights.len());
    }
    for &w in weights {
        let mut power = 1.0;
        for column in by_size.iter_mut().skip(1) {
            power *= w;
            if column.capacity() > 0 {
                column.push(power);
            }
        }
    }
    values[depth] = leaf.iter().map(|s| std::mem::take(&mut by_size[s.leaf_size])).collect();
    for level in (0..depth).rev() {
        let parents = h.parents(level + 1);
        let nodes = h.node_count(level);
        // child sums for every shape at level + 1, aggregated to parents
        let sums: Vec<Vec<f64>> = values[level + 1]
            .iter()
            .map(|child_vals| {
                let mut acc = vec![CompensatedSum::new(); nodes];
                for (u, &v) in child_vals.iter().enumerate() {
                    acc[parents[u] as usize].add(v);
                }
                acc.iter().map(|a| a.value()).collect()
            })
            .collect();
        values[level] = t.shapes[level]
            .iter()
            .map(|s| {
                (0..nodes)
                    .map(|v| s.children.iter().map(|&k| sums[k][v]).product())
                    .collect()
            })
            .collect();
        values[level + 1].clear();
    }
    let q: Vec<f64> = t.root_shape.iter().map(|&s| values[0][s][0]).collect();
    let mut p = vec![0.0; q.len()];
    for &c in &t.order {
        let mut acc = CompensatedSum::new();
        acc.add(q[c]);
        for &d in &t.coarser[c] {
            acc.add(-p[d]);
        }
        p[c] = acc.value();
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{RpcParams, WeightVector};
    use crate::rng::RandomStream;
    use crate::function::Factor;

    #[test]
    fn bell_numbers() {
        let counts: Vec<usize> = (0..=6).map(|m| set_partitions(m).len()).collect();
        assert_eq!(counts, vec![1, 1, 2, 5, 15, 52, 203]);
    }

    #[test]
    fn chain_counts() {
        // one level: Bell(m); two levels: sum_k S(m,k) Bell(k)
        assert_eq!(table(4, 1).chains(), 15);
        assert_eq!(table(4, 2).chains(), 60);
        assert_eq!(table(5, 2).chains(), 358);
    }

    #[test]
    fn masses_sum_to_one() {
        let p = RpcParams::new(vec![0.3, 0.6], vec![0.4, 1.0], 5).unwrap();
        let s = crate::measure::sample_rpc(&p, &mut RandomStream::root(1).rng()).unwrap();
        for m in 0..=MAX_CASCADE_REPLICAS {
            let cm = ChainMasses::new(&s, m).unwrap();
            let total: f64 = cm.masses().iter().sum();
            assert!((total - 1.0).abs() < 1e-13, "m={m} total={total}");
            assert!(cm.masses().iter().all(|&x| x > -1e-15));
        }
    }

    #[test]
    fn one_level_pair_overlap_is_sum_of_squares() {
        let h = Hierarchy::new(vec![1.0], vec![vec![0], vec![1]]).unwrap();
        let s = MeasureSample::new(
            WeightVector::new(vec![0.8, 0.2]).unwrap(),
            OverlapModel::Hierarchical(h),
            vec![0, 1],
        )
        .unwrap();
        let cm = ChainMasses::new(&s, 2).unwrap();
        let r12 = Observable::from_factors(vec![Factor::Power { a: 0, b: 1, p: 1 }]).unwrap();
        assert!((cm.average(&r12).unwrap() - 0.68).abs() < 1e-15);
    }

    #[test]
    fn rejects_explicit_gram() {
        let s = crate::measure::standard_negative_control();
        assert!(ChainMasses::new(&s, 2).is_err());
    }
}
