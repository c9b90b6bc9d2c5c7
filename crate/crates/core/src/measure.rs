//! Discrete random measures on the unit ball, represented through their
//! weights and overlap (Gram) structure only.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{usage, Result};
use crate::rng::RandomStream;
use crate::stats::{compensated_sum, z_equality_test_at, MCEstimate, ZTest, DEFAULT_Z_THRESHOLD};

/// Default truncation level for Poisson-Dirichlet style samplers.
pub const DEFAULT_ATOMS: usize = 4096;

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;
pub const PSD_TOLERANCE: f64 = -1e-9;

/// Largest number of atoms a sampler may produce.
pub const MAX_ATOMS: usize = 1 << 22;

/// Normalized, non-negative atom weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    /// Normalizes `raw` to a probability vector.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return usage("weight vector must have at least one atom");
        }
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return usage("weights must be finite and non-negative");
        }
        let total = compensated_sum(raw.iter().copied());
        if total <= 0.0 {
            return usage("weights must have positive total mass");
        }
        let weights: Vec<f64> = raw.into_iter().map(|w| w / total).collect();
        let out = Self { weights };
        out.check()?;
        Ok(out)
    }

    pub(crate) fn from_normalized(weights: Vec<f64>) -> Self {
        debug_assert!(
            (compensated_sum(weights.iter().copied()) - 1.0).abs() <= WEIGHT_SUM_TOLERANCE
        );
        Self { weights }
    }

    pub fn check(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return usage("weights must be finite and non-negative");
        }
        let total = compensated_sum(self.weights.iter().copied());
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return usage(format!("weights sum to {total}, not 1"));
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Slot indices in non-increasing weight order (ties by slot).
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        order
    }

    pub fn sorted(&self) -> Vec<f64> {
        self.ranking().into_iter().map(|i| self.weights[i]).collect()
    }

    /// True when slots are already in non-increasing weight order.
    pub fn is_canonical(&self) -> bool {
        self.weights.windows(2).all(|w| w[0] >= w[1])
    }

    pub fn power_sum(&self, p: i32) -> f64 {
        compensated_sum(self.weights.iter().map(|w| w.powi(p)))
    }
}

/// Normalizes log-weights by factoring out the largest one.
pub(crate) fn normalize_log_weights(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total = compensated_sum(raw.iter().copied());
    raw.into_iter().map(|w| w / total).collect()
}

/// Explicit symmetric Gram matrix of the atoms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GramMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return usage("Gram matrix must be non-empty");
        }
        if rows.iter().any(|r| r.len() != dim) {
            return usage("Gram matrix must be square");
        }
        let entries: Vec<f64> = rows.into_iter().flatten().collect();
        let g = Self { dim, entries };
        g.check()?;
        Ok(g)
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    fn check(&self) -> Result<()> {
        let d = self.dim;
        let self_overlap = self.get(0, 0);
        for i in 0..d {
            for j in 0..d {
                let v = self.get(i, j);
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return usage(format!("Gram entry ({i},{j}) = {v} outside [-1, 1]"));
                }
                if v != self.get(j, i) {
                    return usage(format!("Gram matrix not symmetric at ({i},{j})"));
                }
            }
            if self.get(i, i) != self_overlap {
                return usage("Gram diagonal must be constant (common self-overlap)");
            }
            for j in 0..d {
                if self.get(i, j) > self_overlap {
                    return usage(format!("off-diagonal entry ({i},{j}) exceeds the self-overlap"));
                }
            }
        }
        let m = DMatrix::from_row_slice(d, d, &self.entries);
        let min_eig = SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < PSD_TOLERANCE {
            return usage(format!("Gram matrix is not positive semi-definite (eigenvalue {min_eig})"));
        }
        Ok(())
    }

    fn permuted(&self, order: &[usize]) -> Self {
        let d = self.dim;
        let mut entries = vec![0.0; d * d];
        for (a, &i) in order.iter().enumerate() {
            for (b, &j) in order.iter().enumerate() {
                entries[a * d + b] = self.get(i, j);
            }
        }
        Self { dim: d, entries }
    }
}

/// Tree-indexed overlaps: two atoms whose root-to-leaf paths agree on the
/// first `d` labels have overlap `q_d`, with `q_0 = 0` at the root.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hierarchy {
    qs: Vec<f64>,
    /// Row-major labels, `depth` per atom.
    paths: Vec<u32>,
    #[serde(skip)]
    parents: Vec<Vec<u32>>,
    #[serde(skip)]
    node_counts: Vec<usize>,
}

/// Largest dense (parent, label) table used when numbering tree nodes.
const DENSE_NODE_TABLE: usize = 1 << 24;

impl Hierarchy {
    pub fn new(qs: Vec<f64>, paths: Vec<Vec<u32>>) -> Result<Self> {
        let depth = qs.len();
        if paths.iter().any(|p| p.len() != depth) {
            return usage("every path must have one label per level");
        }
        Self::from_flat(qs, paths.concat())
    }

    /// Builds from row-major labels, `qs.len()` per atom.
    pub fn from_flat(qs: Vec<f64>, paths: Vec<u32>) -> Result<Self> {
        let depth = qs.len();
        if depth == 0 {
            return usage("hierarchy needs at least one level");
        }
        if qs.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return usage("hierarchical overlaps must lie in [0, 1]");
        }
        if qs.windows(2).any(|w| w[0] >= w[1]) {
            return usage("hierarchical overlaps must be strictly increasing");
        }
        if paths.is_empty() || !paths.len().is_multiple_of(depth) {
            return usage("hierarchy needs at least one atom and one label per level");
        }
        let atoms = paths.len() / depth;
        // node ids per depth, in order of first appearance; a node is
        // identified by (parent id, label)
        let mut parents = Vec::with_capacity(depth);
        let mut node_counts = vec![1usize];
        let mut prev_ids = vec![0u32; atoms];
        for level in 0..depth {
            let labels = paths.iter().skip(level).step_by(depth);
            let width = paths.iter().skip(level).step_by(depth).max().map_or(0, |&m| m as usize + 1);
            let prev_count = node_counts[level];
            let mut parent_of = Vec::new();
            let mut level_ids = Vec::with_capacity(atoms);
            if prev_count.saturating_mul(width) <= DENSE_NODE_TABLE {
                let mut table = vec![u32::MAX; prev_count * width];
                for (&parent, &label) in prev_ids.iter().zip(labels) {
                    let slot = &mut table[parent as usize * width + label as usize];
                    if *slot == u32::MAX {
                        *slot = parent_of.len() as u32;
                        parent_of.push(parent);
                    }
                    level_ids.push(*slot);
                }
            } else {
                let mut table: HashMap<(u32, u32), u32> = HashMap::new();
                for (&parent, &label) in prev_ids.iter().zip(labels) {
                    let next = parent_of.len() as u32;
                    let id = *table.entry((parent, label)).or_insert_with(|| {
                        parent_of.push(parent);
                        next
                    });
                    level_ids.push(id);
                }
            }
            node_counts.push(parent_of.len());
            parents.push(parent_of);
            prev_ids = level_ids;
        }
        // distinct full paths make depth-r ids coincide with atom slots
        if node_counts[depth] != atoms {
            return usage("root-to-leaf paths must be distinct");
        }
        Ok(Self {
            qs,
            paths,
            parents,
            node_counts,
        })
    }

    pub fn depth(&self) -> usize {
        self.qs.len()
    }

    pub fn qs(&self) -> &[f64] {
        &self.qs
    }

    pub fn self_overlap(&self) -> f64 {
        self.qs[self.qs.len() - 1]
    }

    pub fn atoms(&self) -> usize {
        self.paths.len() / self.depth()
    }

    pub fn path(&self, atom: usize) -> &[u32] {
        let d = self.depth();
        &self.paths[atom * d..(atom + 1) * d]
    }

    /// Overlap value for a common-ancestor depth `d` (0 = root only).
    #[inline]
    pub fn q_at(&self, d: usize) -> f64 {
        if d == 0 {
            0.0
        } else {
            self.qs[d - 1]
        }
    }

    /// Depth of the deepest common ancestor of two atoms.
    #[inline]
    pub fn common_depth(&self, i: usize, j: usize) -> usize {
        if i == j {
            return self.depth();
        }
        self.path(i)
            .iter()
            .zip(self.path(j))
            .take_while(|(a, b)| a == b)
            .count()
    }

    /// Number of nodes at `depth` (depth 0 is the root, depth r the atoms).
    pub fn node_count(&self, depth: usize) -> usize {
        self.node_counts[depth]
    }

    /// Parent ids (at `depth - 1`) of the nodes at `depth`, for `depth` in 1..=r.
    /// At depth r the nodes are the atom slots.
    pub fn parents(&self, depth: usize) -> &[u32] {
        &self.parents[depth - 1]
    }

    fn permuted(&self, order: &[usize]) -> Self {
        let paths = order.iter().flat_map(|&i| self.path(i).iter().copied()).collect();
        Self::from_flat(self.qs.clone(), paths).expect("permutation of a valid hierarchy")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OverlapModel {
    ExplicitGram(GramMatrix),
    Hierarchical(Hierarchy),
}

impl OverlapModel {
    pub fn dim(&self) -> usize {
        match self {
            OverlapModel::ExplicitGram(g) => g.dim(),
            OverlapModel::Hierarchical(h) => h.atoms(),
        }
    }

    #[inline]
    pub fn overlap(&self, i: usize, j: usize) -> f64 {
        match self {
            OverlapModel::ExplicitGram(g) => g.get(i, j),
            OverlapModel::Hierarchical(h) => h.q_at(h.common_depth(i, j)),
        }
    }

    pub fn self_overlap(&self) -> f64 {
        match self {
            OverlapModel::ExplicitGram(g) => g.get(0, 0),
            OverlapModel::Hierarchical(h) => h.self_overlap(),
        }
    }

    /// Brute-force triple check of R_ij >= min(R_ik, R_jk). O(K^3).
    pub fn is_ultrametric(&self) -> bool {
        let k = self.dim();
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    if self.overlap(i, j) < self.overlap(i, l).min(self.overlap(j, l)) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Dense overlap matrix. Intended for small K.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let k = self.dim();
        (0..k)
            .map(|i| (0..k).map(|j| self.overlap(i, j)).collect())
            .collect()
    }

    fn permuted(&self, order: &[usize]) -> Self {
        match self {
            OverlapModel::ExplicitGram(g) => OverlapModel::ExplicitGram(g.permuted(order)),
            OverlapModel::Hierarchical(h) => OverlapModel::Hierarchical(h.permuted(order)),
        }
    }
}

/// One realization of the random measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureSample {
    weights: WeightVector,
    overlaps: Arc<OverlapModel>,
    labels: Arc<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<String>,
}

impl MeasureSample {
    pub fn new(weights: WeightVector, overlaps: OverlapModel, labels: Vec<u64>) -> Result<Self> {
        if weights.len() != overlaps.dim() || labels.len() != weights.len() {
            return usage(format!(
                "measure has {} weights, overlap dimension {}, {} labels",
                weights.len(),
                overlaps.dim(),
                labels.len()
            ));
        }
        Ok(Self {
            weights,
            overlaps: Arc::new(overlaps),
            labels: Arc::new(labels),
            seed: None,
        })
    }

    /// Sorts atoms into non-increasing weight order, permuting overlaps and
    /// labels alongside.
    pub fn canonicalize(self) -> Self {
        if self.weights.is_canonical() {
            return self;
        }
        let order = self.weights.ranking();
        let weights = WeightVector {
            weights: order.iter().map(|&i| self.weights.weights[i]).collect(),
        };
        let labels = order.iter().map(|&i| self.labels[i]).collect();
        Self {
            weights,
            overlaps: Arc::new(self.overlaps.permuted(&order)),
            labels: Arc::new(labels),
            seed: self.seed,
        }
    }

    pub fn with_seed(mut self, stream: &RandomStream) -> Self {
        self.seed = Some(stream.to_string());
        self
    }

    /// Same atoms and overlaps, new weights.
    pub fn with_weights(&self, weights: WeightVector) -> Result<Self> {
        if weights.len() != self.weights.len() {
            return usage("replacement weights must keep the atom count");
        }
        Ok(Self {
            weights,
            overlaps: Arc::clone(&self.overlaps),
            labels: Arc::clone(&self.labels),
            seed: self.seed.clone(),
        })
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn overlaps(&self) -> &OverlapModel {
        &self.overlaps
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn seed(&self) -> Option<&str> {
        self.seed.as_deref()
    }

    pub fn atoms(&self) -> usize {
        self.weights.len()
    }

    pub fn overlap(&self, i: usize, j: usize) -> Result<f64> {
        let k = self.atoms();
        if i >= k || j >= k {
            return usage(format!("atom index ({i}, {j}) out of range for {k} atoms"));
        }
        Ok(self.overlaps.overlap(i, j))
    }

    pub fn check(&self) -> Result<()> {
        self.weights.check()?;
        if self.weights.len() != self.overlaps.dim() || self.labels.len() != self.weights.len() {
            return usage("weights, overlaps and labels disagree in length");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("measure serializes")
    }
}

/// Parameters of an r-level Ruelle probability cascade.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RpcParams {
    pub zetas: Vec<f64>,
    pub qs: Vec<f64>,
    /// Children per node at each level.
    pub branching: Vec<usize>,
}

impl RpcParams {
    /// Cascade with the same number of children per node at every level.
    pub fn new(zetas: Vec<f64>, qs: Vec<f64>, branching: usize) -> Result<Self> {
        let r = zetas.len();
        Self::with_branching(zetas, qs, vec![branching; r])
    }

    pub fn with_branching(zetas: Vec<f64>, qs: Vec<f64>, branching: Vec<usize>) -> Result<Self> {
        let p = Self {
            zetas,
            qs,
            branching,
        };
        p.check()?;
        Ok(p)
    }

    /// Branching counts with product close to `atoms` that give every level a
    /// similar truncated tail. The mass beyond the c-th child decays like
    /// `c^(1 - 1/zeta)`, so level l gets `log2 c_l` proportional to
    /// `zeta_l / (1 - zeta_l)`.
    pub fn balanced_branching(zetas: &[f64], atoms: usize) -> Vec<usize> {
        let bits = (atoms.max(2) as f64).log2();
        let shares: Vec<f64> = zetas.iter().map(|z| z / (1.0 - z)).collect();
        let total: f64 = shares.iter().sum();
        shares
            .iter()
            .map(|a| (2f64.powf(bits * a / total).round() as usize).max(2))
            .collect()
    }

    pub fn levels(&self) -> usize {
        self.zetas.len()
    }

    pub fn atoms(&self) -> usize {
        self.branching.iter().fold(1usize, |acc, &c| acc.saturating_mul(c))
    }

    pub fn check(&self) -> Result<()> {
        let r = self.zetas.len();
        if r == 0 {
            return usage("cascade needs at least one level");
        }
        if self.qs.len() != r {
            return usage(format!("cascade has {r} zetas but {} overlap values", self.qs.len()));
        }
        if self.zetas.iter().any(|z| !(*z > 0.0 && *z < 1.0)) {
            return usage("cascade zetas must lie in (0, 1)");
        }
        if self.zetas.windows(2).any(|w| w[0] >= w[1]) {
            return usage("cascade zetas must be strictly increasing");
        }
        if self.qs.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return usage("cascade overlaps must lie in [0, 1]");
        }
        if self.qs.windows(2).any(|w| w[0] >= w[1]) {
            return usage("cascade overlaps must be strictly increasing");
        }
        if self.branching.len() != r {
            return usage(format!("cascade needs one branching count per level, got {}", self.branching.len()));
        }
        if self.branching.iter().any(|&c| c < 2) {
            return usage("cascade branching must be at least 2");
        }
        if self.atoms() > MAX_ATOMS {
            return usage(format!("cascade would have more than {MAX_ATOMS} atoms"));
        }
        Ok(())
    }
}

fn check_zeta(zeta: f64) -> Result<()> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return usage(format!("zeta must lie in (0, 1), got {zeta}"));
    }
    Ok(())
}

/// Logs of the `count` largest atoms of a Poisson process with intensity
/// `zeta x^{-1-zeta}`: atom k is `G_k^{-1/zeta}` for the k-th arrival time
/// `G_k` of a unit-rate process. The output is non-increasing.
fn poisson_log_atoms<R: Rng + ?Sized>(zeta: f64, count: usize, rng: &mut R) -> Vec<f64> {
    let mut arrival = 0.0f64;
    (0..count)
        .map(|_| {
            let e: f64 = rng.sample(Exp1);
            arrival += e;
            -arrival.ln() / zeta
        })
        .collect()
}

/// The `atoms` largest normalized weights of a Poisson-Dirichlet(zeta, 0) draw.
pub fn sample_pd<R: Rng + ?Sized>(zeta: f64, atoms: usize, rng: &mut R) -> Result<WeightVector> {
    check_zeta(zeta)?;
    if atoms == 0 || atoms > MAX_ATOMS {
        return usage(format!("atom count must lie in 1..={MAX_ATOMS}, got {atoms}"));
    }
    let logs = poisson_log_atoms(zeta, atoms, rng);
    Ok(WeightVector::from_normalized(normalize_log_weights(&logs)))
}

/// Ruelle probability cascade truncated to `branching[l]` children per node
/// at level l.
/// Leaf weights are proportional to the product of the Poisson atoms along
/// their path; atoms are returned in canonical (non-increasing) order and
/// labelled by their position in tree order.
pub fn sample_rpc<R: Rng + ?Sized>(params: &RpcParams, rng: &mut R) -> Result<MeasureSample> {
    params.check()?;
    let r = params.levels();
    let mut logs = vec![0.0f64];
    for (&zeta, &c) in params.zetas.iter().zip(&params.branching) {
        let mut next_logs = Vec::with_capacity(logs.len() * c);
        for parent_log in &logs {
            next_logs.extend(poisson_log_atoms(zeta, c, rng).into_iter().map(|l| parent_log + l));
        }
        logs = next_logs;
    }
    let weights = normalize_log_weights(&logs);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let sorted_weights = order.iter().map(|&i| weights[i]).collect();
    // tree-order index i has labels given by its mixed-radix digits
    let mut paths = vec![0u32; order.len() * r];
    for (slot, &i) in order.iter().enumerate() {
        let mut rest = i;
        for level in (0..r).rev() {
            let c = params.branching[level];
            paths[slot * r + level] = (rest % c) as u32;
            rest /= c;
        }
    }
    let labels = order.iter().map(|&i| i as u64).collect();
    let hierarchy = Hierarchy::from_flat(params.qs.clone(), paths)?;
    MeasureSample::new(
        WeightVector::from_normalized(sorted_weights),
        OverlapModel::Hierarchical(hierarchy),
        labels,
    )
}

/// A fixed measure with explicit Gram matrix, used as a point-mass law.
pub fn negative_control(weights: &[f64], gram: Vec<Vec<f64>>) -> Result<MeasureSample> {
    let w = WeightVector::new(weights.to_vec())?;
    let g = GramMatrix::new(gram)?;
    let labels = (0..w.len() as u64).collect();
    Ok(MeasureSample::new(w, OverlapModel::ExplicitGram(g), labels)?.canonicalize())
}

/// The two-atom control measure with weights (0.8, 0.2) and orthogonal atoms.
pub fn standard_negative_control() -> MeasureSample {
    negative_control(&[0.8, 0.2], GramMatrix::identity(2).to_rows()).expect("valid control")
}

/// A law over measures that can be sampled from a stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SamplerSpec {
    /// Poisson-Dirichlet weights on mutually orthogonal atoms with the given
    /// self-overlap.
    Pd {
        zeta: f64,
        atoms: usize,
        self_overlap: f64,
    },
    Rpc(RpcParams),
    /// Deterministic measure (every draw identical).
    Fixed { measure: Arc<MeasureSample> },
}

impl SamplerSpec {
    pub fn pd(zeta: f64, atoms: usize) -> Result<Self> {
        let s = SamplerSpec::Pd {
            zeta,
            atoms,
            self_overlap: 1.0,
        };
        s.check()?;
        Ok(s)
    }

    pub fn rpc(zetas: Vec<f64>, qs: Vec<f64>, branching: Vec<usize>) -> Result<Self> {
        Ok(SamplerSpec::Rpc(RpcParams::with_branching(zetas, qs, branching)?))
    }

    pub fn fixed(measure: MeasureSample) -> Self {
        SamplerSpec::Fixed {
            measure: Arc::new(measure),
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            SamplerSpec::Pd {
                zeta,
                atoms,
                self_overlap,
            } => {
                check_zeta(*zeta)?;
                if *atoms == 0 || *atoms > MAX_ATOMS {
                    return usage(format!("atom count must lie in 1..={MAX_ATOMS}"));
                }
                if !(*self_overlap > 0.0 && *self_overlap <= 1.0) {
                    return usage("self-overlap must lie in (0, 1]");
                }
                Ok(())
            }
            SamplerSpec::Rpc(p) => p.check(),
            SamplerSpec::Fixed { measure } => measure.check(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            SamplerSpec::Pd { .. } => "pd",
            SamplerSpec::Rpc(_) => "rpc",
            SamplerSpec::Fixed { .. } => "negative-control",
        }
    }

    pub fn atoms(&self) -> usize {
        match self {
            SamplerSpec::Pd { atoms, .. } => *atoms,
            SamplerSpec::Rpc(p) => p.atoms(),
            SamplerSpec::Fixed { measure } => measure.atoms(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, SamplerSpec::Fixed { .. })
    }

    pub fn sample(&self, stream: &RandomStream) -> Result<MeasureSample> {
        match self {
            SamplerSpec::Pd {
                zeta,
                atoms,
                self_overlap,
            } => {
                let w = sample_pd(*zeta, *atoms, &mut stream.rng())?;
                let h = Hierarchy::from_flat(vec![*self_overlap], (0..*atoms as u32).collect())?;
                let labels = (0..*atoms as u64).collect();
                Ok(MeasureSample::new(w, OverlapModel::Hierarchical(h), labels)?.with_seed(stream))
            }
            SamplerSpec::Rpc(p) => Ok(sample_rpc(p, &mut stream.rng())?.with_seed(stream)),
            SamplerSpec::Fixed { measure } => Ok(MeasureSample::clone(measure)),
        }
    }

    /// Law of the overlap of two independent replicas as (value, probability)
    /// pairs, sorted by value. Exact for the untruncated cascade families and
    /// for fixed measures.
    pub fn overlap_law(&self) -> Vec<(f64, f64)> {
        let mut law: Vec<(f64, f64)> = match self {
            SamplerSpec::Pd {
                zeta, self_overlap, ..
            } => vec![(0.0, *zeta), (*self_overlap, 1.0 - zeta)],
            SamplerSpec::Rpc(p) => {
                let r = p.levels();
                let mut out = vec![(0.0, p.zetas[0])];
                for l in 0..r {
                    let next = if l + 1 < r { p.zetas[l + 1] } else { 1.0 };
                    out.push((p.qs[l], next - p.zetas[l]));
                }
                out
            }
            SamplerSpec::Fixed { measure } => {
                let w = measure.weights().as_slice();
                let k = w.len();
                let mut pairs = Vec::with_capacity(k * k);
                for i in 0..k {
                    for j in 0..k {
                        pairs.push((measure.overlaps().overlap(i, j), w[i] * w[j]));
                    }
                }
                pairs
            }
        };
        law.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (v, p) in law {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += p,
                _ => merged.push((v, p)),
            }
        }
        merged
    }

    /// Smallest overlap value whose cumulative probability exceeds 1/2.
    pub fn overlap_median(&self) -> f64 {
        let law = self.overlap_law();
        let mut cdf = 0.0;
        for &(v, p) in &law {
            cdf += p;
            if cdf > 0.5 {
                return v;
            }
        }
        law.last().map(|l| l.0).unwrap_or(0.0)
    }
}

/// Outcome of comparing mean sum of squared weights at K and 2K atoms.
#[derive(Debug, Clone, Serialize)]
pub struct TruncationCheck {
    pub atoms: usize,
    pub at_k: MCEstimate,
    pub at_2k: MCEstimate,
    pub test: ZTest,
}

/// Truncation-bias self-check for `sample_pd`: the mean of sum w^2 at K and
/// 2K atoms should agree within three combined standard errors.
pub fn pd_truncation_check(
    zeta: f64,
    atoms: usize,
    samples: usize,
    stream: &RandomStream,
) -> Result<TruncationCheck> {
    check_zeta(zeta)?;
    if samples < 2 {
        return usage("truncation check needs at least 2 samples");
    }
    let run = |k: usize, branch: u64| -> Result<MCEstimate> {
        let s = stream.derive(branch);
        let vals = (0..samples as u64)
            .map(|i| Ok(sample_pd(zeta, k, &mut s.derive(i).rng())?.power_sum(2)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(MCEstimate::from_values(&vals, 1, stream.seed(), s.to_string()))
    };
    let at_k = run(atoms, 0)?;
    let at_2k = run(2 * atoms, 1)?;
    let test = z_equality_test_at(&at_k, &at_2k, DEFAULT_Z_THRESHOLD);
    Ok(TruncationCheck {
        atoms,
        at_k,
        at_2k,
        test,
    })
}
