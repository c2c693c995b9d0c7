//! Second-order regression trees with exact greedy split search.
//!
//! Every distinct training value of a feature is its own bin, so scanning bin
//! boundaries enumerates exactly the candidate thresholds of an exact greedy
//! search. Thresholds sit at midpoints between consecutive distinct values and
//! a row goes left when `x < threshold`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_CHILD_WEIGHT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        /// Column index into the dataset schema.
        feature: usize,
        name: String,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    max_depth: usize,
    /// Node 0 is the root.
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn leaf(value: f64, max_depth: usize) -> Self {
        Self { max_depth, nodes: vec![TreeNode::Leaf { value }] }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Output for a schema-aligned covariate row.
    #[inline]
    pub fn predict(&self, covariates: &[f64]) -> f64 {
        let mut k = 0usize;
        loop {
            match &self.nodes[k] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right, .. } => {
                    k = if covariates[*feature] < *threshold { *left } else { *right } as usize;
                }
            }
        }
    }

    /// Structural checks for trees read from disk.
    pub fn validate(&self, schema_names: &[String]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Data("tree without nodes".into()));
        }
        let mut depth = vec![usize::MAX; self.nodes.len()];
        depth[0] = 0;
        for (k, node) in self.nodes.iter().enumerate() {
            if depth[k] == usize::MAX {
                return Err(Error::Data(format!("tree node {k} is unreachable or out of order")));
            }
            match node {
                TreeNode::Leaf { value } if !value.is_finite() => {
                    return Err(Error::Data(format!("tree leaf {k} is not finite")));
                }
                TreeNode::Leaf { .. } => {}
                TreeNode::Split { feature, name, threshold, left, right } => {
                    if schema_names.get(*feature) != Some(name) {
                        return Err(Error::Schema(format!("tree splits on unknown feature `{name}`")));
                    }
                    if !threshold.is_finite() {
                        return Err(Error::Data(format!("tree node {k} has a non-finite threshold")));
                    }
                    for &c in [left, right] {
                        let c = c as usize;
                        if c <= k || c >= self.nodes.len() || depth[c] != usize::MAX {
                            return Err(Error::Data(format!("tree node {k} has an invalid child")));
                        }
                        depth[c] = depth[k] + 1;
                    }
                    if depth[k] + 1 > self.max_depth {
                        return Err(Error::Data("tree deeper than its max_depth".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-feature distinct-value binning of a fixed set of training units.
#[derive(Clone, Debug)]
pub struct BinnedFeatures {
    columns: Vec<usize>,
    names: Vec<String>,
    thresholds: Vec<Vec<f64>>,
    offsets: Vec<usize>,
    bins: Vec<Vec<u32>>,
    n_units: usize,
}

fn split_point(a: f64, b: f64) -> f64 {
    let mid = a + (b - a) / 2.0;
    if a < mid && mid <= b {
        mid
    } else {
        b
    }
}

impl BinnedFeatures {
    /// `values[f][u]` is feature `f` of unit `u`; `columns[f]` is the schema
    /// column the feature is read from at prediction time.
    pub fn new(columns: Vec<usize>, names: Vec<String>, values: &[Vec<f64>]) -> Result<Self> {
        if columns.len() != names.len() || columns.len() != values.len() {
            return Err(Error::Contract("feature columns, names and values disagree".into()));
        }
        let n_units = values.first().map_or(0, Vec::len);
        let mut thresholds = Vec::with_capacity(values.len());
        let mut bins = Vec::with_capacity(values.len());
        let mut offsets = vec![0];
        for col in values {
            if col.len() != n_units {
                return Err(Error::Contract("ragged feature matrix".into()));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite feature value".into()));
            }
            let mut distinct = col.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let b: Vec<u32> = col
                .iter()
                .map(|v| distinct.partition_point(|d| d < v) as u32)
                .collect();
            thresholds.push(distinct.windows(2).map(|w| split_point(w[0], w[1])).collect());
            bins.push(b);
            offsets.push(offsets.last().unwrap() + distinct.len().max(1));
        }
        Ok(Self { columns, names, thresholds, offsets, bins, n_units })
    }

    /// Bin the given schema columns over `rows` of `data`; unit `u` is `rows[u]`.
    pub fn from_dataset(data: &Dataset, rows: &[usize], columns: &[usize]) -> Result<Self> {
        let names = columns.iter().map(|&c| data.schema().name(c).to_string()).collect();
        Self::new(columns.to_vec(), names, &data.column_matrix(rows, columns))
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    fn total_bins(&self) -> usize {
        *self.offsets.last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_child_weight: f64,
}

impl TreeParams {
    pub fn new(max_depth: usize) -> Self {
        Self { max_depth, min_child_weight: DEFAULT_MIN_CHILD_WEIGHT }
    }
}

/// `(Σg, Σh, count)` per bin.
type Hist = Vec<[f64; 3]>;

struct Builder<'a> {
    features: &'a BinnedFeatures,
    g: &'a [f64],
    h: &'a [f64],
    params: TreeParams,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    bin: u32,
}

impl Builder<'_> {
    fn histogram(&self, units: &[u32]) -> Hist {
        let mut hist = vec![[0.0; 3]; self.features.total_bins()];
        for (f, bins) in self.features.bins.iter().enumerate() {
            let base = self.features.offsets[f];
            for &u in units {
                let cell = &mut hist[base + bins[u as usize] as usize];
                cell[0] += self.g[u as usize];
                cell[1] += self.h[u as usize];
                cell[2] += 1.0;
            }
        }
        hist
    }

    fn best_split(&self, hist: &Hist, gp: f64, hp: f64, np: f64) -> Option<BestSplit> {
        let mcw = self.params.min_child_weight;
        let parent = gp * gp / hp;
        let mut best: Option<BestSplit> = None;
        for f in 0..self.features.n_features() {
            let cells = &hist[self.features.offsets[f]..self.features.offsets[f + 1]];
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0.0);
            for (b, cell) in cells[..cells.len() - 1].iter().enumerate() {
                gl += cell[0];
                hl += cell[1];
                nl += cell[2];
                let (gr, hr, nr) = (gp - gl, hp - hl, np - nl);
                if nl == 0.0 || nr == 0.0 || hl < mcw || hr < mcw {
                    continue;
                }
                let gain = gl * gl / hl + gr * gr / hr - parent;
                if gain > best.as_ref().map_or(0.0, |s| s.gain) {
                    best = Some(BestSplit { gain, feature: f, bin: b as u32 });
                }
            }
        }
        best
    }

    fn leaf(&mut self, gp: f64, hp: f64) -> u32 {
        let value = if hp > 0.0 { -gp / hp } else { 0.0 };
        self.nodes.push(TreeNode::Leaf { value });
        (self.nodes.len() - 1) as u32
    }

    fn grow(&mut self, units: Vec<u32>, hist: Hist, gp: f64, hp: f64, depth: usize) -> u32 {
        if depth >= self.params.max_depth || hp < self.params.min_child_weight {
            return self.leaf(gp, hp);
        }
        let Some(split) = self.best_split(&hist, gp, hp, units.len() as f64) else {
            return self.leaf(gp, hp);
        };
        let bins = &self.features.bins[split.feature];
        let (left, right): (Vec<u32>, Vec<u32>) = units.iter().partition(|&&u| bins[u as usize] <= split.bin);
        let (small, large_is_left) = if left.len() <= right.len() { (&left, false) } else { (&right, true) };
        let small_hist = self.histogram(small);
        let mut large_hist = hist;
        for (l, s) in large_hist.iter_mut().zip(&small_hist) {
            l[0] -= s[0];
            l[1] -= s[1];
            l[2] -= s[2];
        }
        let (left_hist, right_hist) = if large_is_left { (large_hist, small_hist) } else { (small_hist, large_hist) };
        let sums = |units: &[u32]| -> (f64, f64) {
            units.iter().fold((0.0, 0.0), |(g, h), &u| (g + self.g[u as usize], h + self.h[u as usize]))
        };
        let (gl, hl) = sums(&left);
        let (gr, hr) = sums(&right);

        let f = split.feature;
        let me = self.nodes.len();
        self.nodes.push(TreeNode::Split {
            feature: self.features.columns[f],
            name: self.features.names[f].clone(),
            threshold: self.features.thresholds[f][split.bin as usize],
            left: 0,
            right: 0,
        });
        let l = self.grow(left, left_hist, gl, hl, depth + 1);
        let r = self.grow(right, right_hist, gr, hr, depth + 1);
        if let TreeNode::Split { left, right, .. } = &mut self.nodes[me] {
            *left = l;
            *right = r;
        }
        me as u32
    }
}

/// Fit one tree to per-unit gradients `g` and Hessians `h` (indexed by unit)
/// over the listed `units`. Node statistics are plain sums, so the minimised
/// objective is `Σ_leaf [G δ + H δ² / 2]` with optimum `δ = -G/H`.
pub fn fit_regression_tree(
    features: &BinnedFeatures,
    units: &[u32],
    g: &[f64],
    h: &[f64],
    params: TreeParams,
) -> Result<RegressionTree> {
    if units.is_empty() {
        return Err(Error::Contract("cannot fit a tree to zero rows".into()));
    }
    if params.max_depth == 0 {
        return Err(Error::Config("tree depth must be at least 1".into()));
    }
    if g.len() != features.n_units() || h.len() != features.n_units() {
        return Err(Error::Contract("gradient length differs from the binned unit count".into()));
    }
    let mut builder = Builder { features, g, h, params, nodes: Vec::new() };
    let (gp, hp) = units.iter().fold((0.0, 0.0), |(a, b), &u| (a + g[u as usize], b + h[u as usize]));
    if !(gp.is_finite() && hp.is_finite()) {
        return Err(Error::Numerical("non-finite gradient statistics".into()));
    }
    let hist = if features.n_features() > 0 { builder.histogram(units) } else { Vec::new() };
    builder.grow(units.to_vec(), hist, gp, hp, 0);
    Ok(RegressionTree { max_depth: params.max_depth, nodes: builder.nodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binned(values: Vec<Vec<f64>>) -> BinnedFeatures {
        let names = (0..values.len()).map(|i| format!("f{i}")).collect();
        BinnedFeatures::new((0..values.len()).collect(), names, &values).unwrap()
    }

    fn all_units(n: usize) -> Vec<u32> {
        (0..n as u32).collect()
    }

    #[test]
    fn constant_features_give_a_single_leaf() {
        let f = binned(vec![vec![1.0; 4]]);
        let g = [1.0, -2.0, 0.5, 0.25];
        let h = [1.0; 4];
        let t = fit_regression_tree(&f, &all_units(4), &g, &h, TreeParams::new(3)).unwrap();
        assert_eq!(t.nodes(), &[TreeNode::Leaf { value: 0.0625 }]);
    }

    #[test]
    fn separating_binary_feature() {
        let f = binned(vec![vec![0.0, 0.0, 1.0, 1.0]]);
        let g = [1.0, 1.0, -1.0, -3.0];
        let h = [1.0, 1.0, 1.0, 1.0];
        let t = fit_regression_tree(&f, &all_units(4), &g, &h, TreeParams::new(1)).unwrap();
        assert_eq!(t.n_leaves(), 2);
        assert_eq!(t.predict(&[0.0]), -1.0);
        assert_eq!(t.predict(&[1.0]), 2.0);
        match &t.nodes()[0] {
            TreeNode::Split { threshold, .. } => assert_eq!(*threshold, 0.5),
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn ties_prefer_lowest_feature_then_threshold() {
        // Features 0 and 1 induce the same partition.
        let f = binned(vec![vec![0.0, 1.0, 2.0, 3.0], vec![5.0, 6.0, 7.0, 8.0]]);
        let g = [1.0, 1.0, -1.0, -1.0];
        let h = [1.0; 4];
        let t = fit_regression_tree(&f, &all_units(4), &g, &h, TreeParams::new(1)).unwrap();
        match &t.nodes()[0] {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 1.5);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn min_child_weight_blocks_light_children() {
        let f = binned(vec![vec![0.0, 1.0]]);
        let t = fit_regression_tree(
            &f,
            &all_units(2),
            &[1.0, -1.0],
            &[1e-4, 1.0],
            TreeParams::new(2),
        )
        .unwrap();
        assert_eq!(t.n_leaves(), 1);
    }

    #[test]
    fn zero_hessian_yields_zero_leaf() {
        let f = binned(vec![vec![0.0, 1.0]]);
        let t = fit_regression_tree(&f, &all_units(2), &[0.0, 0.0], &[0.0, 0.0], TreeParams::new(2)).unwrap();
        assert_eq!(t.predict(&[0.0]), 0.0);
    }

    #[test]
    fn adjacent_floats_split_correctly() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let f = binned(vec![vec![a, b]]);
        let t = fit_regression_tree(&f, &all_units(2), &[1.0, -1.0], &[1.0, 1.0], TreeParams::new(1)).unwrap();
        assert_eq!(t.predict(&[a]), -1.0);
        assert_eq!(t.predict(&[b]), 1.0);
    }

    #[test]
    fn validate_rejects_bad_structures() {
        let names = vec!["a".to_string()];
        let ok = RegressionTree {
            max_depth: 1,
            nodes: vec![
                TreeNode::Split { feature: 0, name: "a".into(), threshold: 0.5, left: 1, right: 2 },
                TreeNode::Leaf { value: 1.0 },
                TreeNode::Leaf { value: 2.0 },
            ],
        };
        ok.validate(&names).unwrap();
        let mut bad = ok.clone();
        bad.nodes[0] = TreeNode::Split { feature: 0, name: "b".into(), threshold: 0.5, left: 1, right: 2 };
        assert!(bad.validate(&names).is_err());
        let mut cyclic = ok;
        cyclic.nodes[0] = TreeNode::Split { feature: 0, name: "a".into(), threshold: 0.5, left: 0, right: 2 };
        assert!(cyclic.validate(&names).is_err());
    }
}
