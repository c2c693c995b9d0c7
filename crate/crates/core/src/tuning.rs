//! Random grid search over learner hyperparameters.
//!
//! A grid maps parameter names to candidate values. Configurations are the
//! points of the Cartesian product, indexed in mixed radix with the last key
//! (in sorted order) varying fastest. `budget` distinct indices are drawn
//! uniformly without replacement, each configuration is fitted with
//! [`run_em`], and the one with the highest observed log-likelihood on the
//! val2 split wins. Ties go to the configuration sampled first.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Dataset;
use crate::em::{run_em, EmConfig};
use crate::error::{Error, Result};
use crate::learner::LearnerConfig;

/// Candidate values per parameter. Keys are kept sorted.
pub type Grid = BTreeMap<String, Vec<Value>>;

/// Grid file: the learner kind plus the value lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub kind: String,
    pub grid: Grid,
}

impl GridSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("grid file: {e}")))
    }

    /// Default configuration of the grid's learner kind.
    pub fn base_config(&self) -> Result<LearnerConfig> {
        serde_json::from_value(serde_json::json!({ "kind": self.kind }))
            .map_err(|e| Error::Config(format!("grid file: unknown learner kind `{}`: {e}", self.kind)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TuningRow {
    /// Position in the sampling order.
    pub sample: usize,
    /// Index of the configuration in the grid product.
    pub grid_index: usize,
    pub config: LearnerConfig,
    /// Observed LL on val2 at the selected EM iteration.
    pub val2_ll: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TuningResult {
    pub best: LearnerConfig,
    pub best_sample: usize,
    /// One row per sampled configuration, in sampling order.
    pub table: Vec<TuningRow>,
}

/// Number of configurations in the grid product.
pub fn grid_size(grid: &Grid) -> Result<usize> {
    if grid.is_empty() {
        return Err(Error::Config("tuning grid is empty".into()));
    }
    let mut size = 1usize;
    for (name, values) in grid {
        if values.is_empty() {
            return Err(Error::Config(format!("tuning grid entry `{name}` has no values")));
        }
        size = size
            .checked_mul(values.len())
            .ok_or_else(|| Error::Config("tuning grid product is too large".into()))?;
    }
    Ok(size)
}

/// Parameter overrides of configuration `index`.
pub fn grid_point(grid: &Grid, mut index: usize) -> serde_json::Map<String, Value> {
    let mut picks: Vec<(&String, &Value)> = Vec::with_capacity(grid.len());
    for (name, values) in grid.iter().rev() {
        picks.push((name, &values[index % values.len()]));
        index /= values.len();
    }
    picks.into_iter().rev().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// `base` with `overrides` applied. Unknown names are configuration errors.
pub fn apply_overrides(base: &LearnerConfig, overrides: &serde_json::Map<String, Value>) -> Result<LearnerConfig> {
    let mut value = serde_json::to_value(base)?;
    let obj = value.as_object_mut().expect("learner configs serialize as objects");
    for (k, v) in overrides {
        if k == "kind" {
            return Err(Error::Config("the learner kind cannot be tuned".into()));
        }
        obj.insert(k.clone(), v.clone());
    }
    let config: LearnerConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("{} grid: {e}", base.kind())))?;
    config.validate()?;
    Ok(config)
}

/// Grid indices to evaluate, in sampling order. Exhaustive when the budget
/// covers the grid.
pub fn sample_indices(size: usize, budget: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, size, budget.min(size)).into_vec()
}

/// Fit every sampled configuration on `data` and pick the best by val2 LL.
pub fn random_grid_search(
    data: &Dataset,
    base: &LearnerConfig,
    grid: &Grid,
    budget: usize,
    seed: u64,
    em: &EmConfig,
) -> Result<TuningResult> {
    if budget == 0 {
        return Err(Error::Config("tuning budget must be at least 1".into()));
    }
    let size = grid_size(grid)?;
    let indices = sample_indices(size, budget, seed);
    // Resolve every configuration before fitting so typos fail fast.
    let configs: Vec<LearnerConfig> =
        indices.iter().map(|&i| apply_overrides(base, &grid_point(grid, i))).collect::<Result<_>>()?;

    let mut table = Vec::with_capacity(indices.len());
    for (sample, (&grid_index, config)) in indices.iter().zip(configs).enumerate() {
        let started = Instant::now();
        let fit = run_em(data, &config, em, None)?;
        let val2_ll = fit.ll_trace[fit.best_iteration - 1];
        if val2_ll.is_nan() {
            return Err(Error::Data("tuning needs a non-empty val2 split".into()));
        }
        table.push(TuningRow { sample, grid_index, config, val2_ll, seconds: started.elapsed().as_secs_f64() });
    }
    let mut best_sample = 0;
    for row in &table[1..] {
        if row.val2_ll > table[best_sample].val2_ll {
            best_sample = row.sample;
        }
    }
    Ok(TuningResult { best: table[best_sample].config.clone(), best_sample, table })
}

/// Bundled grids (`gbt`, `mlp`) and selected settings (`gbt_linear`,
/// `gbt_nonlinear`, `gbt_cases` and the `mlp_*` counterparts).
pub mod presets {
    use super::GridSpec;
    use crate::error::{Error, Result};
    use crate::learner::LearnerConfig;

    const GRIDS: [(&str, &str); 2] =
        [("gbt", include_str!("../presets/gbt_grid.json")), ("mlp", include_str!("../presets/mlp_grid.json"))];

    const CONFIGS: [(&str, &str); 6] = [
        ("gbt_linear", include_str!("../presets/gbt_linear.json")),
        ("gbt_nonlinear", include_str!("../presets/gbt_nonlinear.json")),
        ("gbt_cases", include_str!("../presets/gbt_cases.json")),
        ("mlp_linear", include_str!("../presets/mlp_linear.json")),
        ("mlp_nonlinear", include_str!("../presets/mlp_nonlinear.json")),
        ("mlp_cases", include_str!("../presets/mlp_cases.json")),
    ];

    pub fn grid(kind: &str) -> Result<GridSpec> {
        let (_, text) = GRIDS
            .iter()
            .find(|(k, _)| *k == kind)
            .ok_or_else(|| Error::Config(format!("no preset grid `{kind}`")))?;
        GridSpec::from_json(text)
    }

    pub fn config(name: &str) -> Result<LearnerConfig> {
        let (_, text) = CONFIGS
            .iter()
            .find(|(k, _)| *k == name)
            .ok_or_else(|| Error::Config(format!("no preset configuration `{name}`")))?;
        let config: LearnerConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("preset `{name}`: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn config_names() -> impl Iterator<Item = &'static str> {
        CONFIGS.iter().map(|(k, _)| *k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn grid(entries: &[(&str, Vec<Value>)]) -> Grid {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn grid_points_enumerate_the_product() {
        let g = grid(&[("a", vec![json!(1), json!(2)]), ("b", vec![json!(10), json!(20), json!(30)])]);
        assert_eq!(grid_size(&g).unwrap(), 6);
        let points: Vec<_> = (0..6).map(|i| (grid_point(&g, i)["a"].clone(), grid_point(&g, i)["b"].clone())).collect();
        assert_eq!(points[0], (json!(1), json!(10)));
        assert_eq!(points[1], (json!(1), json!(20)));
        assert_eq!(points[3], (json!(2), json!(10)));
        let mut uniq = points.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 6);
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        assert!(matches!(grid_size(&Grid::new()), Err(Error::Config(_))));
        let g = grid(&[("eta_occ", vec![])]);
        assert!(matches!(grid_size(&g), Err(Error::Config(_))));
    }

    #[test]
    fn large_budget_is_exhaustive() {
        let mut s = sample_indices(7, 100, 3);
        s.sort_unstable();
        assert_eq!(s, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_is_seeded_and_distinct() {
        let a = sample_indices(1000, 50, 11);
        assert_eq!(a, sample_indices(1000, 50, 11));
        let mut u = a.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 50);
    }

    #[test]
    fn overrides_reject_unknown_names() {
        let base = LearnerConfig::Gbt(Default::default());
        let mut o = serde_json::Map::new();
        o.insert("eta_occc".into(), json!(0.1));
        assert!(matches!(apply_overrides(&base, &o), Err(Error::Config(_))));
        o.clear();
        o.insert("eta_occ".into(), json!(0.1));
        match apply_overrides(&base, &o).unwrap() {
            LearnerConfig::Gbt(p) => assert_eq!(p.eta_occ, 0.1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn preset_grids_hold_the_expected_value_lists() {
        let gbt = presets::grid("gbt").unwrap();
        assert_eq!(gbt.base_config().unwrap().kind(), "gbt");
        assert_eq!(gbt.grid["eta_occ"], vec![json!(0.01), json!(0.05), json!(0.1)]);
        assert_eq!(gbt.grid["eta_rep"], vec![json!(0.001), json!(0.005), json!(0.01)]);
        assert_eq!(gbt.grid["tree_depth_rep"], vec![json!(3), json!(5), json!(7)]);
        assert_eq!(gbt.grid["t_first_occ"], vec![json!(20), json!(40)]);
        let mlp = presets::grid("mlp").unwrap();
        assert_eq!(mlp.grid["q1_occ"], vec![json!(5), json!(10), json!(15)]);
        assert_eq!(mlp.grid["lr_rep"].len(), 5);
        assert_eq!(mlp.grid["batch_occ"], vec![json!(32), json!(64), json!(128), json!(256)]);
        for spec in [gbt, mlp] {
            let base = spec.base_config().unwrap();
            let size = grid_size(&spec.grid).unwrap();
            for i in [0, size / 2, size - 1] {
                apply_overrides(&base, &grid_point(&spec.grid, i)).unwrap();
            }
        }
    }

    #[test]
    fn preset_configs_parse() {
        for name in presets::config_names() {
            presets::config(name).unwrap();
        }
        match presets::config("gbt_nonlinear").unwrap() {
            LearnerConfig::Gbt(p) => assert_eq!(p, Default::default()),
            other => panic!("unexpected {other:?}"),
        }
        match presets::config("mlp_linear").unwrap() {
            LearnerConfig::Mlp(p) => assert_eq!((p.q1_occ, p.lr_occ, p.nn_patience_rep), (10, 0.00005, 10)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
