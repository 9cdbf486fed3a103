use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::barycenter::BarycenterParams;
use crate::error::{Error, Result};
use crate::features::DateEncoding;
use crate::forest::ForestParams;
use crate::preprocess::MobilityVariant;
use crate::spatial::{default_reference_date, NO_ORDER_REACTION_TIME};
use crate::transport::{SinkhornParams, Solver};

/// Everything a pipeline run depends on. Relative paths are resolved against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub distance: DistanceConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub barycenter: BarycenterConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker cap; 0 uses every core. Never affects results.
    #[serde(default)]
    pub threads: usize,
    /// Turn solver non-convergence into a failed stage instead of a warning.
    #[serde(default)]
    pub fail_on_nonconvergence: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("otseries-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub timeseries: PathBuf,
    #[serde(default)]
    pub covariates: Option<PathBuf>,
    /// `src_id,dst_id,weight` edge list; without it, k-nearest-neighbor
    /// weights are built from covariate coordinates when present.
    #[serde(default)]
    pub spatial_weights: Option<PathBuf>,
    #[serde(default)]
    pub start_date: Option<NaiveDate>,
    #[serde(default)]
    pub end_date: Option<NaiveDate>,
    #[serde(default)]
    pub min_cases: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub variants: Vec<MobilityVariant>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            variants: MobilityVariant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Exact,
    Sinkhorn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceConfig {
    pub p: f64,
    pub solver: SolverKind,
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        let s = SinkhornParams::default();
        DistanceConfig {
            p: 2.0,
            solver: SolverKind::Exact,
            epsilon: s.epsilon,
            max_iter: s.max_iter,
            tol: s.tol,
        }
    }
}

impl DistanceConfig {
    pub fn solver(&self) -> Solver {
        match self.solver {
            SolverKind::Exact => Solver::Exact,
            SolverKind::Sinkhorn => Solver::Sinkhorn {
                epsilon: self.epsilon,
                max_iter: self.max_iter,
                tol: self.tol,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub n_clusters: usize,
    /// Variant whose clustering feeds the barycenter and covariate stages.
    pub selected: MobilityVariant,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_clusters: 10,
            selected: MobilityVariant::Mprime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarycenterConfig {
    /// Bins per axis.
    pub resolution: usize,
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub debias: bool,
}

impl Default for BarycenterConfig {
    fn default() -> Self {
        let p = BarycenterParams::default();
        BarycenterConfig {
            resolution: 20,
            epsilon: p.epsilon,
            max_iter: p.max_iter,
            tol: p.tol,
            debias: p.debias,
        }
    }
}

impl BarycenterConfig {
    pub fn params(&self) -> BarycenterParams {
        BarycenterParams {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            tol: self.tol,
            debias: self.debias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub shapley_samples: usize,
    pub permutations: usize,
    /// Neighbors per city for coordinate-based weights.
    pub knn: usize,
    /// Mirror each edge of the weights file.
    pub symmetric_weights: bool,
    pub include_raw_date: bool,
    pub reference_date: NaiveDate,
    pub absent_reaction_time: i64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            n_trees: 500,
            max_depth: None,
            min_leaf: 1,
            shapley_samples: 2000,
            permutations: 999,
            knn: 5,
            symmetric_weights: true,
            include_raw_date: false,
            reference_date: default_reference_date(),
            absent_reaction_time: NO_ORDER_REACTION_TIME,
        }
    }
}

impl AnalysisConfig {
    pub fn forest(&self, seed: u64) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            seed,
        }
    }

    pub fn dates(&self) -> DateEncoding {
        DateEncoding {
            reference: self.reference_date,
            absent_value: self.absent_reaction_time,
            include_raw_date: self.include_raw_date,
        }
    }
}

impl PipelineConfig {
    /// A config with defaults everywhere except the time-series path.
    pub fn new(timeseries: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            input: InputConfig {
                timeseries: timeseries.into(),
                covariates: None,
                spatial_weights: None,
                start_date: None,
                end_date: None,
                min_cases: 0,
            },
            embed: EmbedConfig::default(),
            distance: DistanceConfig::default(),
            cluster: ClusterConfig::default(),
            barycenter: BarycenterConfig::default(),
            analysis: AnalysisConfig::default(),
            seed: 0,
            output_dir: default_output_dir(),
            threads: 0,
            fail_on_nonconvergence: false,
        }
    }

    /// Reads a TOML config, applies `key.path=value` overrides, resolves
    /// relative paths and validates.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    pub fn from_toml(text: &str, base: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (key, raw) in overrides {
            set_path(&mut value, key, parse_override(raw))?;
        }
        dates_to_strings(&mut value);
        let mut cfg: PipelineConfig = value.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input.timeseries);
        self.input.covariates.as_mut().map(fix);
        self.input.spatial_weights.as_mut().map(fix);
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let mut paths = vec![("timeseries", &self.input.timeseries)];
        paths.extend(self.input.covariates.iter().map(|p| ("covariates", p)));
        paths.extend(self.input.spatial_weights.iter().map(|p| ("spatial_weights", p)));
        for (role, p) in paths {
            if !p.is_file() {
                return bad(format!("{role} file {} does not exist", p.display()));
            }
        }
        if let (Some(a), Some(b)) = (self.input.start_date, self.input.end_date) {
            if a > b {
                return bad(format!("start_date {a} is after end_date {b}"));
            }
        }
        let v = &self.embed.variants;
        if v.is_empty() {
            return bad("embed.variants is empty".into());
        }
        if (1..v.len()).any(|i| v[..i].contains(&v[i])) {
            return bad("embed.variants lists a variant twice".into());
        }
        if !v.contains(&self.cluster.selected) {
            return bad(format!("cluster.selected {} is not among embed.variants", self.cluster.selected));
        }
        if !(self.distance.p >= 1.0 && self.distance.p.is_finite()) {
            return bad(format!("distance.p must be at least 1, got {}", self.distance.p));
        }
        if self.distance.solver == SolverKind::Sinkhorn && !(self.distance.epsilon > 0.0) {
            return bad("distance.epsilon must be positive".into());
        }
        if self.cluster.n_clusters == 0 {
            return bad("cluster.n_clusters must be positive".into());
        }
        if self.barycenter.resolution == 0 || !(self.barycenter.epsilon > 0.0) {
            return bad("barycenter.resolution and barycenter.epsilon must be positive".into());
        }
        if self.analysis.shapley_samples < crate::shapley::MIN_SAMPLES {
            return bad(format!(
                "analysis.shapley_samples must be at least {}",
                crate::shapley::MIN_SAMPLES
            ));
        }
        if self.analysis.n_trees == 0 || self.analysis.knn == 0 {
            return bad("analysis.n_trees and analysis.knn must be positive".into());
        }
        Ok(())
    }
}

/// Override values are read as TOML scalars or arrays when they parse as
/// such and as plain strings otherwise.
fn parse_override(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Bare TOML dates (`start_date = 2020-03-01`) become the strings the date
/// fields expect.
fn dates_to_strings(table: &mut toml::Table) {
    fn fix(v: &mut toml::Value) {
        match v {
            toml::Value::Datetime(d) => *v = toml::Value::String(d.to_string()),
            toml::Value::Table(t) => t.iter_mut().for_each(|(_, v)| fix(v)),
            toml::Value::Array(a) => a.iter_mut().for_each(fix),
            _ => {}
        }
    }
    table.iter_mut().for_each(|(_, v)| fix(v));
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_with_input() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("ts.csv"), "x").unwrap();
        d
    }

    #[test]
    fn defaults_and_relative_paths() {
        let d = dir_with_input();
        let text = "[input]\ntimeseries = \"ts.csv\"\nend_date = 2020-05-01\n";
        let cfg = PipelineConfig::from_toml(text, d.path(), &[]).unwrap();
        assert_eq!(cfg.input.end_date, NaiveDate::from_ymd_opt(2020, 5, 1));
        assert_eq!(cfg.input.timeseries, d.path().join("ts.csv"));
        assert_eq!(cfg.output_dir, d.path().join("otseries-out"));
        assert_eq!(cfg.embed.variants, MobilityVariant::ALL.to_vec());
        assert_eq!(cfg.cluster.n_clusters, 10);
        assert_eq!(cfg.cluster.selected, MobilityVariant::Mprime);
        assert_eq!(cfg.barycenter.resolution, 20);
        assert_eq!(cfg.analysis.shapley_samples, 2000);
    }

    #[test]
    fn overrides_win() {
        let d = dir_with_input();
        let text = "seed = 3\n[input]\ntimeseries = \"ts.csv\"\n[cluster]\nn_clusters = 4\n";
        let o = vec![
            ("cluster.n_clusters".to_string(), "7".to_string()),
            ("seed".to_string(), "11".to_string()),
            ("distance.solver".to_string(), "sinkhorn".to_string()),
            ("embed.variants".to_string(), "[\"Mprime\"]".to_string()),
            ("input.start_date".to_string(), "2020-03-02".to_string()),
        ];
        let cfg = PipelineConfig::from_toml(text, d.path(), &o).unwrap();
        assert_eq!(cfg.cluster.n_clusters, 7);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.distance.solver, SolverKind::Sinkhorn);
        assert_eq!(cfg.embed.variants, vec![MobilityVariant::Mprime]);
        assert_eq!(cfg.input.start_date, NaiveDate::from_ymd_opt(2020, 3, 2));
    }

    #[test]
    fn config_errors() {
        let d = dir_with_input();
        let err = |text: &str| PipelineConfig::from_toml(text, d.path(), &[]).unwrap_err();
        assert!(matches!(err("[input]\ntimeseries = \"missing.csv\"\n"), Error::Config(_)));
        assert!(matches!(err("[input]\ntimeseries = \"ts.csv\"\n[cluster]\nn_clusterz = 3\n"), Error::Config(_)));
        assert!(matches!(
            err("[input]\ntimeseries = \"ts.csv\"\n[embed]\nvariants = [\"M\"]\n"),
            Error::Config(_)
        ));
        assert!(matches!(err("[input]\ntimeseries = \"ts.csv\"\n[distance]\np = 0.5\n"), Error::Config(_)));
        assert!(matches!(err("not toml ["), Error::Config(_)));
    }
}
