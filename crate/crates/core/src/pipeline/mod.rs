//! The staged workflow from raw series to explained clusters.
//!
//! Stages run in a fixed order and talk to each other only through files in
//! the output directory, so any stage can be rerun alone. A stage is skipped
//! when its key (parameters plus hashes of everything it reads) matches the
//! previous manifest and its artifacts are still on disk unchanged.

mod config;
mod store;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use config::*;
pub use store::{Artifact, InputRecord, Manifest, StageRecord, StageStatus, MANIFEST, PARTIAL_SUFFIX};

use crate::barycenter::cluster_barycenters;
use crate::data::{
    filter_by_min_cases, knn_weights, load_covariates, load_spatial_weights, load_timeseries, write_timeseries,
    CityRecord, SpatialWeights,
};
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::forest::train_forest;
use crate::hierarchy::{compare_clusterings_ordered, flat_cut, seriate, spatial_homogeneity, ward_linkage, Clustering};
use crate::parallel::{derive_seed, with_threads};
use crate::preprocess::{embed_city, MobilityVariant, PointCloud};
use crate::shapley::shapley_importance;
use crate::spatial::{morans_i_labels, MoranReport};
use crate::transport::{distance_matrix, DistanceMatrix};
use store::{artifacts_intact, hash_file, sha256_hex, StageWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Embed,
    Dist,
    Cluster,
    Compare,
    Bary,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Dist,
        Stage::Cluster,
        Stage::Compare,
        Stage::Bary,
        Stage::Analyze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Dist => "dist",
            Stage::Cluster => "cluster",
            Stage::Compare => "compare",
            Stage::Bary => "bary",
            Stage::Analyze => "analyze",
        }
    }

    /// Stages whose artifacts this one reads.
    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Embed => &[Stage::Ingest],
            Stage::Dist => &[Stage::Embed],
            Stage::Cluster => &[Stage::Dist],
            Stage::Compare => &[Stage::Cluster],
            Stage::Bary => &[Stage::Embed, Stage::Cluster],
            Stage::Analyze => &[Stage::Ingest, Stage::Cluster],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub output_dir: PathBuf,
    pub outcomes: Vec<StageOutcome>,
    pub manifest: Manifest,
}

/// Runs every stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    run_until(cfg, Stage::Analyze)
}

/// Runs the stages up to and including `last`; earlier stages are reused
/// from disk when unchanged.
pub fn run_until(cfg: &PipelineConfig, last: Stage) -> Result<PipelineReport> {
    cfg.validate()?;
    with_threads(cfg.threads, || Runner::new(cfg)?.run(last))
}

/// Hash of everything that can change results: the config minus threads and
/// locations, plus the contents of each input file.
pub fn config_hash(cfg: &PipelineConfig, inputs: &[InputRecord]) -> Result<String> {
    let mut c = cfg.clone();
    c.threads = 0;
    c.output_dir = PathBuf::new();
    c.input.timeseries = PathBuf::new();
    c.input.covariates = c.input.covariates.map(|_| PathBuf::new());
    c.input.spatial_weights = c.input.spatial_weights.map(|_| PathBuf::new());
    let text = serde_json::to_string(&(&c, inputs))?;
    Ok(sha256_hex(text.as_bytes()))
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    previous: Option<Manifest>,
    inputs: Vec<InputRecord>,
    records: Vec<StageRecord>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a PipelineConfig) -> Result<Self> {
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let mut inputs = Vec::new();
        let mut add = |role: &str, p: &Path| -> Result<()> {
            inputs.push(InputRecord {
                role: role.to_string(),
                file: p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: hash_file(p)?,
            });
            Ok(())
        };
        add("timeseries", &cfg.input.timeseries)?;
        if let Some(p) = &cfg.input.covariates {
            add("covariates", p)?;
        }
        if let Some(p) = &cfg.input.spatial_weights {
            add("spatial_weights", p)?;
        }
        Ok(Runner {
            cfg,
            previous: Manifest::read(&out),
            out,
            inputs,
            records: Vec::new(),
        })
    }

    fn run(mut self, last: Stage) -> Result<PipelineReport> {
        let mut outcomes = Vec::new();
        for stage in Stage::ALL.into_iter().filter(|&s| s <= last) {
            let key = self.stage_key(stage)?;
            let reusable = self
                .previous
                .as_ref()
                .and_then(|m| m.stage(stage))
                .filter(|r| r.key == key && artifacts_intact(&self.out, &r.artifacts))
                .cloned();
            if let Some(mut rec) = reusable {
                log::info!("{stage}: unchanged, reusing artifacts");
                rec.status = StageStatus::Cached;
                self.records.push(rec);
                outcomes.push(StageOutcome {
                    stage,
                    status: StageStatus::Cached,
                    warnings: Vec::new(),
                });
                continue;
            }
            log::info!("{stage}: running");
            let mut w = StageWriter::new(&self.out);
            let warnings = self.execute(stage, &mut w).map_err(|e| Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            })?;
            for msg in &warnings {
                log::warn!("{stage}: {msg}");
            }
            let artifacts = w.commit()?;
            self.records.push(StageRecord {
                stage,
                key,
                status: StageStatus::Ran,
                artifacts,
            });
            outcomes.push(StageOutcome {
                stage,
                status: StageStatus::Ran,
                warnings,
            });
            self.manifest(last)?.write(&self.out)?;
        }
        let manifest = self.manifest(last)?;
        manifest.write(&self.out)?;
        Ok(PipelineReport {
            output_dir: self.out.clone(),
            outcomes,
            manifest,
        })
    }

    /// Current records, plus earlier records of stages after `last` so a
    /// partial rerun does not forget them.
    fn manifest(&self, last: Stage) -> Result<Manifest> {
        let mut stages = self.records.clone();
        if let Some(prev) = &self.previous {
            stages.extend(prev.stages.iter().filter(|r| r.stage > last).cloned());
        }
        Ok(Manifest {
            tool: "otseries".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash(self.cfg, &self.inputs)?,
            seed: self.cfg.seed,
            inputs: self.inputs.clone(),
            stages,
        })
    }

    fn input_hash(&self, role: &str) -> Option<&str> {
        self.inputs.iter().find(|i| i.role == role).map(|i| i.sha256.as_str())
    }

    fn stage_key(&self, stage: Stage) -> Result<String> {
        let c = self.cfg;
        let params = match stage {
            Stage::Ingest => serde_json::json!({
                "start_date": c.input.start_date,
                "end_date": c.input.end_date,
                "min_cases": c.input.min_cases,
                "timeseries": self.input_hash("timeseries"),
            }),
            Stage::Embed => serde_json::json!({ "variants": c.embed.variants }),
            Stage::Dist => serde_json::json!({ "variants": c.embed.variants, "distance": c.distance }),
            Stage::Cluster => serde_json::json!({ "variants": c.embed.variants, "n_clusters": c.cluster.n_clusters }),
            Stage::Compare => serde_json::json!({ "variants": c.embed.variants }),
            Stage::Bary => serde_json::json!({ "selected": c.cluster.selected, "barycenter": c.barycenter }),
            Stage::Analyze => serde_json::json!({
                "selected": c.cluster.selected,
                "analysis": c.analysis,
                "seed": c.seed,
                "covariates": self.input_hash("covariates"),
                "spatial_weights": self.input_hash("spatial_weights"),
            }),
        };
        let mut upstream = Vec::new();
        for s in stage.upstream() {
            let rec = self
                .records
                .iter()
                .find(|r| r.stage == *s)
                .ok_or_else(|| Error::Argument(format!("stage {stage} needs {s} first")))?;
            upstream.push(&rec.artifacts);
        }
        let text = serde_json::to_string(&(stage, env!("CARGO_PKG_VERSION"), params, upstream))?;
        Ok(sha256_hex(text.as_bytes()))
    }

    fn execute(&self, stage: Stage, w: &mut StageWriter) -> Result<Vec<String>> {
        match stage {
            Stage::Ingest => self.ingest(w),
            Stage::Embed => self.embed(w),
            Stage::Dist => self.dist(w),
            Stage::Cluster => self.cluster(w),
            Stage::Compare => self.compare(w),
            Stage::Bary => self.bary(w),
            Stage::Analyze => self.analyze(w),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn ingest(&self, w: &mut StageWriter) -> Result<Vec<String>> {
        let input = &self.cfg.input;
        let range = match (input.start_date, input.end_date) {
            (None, None) => None,
            (a, b) => Some((a.unwrap_or(NaiveDate::MIN), b.unwrap_or(NaiveDate::MAX))),
        };
        let records = load_timeseries(&input.timeseries, range)?;
        let read: Vec<String> = records.iter().map(|r| r.city_id.clone()).collect();
        let kept = filter_by_min_cases(records, input.min_cases);
        let dropped: Vec<&String> = read.iter().filter(|id| !kept.iter().any(|r| &r.city_id == *id)).collect();
        if kept.len() < 2 {
            return Err(Error::Size(format!(
                "{} cities left after filtering; at least 2 are needed",
                kept.len()
            )));
        }
        let mut warnings = Vec::new();
        if !dropped.is_empty() {
            warnings.push(format!("dropped {} cities below min_cases", dropped.len()));
        }
        w.put_with("ingest/timeseries.csv", |buf| write_timeseries(&kept, buf))?;
        w.put_json(
            "ingest/summary.json",
            &serde_json::json!({
                "cities_read": read.len(),
                "cities_kept": kept.len(),
                "dropped": dropped,
                "min_cases": input.min_cases,
                "first_date": kept.iter().filter_map(|r| r.dates.first()).min(),
                "last_date": kept.iter().filter_map(|r| r.dates.last()).max(),
            }),
        )?;
        Ok(warnings)
    }

    fn records(&self) -> Result<Vec<CityRecord>> {
        load_timeseries(&self.path("ingest/timeseries.csv"), None)
    }

    fn embed(&self, w: &mut StageWriter) -> Result<Vec<String>> {
        let records = self.records()?;
        for &v in &self.cfg.embed.variants {
            let clouds = records.iter().map(|r| embed_city(r, v)).collect::<Result<Vec<_>>>()?;
            w.put_with(&embed_file(v), |buf| write_clouds(&clouds, buf))?;
        }
        Ok(Vec::new())
    }

    fn dist(&self, w: &mut StageWriter) -> Result<Vec<String>> {
        let d = &self.cfg.distance;
        let solver = d.solver();
        let mut warnings = Vec::new();
        let mut summary = BTreeMap::new();
        let mut unconverged_total = 0;
        for &v in &self.cfg.embed.variants {
            let embed_path = self.path(&embed_file(v));
            let clouds = read_clouds(&embed_path)?;
            let key = format!("{}|p={}|{}|{}", v.as_str(), d.p, solver.describe(), hash_file(&embed_path)?);
            let bin = format!("dist/{}.bin", v.as_str());
            let cached = fs::File::open(self.path(&bin))
                .ok()
                .and_then(|f| DistanceMatrix::read_binary(&key, std::io::BufReader::new(f)).ok().flatten());
            let (matrix, unconverged) = match cached {
                Some(m) => {
                    log::info!("dist: reusing cached {} matrix", v.as_str());
                    (m, Vec::new())
                }
                None => {
                    let pw = distance_matrix(&clouds, &solver, d.p)?;
                    (pw.matrix, pw.unconverged)
                }
            };
            if !unconverged.is_empty() {
                warnings.push(format!("{}: {} pairs hit max_iter", v.as_str(), unconverged.len()));
                unconverged_total += unconverged.len();
            }
            w.put_with(&format!("dist/{}.csv", v.as_str()), |buf| matrix.write_csv(buf))?;
            w.put_with(&bin, |buf| {
                matrix.write_binary(&key, buf).map_err(|e| Error::io(&bin, e))
            })?;
            summary.insert(
                v.as_str(),
                serde_json::json!({ "solver": solver.describe(), "p": d.p, "unconverged": unconverged }),
            );
        }
        w.put_json("dist/summary.json", &summary)?;
        if unconverged_total > 0 && self.cfg.fail_on_nonconvergence {
            return Err(Error::NonConvergence(format!(
                "{unconverged_total} distance pairs did not converge"
            )));
        }
        Ok(warnings)
    }

    fn cluster(&self, w: &mut StageWriter) -> Result<Vec<String>> {
        let mut columns: Vec<(MobilityVariant, Clustering)> = Vec::new();
        for &v in &self.cfg.embed.variants {
            let name = v.clustering_name();
            let dm = read_matrix(&self.path(&format!("dist/{}.csv", v.as_str())))?;
            let dend = ward_linkage(&dm)?;
            let clustering = flat_cut(&dend, self.cfg.cluster.n_clusters)?;
            let order = seriate(&dend);
            w.put(&format!("cluster/{name}_dendrogram.json"), dend.to_json()?.as_bytes())?;
            w.put(&format!("cluster/{name}.nwk"), dend.to_newick().as_bytes())?;
            w.put_with(&format!("cluster/{name}_heights.csv"), |buf| {
                let mut wtr = csv::Writer::from_writer(buf);
                wtr.write_record(["n_clusters", "height"])?;
                for (c, h) in dend.height_profile() {
                    wtr.write_record([c.to_string(), crate::data::format_float(h)])?;
                }
                wtr.flush().map_err(|e| Error::io("<heights>", e))
            })?;
            w.put_with(&format!("cluster/{name}_seriation.csv"), |buf| {
                let mut wtr = csv::Writer::from_writer(buf);
                wtr.write_record(["position", "city_id", "cluster"])?;
                for (pos, &i) in order.iter().enumerate() {
                    wtr.write_record([(pos + 1).to_string(), clustering.ids[i].clone(), clustering.labels[i].to_string()])?;
                }
                wtr.flush().map_err(|e| Error::io("<seriation>", e))
            })?;
            w.put_with(&format!("cluster/{name}_seriated_distance.csv"), |buf| dm.reorder(&order).write_csv(buf))?;
            columns.push((v, clustering));
        }
        w.put_with("cluster/labels.csv", |buf| {
            let mut wtr = csv::Writer::from_writer(buf);
            let mut header = vec!["city_id".to_string()];
            header.extend(columns.iter().map(|(v, _)| v.clustering_name().to_string()));
            wtr.write_record(&header)?;
            let ids = &columns[0].1.ids;
            for (i, id) in ids.iter().enumerate() {
                let mut row = vec![id.clone()];
                row.extend(columns.iter().map(|(_, c)| c.labels[i].to_string()));
                wtr.write_record(&row)?;
            }
            wtr.flush().map_err(|e| Error::io("<labels>", e))
        })?;
        Ok(Vec::new())
    }

    fn labels(&self) -> Result<BTreeMap<String, Clustering>> {
        read_labels(&self.path("cluster/labels.csv"))
    }

    fn compare(&self, w: &mut StageWriter) -> Result<Vec<String>> {
        let labels = self.labels()?;
        let mut columns = Vec::new();
        let mut orders = Vec::new();
        let mut names = Vec::new();
        for &v in &self.cfg.embed.variants {
            let name = v.clustering_name();
            let c = labels
                .get(name)
                .ok_or_else(|| Error::validation(format!("labels.csv has no {name} column")))?
                .clone();
            let seriated = read_column(&self.path(&format!("cluster/{name}_seriation.csv")), "city_id")?;
            let index: HashMap<&str, usize> = c.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let leaf_order = seriated
                .iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::validation(format!("seriation lists unknown city {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            orders.push(c.label_order(&leaf_order));
            columns.push(c);
            names.push(name.to_string());
        }
        let graph = compare_clusterings_ordered(&columns, orders, names)?;
        w.put("compare/partition_graph.dot", graph.to_dot().as_bytes())?;
        w.put("compare/partition_graph.json", graph.to_json()?.as_bytes())?;
        Ok(Vec::new())
    }

    fn selected(&self) -> Result<Clustering> {
        let name = self.cfg.cluster.selected.clustering_name();
        self.labels()?
            .remove(name)
            .ok_or_else(|| Error::validation(format!("labels.csv has no {name} column")))
    }

    fn bary(&self, w: &mut StageWriter) -> Result<Vec<String>> {
        let b = &self.cfg.barycenter;
        let v = self.cfg.cluster.selected;
        let clouds = read_clouds(&self.path(&embed_file(v)))?;
        let clustering = self.selected()?;
        let params = b.params();
        let results = cluster_barycenters(&clouds, &clustering, [b.resolution; 3], &params)?;
        let mut warnings = Vec::new();
        let mut clusters = Vec::new();
        let sizes = clustering.sizes();
        for (label, r) in &results {
            w.put_with(&format!("bary/barycenter_{label}.csv"), |buf| r.histogram.write_csv(buf))?;
            if !r.converged {
                warnings.push(format!("cluster {label}: barycenter stopped at max_iter"));
            }
            clusters.push(serde_json::json!({
                "label": label,
                "size": sizes[label - 1],
                "objective": r.objective,
                "regularized_objective": r.regularized_objective,
                "iterations": r.iterations,
                "converged": r.converged,
                "mean": r.histogram.mean(),
            }));
        }
        w.put_json(
            "bary/summary.json",
            &serde_json::json!({
                "variant": v.as_str(),
                "resolution": b.resolution,
                "params": params,
                "clusters": clusters,
            }),
        )?;
        if !warnings.is_empty() && self.cfg.fail_on_nonconvergence {
            return Err(Error::NonConvergence(warnings.join("; ")));
        }
        Ok(warnings)
    }

    fn analyze(&self, w: &mut StageWriter) -> Result<Vec<String>> {
        let a = &self.cfg.analysis;
        let clustering = self.selected()?;
        let ids = clustering.ids.clone();
        let mut warnings = Vec::new();

        let records = self.records()?;
        let state_of: HashMap<String, String> = records.iter().map(|r| (r.city_id.clone(), r.state.clone())).collect();
        let homogeneity = spatial_homogeneity(&clustering, &state_of)?;

        let covariates = match &self.cfg.input.covariates {
            Some(p) => Some(load_covariates(p)?),
            None => None,
        };
        let (weights, weights_source) = self.weights(&ids, covariates.as_deref())?;
        let mut moran: Option<MoranReport> = None;
        let mut moran_note: Option<String> = None;
        match &weights {
            None => moran_note = Some("no spatial weights and no coordinates".into()),
            Some(_) if clustering.n_clusters() < 2 => moran_note = Some("a single cluster".into()),
            Some(wts) => match morans_i_labels(&clustering, wts, a.permutations, derive_seed(self.cfg.seed, 3)) {
                Ok(r) => moran = Some(r),
                Err(Error::Undefined(m)) => moran_note = Some(m),
                Err(e) => return Err(e),
            },
        }
        if let Some(n) = &moran_note {
            warnings.push(format!("Moran's I skipped: {n}"));
        }
        w.put_json(
            "analyze/spatial.json",
            &serde_json::json!({
                "variant": self.cfg.cluster.selected.as_str(),
                "n_clusters": clustering.n_clusters(),
                "homogeneity": homogeneity,
                "weights": weights_source,
                "moran": moran,
                "moran_note": moran_note,
            }),
        )?;

        let Some(rows) = covariates else {
            warnings.push("no covariates file; forest and Shapley analysis skipped".into());
            return Ok(warnings);
        };
        let ft = FeatureTable::from_covariates(&rows, &ids, &a.dates())?;
        w.put_with("analyze/covariates_by_cluster.csv", |buf| ft.write_cluster_long_csv(&clustering, buf))?;
        if ft.rows() < 10 || clustering.n_clusters() < 2 {
            let note = format!(
                "{} cities in {} clusters is too few to train a forest",
                ft.rows(),
                clustering.n_clusters()
            );
            w.put_json("analyze/forest.json", &serde_json::json!({ "skipped": note }))?;
            warnings.push(note);
            return Ok(warnings);
        }
        let params = a.forest(derive_seed(self.cfg.seed, 1));
        let model = train_forest(&ft, &clustering, &params)?;
        let report = shapley_importance(&model, &ft, &clustering, a.shapley_samples, derive_seed(self.cfg.seed, 2))?;
        w.put_json(
            "analyze/forest.json",
            &serde_json::json!({
                "params": params,
                "features": ft.names,
                "n_classes": model.n_classes,
                "oob_accuracy": model.oob_accuracy,
                "training_accuracy": model.accuracy(&ft, &clustering)?,
            }),
        )?;
        w.put_with("analyze/importance.csv", |buf| report.write_csv(buf))?;
        w.put_with("analyze/importance_ranking.csv", |buf| report.write_ranking_csv(buf))?;
        Ok(warnings)
    }

    /// The edge-list file when configured, otherwise k nearest neighbours on
    /// covariate coordinates when every city has them.
    fn weights(
        &self,
        ids: &[String],
        covariates: Option<&[crate::data::CovariateRow]>,
    ) -> Result<(Option<SpatialWeights>, String)> {
        if let Some(p) = &self.cfg.input.spatial_weights {
            let w = load_spatial_weights(p, ids, self.cfg.analysis.symmetric_weights)?;
            return Ok((Some(w), "edge list".into()));
        }
        let Some(rows) = covariates else {
            return Ok((None, "none".into()));
        };
        let loc: HashMap<&str, (f64, f64)> = rows
            .iter()
            .filter_map(|r| r.location.map(|l| (r.city_id.as_str(), l)))
            .collect();
        let coords: Option<Vec<(f64, f64)>> = ids.iter().map(|id| loc.get(id.as_str()).copied()).collect();
        match coords {
            Some(c) if ids.len() >= 2 => {
                let k = self.cfg.analysis.knn.min(ids.len() - 1);
                Ok((Some(knn_weights(ids, &c, k)?), format!("{k} nearest neighbours")))
            }
            _ => Ok((None, "none".into())),
        }
    }
}

fn embed_file(v: MobilityVariant) -> String {
    format!("embed/{}.csv", v.as_str())
}

fn write_clouds(clouds: &[PointCloud], buf: &mut Vec<u8>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(buf);
    wtr.write_record(["city_id", "x", "y", "z"])?;
    for c in clouds {
        for p in &c.points {
            let mut row = vec![c.city_id.clone()];
            row.extend(p.iter().map(|v| crate::data::format_float(*v)));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<embed>", e))
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

/// Reads `city_id,x,y,z` rows back into clouds, keeping first-seen order.
fn read_clouds(path: &Path) -> Result<Vec<PointCloud>> {
    let mut out: Vec<PointCloud> = Vec::new();
    for rec in open_csv(path)?.records() {
        let rec = rec?;
        let id = &rec[0];
        let mut p = [0.0; 3];
        for (k, v) in p.iter_mut().enumerate() {
            *v = rec[k + 1]
                .parse()
                .map_err(|_| Error::validation(format!("{}: bad coordinate `{}`", path.display(), &rec[k + 1])))?;
        }
        match out.last_mut() {
            Some(c) if c.city_id == id => c.points.push(p),
            _ => out.push(PointCloud::new(id, vec![p])),
        }
    }
    Ok(out)
}

fn read_matrix(path: &Path) -> Result<DistanceMatrix> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    DistanceMatrix::read_csv(f)
}

fn read_column(path: &Path, column: &str) -> Result<Vec<String>> {
    let mut rdr = open_csv(path)?;
    let idx = rdr.headers()?.iter().position(|h| h == column).ok_or_else(|| Error::Schema {
        file: path.display().to_string(),
        column: column.into(),
    })?;
    rdr.records().map(|r| Ok(r?[idx].to_string())).collect()
}

/// `cluster/labels.csv` as one clustering per column.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Clustering>> {
    let mut rdr = open_csv(path)?;
    let names: Vec<String> = rdr.headers()?.iter().skip(1).map(String::from).collect();
    let mut ids = Vec::new();
    let mut cols = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        for (j, col) in cols.iter_mut().enumerate() {
            let l = rec[j + 1]
                .parse()
                .map_err(|_| Error::validation(format!("bad label `{}`", &rec[j + 1])))?;
            col.push(l);
        }
    }
    names
        .into_iter()
        .zip(cols)
        .map(|(n, labels)| Ok((n, Clustering::new(ids.clone(), labels)?)))
        .collect()
}
