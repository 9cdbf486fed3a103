//! Per-city feature tables for the covariate analysis.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use serde::Serialize;

use crate::data::{format_float, CovariateRow};
use crate::error::{Error, Result};
use crate::hierarchy::Clustering;
use crate::spatial::reaction_time;

pub const REACTION_TIME: &str = "reaction_time";
pub const STAY_AT_HOME_DAY: &str = "stay_at_home_day";

/// Dense `n × f` table of finite values, one row per city.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    /// Row-major, `values[i * f + j]`.
    pub values: Vec<f64>,
}

/// How the stay-at-home date enters the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DateEncoding {
    pub reference: NaiveDate,
    pub absent_value: i64,
    /// Also keep the raw order date, as days since the reference year began.
    pub include_raw_date: bool,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != ids.len() * names.len() {
            return Err(Error::Size(format!(
                "{} values for {} rows × {} features",
                values.len(),
                ids.len(),
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::validation(format!("duplicate feature name {dup}")));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::validation(format!("duplicate city_id {dup} in feature table")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let f = names.len();
            return Err(Error::validation(format!(
                "feature {} of {} is not finite",
                names[pos % f],
                ids[pos / f]
            )));
        }
        Ok(FeatureTable { ids, names, values })
    }

    /// Covariates of `ids` in that order: every numeric column (sorted by
    /// name) plus the derived reaction time.
    pub fn from_covariates(rows: &[CovariateRow], ids: &[String], dates: &DateEncoding) -> Result<Self> {
        let by_id: HashMap<&str, &CovariateRow> = rows.iter().map(|r| (r.city_id.as_str(), r)).collect();
        let first = ids
            .first()
            .and_then(|id| by_id.get(id.as_str()))
            .ok_or_else(|| Error::Size("no covariate rows for the requested cities".into()))?;
        let mut names: Vec<String> = first.values.keys().cloned().collect();
        names.push(REACTION_TIME.to_string());
        if dates.include_raw_date {
            names.push(STAY_AT_HOME_DAY.to_string());
        }
        let year_start = NaiveDate::from_ymd_opt(dates.reference.year(), 1, 1).expect("valid date");
        let mut values = Vec::with_capacity(ids.len() * names.len());
        for id in ids {
            let row = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::validation(format!("no covariates for city {id}")))?;
            for name in &names[..first.values.len()] {
                let v = row
                    .values
                    .get(name)
                    .ok_or_else(|| Error::validation(format!("city {id} lacks covariate {name}")))?;
                values.push(*v);
            }
            let rt = reaction_time(row.stay_at_home_date, dates.reference, dates.absent_value);
            values.push(rt as f64);
            if dates.include_raw_date {
                let day = (dates.reference - year_start).num_days() + rt;
                values.push(day as f64);
            }
        }
        FeatureTable::new(ids.to_vec(), names, values)
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn features(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.names.len();
        &self.values[i * f..(i + 1) * f]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.names.len() + j]
    }

    /// Long-format `city_id,cluster,feature,value` rows, ready for per-cluster
    /// box plots.
    pub fn write_cluster_long_csv<W: Write>(&self, c: &Clustering, writer: W) -> Result<()> {
        let labels = labels_for(self, c)?;
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["city_id", "cluster", "feature", "value"])?;
        for (i, id) in self.ids.iter().enumerate() {
            for (j, name) in self.names.iter().enumerate() {
                wtr.write_record([id.as_str(), &labels[i].to_string(), name, &format_float(self.get(i, j))])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<feature writer>", e))?;
        Ok(())
    }
}

/// Cluster label of every table row, looked up by city id.
pub(crate) fn labels_for(ft: &FeatureTable, c: &Clustering) -> Result<Vec<usize>> {
    let label_of: HashMap<&str, usize> = c.ids.iter().map(String::as_str).zip(c.labels.iter().copied()).collect();
    ft.ids
        .iter()
        .map(|id| {
            label_of
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::validation(format!("city {id} has no cluster label")))
        })
        .collect()
}
