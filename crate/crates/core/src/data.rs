//! Input records and CSV ingestion.
//!
//! Two inputs feed the pipeline: a long-format daily time series
//! (`city_id,county,state,date,mobility,new_cases`) and a per-city covariate
//! table (`city_id,stay_at_home_date,<name>...`). `city_id` is the join key
//! between them and every other artifact.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMESERIES_COLUMNS: [&str; 6] = ["city_id", "county", "state", "date", "mobility", "new_cases"];

/// Columns of the covariate file that carry coordinates rather than features.
const LAT_COLUMNS: [&str; 2] = ["lat", "latitude"];
const LON_COLUMNS: [&str; 3] = ["lon", "lng", "longitude"];

/// One location with its aligned daily mobility and new-case series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityRecord {
    pub city_id: String,
    pub county: String,
    pub state: String,
    pub dates: Vec<NaiveDate>,
    pub mobility: Vec<f64>,
    pub new_cases: Vec<u64>,
}

impl CityRecord {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn total_cases(&self) -> u64 {
        self.new_cases.iter().sum()
    }

    /// Checks the record invariants: equal lengths of at least 3, contiguous
    /// daily dates and non-negative finite mobility.
    pub fn validate(&self) -> Result<()> {
        let n = self.dates.len();
        if self.mobility.len() != n || self.new_cases.len() != n {
            return Err(Error::validation(format!(
                "city {}: series lengths differ (dates {}, mobility {}, new_cases {})",
                self.city_id,
                n,
                self.mobility.len(),
                self.new_cases.len()
            )));
        }
        if n < 3 {
            return Err(Error::validation(format!(
                "city {}: {} days in range, at least 3 required",
                self.city_id, n
            )));
        }
        for w in self.dates.windows(2) {
            let step = (w[1] - w[0]).num_days();
            if step == 0 {
                return Err(Error::validation(format!(
                    "city {}: duplicate date {}",
                    self.city_id, w[0]
                )));
            }
            if step != 1 {
                let missing = w[0].succ_opt().unwrap_or(w[1]);
                return Err(Error::validation(format!(
                    "city {}: gap in dates, missing {}",
                    self.city_id, missing
                )));
            }
        }
        for (d, &m) in self.dates.iter().zip(&self.mobility) {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::validation(format!(
                    "city {}: invalid mobility {} on {} (must be finite and non-negative)",
                    self.city_id, m, d
                )));
            }
        }
        Ok(())
    }
}

/// Static covariates of one city.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRow {
    pub city_id: String,
    pub stay_at_home_date: Option<NaiveDate>,
    pub values: BTreeMap<String, f64>,
    /// (latitude, longitude) in degrees, when the file carries coordinates.
    pub location: Option<(f64, f64)>,
}

/// Neighborhood structure for spatial autocorrelation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    ids: Vec<String>,
    weights: Vec<f64>,
    symmetric: bool,
}

impl SpatialWeights {
    /// Builds weights from a dense row-major `n × n` matrix.
    ///
    /// `symmetric = false` marks the matrix as intentionally asymmetric (e.g.
    /// row-standardized kNN); otherwise symmetry is enforced.
    pub fn new(ids: Vec<String>, weights: Vec<f64>, symmetric: bool) -> Result<Self> {
        let n = ids.len();
        if weights.len() != n * n {
            return Err(Error::Size(format!(
                "weights matrix has {} entries, expected {}",
                weights.len(),
                n * n
            )));
        }
        let mut any_positive = false;
        for i in 0..n {
            for j in 0..n {
                let w = weights[i * n + j];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::validation(format!(
                        "weight ({}, {}) = {} must be finite and non-negative",
                        ids[i], ids[j], w
                    )));
                }
                if i == j && w != 0.0 {
                    return Err(Error::validation(format!("non-zero self weight for {}", ids[i])));
                }
                if symmetric && w != weights[j * n + i] {
                    return Err(Error::validation(format!(
                        "weights not symmetric at ({}, {})",
                        ids[i], ids[j]
                    )));
                }
                any_positive |= w > 0.0;
            }
        }
        if !any_positive {
            return Err(Error::validation("spatial weights are all zero"));
        }
        Ok(SpatialWeights {
            ids,
            weights,
            symmetric,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.ids.len() + j]
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Restricts and reorders the weights to `ids`. Every id must be present.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let pos = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::validation(format!("no spatial weights for city {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = ids.len();
        let mut w = vec![0.0; n * n];
        for (a, &i) in pos.iter().enumerate() {
            for (b, &j) in pos.iter().enumerate() {
                w[a * n + b] = self.get(i, j);
            }
        }
        SpatialWeights::new(ids.to_vec(), w, self.symmetric)
    }
}

fn column_index(headers: &csv::StringRecord, file: &str, name: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Schema {
        file: file.to_string(),
        column: name.to_string(),
    })
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

/// Loads the daily time series, keeping only dates within the inclusive
/// `date_range` when given.
pub fn load_timeseries(path: &Path, date_range: Option<(NaiveDate, NaiveDate)>) -> Result<Vec<CityRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_timeseries(file, &path.display().to_string(), date_range)
}

pub fn read_timeseries<R: Read>(
    reader: R,
    source_name: &str,
    date_range: Option<(NaiveDate, NaiveDate)>,
) -> Result<Vec<CityRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 6];
    for (slot, name) in idx.iter_mut().zip(TIMESERIES_COLUMNS) {
        *slot = column_index(&headers, source_name, name)?;
    }
    let [i_id, i_county, i_state, i_date, i_mob, i_cases] = idx;

    struct Rows {
        county: String,
        state: String,
        rows: Vec<(NaiveDate, f64, u64)>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut cities: HashMap<String, Rows> = HashMap::new();

    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let id = rec.get(i_id).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::validation(format!("{source_name} row {row}: empty city_id")));
        }
        let date = parse_date(rec.get(i_date).unwrap_or(""))
            .ok_or_else(|| Error::validation(format!("{source_name} row {row}: bad date for city {id}")))?;
        if let Some((start, end)) = date_range {
            if date < start || date > end {
                continue;
            }
        }
        let mobility: f64 = rec.get(i_mob).unwrap_or("").parse().map_err(|_| {
            Error::validation(format!("{source_name} row {row}: non-numeric mobility for city {id}"))
        })?;
        if mobility < 0.0 {
            return Err(Error::validation(format!(
                "{source_name} row {row}: negative mobility {mobility} for city {id} on {date}"
            )));
        }
        let cases: u64 = rec.get(i_cases).unwrap_or("").parse().map_err(|_| {
            Error::validation(format!(
                "{source_name} row {row}: new_cases must be a non-negative integer for city {id}"
            ))
        })?;
        let entry = cities.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Rows {
                county: rec.get(i_county).unwrap_or("").to_string(),
                state: rec.get(i_state).unwrap_or("").to_string(),
                rows: Vec::new(),
            }
        });
        entry.rows.push((date, mobility, cases));
    }

    let mut records = Vec::with_capacity(order.len());
    let mut failures = Vec::new();
    for id in order {
        let mut c = cities.remove(&id).expect("city registered in order");
        c.rows.sort_by_key(|r| r.0);
        let record = CityRecord {
            city_id: id,
            county: c.county,
            state: c.state,
            dates: c.rows.iter().map(|r| r.0).collect(),
            mobility: c.rows.iter().map(|r| r.1).collect(),
            new_cases: c.rows.iter().map(|r| r.2).collect(),
        };
        match record.validate() {
            Ok(()) => records.push(record),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Validation(failures.join("; ")));
    }
    Ok(records)
}

/// Writes records in the same long format `load_timeseries` reads.
pub fn write_timeseries<W: Write>(records: &[CityRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(TIMESERIES_COLUMNS)?;
    for r in records {
        for t in 0..r.len() {
            wtr.write_record([
                r.city_id.as_str(),
                r.county.as_str(),
                r.state.as_str(),
                &r.dates[t].format("%Y-%m-%d").to_string(),
                &format_float(r.mobility[t]),
                &r.new_cases[t].to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<timeseries writer>", e))?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_float(x: f64) -> String {
    format!("{x:?}")
}

pub fn load_covariates(path: &Path) -> Result<Vec<CovariateRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_covariates(file, &path.display().to_string())
}

/// Parses a covariate table. Every column other than `city_id`,
/// `stay_at_home_date` and optional coordinates is a numeric covariate.
/// Columns whose name mentions `percent` or `pct` must lie in `[0, 100]`.
pub fn read_covariates<R: Read>(reader: R, source_name: &str) -> Result<Vec<CovariateRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let i_id = column_index(&headers, source_name, "city_id")?;
    let i_date = column_index(&headers, source_name, "stay_at_home_date")?;
    let find_any = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
    };
    let i_lat = find_any(&LAT_COLUMNS);
    let i_lon = find_any(&LON_COLUMNS);
    if i_lat.is_some() != i_lon.is_some() {
        return Err(Error::validation(format!(
            "{source_name}: latitude and longitude columns must be given together"
        )));
    }
    let feature_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != i_id && *i != i_date && Some(*i) != i_lat && Some(*i) != i_lon)
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let city_id = rec.get(i_id).unwrap_or("").to_string();
        if city_id.is_empty() {
            return Err(Error::validation(format!("{source_name} row {row}: empty city_id")));
        }
        if !seen.insert(city_id.clone()) {
            return Err(Error::validation(format!(
                "{source_name} row {row}: duplicate city_id {city_id}"
            )));
        }
        let date_cell = rec.get(i_date).unwrap_or("");
        let stay_at_home_date = if date_cell.is_empty() || date_cell.eq_ignore_ascii_case("na") {
            None
        } else {
            Some(parse_date(date_cell).ok_or_else(|| {
                Error::validation(format!(
                    "{source_name} row {row}, column stay_at_home_date: bad date `{date_cell}`"
                ))
            })?)
        };
        let numeric = |i: usize, name: &str| -> Result<f64> {
            let cell = rec.get(i).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::validation(format!(
                    "{source_name} row {row}, column {name}: non-numeric value `{cell}`"
                ))),
            }
        };
        let mut values = BTreeMap::new();
        for (i, name) in &feature_cols {
            let v = numeric(*i, name)?;
            let lower = name.to_ascii_lowercase();
            if (lower.contains("percent") || lower.contains("pct")) && !(0.0..=100.0).contains(&v) {
                return Err(Error::validation(format!(
                    "{source_name} row {row}, column {name}: percentage {v} outside [0, 100]"
                )));
            }
            values.insert(name.clone(), v);
        }
        let location = match (i_lat, i_lon) {
            (Some(a), Some(b)) => Some((numeric(a, "latitude")?, numeric(b, "longitude")?)),
            _ => None,
        };
        rows.push(CovariateRow {
            city_id,
            stay_at_home_date,
            values,
            location,
        });
    }
    Ok(rows)
}

/// Writes covariates in the layout `read_covariates` accepts. Value columns
/// come from the first row; coordinates are written when every row has them.
pub fn write_covariates<W: Write>(rows: &[CovariateRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let names: Vec<String> = rows.first().map(|r| r.values.keys().cloned().collect()).unwrap_or_default();
    let with_location = !rows.is_empty() && rows.iter().all(|r| r.location.is_some());
    let mut header = vec!["city_id".to_string(), "stay_at_home_date".to_string()];
    if with_location {
        header.extend(["latitude".to_string(), "longitude".to_string()]);
    }
    header.extend(names.iter().cloned());
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.city_id.clone(),
            r.stay_at_home_date.map_or_else(|| "NA".to_string(), |d| d.format("%Y-%m-%d").to_string()),
        ];
        if let (true, Some((lat, lon))) = (with_location, r.location) {
            rec.extend([format_float(lat), format_float(lon)]);
        }
        for n in &names {
            let v = r
                .values
                .get(n)
                .ok_or_else(|| Error::validation(format!("city {} lacks covariate {n}", r.city_id)))?;
            rec.push(format_float(*v));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<covariate writer>", e))?;
    Ok(())
}

/// Keeps records whose total new cases over the window reach `threshold`.
pub fn filter_by_min_cases(records: Vec<CityRecord>, threshold: u64) -> Vec<CityRecord> {
    records.into_iter().filter(|r| r.total_cases() >= threshold).collect()
}

/// Reads a `src_id,dst_id,weight` edge list over `ids`.
///
/// With `symmetric` each edge sets both directions, and an edge listed twice
/// must carry the same weight both times.
pub fn load_spatial_weights(path: &Path, ids: &[String], symmetric: bool) -> Result<SpatialWeights> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_spatial_weights(file, &path.display().to_string(), ids, symmetric)
}

pub fn read_spatial_weights<R: Read>(
    reader: R,
    source_name: &str,
    ids: &[String],
    symmetric: bool,
) -> Result<SpatialWeights> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let i_src = column_index(&headers, source_name, "src_id")?;
    let i_dst = column_index(&headers, source_name, "dst_id")?;
    let i_w = column_index(&headers, source_name, "weight")?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n = ids.len();
    let mut w = vec![0.0; n * n];
    let mut set = vec![false; n * n];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let (src, dst) = (rec.get(i_src).unwrap_or(""), rec.get(i_dst).unwrap_or(""));
        // Edges to cities outside the analysed set are ignored.
        let (Some(&a), Some(&b)) = (index.get(src), index.get(dst)) else {
            continue;
        };
        let weight: f64 = rec
            .get(i_w)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::validation(format!("{source_name} row {row}: non-numeric weight")))?;
        let mut put = |i: usize, j: usize| -> Result<()> {
            if set[i * n + j] && w[i * n + j] != weight {
                return Err(Error::validation(format!(
                    "{source_name} row {row}: conflicting weights for ({}, {})",
                    ids[i], ids[j]
                )));
            }
            w[i * n + j] = weight;
            set[i * n + j] = true;
            Ok(())
        };
        put(a, b)?;
        if symmetric {
            put(b, a)?;
        }
    }
    SpatialWeights::new(ids.to_vec(), w, symmetric)
}

/// Great-circle distance in kilometres.
fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

/// Row-standardized k-nearest-neighbour weights from (lat, lon) coordinates.
/// Ties in distance are broken by position in `ids`.
pub fn knn_weights(ids: &[String], coords: &[(f64, f64)], k: usize) -> Result<SpatialWeights> {
    let n = ids.len();
    if coords.len() != n {
        return Err(Error::Size(format!("{} coordinates for {} ids", coords.len(), n)));
    }
    if n < 2 || k == 0 {
        return Err(Error::Argument(format!("kNN weights need n >= 2 and k >= 1 (n = {n}, k = {k})")));
    }
    let k = k.min(n - 1);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let mut others: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (haversine_km(coords[i], coords[j]), j)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &others[..k] {
            w[i * n + j] = 1.0 / k as f64;
        }
    }
    SpatialWeights::new(ids.to_vec(), w, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn csv_for(cities: &[(&str, usize)]) -> String {
        let mut s = String::from("city_id,county,state,date,mobility,new_cases\n");
        let start = day("2020-03-01");
        for (id, len) in cities {
            for t in 0..*len {
                let d = start + chrono::Duration::days(t as i64);
                s.push_str(&format!("{id},County {id},CA,{d},{},{}\n", 50.0 + t as f64, t * 3));
            }
        }
        s
    }

    #[test]
    fn parses_two_cities_of_92_days() {
        let recs = read_timeseries(csv_for(&[("A", 92), ("B", 92)]).as_bytes(), "mem", None).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.len() == 92));
        assert_eq!(recs[0].city_id, "A");
    }

    #[test]
    fn date_range_restricts_rows() {
        let range = Some((day("2020-03-05"), day("2020-03-14")));
        let recs = read_timeseries(csv_for(&[("A", 30)]).as_bytes(), "mem", range).unwrap();
        assert_eq!(recs[0].len(), 10);
        assert_eq!(recs[0].dates[0], day("2020-03-05"));
    }

    #[test]
    fn missing_day_names_city_and_date() {
        let text = csv_for(&[("A", 5), ("B", 5)]);
        let text: String = text.lines().filter(|l| !l.starts_with("B,County B,CA,2020-03-03")).map(|l| format!("{l}\n")).collect();
        let err = read_timeseries(text.as_bytes(), "mem", None).unwrap_err().to_string();
        assert!(err.contains("city B"), "{err}");
        assert!(err.contains("2020-03-03"), "{err}");
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = read_timeseries("city_id,county,state,date,new_cases\n".as_bytes(), "mem", None).unwrap_err();
        match err {
            Error::Schema { column, .. } => assert_eq!(column, "mobility"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn negative_mobility_rejected() {
        let text = "city_id,county,state,date,mobility,new_cases\nA,c,CA,2020-03-01,-1,0\n";
        assert!(matches!(read_timeseries(text.as_bytes(), "mem", None), Err(Error::Validation(_))));
    }

    #[test]
    fn rows_are_sorted_by_date() {
        let text = "city_id,county,state,date,mobility,new_cases\n\
                    A,c,CA,2020-03-03,3,30\nA,c,CA,2020-03-01,1,10\nA,c,CA,2020-03-02,2,20\n";
        let recs = read_timeseries(text.as_bytes(), "mem", None).unwrap();
        assert_eq!(recs[0].mobility, vec![1.0, 2.0, 3.0]);
        assert_eq!(recs[0].new_cases, vec![10, 20, 30]);
    }

    #[test]
    fn min_cases_threshold_is_inclusive() {
        let mk = |id: &str, total: u64| CityRecord {
            city_id: id.into(),
            county: String::new(),
            state: "CA".into(),
            dates: vec![day("2020-03-01"), day("2020-03-02"), day("2020-03-03")],
            mobility: vec![1.0; 3],
            new_cases: vec![total, 0, 0],
        };
        let recs = vec![mk("a", 999), mk("b", 1000)];
        let kept = filter_by_min_cases(recs.clone(), 1000);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].city_id, "b");
        assert_eq!(filter_by_min_cases(recs.clone(), 0), recs);
    }

    #[test]
    fn covariates_parse_dates_and_extra_columns() {
        let text = "city_id,stay_at_home_date,population,senior_percent,gini,extra\n\
                    X,2020-03-19,1000,12.5,0.45,7\nY,,2000,20,0.5,8\nZ,NA,10,1,0.3,9\n";
        let rows = read_covariates(text.as_bytes(), "mem").unwrap();
        assert_eq!(rows[0].stay_at_home_date, Some(day("2020-03-19")));
        assert_eq!(rows[1].stay_at_home_date, None);
        assert_eq!(rows[2].stay_at_home_date, None);
        assert_eq!(rows[0].values["extra"], 7.0);
        assert_eq!(rows[0].values.len(), 4);
    }

    #[test]
    fn covariate_errors_name_row_and_column() {
        let text = "city_id,stay_at_home_date,population\nX,,abc\n";
        let err = read_covariates(text.as_bytes(), "mem").unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("population"), "{err}");
        let text = "city_id,stay_at_home_date,poor_percent\nX,,120\n";
        assert!(read_covariates(text.as_bytes(), "mem").is_err());
    }

    #[test]
    fn covariates_pick_up_coordinates() {
        let text = "city_id,stay_at_home_date,lat,lon,pop\nX,,37.5,-122.1,5\n";
        let rows = read_covariates(text.as_bytes(), "mem").unwrap();
        assert_eq!(rows[0].location, Some((37.5, -122.1)));
        assert_eq!(rows[0].values.keys().collect::<Vec<_>>(), vec!["pop"]);
    }

    #[test]
    fn covariates_round_trip() {
        let text = "city_id,stay_at_home_date,latitude,longitude,pop,pct_old\nX,2020-03-19,37.5,-122.1,5.0,12.5\nY,NA,40.0,-75.0,7.25,30.0\n";
        let rows = read_covariates(text.as_bytes(), "mem").unwrap();
        let mut buf = Vec::new();
        write_covariates(&rows, &mut buf).unwrap();
        // value columns come back in name order
        let expected = "city_id,stay_at_home_date,latitude,longitude,pct_old,pop\nX,2020-03-19,37.5,-122.1,12.5,5.0\nY,NA,40.0,-75.0,30.0,7.25\n";
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), expected);
        assert_eq!(read_covariates(buf.as_slice(), "mem").unwrap(), rows);
    }

    #[test]
    fn weights_reject_bad_matrices() {
        let ids = vec!["a".to_string(), "b".to_string()];
        assert!(SpatialWeights::new(ids.clone(), vec![0.0; 4], true).is_err());
        assert!(SpatialWeights::new(ids.clone(), vec![1.0, 1.0, 1.0, 0.0], true).is_err());
        assert!(SpatialWeights::new(ids.clone(), vec![0.0, 1.0, 2.0, 0.0], true).is_err());
        assert!(SpatialWeights::new(ids, vec![0.0, 1.0, 2.0, 0.0], false).is_ok());
    }

    #[test]
    fn edge_list_symmetrizes() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let text = "src_id,dst_id,weight\na,b,1\nb,c,2\nc,q,5\n";
        let w = read_spatial_weights(text.as_bytes(), "mem", &ids, true).unwrap();
        assert_eq!(w.get(1, 0), 1.0);
        assert_eq!(w.get(2, 1), 2.0);
        assert_eq!(w.total(), 6.0);
    }

    #[test]
    fn knn_rows_sum_to_one() {
        let ids: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        let coords: Vec<(f64, f64)> = (0..6).map(|i| (40.0 + i as f64, -100.0)).collect();
        let w = knn_weights(&ids, &coords, 2).unwrap();
        for i in 0..6 {
            let s: f64 = (0..6).map(|j| w.get(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // endpoint 0's neighbours are 1 and 2
        assert_eq!(w.get(0, 1), 0.5);
        assert_eq!(w.get(0, 2), 0.5);
    }
}
