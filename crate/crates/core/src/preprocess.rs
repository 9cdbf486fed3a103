//! Mobility variants and the rank (empirical copula) embedding.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{format_float, CityRecord};
use crate::error::{Error, Result};

/// Which mobility series is paired with new cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MobilityVariant {
    /// The raw index.
    M,
    /// First difference.
    DeltaM,
    /// Smoothed local derivative.
    Mprime,
}

impl MobilityVariant {
    pub const ALL: [MobilityVariant; 3] = [MobilityVariant::M, MobilityVariant::DeltaM, MobilityVariant::Mprime];

    /// Number of leading days without a variant value.
    pub fn offset(self) -> usize {
        match self {
            MobilityVariant::M => 0,
            MobilityVariant::DeltaM | MobilityVariant::Mprime => 1,
        }
    }

    /// Length of the variant series for a raw series of length `t`.
    pub fn output_len(self, t: usize) -> usize {
        match self {
            MobilityVariant::M => t,
            MobilityVariant::DeltaM => t.saturating_sub(1),
            MobilityVariant::Mprime => t.saturating_sub(2),
        }
    }

    pub fn apply(self, m: &[f64]) -> Result<Vec<f64>> {
        match self {
            MobilityVariant::M => Ok(m.to_vec()),
            MobilityVariant::DeltaM => delta_mobility(m),
            MobilityVariant::Mprime => local_derivative(m),
        }
    }

    /// Column name of the hierarchical clustering built on this variant.
    pub fn clustering_name(self) -> &'static str {
        match self {
            MobilityVariant::M => "hc1",
            MobilityVariant::DeltaM => "hc2",
            MobilityVariant::Mprime => "hc3",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MobilityVariant::M => "M",
            MobilityVariant::DeltaM => "DeltaM",
            MobilityVariant::Mprime => "Mprime",
        }
    }
}

impl fmt::Display for MobilityVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MobilityVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" => Ok(MobilityVariant::M),
            "deltam" | "delta_m" | "dm" => Ok(MobilityVariant::DeltaM),
            "mprime" | "m_prime" | "m'" => Ok(MobilityVariant::Mprime),
            other => Err(Error::Argument(format!("unknown mobility variant `{other}`"))),
        }
    }
}

/// A city embedded as `n` equally weighted points in the unit cube.
///
/// Columns are (mobility variant, new cases, time), each rank-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub city_id: String,
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(city_id: impl Into<String>, points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            city_id: city_id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Uniform mass carried by each point.
    pub fn weight(&self) -> f64 {
        1.0 / self.points.len() as f64
    }

    /// Debug dump as `x,y,z` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["x", "y", "z"])?;
        for p in &self.points {
            wtr.write_record(p.iter().map(|v| format_float(*v)))?;
        }
        wtr.flush().map_err(|e| Error::io("<point cloud writer>", e))?;
        Ok(())
    }
}

/// `ΔM(t) = M(t) − M(t−1)`, one value shorter than the input.
pub fn delta_mobility(m: &[f64]) -> Result<Vec<f64>> {
    if m.len() < 2 {
        return Err(Error::Size(format!("first difference needs at least 2 values, got {}", m.len())));
    }
    Ok(m.windows(2).map(|w| w[1] - w[0]).collect())
}

/// `M'(t) = ((M(t) − M(t−1)) + 0.5 (M(t+1) − M(t−1))) / 2`, defined at
/// interior points only, so two values shorter than the input.
pub fn local_derivative(m: &[f64]) -> Result<Vec<f64>> {
    if m.len() < 3 {
        return Err(Error::Size(format!("local derivative needs at least 3 values, got {}", m.len())));
    }
    Ok(m.windows(3).map(|w| ((w[1] - w[0]) + 0.5 * (w[2] - w[0])) / 2.0).collect())
}

/// Normalized ranks `rank(x_i) / n`, average rank for ties.
pub fn rank_normalize(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Size("cannot rank an empty series".into()));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite value {} at index {i}", x[i])));
    }
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // ranks start+1..=end share their mean
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = avg / n as f64;
        }
        start = end;
    }
    Ok(out)
}

/// Embeds a city as rank-normalized (variant, new cases, time) triples.
///
/// New cases are taken on the same calendar days as the variant values: the
/// variant value at output index `i` belongs to raw day `i + offset`.
pub fn embed_city(record: &CityRecord, variant: MobilityVariant) -> Result<PointCloud> {
    let cases: Vec<f64> = record.new_cases.iter().map(|&c| c as f64).collect();
    embed_series(&record.city_id, &record.mobility, &cases, variant)
}

/// Same as [`embed_city`] on bare day-aligned series.
pub fn embed_series(city_id: &str, mobility: &[f64], new_cases: &[f64], variant: MobilityVariant) -> Result<PointCloud> {
    if mobility.len() != new_cases.len() {
        return Err(Error::validation(format!("city {city_id}: series lengths differ")));
    }
    let series = variant.apply(mobility).map_err(|e| match e {
        Error::Size(msg) => Error::Size(format!("city {city_id}: {msg}")),
        other => other,
    })?;
    let off = variant.offset();
    let n = series.len();
    let cases = &new_cases[off..off + n];
    let time: Vec<f64> = (0..n).map(|t| t as f64).collect();
    let (rx, ry, rz) = (rank_normalize(&series)?, rank_normalize(cases)?, rank_normalize(&time)?);
    let points = (0..n).map(|i| [rx[i], ry[i], rz[i]]).collect();
    Ok(PointCloud::new(city_id, points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn record(mobility: Vec<f64>, cases: Vec<u64>) -> CityRecord {
        let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        CityRecord {
            city_id: "c".into(),
            county: String::new(),
            state: "CA".into(),
            dates: (0..mobility.len()).map(|i| start + chrono::Duration::days(i as i64)).collect(),
            mobility,
            new_cases: cases,
        }
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_mobility(&[100.0, 90.0, 95.0]).unwrap(), vec![-10.0, 5.0]);
        assert_eq!(delta_mobility(&[5.0; 4]).unwrap(), vec![0.0; 3]);
        assert_eq!(delta_mobility(&[0.0, 3.0]).unwrap(), vec![3.0]);
        assert!(matches!(delta_mobility(&[1.0]), Err(Error::Size(_))));
    }

    #[test]
    fn local_derivative_examples() {
        assert_eq!(local_derivative(&[100.0, 90.0, 95.0, 95.0]).unwrap(), vec![-6.25, 3.75]);
        assert_eq!(local_derivative(&[7.0; 5]).unwrap(), vec![0.0; 3]);
        assert_eq!(local_derivative(&[0.0, 1.0, 2.0, 3.0]).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(local_derivative(&[1.0, 2.0]), Err(Error::Size(_))));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_normalize(&[5.0, 1.0, 3.0]).unwrap(), vec![1.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(rank_normalize(&[2.0, 2.0, 5.0]).unwrap(), vec![0.5, 0.5, 1.0]);
        let sorted: Vec<f64> = (0..8).map(|i| i as f64 * 1.5).collect();
        let expect: Vec<f64> = (1..=8).map(|i| i as f64 / 8.0).collect();
        assert_eq!(rank_normalize(&sorted).unwrap(), expect);
        assert!(rank_normalize(&[1.0, f64::NAN]).is_err());
        assert!(rank_normalize(&[]).is_err());
    }

    #[test]
    fn embed_m_has_time_column_in_quarters() {
        let pc = embed_city(&record(vec![3.0, 1.0, 4.0, 2.0], vec![5, 9, 2, 6]), MobilityVariant::M).unwrap();
        let t: Vec<f64> = pc.points.iter().map(|p| p[2]).collect();
        assert_eq!(t, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(pc.points[0], [0.75, 0.5, 0.25]);
    }

    #[test]
    fn embed_lengths_follow_variant() {
        let m: Vec<f64> = (0..92).map(|i| (i as f64 * 0.3).sin() + 2.0).collect();
        let rec = record(m, (0..92).collect());
        assert_eq!(embed_city(&rec, MobilityVariant::M).unwrap().len(), 92);
        assert_eq!(embed_city(&rec, MobilityVariant::DeltaM).unwrap().len(), 91);
        assert_eq!(embed_city(&rec, MobilityVariant::Mprime).unwrap().len(), 90);
    }

    #[test]
    fn constant_cases_share_average_rank() {
        let rec = record(vec![1.0, 5.0, 2.0, 8.0, 3.0], vec![4; 5]);
        let pc = embed_city(&rec, MobilityVariant::DeltaM).unwrap();
        let n = pc.len() as f64;
        assert!(pc.points.iter().all(|p| p[1] == (n + 1.0) / (2.0 * n)));
    }

    #[test]
    fn variant_pairs_cases_on_same_day() {
        // mobility rises on day 3 only, cases peak on day 3 only
        let rec = record(vec![1.0, 1.0, 1.0, 9.0, 9.0], vec![0, 1, 2, 50, 3]);
        let pc = embed_city(&rec, MobilityVariant::DeltaM).unwrap();
        let top = pc.points.iter().position(|p| p[0] == 1.0).unwrap();
        assert_eq!(pc.points[top][1], 1.0);
    }

    proptest! {
        #[test]
        fn monotone_transform_leaves_embedding_unchanged(
            m in prop::collection::vec(0.0f64..100.0, 5..40),
            seed in 0u64..1000,
        ) {
            let n = m.len();
            let cases: Vec<u64> = (0..n as u64).map(|i| (i * 7919 + seed) % 37).collect();
            let base = embed_city(&record(m.clone(), cases.clone()), MobilityVariant::M).unwrap();
            let transformed: Vec<f64> = m.iter().map(|v| (v + 1.0).ln() * 3.0 + 2.0).collect();
            let other = embed_city(&record(transformed, cases), MobilityVariant::M).unwrap();
            prop_assert_eq!(base, other);
        }

        #[test]
        fn coordinates_stay_in_unit_cube(
            m in prop::collection::vec(0.0f64..10.0, 3..50),
        ) {
            let n = m.len();
            let cases: Vec<u64> = (0..n as u64).map(|i| i % 4).collect();
            for v in MobilityVariant::ALL {
                let pc = embed_city(&record(m.clone(), cases.clone()), v).unwrap();
                prop_assert_eq!(pc.len(), v.output_len(n));
                for p in &pc.points {
                    for c in p {
                        prop_assert!(*c > 0.0 && *c <= 1.0);
                    }
                }
                // rank sums are fixed: sum of ranks / n = (n + 1) / 2
                let k = pc.len() as f64;
                for col in 0..3 {
                    let s: f64 = pc.points.iter().map(|p| p[col]).sum();
                    prop_assert!((s - (k + 1.0) / 2.0).abs() < 1e-9);
                }
            }
        }
    }
}
