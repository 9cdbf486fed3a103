//! Seeded synthetic cities with planted mobility-to-cases couplings, for
//! demos and end-to-end tests.
//!
//! Mobility is a smooth positive signal made of a few random sinusoids. Case
//! counts are Poisson with a log-rate driven by the standardized day-to-day
//! change of mobility `lag` days earlier: with a negative sign, a positive
//! sign, or, for independent cities, by an unrelated signal.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{CityRecord, CovariateRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    LaggedNegative,
    LaggedPositive,
    Independent,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::LaggedNegative, Regime::LaggedPositive, Regime::Independent];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::LaggedNegative => "lagged_negative",
            Regime::LaggedPositive => "lagged_positive",
            Regime::Independent => "independent",
        }
    }

    fn coupling(self) -> f64 {
        match self {
            Regime::LaggedNegative => -1.0,
            Regime::LaggedPositive => 1.0,
            Regime::Independent => 0.0,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_cities: usize,
    pub n_days: usize,
    pub start: NaiveDate,
    /// Days between a mobility change and its effect on cases.
    pub lag: usize,
    /// Strength of the log-rate response to standardized mobility change.
    pub coupling: f64,
    /// Mean daily cases at baseline.
    pub base_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_cities: 30,
            n_days: 90,
            start: NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date"),
            lag: 3,
            coupling: 1.0,
            base_rate: 150.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<CityRecord>,
    pub covariates: Vec<CovariateRow>,
    /// Planted regime of each record.
    pub regimes: Vec<Regime>,
}

const STATES: [&str; 3] = ["WA", "GA", "MN"];
const CENTERS: [(f64, f64); 3] = [(47.5, -121.0), (33.5, -84.0), (45.0, -93.5)];

/// Cities are assigned to regimes round-robin, so each regime gets
/// `n_cities / 3` members (the first regimes take any remainder).
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.n_cities < 3 {
        return Err(Error::Argument(format!("need at least 3 cities, got {}", cfg.n_cities)));
    }
    if cfg.n_days < cfg.lag + 10 {
        return Err(Error::Argument(format!(
            "{} days is too short for a {}-day lag",
            cfg.n_days, cfg.lag
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dates: Vec<NaiveDate> = (0..cfg.n_days).map(|d| cfg.start + Duration::days(d as i64)).collect();
    let jitter = Normal::new(0.0, 1.0).expect("valid normal");

    let mut data = SyntheticData {
        records: Vec::new(),
        covariates: Vec::new(),
        regimes: Vec::new(),
    };
    for i in 0..cfg.n_cities {
        let r = i % 3;
        let regime = Regime::ALL[r];
        let mobility = smooth_signal(&mut rng, cfg.n_days + 1);
        let driver = if regime == Regime::Independent {
            standardized_change(&smooth_signal(&mut rng, cfg.n_days + 1))
        } else {
            standardized_change(&mobility)
        };
        let beta = regime.coupling() * cfg.coupling;
        let new_cases = (0..cfg.n_days)
            .map(|t| {
                let lagged = driver[t.saturating_sub(cfg.lag)];
                let rate = cfg.base_rate * (beta * lagged).exp();
                Poisson::new(rate).expect("positive rate").sample(&mut rng) as u64
            })
            .collect();

        let city_id = format!("{:05}", 10001 + 2 * i);
        let (lat0, lon0) = CENTERS[r];
        let location = (lat0 + 0.8 * jitter.sample(&mut rng), lon0 + 0.8 * jitter.sample(&mut rng));
        let order_day: Option<i64> = match regime {
            Regime::LaggedNegative => Some(rng.gen_range(3..10)),
            Regime::LaggedPositive => Some(rng.gen_range(14..24)),
            Regime::Independent => [None, Some(rng.gen_range(5..30))].choose(&mut rng).copied().flatten(),
        };
        let reference = NaiveDate::from_ymd_opt(2020, 3, 15).expect("valid date");
        let density = (6.0 + r as f64 * 0.9 + 0.3 * jitter.sample(&mut rng)).exp();
        let values = BTreeMap::from([
            ("population_density".to_string(), round2(density)),
            ("median_age".to_string(), round2(38.0 + 4.0 * jitter.sample(&mut rng))),
            (
                "percent_over_65".to_string(),
                round2((14.0 + 2.5 * r as f64 + 2.0 * jitter.sample(&mut rng)).clamp(0.0, 100.0)),
            ),
            ("percent_transit".to_string(), round2(rng.gen_range(1.0..20.0))),
        ]);

        data.records.push(CityRecord {
            city_id: city_id.clone(),
            county: format!("Synthetic {}", i + 1),
            state: STATES[r].to_string(),
            dates: dates.clone(),
            mobility: mobility[..cfg.n_days].to_vec(),
            new_cases,
        });
        data.covariates.push(CovariateRow {
            city_id,
            stay_at_home_date: order_day.map(|d| reference + Duration::days(d)),
            values,
            location: Some((round2(location.0), round2(location.1))),
        });
        data.regimes.push(regime);
    }
    Ok(data)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Positive mobility-like series: a level of 50 plus three sinusoids with
/// periods between two and six weeks.
fn smooth_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(4.0..12.0), rng.gen_range(14.0..42.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    (0..n)
        .map(|t| {
            let v: f64 = waves.iter().map(|(a, p, ph)| a * (2.0 * PI * t as f64 / p + ph).sin()).sum();
            round2(50.0 + v)
        })
        .collect()
}

/// Day-to-day change, scaled to unit standard deviation.
fn standardized_change(m: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = m.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    d.iter().map(|x| (x - mean) / sd.max(1e-12)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_and_reproducible() {
        let cfg = SyntheticConfig { n_cities: 9, ..Default::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!(a.records.len(), 9);
        for r in &a.records {
            r.validate().unwrap();
            assert!(r.mobility.iter().all(|&m| m > 0.0));
        }
        assert_eq!(a.regimes.iter().filter(|&&r| r == Regime::Independent).count(), 3);
        assert_ne!(a, generate(&SyntheticConfig { seed: 2, ..cfg }).unwrap());
    }

    #[test]
    fn couplings_have_the_planted_sign() {
        let data = generate(&SyntheticConfig { n_cities: 30, ..Default::default() }).unwrap();
        for (rec, regime) in data.records.iter().zip(&data.regimes) {
            let change = standardized_change(&rec.mobility);
            let lag = 3;
            let x: Vec<f64> = change[..change.len() - lag].to_vec();
            let y: Vec<f64> = rec.new_cases[lag..].iter().map(|&c| (c as f64).ln()).collect();
            let r = pearson(&x, &y[..x.len()]);
            match regime {
                Regime::LaggedNegative => assert!(r < -0.8, "{r}"),
                Regime::LaggedPositive => assert!(r > 0.8, "{r}"),
                Regime::Independent => assert!(r.abs() < 0.6, "{r}"),
            }
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }
}
