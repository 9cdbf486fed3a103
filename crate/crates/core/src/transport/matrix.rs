use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{wasserstein_exact, wasserstein_sinkhorn, SinkhornParams};
use crate::data::format_float;
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::preprocess::PointCloud;

const CACHE_MAGIC: &[u8; 4] = b"OTDM";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Solver {
    Exact,
    Sinkhorn { epsilon: f64, max_iter: usize, tol: f64 },
}

impl Solver {
    pub fn sinkhorn(params: SinkhornParams) -> Self {
        Solver::Sinkhorn {
            epsilon: params.epsilon,
            max_iter: params.max_iter,
            tol: params.tol,
        }
    }

    /// Stable text form used in cache keys and metadata.
    pub fn describe(&self) -> String {
        match self {
            Solver::Exact => "exact".to_string(),
            Solver::Sinkhorn { epsilon, max_iter, tol } => {
                format!("sinkhorn(epsilon={epsilon:e},max_iter={max_iter},tol={tol:e})")
            }
        }
    }
}

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    ids: Vec<String>,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(ids: Vec<String>, d: Vec<f64>) -> Result<Self> {
        let k = ids.len();
        if d.len() != k * k {
            return Err(Error::Size(format!("distance matrix has {} entries, expected {}", d.len(), k * k)));
        }
        for i in 0..k {
            if d[i * k + i] != 0.0 {
                return Err(Error::validation(format!("non-zero diagonal at {}", ids[i])));
            }
            for j in 0..k {
                let v = d[i * k + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::validation(format!(
                        "distance ({}, {}) = {v} must be finite and non-negative",
                        ids[i], ids[j]
                    )));
                }
                if v != d[j * k + i] {
                    return Err(Error::validation(format!("distance matrix not symmetric at ({}, {})", ids[i], ids[j])));
                }
            }
        }
        Ok(DistanceMatrix { ids, d })
    }

    /// Builds a matrix from the strict upper triangle, row by row.
    pub fn from_upper(ids: Vec<String>, upper: &[f64]) -> Result<Self> {
        let k = ids.len();
        if upper.len() != k * k.saturating_sub(1) / 2 {
            return Err(Error::Size("upper triangle has the wrong length".into()));
        }
        let mut d = vec![0.0; k * k];
        let mut it = upper.iter();
        for i in 0..k {
            for j in i + 1..k {
                let v = *it.next().expect("length checked");
                d[i * k + j] = v;
                d[j * k + i] = v;
            }
        }
        DistanceMatrix::new(ids, d)
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.ids.len() + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }

    /// Rows and columns permuted into `order`.
    pub fn reorder(&self, order: &[usize]) -> DistanceMatrix {
        let k = order.len();
        let mut d = vec![0.0; k * k];
        for (a, &i) in order.iter().enumerate() {
            for (b, &j) in order.iter().enumerate() {
                d[a * k + b] = self.get(i, j);
            }
        }
        DistanceMatrix {
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            d,
        }
    }

    /// CSV with the ids as header and one row per id.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.ids)?;
        let k = self.ids.len();
        for i in 0..k {
            wtr.write_record(self.d[i * k..(i + 1) * k].iter().map(|v| format_float(*v)))?;
        }
        wtr.flush().map_err(|e| Error::io("<distance writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let ids: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        let mut d = Vec::with_capacity(ids.len() * ids.len());
        for rec in rdr.records() {
            for cell in rec?.iter() {
                d.push(cell.parse::<f64>().map_err(|_| Error::validation(format!("bad distance `{cell}`")))?);
            }
        }
        DistanceMatrix::new(ids, d)
    }

    /// Compact binary form tagged with a caller-supplied cache key.
    pub fn write_binary<W: Write>(&self, key: &str, mut w: W) -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        write_str(&mut w, key)?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        for id in &self.ids {
            write_str(&mut w, id)?;
        }
        for v in &self.d {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a binary cache; `Ok(None)` when the stored key differs from `key`.
    pub fn read_binary<R: Read>(key: &str, mut r: R) -> Result<Option<Self>> {
        let bad = |what: &str| Error::validation(format!("corrupt distance cache: {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("header"))?;
        if &magic != CACHE_MAGIC || read_u32(&mut r).map_err(|_| bad("version"))? != CACHE_VERSION {
            return Err(bad("header"));
        }
        if read_str(&mut r).map_err(|_| bad("key"))? != key {
            return Ok(None);
        }
        let k = read_u32(&mut r).map_err(|_| bad("size"))? as usize;
        let ids = (0..k).map(|_| read_str(&mut r)).collect::<std::io::Result<Vec<_>>>().map_err(|_| bad("ids"))?;
        let mut d = Vec::with_capacity(k * k);
        let mut buf = [0u8; 8];
        for _ in 0..k * k {
            r.read_exact(&mut buf).map_err(|_| bad("values"))?;
            d.push(f64::from_le_bytes(buf));
        }
        DistanceMatrix::new(ids, d).map(Some)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Pairwise distances plus the pairs whose entropic solve hit `max_iter`.
#[derive(Debug, Clone)]
pub struct Pairwise {
    pub matrix: DistanceMatrix,
    pub unconverged: Vec<(String, String)>,
}

/// All `k(k−1)/2` pairwise distances, each pair solved once.
pub fn distance_matrix(clouds: &[PointCloud], solver: &Solver, p: f64) -> Result<Pairwise> {
    let k = clouds.len();
    if k < 2 {
        return Err(Error::Size(format!("need at least 2 point clouds, got {k}")));
    }
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let results = map_indexed(pairs.len(), |t| {
        let (i, j) = pairs[t];
        match solver {
            Solver::Exact => wasserstein_exact(&clouds[i], &clouds[j], p).map(|(d, _)| (d, true)),
            Solver::Sinkhorn { epsilon, max_iter, tol } => {
                let params = SinkhornParams {
                    epsilon: *epsilon,
                    max_iter: *max_iter,
                    tol: *tol,
                };
                wasserstein_sinkhorn(&clouds[i], &clouds[j], p, &params).map(|r| (r.distance, r.converged))
            }
        }
    });
    let mut upper = Vec::with_capacity(pairs.len());
    let mut unconverged = Vec::new();
    for (&(i, j), r) in pairs.iter().zip(results) {
        let (d, ok) = r.map_err(|e| {
            Error::validation(format!("pair ({}, {}) failed: {e}", clouds[i].city_id, clouds[j].city_id))
        })?;
        if !ok {
            unconverged.push((clouds[i].city_id.clone(), clouds[j].city_id.clone()));
        }
        upper.push(d);
    }
    let ids = clouds.iter().map(|c| c.city_id.clone()).collect();
    Ok(Pairwise {
        matrix: DistanceMatrix::from_upper(ids, &upper)?,
        unconverged,
    })
}
