//! Acceptance checks, one line each. Runs as a plain binary so every
//! criterion reports even when an earlier one fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otseries::barycenter::{barycenter_objective, wasserstein_barycenter, BarycenterParams, GridHistogram};
use otseries::data::{write_covariates, write_timeseries, SpatialWeights};
use otseries::features::FeatureTable;
use otseries::forest::ClassScorer;
use otseries::hierarchy::{ward_linkage, Clustering};
use otseries::pipeline::{read_labels, run_pipeline, Manifest, PipelineConfig};
use otseries::preprocess::{MobilityVariant, PointCloud};
use otseries::shapley::shapley_values;
use otseries::spatial::{morans_i, morans_i_labels, reaction_time, NO_ORDER_REACTION_TIME};
use otseries::synthetic::{generate, Regime, SyntheticConfig};
use otseries::transport::{wasserstein_exact, wasserstein_sinkhorn, DistanceMatrix, SinkhornParams};

type Check = Result<String, String>;

fn main() {
    let criteria: Vec<(&str, fn() -> Check)> = vec![
        ("reaction-time fixture", reaction_times),
        ("exact OT vs brute force", exact_ot_oracle),
        ("metric axioms", metric_axioms),
        ("sinkhorn accuracy", sinkhorn_accuracy),
        ("ward fixture and monotone heights", ward_fixture),
        ("barycenter sanity", barycenter_sanity),
        ("barycenter objective", barycenter_objective_bound),
        ("moran fixtures", moran_fixtures),
        ("end-to-end synthetic recovery", synthetic_recovery),
        ("shapley axioms", shapley_axioms),
        ("determinism across thread counts", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<36} {secs:>7.2}s  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<36} {secs:>7.2}s  {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    ensure(t.elapsed() < limit, format!("took {:.1}s, limit {:?}", t.elapsed().as_secs_f64(), limit))
}

fn reaction_times() -> Check {
    let t = Instant::now();
    let reference = NaiveDate::from_ymd_opt(2020, 3, 15).unwrap();
    let rows = [
        (Some((3, 19)), 4),
        (Some((4, 4)), 20),
        (Some((3, 31)), 16),
        (Some((3, 22)), 7),
        (Some((4, 6)), 22),
        (None, 85),
    ];
    for (date, want) in rows {
        let d = date.map(|(m, d)| NaiveDate::from_ymd_opt(2020, m, d).unwrap());
        let got = reaction_time(d, reference, NO_ORDER_REACTION_TIME);
        ensure(got == want, format!("{d:?}: got {got}, want {want}"))?;
    }
    within(t, Duration::from_secs(1))?;
    Ok("6/6 rows".into())
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, dims: usize) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for v in p.iter_mut().take(dims) {
                *v = rng.gen();
            }
            p
        })
        .collect();
    PointCloud::new("x", pts)
}

fn cost(a: &[f64; 3], b: &[f64; 3], p: f64) -> f64 {
    let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    e.powf(p)
}

/// Minimum over all permutations by Heap's algorithm.
fn brute_force(a: &PointCloud, b: &PointCloud, p: f64) -> f64 {
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| cost(&a.points[i], &b.points[j], p)).sum::<f64>();
    let mut best = eval(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best / n as f64).powf(1.0 / p)
}

fn exact_ot_oracle() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let n = rng.gen_range(1..=6);
        let dims = rng.gen_range(1..=3);
        let p = if k % 2 == 0 { 1.0 } else { 2.0 };
        let (a, b) = (cloud(&mut rng, n, dims), cloud(&mut rng, n, dims));
        let (d, _) = wasserstein_exact(&a, &b, p).map_err(|e| e.to_string())?;
        let want = brute_force(&a, &b, p);
        worst = worst.max((d - want).abs());
        ensure((d - want).abs() <= 1e-9, format!("pair {k}: {d} vs brute force {want}"))?;
    }
    within(t, Duration::from_secs(10))?;
    Ok(format!("200 pairs, max error {worst:.1e}"))
}

fn metric_axioms() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = |a: &PointCloud, b: &PointCloud| wasserstein_exact(a, b, 2.0).map(|r| r.0).map_err(|e| e.to_string());
    let mut min_slack = f64::INFINITY;
    for k in 0..100 {
        let sizes: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=8)).collect();
        let c: Vec<PointCloud> = sizes.iter().map(|&n| cloud(&mut rng, n, 3)).collect();
        let (ab, ba) = (w(&c[0], &c[1])?, w(&c[1], &c[0])?);
        ensure((ab - ba).abs() <= 1e-9, format!("triple {k}: asymmetric {ab} vs {ba}"))?;
        for x in &c {
            let d = w(x, x)?;
            ensure(d.abs() <= 1e-9, format!("triple {k}: d(x,x) = {d}"))?;
        }
        let (bc, ac) = (w(&c[1], &c[2])?, w(&c[0], &c[2])?);
        for (lhs, r1, r2) in [(ac, ab, bc), (ab, ac, bc), (bc, ab, ac)] {
            ensure(lhs <= r1 + r2 + 1e-9, format!("triple {k}: triangle {lhs} > {r1} + {r2}"))?;
            min_slack = min_slack.min(r1 + r2 - lhs);
        }
    }
    Ok(format!("100 triples, tightest triangle slack {min_slack:.2e}"))
}

fn sinkhorn_accuracy() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = SinkhornParams { epsilon: 1e-3, ..Default::default() };
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let (a, b) = (cloud(&mut rng, 16, 3), cloud(&mut rng, 16, 3));
        let exact = wasserstein_exact(&a, &b, 2.0).map_err(|e| e.to_string())?.0;
        let s = wasserstein_sinkhorn(&a, &b, 2.0, &params).map_err(|e| e.to_string())?;
        ensure(s.converged, format!("pair {k}: not converged after {} iterations", s.iterations))?;
        let rel = (s.distance - exact).abs() / exact;
        worst = worst.max(rel);
        ensure(rel <= 0.02, format!("pair {k}: {} vs exact {exact}", s.distance))?;
    }
    within(t, Duration::from_secs(30))?;
    Ok(format!("50 pairs, max relative error {:.3}%", 100.0 * worst))
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i:02}")).collect()
}

fn ward_fixture() -> Check {
    let d = DistanceMatrix::new(ids(3), vec![0.0, 1.0, 4.0, 1.0, 0.0, 5.0, 4.0, 5.0, 0.0]).unwrap();
    let dend = ward_linkage(&d).map_err(|e| e.to_string())?;
    // Lance–Williams on squared distances after merging {0,1}:
    // d²(2, {0,1}) = ((1+1)·16 + (1+1)·25 − 1·1) / (1+1+1) = 27
    let h: Vec<f64> = dend.merges.iter().map(|m| m.height).collect();
    ensure(h == vec![1.0, 27f64.sqrt()], format!("heights {h:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for k in 0..100 {
        let n = rng.gen_range(2..=15);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
            }
        }
        let dend = ward_linkage(&DistanceMatrix::new(ids(n), m).unwrap()).map_err(|e| e.to_string())?;
        let ok = dend.merges.windows(2).all(|w| w[1].height >= w[0].height - 1e-12);
        ensure(ok, format!("matrix {k}: heights not monotone"))?;
    }
    Ok("3-point heights exact; 100 random matrices monotone".into())
}

fn dirac(r: usize, bin: usize) -> GridHistogram {
    let mut m = vec![0.0; r];
    m[bin] = 1.0;
    GridHistogram::new([r, 1, 1], m).unwrap()
}

fn random_hist(rng: &mut ChaCha8Rng, res: [usize; 3], support: f64) -> GridHistogram {
    let n: usize = res.iter().product();
    let v: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < support { rng.gen::<f64>() } else { 0.0 }).collect();
    let s: f64 = v.iter().sum();
    GridHistogram::new(res, v.iter().map(|x| x / s).collect()).unwrap()
}

fn barycenter_sanity() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let h = random_hist(&mut rng, [6, 6, 6], 1.0);
    let p = BarycenterParams::default();
    let mut worst: f64 = 0.0;
    let mut iterations = Vec::new();
    for k in [1usize, 3] {
        let r = wasserstein_barycenter(&vec![h.clone(); k], &vec![1.0 / k as f64; k], &p).map_err(|e| e.to_string())?;
        let l1 = r.histogram.l1_distance(&h);
        worst = worst.max(l1);
        iterations.push(r.iterations);
        ensure(l1 <= 1e-6, format!("{k} identical inputs: L1 {l1:.2e}"))?;
    }
    let (a, b) = (dirac(11, 0), dirac(11, 10));
    let r = wasserstein_barycenter(&[a, b], &[0.5, 0.5], &BarycenterParams { epsilon: 0.005, ..p })
        .map_err(|e| e.to_string())?;
    let mean = r.histogram.mean()[0];
    ensure((mean - 0.5).abs() <= 0.05, format!("two-Dirac mean {mean}"))?;
    within(t, Duration::from_secs(20))?;
    Ok(format!("identity L1 {worst:.1e} after {iterations:?} iterations, two-Dirac mean {mean:.4}"))
}

fn barycenter_objective_bound() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let p = BarycenterParams::default();
    let mut min_gap = f64::INFINITY;
    let mut unconverged = 0;
    for k in 0..20 {
        let hs: Vec<GridHistogram> = (0..3).map(|_| random_hist(&mut rng, [8, 8, 8], 0.15)).collect();
        let w = [1.0 / 3.0; 3];
        let r = wasserstein_barycenter(&hs, &w, &p).map_err(|e| e.to_string())?;
        unconverged += usize::from(!r.converged);
        let best_input = hs
            .iter()
            .map(|h| barycenter_objective(h, &hs, &w, p.epsilon).map(|f| f.0))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        min_gap = min_gap.min(best_input - r.objective);
        ensure(
            r.objective <= best_input + 1e-6,
            format!("instance {k}: f(bary) {} > min f(input) {best_input}", r.objective),
        )?;
    }
    Ok(format!("20 instances, smallest margin {min_gap:.3e}, {unconverged} stopped at max_iter"))
}

fn weights(n: usize, edges: &[(usize, usize)]) -> SpatialWeights {
    let mut w = vec![0.0; n * n];
    for &(i, j) in edges {
        w[i * n + j] = 1.0;
        w[j * n + i] = 1.0;
    }
    SpatialWeights::new(ids(n), w, true).unwrap()
}

fn moran_fixtures() -> Check {
    // 2×2 rook grid with alternating values, and two disjoint linked pairs
    let rook = weights(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]);
    let i = morans_i(&[1.0, 0.0, 0.0, 1.0], &rook).map_err(|e| e.to_string())?;
    ensure(i == -1.0, format!("checkerboard I = {i}"))?;
    let pairs = weights(4, &[(0, 1), (2, 3)]);
    let i = morans_i(&[1.0, 1.0, 0.0, 0.0], &pairs).map_err(|e| e.to_string())?;
    ensure(i == 1.0, format!("paired blocks I = {i}"))?;

    let n = 12;
    let chain = weights(n, &(0..n - 1).map(|i| (i, i + 1)).collect::<Vec<_>>());
    let c = Clustering::new(ids(n), (0..n).map(|i| i / 4 + 1).collect()).unwrap();
    for n_perm in [9, 99, 999] {
        for seed in 0..5 {
            let r = morans_i_labels(&c, &chain, n_perm, seed).map_err(|e| e.to_string())?;
            let floor = 1.0 / (n_perm as f64 + 1.0);
            for p in std::iter::once(r.p_value).chain(r.per_label.iter().map(|l| l.p_value)) {
                ensure(p >= floor - 1e-15 && p <= 1.0, format!("p = {p} below floor {floor}"))?;
            }
        }
    }
    Ok("checkerboard −1, paired blocks +1, p-values ≥ 1/(n_perm+1)".into())
}

/// Adjusted Rand index from the contingency table.
fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = rows.values().map(|&v| c2(v)).sum();
    let sb: f64 = cols.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(a.len() as u64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

fn write_fixture(dir: &Path) -> (PipelineConfig, Vec<Regime>, Vec<String>) {
    let data = generate(&SyntheticConfig::default()).unwrap();
    let ts = dir.join("timeseries.csv");
    let cov = dir.join("covariates.csv");
    write_timeseries(&data.records, fs::File::create(&ts).unwrap()).unwrap();
    write_covariates(&data.covariates, fs::File::create(&cov).unwrap()).unwrap();
    let mut cfg = PipelineConfig::new(&ts);
    cfg.input.covariates = Some(cov);
    cfg.cluster.n_clusters = 3;
    cfg.cluster.selected = MobilityVariant::Mprime;
    cfg.output_dir = dir.join("out");
    let ids = data.records.iter().map(|r| r.city_id.clone()).collect();
    (cfg, data.regimes, ids)
}

fn synthetic_recovery() -> Check {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (cfg, regimes, ids) = write_fixture(dir.path());
    run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let labels = read_labels(&cfg.output_dir.join("cluster/labels.csv")).map_err(|e| e.to_string())?;
    let hc3 = &labels["hc3"];
    ensure(hc3.ids == ids, "label ids differ from generated ids")?;
    let planted: Vec<usize> = regimes.iter().map(|r| *r as usize).collect();
    let ari = adjusted_rand(&planted, &hc3.labels);
    ensure(ari >= 0.9, format!("ARI {ari:.3}"))?;
    within(t, Duration::from_secs(120))?;
    Ok(format!("ARI {ari:.3} on 30 cities"))
}

/// Two classes scored by a logistic function of `w · x`; weight 0 marks a
/// null feature.
struct Logistic(Vec<f64>);

impl ClassScorer for Logistic {
    fn n_classes(&self) -> usize {
        2
    }
    fn scores(&self, x: &[f64], out: &mut [f64]) {
        let t: f64 = self.0.iter().zip(x).map(|(w, v)| w * v).sum();
        out[1] = 1.0 / (1.0 + (-t).exp());
        out[0] = 1.0 - out[1];
    }
}

fn shapley_axioms() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, f) = (40, 4);
    let ft = FeatureTable::new(
        ids(n),
        (0..f).map(|j| format!("f{j}")).collect(),
        (0..n * f).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
    )
    .unwrap();
    let model = Logistic(vec![1.5, 0.0, -2.0, 0.7]);
    let mut buf = [0.0; 2];
    let mut mean = [0.0; 2];
    for i in 0..n {
        model.scores(ft.row(i), &mut buf);
        mean[0] += buf[0] / n as f64;
        mean[1] += buf[1] / n as f64;
    }
    let mut worst_null: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for i in 0..10 {
        let s = shapley_values(&model, &ft, ft.row(i), 2000, 1000 + i as u64).map_err(|e| e.to_string())?;
        for class in 0..2 {
            let null = s.get(1, class).abs();
            worst_null = worst_null.max(null);
            ensure(null <= 0.01, format!("instance {i}: null feature |φ| = {null}"))?;
            let gap = (s.sum(class) - (s.prediction[class] - mean[class])).abs();
            worst_ratio = worst_ratio.max(gap / s.total_se[class]);
            ensure(
                gap <= 3.0 * s.total_se[class],
                format!("instance {i}: efficiency gap {gap} > 3·{}", s.total_se[class]),
            )?;
        }
    }
    Ok(format!("max null |φ| {worst_null:.1e}, max efficiency gap {worst_ratio:.2} SE"))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut cfg, _, _) = write_fixture(dir.path());
    let mut runs = Vec::new();
    for threads in [1, 8] {
        cfg.threads = threads;
        cfg.output_dir = dir.path().join(format!("out{threads}"));
        run_pipeline(&cfg).map_err(|e| e.to_string())?;
        runs.push(Manifest::read(&cfg.output_dir).ok_or("no manifest")?);
    }
    let bytes = |t: usize, rel: &str| fs::read(dir.path().join(format!("out{t}")).join(rel)).unwrap();
    let mut count = 0;
    for a in runs[0].artifacts() {
        ensure(bytes(1, &a.path) == bytes(8, &a.path), format!("{} differs", a.path))?;
        count += 1;
    }
    ensure(runs[0].artifacts().count() == runs[1].artifacts().count(), "artifact lists differ")?;
    ensure(bytes(1, "manifest.json") == bytes(8, "manifest.json"), "manifests differ")?;
    Ok(format!("{count} artifacts and manifest identical"))
}
