//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use lymphoclust::clustering::{agglomerative, dbscan, kmeans, pca_fit_transform, Algorithm, ClusterAssignment, KMeansOptions};
use lymphoclust::imputation::{impute_subgroups, mice_impute, ImputeConfig, SubgroupDataset};
use lymphoclust::ingestion::{
    defining_codes, flatten_encounters, parse_diagnoses, parse_disease_codes, parse_lab_records, select_cohort,
    select_cohort_detailed, DiagnosisEvent, DiseaseCodeMap, DiseaseLabel, Exclusion, ParseMode,
};
use lymphoclust::matrix::Matrix;
use lymphoclust::metrics::{composite_score, external_metrics, ExternalScores, MetricsBundle};
use lymphoclust::normalization::{assemble_vector, normalize_lab, partition_by_age, AgeGroup, LabVector, VectorAssemblyConfig, PANEL_DIM};
use lymphoclust::pipeline::{cmd_pipeline, PipelineConfig};
use lymphoclust::reporting::cluster_report;
use lymphoclust::synthgen::{demo_spec, generate_cohort, panel_covariance, CohortSpec, DiseaseSpec, SiteSpec, SubphenotypeSpec, SyntheticCohort};
use lymphoclust::tuning::{enumerate_grid, rank_results, run_grid, select_all, select_hyperparameters, ExperimentResult, GridConfig, HyperparamCombo};
use lymphoclust::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    ensure(start.elapsed() < limit, || format!("took {:?}, limit {limit:?}", start.elapsed()))
}

// ---------------------------------------------------------------- 1

fn grid_arithmetic() -> Result<String, String> {
    let start = Instant::now();
    let expected = [
        (Algorithm::Dbscan, 160),
        (Algorithm::Hdbscan, 160),
        (Algorithm::Kmeans, 68),
        (Algorithm::Agglomerative, 68),
        (Algorithm::Kmodes, 68),
    ];
    let mut total = 0;
    for (a, n) in expected {
        let got = enumerate_grid(a).len();
        ensure(got == n, || format!("{a:?}: {got} combos, expected {n}"))?;
        total += got;
    }
    ensure(total == 524, || format!("{total} combos in total"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let datasets: Vec<SubgroupDataset<f64>> = AgeGroup::ALL
        .into_iter()
        .map(|age| {
            let n = 24;
            let data: Vec<f64> = (0..n * PANEL_DIM).map(|_| rng.random::<f64>()).collect();
            SubgroupDataset {
                age_group: age,
                rows: Matrix::from_vec(n, PANEL_DIM, data),
                labels: (0..n).map(|i| DiseaseLabel::ALL[i % 3]).collect(),
                ids: (0..n).map(|i| (format!("P{i}"), format!("E{i}"))).collect(),
                imputed_mask: vec![[false; PANEL_DIM]; n],
            }
        })
        .collect();
    let tables = run_grid(&datasets, &Algorithm::ALL, &GridConfig::default(), 0, 1).map_err(|e| e.to_string())?;
    let experiments: usize = tables.iter().map(|t| t.results.len()).sum();
    ensure(experiments == 3144, || format!("{experiments} experiments registered"))?;
    ensure(tables.len() == 30, || format!("{} tables", tables.len()))?;
    Ok(format!("160/160/68/68/68 = 524 combos, 3144 experiments over 6 age groups in {:?}", start.elapsed()))
}

// ---------------------------------------------------------------- 2

fn ln_fact(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

fn entropy_of(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut counts = BTreeMap::new();
    labels.iter().for_each(|l| *counts.entry(*l).or_insert(0usize) += 1);
    counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// H(A | B) from the joint label lists.
fn conditional_entropy(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint = BTreeMap::new();
    let mut marg = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0usize) += 1;
        *marg.entry(y).or_insert(0usize) += 1;
    }
    joint
        .iter()
        .map(|(&(_, y), &c)| -(c as f64 / n) * (c as f64 / marg[&y] as f64).ln())
        .sum()
}

fn mi_of_table(table: &[Vec<usize>], a: &[usize], b: &[usize], n: usize) -> f64 {
    let n = n as f64;
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    mi
}

/// Expected MI by enumerating every contingency table with the given margins
/// and weighting it by its multivariate hypergeometric probability.
fn exhaustive_emi(a: &[usize], b: &[usize]) -> f64 {
    let n: usize = a.iter().sum();
    let (r, c) = (a.len(), b.len());
    let log_const = a.iter().map(|&x| ln_fact(x)).sum::<f64>() + b.iter().map(|&x| ln_fact(x)).sum::<f64>() - ln_fact(n);
    let mut table = vec![vec![0usize; c]; r];
    let mut row_left = a.to_vec();
    let mut col_left = b.to_vec();
    let mut total = 0.0;
    let mut mass = 0.0;
    #[allow(clippy::too_many_arguments)]
    fn fill(
        cell: usize,
        r: usize,
        c: usize,
        table: &mut Vec<Vec<usize>>,
        row_left: &mut Vec<usize>,
        col_left: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[Vec<usize>]),
    ) {
        if cell == r * c {
            if row_left.iter().all(|&x| x == 0) && col_left.iter().all(|&x| x == 0) {
                visit(table);
            }
            return;
        }
        let (i, j) = (cell / c, cell % c);
        let hi = row_left[i].min(col_left[j]);
        // The last column of a row and the last row of a column are forced.
        let lo = if j == c - 1 || i == r - 1 { hi } else { 0 };
        for v in lo..=hi {
            if (j == c - 1 && v != row_left[i]) || (i == r - 1 && v != col_left[j]) {
                continue;
            }
            table[i][j] = v;
            row_left[i] -= v;
            col_left[j] -= v;
            fill(cell + 1, r, c, table, row_left, col_left, visit);
            row_left[i] += v;
            col_left[j] += v;
        }
        table[i][j] = 0;
    }
    fill(0, r, c, &mut table, &mut row_left, &mut col_left, &mut |t| {
        let log_p = log_const - t.iter().flatten().map(|&x| ln_fact(x)).sum::<f64>();
        let p = log_p.exp();
        mass += p;
        total += p * mi_of_table(t, a, b, n);
    });
    assert!((mass - 1.0).abs() < 1e-9, "table probabilities sum to {mass}");
    total
}

fn margins(labels: &[usize]) -> Vec<usize> {
    let mut counts = BTreeMap::new();
    labels.iter().for_each(|l| *counts.entry(*l).or_insert(0usize) += 1);
    counts.into_values().collect()
}

fn joint_table(a: &[usize], b: &[usize]) -> Vec<Vec<usize>> {
    let ra: Vec<usize> = a.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let rb: Vec<usize> = b.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut t = vec![vec![0; rb.len()]; ra.len()];
    for (x, y) in a.iter().zip(b) {
        t[ra.binary_search(x).unwrap()][rb.binary_search(y).unwrap()] += 1;
    }
    t
}

fn oracle_scores(truth: &[usize], pred: &[usize]) -> ExternalScores<f64> {
    let n = truth.len();
    let (h_c, h_k) = (entropy_of(truth), entropy_of(pred));
    let h = if h_c == 0.0 { 1.0 } else { 1.0 - conditional_entropy(truth, pred) / h_c };
    let c = if h_k == 0.0 { 1.0 } else { 1.0 - conditional_entropy(pred, truth) / h_k };
    let v = if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) };

    let (mut n11, mut n10, mut n01, mut n00) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (truth[i] == truth[j], pred[i] == pred[j]) {
                (true, true) => n11 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
                (false, false) => n00 += 1.0,
            }
        }
    }
    let ari_den = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00);
    let ari = if ari_den == 0.0 { 1.0 } else { 2.0 * (n11 * n00 - n10 * n01) / ari_den };

    let ami = if h_c == 0.0 && h_k == 0.0 {
        1.0
    } else {
        let (a, b) = (margins(truth), margins(pred));
        let emi = exhaustive_emi(&a, &b);
        let mi = mi_of_table(&joint_table(truth, pred), &a, &b, n);
        let den = (h_c + h_k) / 2.0 - emi;
        if den.abs() < 1e-12 && (mi - emi).abs() < 1e-12 {
            1.0
        } else {
            (mi - emi) / den
        }
    };
    ExternalScores {
        homogeneity: h,
        completeness: c,
        v_measure: v,
        ari,
        ami,
    }
}

fn metric_oracles() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut worst_ami) = (0f64, 0f64);
    for case in 0..50 {
        let n = rng.random_range(2..=12);
        let (kt, kp) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
        let raw: Vec<i64> = pred.iter().map(|&p| p as i64).collect();
        let got = external_metrics::<f64, usize>(&truth, &ClusterAssignment::from_raw(&raw, Algorithm::Kmeans))
            .map_err(|e| e.to_string())?;
        let want = oracle_scores(&truth, &pred);
        for (name, g, w) in [
            ("homogeneity", got.homogeneity, want.homogeneity),
            ("completeness", got.completeness, want.completeness),
            ("v_measure", got.v_measure, want.v_measure),
            ("ari", got.ari, want.ari),
        ] {
            worst = worst.max((g - w).abs());
            ensure((g - w).abs() <= 1e-10, || format!("case {case} {name}: {g} vs oracle {w} ({truth:?} / {pred:?})"))?;
        }
        worst_ami = worst_ami.max((got.ami - want.ami).abs());
        ensure((got.ami - want.ami).abs() <= 1e-8, || {
            format!("case {case} ami: {} vs oracle {} ({truth:?} / {pred:?})", got.ami, want.ami)
        })?;
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("50 instances, max |err| h/c/v/ARI {worst:.1e}, AMI {worst_ami:.1e}"))
}

// ---------------------------------------------------------------- 3

fn canonical(labels: &[i64]) -> Vec<i64> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                -1
            } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

fn dbscan_oracle(points: &[Vec<f64>], eps: f64, min_samples: usize) -> Vec<i64> {
    let n = points.len();
    let dist = |i: usize, j: usize| -> f64 {
        points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let close = |i: usize, j: usize| dist(i, j) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| close(i, j)).count() >= min_samples).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        if p[x] == x {
            x
        } else {
            let r = find(p, p[x]);
            p[x] = r;
            r
        }
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && close(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut labels = vec![-1i64; n];
    for i in 0..n {
        if core[i] {
            labels[i] = find(&mut parent, i) as i64;
        }
    }
    for i in 0..n {
        if !core[i] {
            if let Some(j) = (0..n).find(|&j| core[j] && close(i, j)) {
                labels[i] = find(&mut parent, j) as i64;
            }
        }
    }
    canonical(&labels)
}

fn dbscan_matches_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut clusters, mut noise) = (0, 0);
    for case in 0..50 {
        let n = rng.random_range(1..=100);
        let k = rng.random_range(1..=3);
        let eps = rng.random_range(0.03..0.4);
        let min_samples = rng.random_range(1..=6);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random::<f64>()).collect()).collect();
        let m = Matrix::from_rows(&points, k);
        let got = dbscan(&m, eps, min_samples).map_err(|e| e.to_string())?;
        let got: Vec<i64> = got.labels.iter().map(|&l| l as i64).collect();
        let want = dbscan_oracle(&points, eps, min_samples);
        ensure(canonical(&got) == want, || format!("case {case} (n={n}, k={k}, eps={eps}, min_samples={min_samples}) differs"))?;
        clusters += want.iter().copied().max().map_or(0, |m| m + 1);
        noise += want.iter().filter(|&&l| l < 0).count();
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!("50 instances agree ({clusters} clusters, {noise} noise points in total)"))
}

// ---------------------------------------------------------------- 4

fn composite_contract() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let ext = ExternalScores {
            homogeneity: rng.random::<f64>(),
            completeness: rng.random::<f64>(),
            v_measure: rng.random::<f64>(),
            ari: rng.random_range(-0.5..=1.0),
            ami: rng.random_range(-0.5..=1.0),
        };
        let s = rng.random_range(-1.0..=1.0);
        let db = rng.random_range(0.0..20.0);
        let got = composite_score(&ext, s, db);
        let want = 1.0 / (1.0 + db) + ext.homogeneity + ext.completeness + ext.v_measure + ext.ari + ext.ami + s;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-12, || format!("CS {got} vs {want}"))?;
        ensure(got <= 7.0, || format!("CS {got} above 7"))?;
    }
    let best = ExternalScores {
        homogeneity: 1.0,
        completeness: 1.0,
        v_measure: 1.0,
        ari: 1.0,
        ami: 1.0,
    };
    let top = composite_score(&best, 1.0, 0.0);
    ensure(top == 7.0, || format!("perfect bundle scores {top}"))?;
    within(Duration::from_secs(1), start)?;
    Ok(format!("1000 bundles, max |err| {worst:.1e}; perfect bundle = 7"))
}

// ---------------------------------------------------------------- 5

fn normalization_exact() -> Result<String, String> {
    let ranges = [(650.0, 2000.0), (400.0, 1400.0), (90.0, 600.0), (0.25, 0.75), (-3.0, 5.0)];
    for (lo, hi) in ranges {
        let f = |v: f64| normalize_lab(v, lo, hi).map_err(|e| e.to_string());
        ensure(f(lo)? == 0.0, || format!("{lo}..{hi}: low bound"))?;
        ensure(f(hi)? == 1.0, || format!("{lo}..{hi}: high bound"))?;
        ensure(f((lo + hi) / 2.0)? == 0.5, || format!("{lo}..{hi}: midpoint"))?;
        let below = lo - (hi - lo) * 0.25;
        let above = hi + (hi - lo) * 0.5;
        ensure(f(below)? == (below - lo) / (hi - lo) && f(below)? < 0.0, || format!("{lo}..{hi}: below range"))?;
        ensure(f(above)? == (above - lo) / (hi - lo) && f(above)? > 1.0, || format!("{lo}..{hi}: above range"))?;
        let f32_mid = normalize_lab((lo as f32 + hi as f32) / 2.0, lo as f32, hi as f32).map_err(|e| e.to_string())?;
        ensure(f32_mid == 0.5f32, || format!("{lo}..{hi}: f32 midpoint {f32_mid}"))?;
    }
    ensure(normalize_lab(1.0, 5.0, 5.0).is_err(), || "degenerate range accepted".into())?;
    ensure(normalize_lab(1.0, 6.0, 5.0).is_err(), || "inverted range accepted".into())?;
    Ok(format!("{} ranges: bounds, midpoint, out-of-range sign exact in f64 and f32", ranges.len()))
}

// ---------------------------------------------------------------- 6

fn day(offset: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 1, 1).unwrap() + chrono::Duration::days(offset)
}

fn event(p: &str, code: &str, offset: i64) -> DiagnosisEvent {
    DiagnosisEvent {
        patient_id: p.to_string(),
        icd_code: code.to_string(),
        recorded_date: day(offset),
    }
}

fn rule_codes() -> DiseaseCodeMap {
    let mut m = DiseaseCodeMap::new();
    m.insert(DiseaseLabel::Cgd, ["D71".to_string()].into());
    m.insert(DiseaseLabel::Cvid, ["D83.8".to_string(), "D83.9".to_string()].into());
    m.insert(DiseaseLabel::Was, ["D82.0".to_string()].into());
    m
}

fn cohort_rule() -> Result<String, String> {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};

    let start = Instant::now();
    let codes = rule_codes();
    let fixture = vec![
        event("gap89", "D71", 0),
        event("gap89", "D71", 89),
        event("gap90", "D71", 10),
        event("gap90", "D71", 100),
        event("mixed", "D83.8", 0),
        event("mixed", "D83.9", 120),
        event("multi", "D71", 0),
        event("multi", "D71", 200),
        event("multi", "D82.0", 50),
        event("other", "J45", 0),
        event("other", "J45", 365),
    ];
    let sel = select_cohort_detailed(&fixture, &codes);
    ensure(sel.excluded.get("gap89") == Some(&Exclusion::GapTooShort), || "89-day pair not excluded".into())?;
    ensure(sel.cohort.get("gap90") == Some(&DiseaseLabel::Cgd), || "90-day pair not included".into())?;
    ensure(sel.cohort.get("mixed") == Some(&DiseaseLabel::Cvid), || "two codes of one disease not combined".into())?;
    ensure(sel.excluded.get("multi") == Some(&Exclusion::OverlappingDiseases), || "multi-disease patient kept".into())?;
    ensure(!sel.cohort.contains_key("other") && !sel.excluded.contains_key("other"), || "unrelated codes used".into())?;

    let all_codes = ["D71", "D83.8", "D83.9", "D82.0", "J45", "R05"];
    let events = prop::collection::vec((0usize..6, 0usize..all_codes.len(), 0i64..400), 0..40);
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(events, any::<u64>()), |(raw, shuffle_seed)| {
            let evs: Vec<DiagnosisEvent> = raw
                .iter()
                .map(|&(p, c, d)| event(&format!("P{p}"), all_codes[c], d))
                .collect();
            let got = select_cohort(&evs, &codes);
            let mut want = BTreeMap::new();
            for p in 0..6 {
                let id = format!("P{p}");
                let mut per: BTreeMap<DiseaseLabel, Vec<i64>> = BTreeMap::new();
                for e in evs.iter().filter(|e| e.patient_id == id) {
                    for (d, set) in &codes {
                        if set.contains(&e.icd_code) {
                            per.entry(*d).or_default().push((e.recorded_date - day(0)).num_days());
                        }
                    }
                }
                if per.len() == 1 {
                    let (d, days) = per.into_iter().next().unwrap();
                    if days.iter().max().unwrap() - days.iter().min().unwrap() >= 90 {
                        want.insert(id, d);
                    }
                }
            }
            prop_assert_eq!(&got, &want);
            let mut shuffled = evs.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            prop_assert_eq!(select_cohort(&shuffled, &codes), got);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    within(Duration::from_secs(5), start)?;
    Ok("89 days excluded, 90 days included, multi-disease excluded; 256 random event sets match the rule oracle".into())
}

// ---------------------------------------------------------------- 7

fn mice_quality() -> Result<String, String> {
    let start = Instant::now();
    let (n, rate) = (300, 0.2);
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let loadings = [0.9, 0.8, -0.7, 0.85, 0.6];
        let truth: Vec<[f64; PANEL_DIM]> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std::array::from_fn(|j| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let l: f64 = loadings[j];
                    0.5 + 0.15 * (l * z + (1.0 - l * l).sqrt() * e)
                })
            })
            .collect();
        let rows: Vec<Vec<Option<f64>>> = truth
            .iter()
            .map(|r| r.iter().map(|&v| (rng.random::<f64>() >= rate).then_some(v)).collect())
            .collect();
        let config = ImputeConfig {
            seed,
            ..ImputeConfig::default()
        };
        let imputed = mice_impute(&rows, &config).map_err(|e| e.to_string())?;
        let means: Vec<f64> = (0..PANEL_DIM)
            .map(|j| {
                let obs: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
                obs.iter().sum::<f64>() / obs.len() as f64
            })
            .collect();
        let (mut se_mice, mut se_mean, mut masked) = (0.0, 0.0, 0usize);
        for (i, row) in rows.iter().enumerate() {
            for j in 0..PANEL_DIM {
                match row[j] {
                    Some(v) => ensure(imputed.get(i, j).to_bits() == v.to_bits(), || {
                        format!("seed {seed}: observed cell ({i},{j}) changed")
                    })?,
                    None => {
                        se_mice += (imputed.get(i, j) - truth[i][j]).powi(2);
                        se_mean += (means[j] - truth[i][j]).powi(2);
                        masked += 1;
                    }
                }
            }
        }
        let (r_mice, r_mean) = ((se_mice / masked as f64).sqrt(), (se_mean / masked as f64).sqrt());
        if r_mice <= r_mean {
            wins += 1;
        }
        detail.push(format!("{r_mice:.3}/{r_mean:.3}"));
    }
    ensure(wins >= 9, || format!("MICE beat mean imputation in {wins}/10 seeds: {}", detail.join(" ")))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("MICE <= mean RMSE in {wins}/10 seeds (MICE/mean: {}); observed cells bit-identical", detail.join(" ")))
}

// ---------------------------------------------------------------- 8

fn sites() -> Vec<SiteSpec> {
    vec![
        SiteSpec {
            site_id: "SITE_A".into(),
            ranges: [[700.0, 2100.0], [200.0, 900.0], [300.0, 1400.0], [100.0, 500.0], [90.0, 600.0]],
        },
        SiteSpec {
            site_id: "SITE_B".into(),
            ranges: [[650.0, 2000.0], [250.0, 1000.0], [400.0, 1500.0], [120.0, 550.0], [70.0, 550.0]],
        },
    ]
}

fn spec_with(seed: u64, diseases: Vec<DiseaseSpec>) -> CohortSpec {
    let base = demo_spec(0.05, seed);
    CohortSpec {
        seed,
        diseases,
        missingness: [0.0; PANEL_DIM],
        age_weights: [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        sites: sites(),
        disease_codes: base.disease_codes,
        noise_codes: Vec::new(),
        noise_codes_per_patient: 0,
        signature_rate: 1.0,
        negative_controls: 0,
        repeat_rate: 0.0,
    }
}

fn sphere(disease: DiseaseLabel, patients: usize, mean: [f64; PANEL_DIM], sd: f64) -> DiseaseSpec {
    DiseaseSpec {
        disease,
        patients,
        encounters_mean: 1.0,
        mean,
        covariance: panel_covariance(sd, 0.0),
        subphenotypes: Vec::new(),
    }
}

fn cohort_vectors(c: &SyntheticCohort) -> Result<(Vec<LabVector<f64>>, Vec<DiagnosisEvent>, DiseaseCodeMap), String> {
    let s = |e: Error| e.to_string();
    let labs = parse_lab_records(c.labs_csv.as_bytes(), ParseMode::Strict).map_err(s)?.records;
    let dx = parse_diagnoses(c.diagnoses_csv.as_bytes(), ParseMode::Strict).map_err(s)?.records;
    let codes = parse_disease_codes(c.disease_codes_json.as_bytes()).map_err(s)?;
    let cohort = select_cohort(&dx, &codes);
    let vectors = flatten_encounters(&labs, &cohort)
        .iter()
        .map(|x| assemble_vector(x, &VectorAssemblyConfig::default()))
        .collect::<lymphoclust::Result<Vec<_>>>()
        .map_err(s)?;
    Ok((vectors, dx, codes))
}

fn imputed_datasets(vectors: Vec<LabVector<f64>>, seed: u64) -> Result<Vec<SubgroupDataset<f64>>, String> {
    let config = ImputeConfig {
        seed,
        ..ImputeConfig::default()
    };
    let mut ds = impute_subgroups(&partition_by_age(vectors), &config).map_err(|e| e.to_string())?.datasets;
    ds.retain(|d| !d.is_empty());
    Ok(ds)
}

fn synthetic_recovery() -> Result<String, String> {
    let start = Instant::now();
    let base = [0.3, 0.4, 0.35, 0.45, 0.4];
    let shift = |j: usize| {
        let mut m = base;
        m[j] += 0.5;
        m
    };
    let (mut good, mut close) = (0, 0);
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let spec = spec_with(
            800 + seed,
            vec![
                sphere(DiseaseLabel::Cvid, 150, base, 0.05),
                sphere(DiseaseLabel::Dgs, 150, shift(0), 0.05),
                sphere(DiseaseLabel::Was, 150, shift(3), 0.05),
            ],
        );
        let cohort = generate_cohort(&spec).map_err(|e| e.to_string())?;
        let (vectors, _, _) = cohort_vectors(&cohort)?;
        ensure(vectors.len() == 450, || format!("seed {seed}: {} samples", vectors.len()))?;
        let rows: Vec<Vec<f64>> = vectors.iter().map(|v| v.components.iter().map(|c| c.unwrap()).collect()).collect();
        let labels: Vec<DiseaseLabel> = vectors.iter().map(|v| v.disease).collect();
        let (_, scores) = pca_fit_transform(&Matrix::from_rows(&rows, PANEL_DIM), 2).map_err(|e| e.to_string())?;
        let km = kmeans(&scores, 3, seed, KMeansOptions::default()).map_err(|e| e.to_string())?;
        let ag = agglomerative(&scores, 3).map_err(|e| e.to_string())?;
        let ari_km = external_metrics::<f64, _>(&labels, &km.assignment).map_err(|e| e.to_string())?.ari;
        let ari_ag = external_metrics::<f64, _>(&labels, &ag).map_err(|e| e.to_string())?.ari;
        good += usize::from(ari_km >= 0.9);
        close += usize::from((ari_km - ari_ag).abs() <= 0.05);
        detail.push(format!("{ari_km:.3}/{ari_ag:.3}"));
    }
    ensure(good >= 9, || format!("k-means ARI >= 0.9 in {good}/10 seeds: {}", detail.join(" ")))?;
    ensure(close >= 9, || format!("agglomerative within 0.05 in {close}/10 seeds: {}", detail.join(" ")))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("k-means ARI >= 0.9 in {good}/10, agglomerative within 0.05 in {close}/10 (ARI k-means/agglom: {})", detail.join(" ")))
}

// ---------------------------------------------------------------- 9

fn subphenotypes() -> Result<String, String> {
    let start = Instant::now();
    let subtype = |name: &str, mean: [f64; PANEL_DIM], codes: [&str; 2], weight: f64| SubphenotypeSpec {
        name: name.into(),
        weight,
        mean,
        icd_signature: codes.iter().map(|c| c.to_string()).collect(),
    };
    // Three lab-space regions, each holding one DGS subtype plus a minority
    // of another disease, so no clustering can recover the disease labels alone.
    let b = 0.3;
    let at = |axis: Option<usize>| -> [f64; PANEL_DIM] { std::array::from_fn(|j| if Some(j) == axis { b + 0.7 } else { b }) };
    let mut dgs = sphere(DiseaseLabel::Dgs, 360, at(None), 0.05);
    dgs.subphenotypes = vec![
        subtype("gastrointestinal", at(None), ["K21.9", "R63.3"], 0.35),
        subtype("airway", at(Some(0)), ["J38.5", "J35.1"], 0.35),
        subtype("cardiac", at(Some(1)), ["Q21.0", "Q25.4"], 0.30),
    ];
    let mut diseases = vec![
        dgs,
        sphere(DiseaseLabel::Cvid, 50, at(None), 0.05),
        sphere(DiseaseLabel::Was, 50, at(Some(0)), 0.05),
        sphere(DiseaseLabel::Agamma, 40, at(Some(1)), 0.05),
    ];
    diseases.iter_mut().for_each(|d| d.encounters_mean = 1.5);
    let mut spec = spec_with(900, diseases);
    spec.missingness = [0.1; PANEL_DIM];
    spec.noise_codes = (0..20).map(|i| format!("Z{:02}.{}", 10 + i, i % 10)).collect();
    spec.noise_codes_per_patient = 4;
    spec.signature_rate = 0.9;
    spec.negative_controls = 10;

    let cohort = generate_cohort(&spec).map_err(|e| e.to_string())?;
    let (vectors, diagnoses, codes) = cohort_vectors(&cohort)?;
    let datasets = imputed_datasets(vectors, 9)?;
    let dataset = datasets.iter().max_by_key(|d| d.len()).unwrap().clone();
    let grid = GridConfig::default();
    let algorithms = [Algorithm::Kmeans, Algorithm::Agglomerative];
    let tables = run_grid(std::slice::from_ref(&dataset), &algorithms, &grid, 9, 1).map_err(|e| e.to_string())?;
    let selections = select_all(&tables, std::slice::from_ref(&dataset), &grid);
    let exclude = defining_codes(&codes);
    let signatures = [["K21.9", "R63.3"], ["J38.5", "J35.1"], ["Q21.0", "Q25.4"]];

    let mut detail = Vec::new();
    let mut kmeans_hits = 0;
    for sel in &selections {
        let (Some(combo), Some(result)) = (&sel.combo, &sel.result) else {
            return Err(format!("{:?}: no selection", sel.algorithm));
        };
        let report = cluster_report(
            &dataset,
            combo,
            &result.assignment,
            result.bundle.composite,
            result.bundle.silhouette,
            &diagnoses,
            &exclude,
        )
        .map_err(|e| e.to_string())?;
        let mut hits = BTreeSet::new();
        for cluster in &report.clusters {
            for table in [&cluster.icd_all, &cluster.icd_recurring] {
                ensure(table.iter().all(|c| !exclude.contains(&c.code)), || {
                    format!("defining code listed for cluster {}", cluster.composition.cluster)
                })?;
            }
            if cluster.composition.is_noise()
                || cluster.composition.dominant != DiseaseLabel::Dgs
                || cluster.composition.fraction < 0.6
            {
                continue;
            }
            let top5: BTreeSet<&str> = cluster.icd_all.iter().take(5).map(|c| c.code.as_str()).collect();
            if signatures.iter().any(|sig| sig.iter().all(|c| top5.contains(c))) {
                hits.insert(cluster.composition.cluster);
            }
        }
        if sel.algorithm == Algorithm::Kmeans {
            kmeans_hits = hits.len();
        }
        detail.push(format!(
            "{} k={}: {} signature clusters",
            sel.algorithm.display_name(),
            report.n_clusters,
            hits.len()
        ));
    }
    ensure(kmeans_hits >= 2, || format!("only {kmeans_hits} DGS signature clusters: {}", detail.join("; ")))?;
    within(Duration::from_secs(300), start)?;
    Ok(format!("{} samples; {}; defining codes absent", dataset.len(), detail.join("; ")))
}

// ---------------------------------------------------------------- 10

fn row(algorithm: Algorithm, index: usize, pca: usize, knob: f64, cs: f64, valid: bool) -> ExperimentResult<f64> {
    let combo = if algorithm.is_density() {
        HyperparamCombo::density(algorithm, pca, knob)
    } else {
        HyperparamCombo::fixed_k(algorithm, pca, knob as usize)
    };
    let mut bundle = MetricsBundle::<f64>::failed();
    if valid {
        bundle.composite = cs;
        bundle.silhouette = 0.5;
        bundle.davies_bouldin = 1.0;
        bundle.valid = true;
        bundle.n_clusters = 3;
    }
    ExperimentResult {
        age_group: AgeGroup::ALL[0],
        combo_index: index,
        combo: HyperparamCombo { seed: index as u64, ..combo },
        assignment: ClusterAssignment::from_raw(&[], algorithm),
        bundle,
        note: None,
    }
}

/// `(pca, knob, cs, valid)` rows -> selected (pca, knob).
fn select(algorithm: Algorithm, rows: &[(usize, f64, f64, bool)]) -> lymphoclust::Result<(usize, f64)> {
    let results: Vec<_> = rows
        .iter()
        .enumerate()
        .map(|(i, &(p, k, cs, v))| row(algorithm, i, p, k, cs, v))
        .collect();
    let combo = select_hyperparameters(&rank_results(&results))?;
    Ok((combo.pca_components, combo.knob()))
}

fn median_rule() -> Result<String, String> {
    let start = Instant::now();
    let km = Algorithm::Kmeans;
    let cases: Vec<(&str, Algorithm, Vec<(usize, f64, f64, bool)>, (usize, f64))> = vec![
        (
            "odd count, unsorted input",
            km,
            vec![(2, 4.0, 5.0, true), (3, 7.0, 4.0, true), (5, 5.0, 6.0, true), (4, 6.0, 3.0, true), (2, 3.0, 5.5, true)],
            (3, 5.0),
        ),
        ("even count rounds up", km, vec![(2, 3.0, 4.0, true), (3, 4.0, 3.0, true), (4, 6.0, 2.0, true), (5, 8.0, 1.0, true)], (4, 5.0)),
        ("even count half-step", km, vec![(2, 3.0, 4.0, true), (2, 4.0, 3.0, true), (3, 5.0, 2.0, true), (3, 8.0, 1.0, true)], (3, 5.0)),
        (
            "only the top five count",
            km,
            vec![
                (2, 2.0, 6.0, true),
                (2, 3.0, 5.9, true),
                (3, 3.0, 5.8, true),
                (3, 4.0, 5.7, true),
                (2, 2.0, 5.6, true),
                (5, 18.0, 1.0, true),
                (5, 17.0, 0.5, true),
            ],
            (2, 3.0),
        ),
        ("invalid rows ignored", km, vec![(5, 18.0, 0.0, false), (2, 3.0, 2.0, true), (4, 9.0, 0.0, false), (3, 6.0, 1.0, true)], (3, 5.0)),
        ("single valid row", km, vec![(4, 11.0, 1.0, true), (2, 2.0, 0.0, false)], (4, 11.0)),
        (
            "density epsilon is not rounded",
            Algorithm::Dbscan,
            vec![(2, 0.01, 4.0, true), (3, 0.02, 3.0, true), (3, 0.05, 2.0, true), (4, 0.1, 1.0, true)],
            (3, 0.035),
        ),
        (
            "density odd count",
            Algorithm::Hdbscan,
            vec![(5, 0.2, 1.0, true), (2, 0.005, 2.0, true), (3, 0.015, 3.0, true)],
            (3, 0.015),
        ),
    ];
    for (name, alg, rows, want) in &cases {
        let got = select(*alg, rows).map_err(|e| format!("{name}: {e}"))?;
        ensure(got == *want, || format!("{name}: selected {got:?}, expected {want:?}"))?;
    }
    let none = select(km, &[(2, 3.0, 0.0, false), (3, 4.0, 0.0, false)]);
    ensure(matches!(none, Err(Error::NoValidResults { .. })), || format!("no valid rows gave {none:?}"))?;
    within(Duration::from_secs(1), start)?;
    Ok(format!("{} fixtures plus the no-valid-row error", cases.len()))
}

// ---------------------------------------------------------------- 11

fn files_of(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn determinism_and_runtime() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for jobs in [1usize, 2] {
        let config = PipelineConfig {
            out: tmp.path().join(format!("jobs{jobs}")),
            seed: 11,
            synth_scale: 1.03,
            ..PipelineConfig::default()
        };
        let start = Instant::now();
        let outcome = cmd_pipeline(&config, jobs).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(600), || format!("jobs={jobs} took {elapsed:?}"))?;
        runs.push((jobs, elapsed, outcome.ingest.total_samples, outcome.tune.experiments, files_of(&config.out)));
    }
    let (a, b) = (&runs[0], &runs[1]);
    ensure(a.2 >= 6000, || format!("cohort has {} samples", a.2))?;
    ensure(a.3 == 3144, || format!("{} experiments", a.3))?;
    let names_a: Vec<&String> = a.4.keys().collect();
    let names_b: Vec<&String> = b.4.keys().collect();
    ensure(names_a == names_b, || format!("file sets differ: {names_a:?} vs {names_b:?}"))?;
    for (name, bytes) in &a.4 {
        ensure(b.4[name] == *bytes, || format!("{name} differs between --jobs 1 and --jobs 2"))?;
    }
    Ok(format!(
        "{} samples, {} experiments, {} artifacts byte-identical; jobs=1 {:.0?}, jobs=2 {:.0?}",
        a.2,
        a.3,
        a.4.len(),
        a.1,
        b.1
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 11] = [
        ("grid arithmetic", grid_arithmetic),
        ("metric oracle equivalence", metric_oracles),
        ("DBSCAN oracle", dbscan_matches_oracle),
        ("composite-score contract", composite_contract),
        ("normalization exactness", normalization_exact),
        ("cohort rule", cohort_rule),
        ("MICE quality", mice_quality),
        ("synthetic recovery", synthetic_recovery),
        ("subphenotype detection", subphenotypes),
        ("median-of-top-5 rule", median_rule),
        ("determinism and runtime", determinism_and_runtime),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({why})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
