//! Acceptance criteria, one line of output per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the verdict lines are always
//! printed; exits non-zero if any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use gencp::clustering::Ensemble;
use gencp::conformal::{augmented_quantile, calibrate_scores, fit_score, predict_set, Cp4GenConfig, ScoreMethod};
use gencp::datasets::{write_split_cache, LabeledDataset};
use gencp::experiment::{ablate_m, run_experiment, summarize, ExperimentConfig, MetricsRecord, MethodKind, Setting};
use gencp::genmodel::{flatten, fm_batch, fm_sample, fm_train, FlowModel, FmTrainConfig};
use gencp::mixture::CovStructure;
use gencp::numerics::{Rng, SymMatrix};
use gencp::oracles::{gaussian_hd_volume, quantile_bruteforce};
use gencp::setgeometry::{volume, volume_1d, volume_mc, PredictionSet};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn records_for<'a>(records: &'a [MetricsRecord], method: &str) -> Vec<&'a MetricsRecord> {
    records.iter().filter(|r| r.method == method).collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn coverage_validity() -> Verdict {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        dataset: "25-gaussians".into(),
        n: 4995,
        seeds: (0..50).collect(),
        ..Default::default()
    };
    let out = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => return verdict(false, e.to_string()),
    };
    let n_calib = out.records[0].n_calib;
    let mut pass = n_calib == 999;
    let mut parts = vec![format!("N_calib={n_calib}")];
    for method in ["pcp", "cp4gen", "hdpcp"] {
        let m = mean(records_for(&out.records, method).iter().map(|r| r.coverage));
        pass &= (0.885..=0.915).contains(&m);
        parts.push(format!("{method} {m:.4}"));
    }
    parts.push(format!("{:.1}s for all three methods", start.elapsed().as_secs_f64()));
    verdict(pass, parts.join(", "))
}

fn quantile_equivalence() -> Verdict {
    let mut rng = Rng::new(2024);
    let mut mismatches = 0;
    let cases = 10_000;
    for case in 0..cases {
        let n = 1 + rng.index(50);
        // every third case draws from a coarse lattice to create ties
        let scores: Vec<f64> = (0..n)
            .map(|_| if case % 3 == 0 { rng.index(6) as f64 } else { rng.normal() * 3.0 })
            .collect();
        let alpha = match case % 4 {
            0 => 0.05,
            1 => 0.1,
            2 => 0.2,
            _ => 0.01 + 0.98 * rng.uniform(),
        };
        let fast = augmented_quantile(&scores, alpha).unwrap();
        let slow = quantile_bruteforce(&scores, alpha);
        if fast.to_bits() != slow.to_bits() {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches in {cases} cases"))
}

fn pcp_reduction() -> Verdict {
    let mut total = 0;
    let mut mismatches = 0;
    for dataset in ["25-gaussians", "8-gaussians"] {
        let cfg = ExperimentConfig {
            dataset: dataset.into(),
            n: 5000,
            methods: vec![MethodKind::Pcp],
            k: Setting::Value(1),
            reduction_check: true,
            seeds: vec![7],
            ..Default::default()
        };
        match run_experiment(&cfg) {
            Ok(out) => {
                for c in &out.reduction_checks {
                    total += c.n_points;
                    mismatches += c.mismatches;
                }
            }
            Err(e) => return verdict(false, e.to_string()),
        }
    }
    verdict(total >= 1000 && mismatches == 0, format!("{mismatches} disagreements over {total} test points"))
}

fn gaussian_ensemble(m: usize, rng: &mut Rng) -> Ensemble {
    Ensemble::new(2, (0..2 * m).map(|_| rng.normal()).collect()).unwrap()
}

/// Mean test-set volume for an input-ignorant N(0, I₂) target.
fn gaussian_mean_volume(method: &ScoreMethod, m: usize, seed: u64) -> f64 {
    let (n_calib, n_test, mc) = (999, 200, 20_000);
    let mut rng = Rng::new(seed);
    let scores: Vec<f64> = (0..n_calib)
        .map(|_| {
            let ens = gaussian_ensemble(m, &mut rng);
            let y = [rng.normal(), rng.normal()];
            fit_score(&ens, method, &mut rng).unwrap().score(&y).unwrap()
        })
        .collect();
    let q_hat = calibrate_scores(scores, 0.1).unwrap().q_hat;
    let vols: Vec<f64> = (0..n_test)
        .map(|_| {
            let ens = gaussian_ensemble(m, &mut rng);
            let set = predict_set(&ens, method, q_hat, &mut rng).unwrap();
            volume(&set, mc, &mut rng).unwrap().value
        })
        .collect();
    mean(vols)
}

fn gaussian_hd_convergence() -> Verdict {
    let analytic = gaussian_hd_volume(&[0.0, 0.0], &SymMatrix::identity(2), 0.1).unwrap();
    let cp = ScoreMethod::Cp4Gen(Cp4GenConfig { k: 1, beta_sq: 1e-4, structure: CovStructure::Full });
    let trend: Vec<(usize, f64)> = [10, 30, 100].iter().map(|&m| (m, gaussian_mean_volume(&cp, m, 11))).collect();
    let cp100 = trend.last().unwrap().1;
    let pcp100 = gaussian_mean_volume(&ScoreMethod::Pcp, 100, 11);
    let gap = (cp100 - analytic).abs() / analytic;
    let decreasing = trend.windows(2).all(|w| w[1].1 < w[0].1);
    let pass = gap < 0.15 && pcp100 > cp100;
    let trend_s: Vec<String> = trend.iter().map(|(m, v)| format!("M={m}:{v:.3}")).collect();
    verdict(
        pass,
        format!(
            "analytic {analytic:.3}, CP4Gen {} (gap {:.1}% at M=100, decreasing: {decreasing}), PCP M=100 {pcp100:.3}",
            trend_s.join(" "),
            100.0 * gap
        ),
    )
}

fn table_reproduction() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for dataset in ["25-gaussians", "8-gaussians"] {
        let cfg = ExperimentConfig {
            dataset: dataset.into(),
            n: 5000,
            methods: vec![MethodKind::Pcp, MethodKind::Cp4Gen],
            seeds: (0..5).collect(),
            ..Default::default()
        };
        let out = match run_experiment(&cfg) {
            Ok(o) => o,
            Err(e) => return verdict(false, e.to_string()),
        };
        let pcp = records_for(&out.records, "pcp");
        let cp = records_for(&out.records, "cp4gen");
        let cov_ok = out.records.iter().all(|r| (0.87..=0.93).contains(&r.coverage));
        let (vp, vc) = (mean(pcp.iter().map(|r| r.volume_mean)), mean(cp.iter().map(|r| r.volume_mean)));
        let cx_ok = cp.iter().all(|r| r.complexity_median <= 10.0) && pcp.iter().all(|r| r.complexity_median == 30.0);
        pass &= cov_ok && vc < vp && cx_ok;
        let cov_range = out.records.iter().map(|r| r.coverage).fold((1.0f64, 0.0f64), |(a, b), c| (a.min(c), b.max(c)));
        parts.push(format!(
            "{dataset}: coverage [{:.3}, {:.3}], volume PCP {vp:.4} vs CP4Gen {vc:.4}, complexity PCP {} / CP4Gen {}",
            cov_range.0,
            cov_range.1,
            mean(pcp.iter().map(|r| r.complexity_median)),
            mean(cp.iter().map(|r| r.complexity_median)),
        ));
    }
    verdict(pass, parts.join("; "))
}

fn ablation_shape() -> Verdict {
    let grid: Vec<usize> = (1..=10).map(|i| 10 * i).collect();
    let cfg = ExperimentConfig {
        dataset: "25-gaussians".into(),
        n: 5000,
        methods: vec![MethodKind::Pcp, MethodKind::Cp4Gen],
        seeds: (0..3).collect(),
        ..Default::default()
    };
    let out = match ablate_m(&cfg, &grid) {
        Ok(o) => o,
        Err(e) => return verdict(false, e.to_string()),
    };
    let pcp_ok = records_for(&out.records, "pcp").iter().all(|r| r.complexity_median == r.m as f64);
    let summary = summarize(&out.records);
    // the band applies to each point of the coverage-vs-M curve, i.e. the seed mean
    let curve_range = summary.iter().map(|s| s.coverage_mean).fold((1.0f64, 0.0f64), |(a, b), c| (a.min(c), b.max(c)));
    let cov_ok = summary.iter().all(|s| (0.87..=0.93).contains(&s.coverage_mean));
    let cp_cx: Vec<(usize, f64)> =
        summary.iter().filter(|s| s.method == "cp4gen").map(|s| (s.m, s.complexity_mean)).collect();
    let upper: Vec<f64> = cp_cx.iter().filter(|(m, _)| *m >= 50).map(|(_, c)| *c).collect();
    let spread = upper.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - upper.iter().cloned().fold(f64::INFINITY, f64::min);
    let cov_range = out.records.iter().map(|r| r.coverage).fold((1.0f64, 0.0f64), |(a, b), c| (a.min(c), b.max(c)));
    let cx_s: Vec<String> = cp_cx.iter().map(|(m, c)| format!("{m}:{c:.1}")).collect();
    verdict(
        cov_ok && pcp_ok && spread <= 1.0,
        format!(
            "coverage by M [{:.3}, {:.3}] (single records [{:.3}, {:.3}]), PCP complexity = M: {pcp_ok}, CP4Gen complexity by M {} (spread over M≥50: {spread:.2})",
            curve_range.0,
            curve_range.1,
            cov_range.0,
            cov_range.1,
            cx_s.join(" ")
        ),
    )
}

fn mc_volume_calibration() -> Verdict {
    let disk = PredictionSet::balls(vec![0.0, 0.0], 2, 1.0).unwrap();
    let est = volume_mc(&disk, 1_000_000, &mut Rng::new(99)).unwrap();
    let z_disk = (est.value - std::f64::consts::PI).abs() / est.std_err;
    let mut rng = Rng::new(100);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..100 {
        let k = 1 + rng.index(8);
        let centers: Vec<f64> = (0..k).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let set = PredictionSet::balls(centers, 1, rng.uniform_range(0.05, 1.0)).unwrap();
        let exact = volume_1d(&set).unwrap().value;
        let mc = volume_mc(&set, 100_000, &mut rng).unwrap();
        let z = if mc.std_err > 0.0 { (mc.value - exact).abs() / mc.std_err } else if mc.value == exact { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
        failures += (z > 3.0) as usize;
    }
    verdict(
        z_disk <= 3.0 && failures == 0,
        format!(
            "disk {:.5} ± {:.5} ({z_disk:.2} SE from π); 1-d unions: {failures}/100 beyond 3 SE, worst {worst:.2} SE",
            est.value, est.std_err
        ),
    )
}

fn flow_matching_sanity() -> Verdict {
    let mut rng = Rng::new(1);
    let y: Vec<f64> = (0..1024).map(|_| rng.normal()).collect();
    let data = LabeledDataset::new("standard-normal", 0, 1, Vec::new(), y).unwrap();
    let cfg = FmTrainConfig { epochs: 2000, seed: 7, ..Default::default() };
    let start = Instant::now();
    let trained = match fm_train(&data, &cfg) {
        Ok(t) => t,
        Err(e) => return verdict(false, e.to_string()),
    };
    let samples = fm_sample(&trained.model, &[], 10_000, cfg.euler_steps, cfg.t_clamp_delta, &mut Rng::new(3)).unwrap();
    let v = samples.as_flat();
    let m = mean(v.iter().copied());
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;

    // finite differences on a 49-parameter network
    let mut rng = Rng::new(8);
    let toy = FlowModel::new(1, 1, 3, 5, &mut rng).unwrap();
    let xs: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    let ys: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    let (input, target) = fm_batch(&xs, &ys, 1, 1, 1e-3, &mut rng);
    let analytic = flatten(&toy.loss_and_grad(&input, &target).1);
    let base = toy.params_flat();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut probe = toy.clone();
        let mut p = base.clone();
        p[i] += 1e-5;
        probe.set_params_flat(&p).unwrap();
        let up = probe.loss_and_grad(&input, &target).0;
        p[i] -= 2e-5;
        probe.set_params_flat(&p).unwrap();
        let down = probe.loss_and_grad(&input, &target).0;
        let numeric = (up - down) / 2e-5;
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    verdict(
        m.abs() < 0.1 && (0.8..=1.2).contains(&var) && worst < 1e-4,
        format!(
            "mean {m:.4}, variance {var:.4} over 10^4 draws ({:.0}s training); worst gradient rel. error {worst:.2e} over {} params",
            start.elapsed().as_secs_f64(),
            base.len()
        ),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    // a planar response exercises the Monte Carlo volume path
    let mut rng = Rng::new(5);
    let n = 600;
    let x: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let y: Vec<f64> = x.iter().flat_map(|&xi| [xi + 0.1 * rng.normal(), (rng.index(2) as f64) + 0.05 * rng.normal()]).collect();
    let data = LabeledDataset::new("planar", 1, 2, x, y).unwrap();
    let tr = data.subset(&(0..360).collect::<Vec<_>>());
    let ca = data.subset(&(360..480).collect::<Vec<_>>());
    let te = data.subset(&(480..600).collect::<Vec<_>>());
    write_split_cache(&tmp.path().join("data"), "planar", &tr, &ca, &te).unwrap();

    let configs = [
        "dataset = \"25-gaussians\"\nn = 1500\nseeds = [3, 4]\n".to_string(),
        format!(
            "dataset = \"planar\"\ndata_dir = \"{}\"\np = 1\nd = 2\nwindow_h = 0.1\nmc_samples = 5000\ntune_max_points = 100\ntune_mc_samples = 2000\nseeds = [1]\n",
            tmp.path().join("data").display()
        ),
    ];
    let bin = env!("CARGO_BIN_EXE_gencp");
    let mut identical = true;
    let mut n_files = 0;
    for (ci, text) in configs.iter().enumerate() {
        let cfg_path = tmp.path().join(format!("c{ci}.toml"));
        std::fs::write(&cfg_path, text).unwrap();
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = tmp.path().join(format!("out{ci}_{run}"));
            let status = Command::new(bin).arg("run-cp").arg("--config").arg(&cfg_path).arg("--out").arg(&out).output().unwrap();
            if !status.status.success() {
                return verdict(false, format!("run-cp failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
            outputs.push(read_dir_bytes(&out));
        }
        n_files += outputs[0].len();
        identical &= outputs[0] == outputs[1] && !outputs[0].is_empty();
    }
    verdict(identical, format!("{n_files} report files per run pair compared byte for byte"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("1 coverage validity", coverage_validity),
        ("2 quantile oracle equivalence", quantile_equivalence),
        ("3 PCP reduction", pcp_reduction),
        ("4 Gaussian HD convergence", gaussian_hd_convergence),
        ("5 synthetic table reproduction", table_reproduction),
        ("6 ablation shape", ablation_shape),
        ("7 MC volume calibration", mc_volume_calibration),
        ("8 flow-matching sanity", flow_matching_sanity),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let v = run();
        failed += (!v.pass) as usize;
        println!(
            "[{}] criterion {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
