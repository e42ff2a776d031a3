//! Acceptance criteria, evaluated in one pass so every line is printed even
//! when an earlier criterion fails. Run with `--nocapture` to see the table
//! on success.

use std::fs;
use std::time::Instant;

use fedsim::aggregation::{agg_cronus, agg_krum, agg_mean, agg_mwu, AggregationInput, CronusConfig, MwuVariant};
use fedsim::attacks::{attack_lie, attack_ofom, lie_z};
use fedsim::experiments::{
    breaking_point_malicious, emit_results, gen_synthetic, run_experiment_on, ExperimentConfig, FederatedData,
};
use fedsim::model::{init_params, loss_and_grad, Activation, Architecture, Batch, Dataset, ModelParams};
use fedsim::numerics::Matrix;
use fedsim::aggregation::AggregatorKind;
use fedsim::rng::rng_from_seed;
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn robust_mean() -> Outcome {
    let (n, d, eps, sigma) = (200, 10, 0.2, 1.0);
    let bound = 4.0 * sigma * f64::sqrt(eps);
    let (mut filter_ok, mut mean_bad) = (0, 0);
    for seed in 0..100u64 {
        let mut rng = rng_from_seed(1000 + seed);
        let mu: Vec<f64> = (0..d).map(|_| 5.0 * normal(&mut rng)).collect();
        let mut dir: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let len = dist(&dir, &vec![0.0; d]);
        dir.iter_mut().for_each(|x| *x /= len);
        let bad = (eps * n as f64) as usize;
        let points: Vec<Matrix> = (0..n)
            .map(|i| {
                let shift = if i < bad { 50.0 * sigma } else { 0.0 };
                let row: Vec<f64> = (0..d).map(|j| mu[j] + sigma * normal(&mut rng) + shift * dir[j]).collect();
                Matrix::from_vec(1, d, row).unwrap()
            })
            .collect();
        let robust = agg_cronus(&points, eps, &CronusConfig::default(), seed).unwrap();
        if dist(robust.aggregate.row(0), &mu) <= bound {
            filter_ok += 1;
        }
        let rows: Vec<Vec<f64>> = points.iter().map(|m| m.row(0).to_vec()).collect();
        let plain = agg_mean(&AggregationInput::new(&rows, None, eps).unwrap()).unwrap();
        if dist(&plain, &mu) > bound {
            mean_bad += 1;
        }
    }
    outcome(
        filter_ok >= 95 && mean_bad == 100,
        format!("filter within 4σ√ε in {filter_ok}/100 (need 95), mean outside in {mean_bad}/100 (need 100)"),
    )
}

fn krum_oracle() -> Outcome {
    let mut rng = rng_from_seed(2);
    let mut agree = 0;
    for trial in 0..200 {
        let n = rng.gen_range(4..=8);
        let d = rng.gen_range(1..=4);
        let eps = if trial % 2 == 0 { 0.0 } else { 0.125 };
        let updates: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
        // Exhaustive scores: all pairwise squared distances, k smallest each.
        let k = ((1.0 - eps) * n as f64 - 2.0 + 1e-9).floor() as usize;
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let mut ds: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist(&updates[i], &updates[j]).powi(2)).collect();
                ds.sort_by(f64::total_cmp);
                ds[..k].iter().sum()
            })
            .collect();
        let expected = (0..n).fold(0, |best, i| if scores[i] < scores[best] { i } else { best });
        let (_, got) = agg_krum(&AggregationInput::new(&updates, None, eps).unwrap()).unwrap();
        agree += usize::from(got == expected);
    }
    outcome(agree == 200, format!("{agree}/200 selections match the exhaustive oracle"))
}

fn gradients() -> Outcome {
    let archs = [
        Architecture::linear(5, 3).unwrap(),
        Architecture::new(5, vec![7], 3, Activation::Tanh).unwrap(),
        Architecture::new(5, vec![7], 3, Activation::Relu).unwrap(),
        Architecture::new(5, vec![6, 4], 3, Activation::Tanh).unwrap(),
    ];
    let mut rng = rng_from_seed(3);
    let mut worst = 0.0f64;
    for arch in &archs {
        for point in 0..20u64 {
            let params = init_params(arch, point).unwrap();
            let mut flat = params.flatten();
            flat.iter_mut().for_each(|x| *x += 0.1 * normal(&mut rng));
            let params = ModelParams::unflatten(arch, &flat).unwrap();
            let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| normal(&mut rng)).collect()).collect();
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let data = Dataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
            let (_, grad) = loss_and_grad(&params, Batch::Hard(&data)).unwrap();
            let grad = grad.flatten();
            let h = 1e-5;
            let fd: Vec<f64> = (0..flat.len())
                .map(|i| {
                    let mut up = flat.clone();
                    up[i] += h;
                    let mut down = flat.clone();
                    down[i] -= h;
                    let f = |v: &[f64]| loss_and_grad(&ModelParams::unflatten(arch, v).unwrap(), Batch::Hard(&data)).unwrap().0;
                    (f(&up) - f(&down)) / (2.0 * h)
                })
                .collect();
            let scale = dist(&grad, &vec![0.0; grad.len()]).max(dist(&fd, &vec![0.0; fd.len()])).max(1e-12);
            worst = worst.max(dist(&grad, &fd) / scale);
        }
    }
    outcome(worst < 1e-4, format!("worst relative error {worst:.2e} over 4 architectures x 20 points"))
}

fn breaking_points() -> Outcome {
    use AggregatorKind::*;
    let table = [
        (32, Krum, 29), (32, Bulyan, 9), (32, Median, 31), (32, Mean, 1),
        (28, Krum, 25), (28, Bulyan, 8), (28, Median, 27), (28, Mean, 1),
        (16, Krum, 13), (16, Bulyan, 4), (16, Median, 15), (16, Mean, 1),
    ];
    let mut bad = Vec::new();
    for (b, rule, m) in table {
        let got = breaking_point_malicious(rule, b);
        let family_ok = [MwuAvg, MwuOpt, Cronus]
            .iter()
            .all(|&r| rule != Median || breaking_point_malicious(r, b) == m);
        if got != m || !family_ok {
            bad.push(format!("{rule}@{b}: {got} != {m}"));
        }
    }
    outcome(bad.is_empty(), format!("12 published counts, mismatches: {bad:?}"))
}

fn ofom_vs_mwu() -> Outcome {
    let mut rng = rng_from_seed(5);
    let benign: Vec<Vec<f64>> = (0..14).map(|_| (0..20).map(|_| normal(&mut rng)).collect()).collect();
    let crafted = attack_ofom(&benign, 2, 1e6).unwrap().updates;
    let target = crafted[1].clone();
    let mut all = benign;
    all.extend(crafted);
    let mut errs = Vec::new();
    for variant in [MwuVariant::Avg, MwuVariant::Opt] {
        let agg = agg_mwu(&AggregationInput::new(&all, None, 0.0).unwrap(), variant, 10).unwrap();
        errs.push(dist(&agg, &target) / dist(&target, &vec![0.0; 20]));
    }
    outcome(
        errs.iter().all(|e| *e <= 1e-3),
        format!("relative distance to the second crafted update: avg {:.2e}, opt {:.2e}", errs[0], errs[1]),
    )
}

/// Inverse normal CDF by bisection on an independent erf approximation
/// (maximum error 1.5e-7).
fn quantile_oracle(p: f64) -> f64 {
    let erf = |x: f64| {
        let t = 1.0 / (1.0 + 0.3275911 * x.abs());
        let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        (1.0 - poly * (-x * x).exp()).copysign(x)
    };
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..100 {
        let mid: f64 = 0.5 * (lo + hi);
        if 0.5 * (1.0 + erf(mid / std::f64::consts::SQRT_2)) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn lie_arithmetic() -> Outcome {
    let z = lie_z(10, 2).unwrap();
    let oracle = quantile_oracle(0.6);
    let mut rng = rng_from_seed(7);
    let benign: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| 3.0 * normal(&mut rng) + 1.0).collect()).collect();
    let crafted = attack_lie(&benign, 10, 2).unwrap().updates;
    let mut worst = 0.0f64;
    for j in 0..6 {
        let mean = benign.iter().map(|v| v[j]).sum::<f64>() / 8.0;
        let var = benign.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / 8.0;
        let expected = mean + z * var.sqrt();
        for c in &crafted {
            worst = worst.max((c[j] - expected).abs());
        }
    }
    outcome(
        (z - oracle).abs() <= 1e-4 && (z - 0.2533471031357997).abs() <= 1e-4 && worst <= 1e-12,
        format!("z = {z:.10}, oracle {oracle:.10}, reconstruction error {worst:.1e}"),
    )
}

const DESK: &str = r#"
master_seed = 11
attack_sweep = ["label_flip", "paf", "lie", "ofom"]
dataset.synthetic = { classes = 10, feature_dim = 20, per_party = 30, parties = 16, public_size = 500, test_size = 1000, cluster_sep = 8.0 }
model.hidden_sizes = [32]
protocol.lr_private = 0.05
protocol.lr_public = 0.05
"#;

fn desk(protocol: &str) -> ExperimentConfig {
    let extra = match protocol {
        "cronus" => "protocol.protocol = \"cronus\"\nprotocol.aggregator = \"cronus\"\nprotocol.rounds = 10\nprotocol.init_epochs = 10\n",
        _ => "protocol.protocol = \"fedavg\"\nprotocol.aggregator = \"mean\"\nprotocol.rounds = 20\n",
    };
    ExperimentConfig::from_toml_str(&format!("{DESK}{extra}")).unwrap()
}

fn desk_data(cfg: &ExperimentConfig) -> FederatedData {
    match &cfg.dataset {
        fedsim::experiments::DatasetConfig::Synthetic(s) => gen_synthetic(s, cfg.master_seed),
        _ => unreachable!(),
    }
}

fn robustness_reproduction() -> Outcome {
    let fed = desk("fedavg");
    let fed_out = run_experiment_on(&fed, &desk_data(&fed)).unwrap();
    let cro = desk("cronus");
    let cro_out = run_experiment_on(&cro, &desk_data(&cro)).unwrap();
    let rob_fed = fed_out.report.robustness.unwrap();
    let rob_cro = cro_out.report.robustness.unwrap();
    let gain = 100.0 * (cro_out.report.benign_accuracy - cro_out.report.standalone_accuracy);
    let (a, b, c) = (rob_fed <= 0.3, rob_cro >= 0.90, gain >= 3.0);
    let fmt = |ok: bool| if ok { "pass" } else { "FAIL" };
    let per_attack = |r: &fedsim::experiments::RobustnessReport| {
        r.per_attack_accuracy
            .iter()
            .map(|(k, v)| format!("{k} {v:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    outcome(
        a && b && c,
        format!(
            "(a) {} mean robustness {rob_fed:.3} <= 0.3; (b) {} filter robustness {rob_cro:.3} >= 0.90 \
             [benign {:.3}; {}]; (c) {} gain over stand-alone {gain:.1} points >= 3 \
             (stand-alone {:.3}) [mean rule: benign {:.3}; {}]",
            fmt(a),
            fmt(b),
            cro_out.report.benign_accuracy,
            per_attack(&cro_out.report),
            fmt(c),
            cro_out.report.standalone_accuracy,
            fed_out.report.benign_accuracy,
            per_attack(&fed_out.report),
        ),
    )
}

fn determinism() -> Outcome {
    let mut identical = true;
    for protocol in ["fedavg", "cronus"] {
        let mut bytes = Vec::new();
        for workers in [1, 4, 1] {
            let mut cfg = desk(protocol);
            cfg.workers = workers;
            let out = run_experiment_on(&cfg, &desk_data(&cfg)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            emit_results(&out, dir.path()).unwrap();
            bytes.push((
                fs::read(dir.path().join("rounds.csv")).unwrap(),
                fs::read(dir.path().join("report.json")).unwrap(),
            ));
        }
        identical &= bytes.windows(2).all(|w| w[0] == w[1]);
    }
    outcome(identical, "rounds.csv and report.json byte-identical across worker counts 1, 4, 1 for both protocols".into())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn heterogeneity() -> Outcome {
    let mut mixed = desk("cronus");
    mixed.attack_sweep.clear();
    mixed.model.linear_parties = 4;
    let data = desk_data(&mixed);
    let out = run_experiment_on(&mixed, &data).unwrap();
    let fin = &out.runs[0].final_per_party;
    let linear_gain = 100.0 * (mean(&fin[..4]) - mean(&out.standalone_per_party[..4]));
    let mixed_hidden = mean(&fin[4..]);

    let mut homo = desk("cronus");
    homo.attack_sweep.clear();
    if let fedsim::experiments::DatasetConfig::Synthetic(s) = &mut homo.dataset {
        s.parties = 12;
    }
    let homo_data = FederatedData {
        shards: data.shards[4..].to_vec(),
        ..data.clone()
    };
    let homo_acc = run_experiment_on(&homo, &homo_data).unwrap().runs[0].final_accuracy();
    let drop = 100.0 * (homo_acc - mixed_hidden);
    outcome(
        linear_gain >= 3.0 && drop < 2.0,
        format!(
            "linear parties gain {linear_gain:.1} points over stand-alone (need >= 3); \
             hidden-layer parties {mixed_hidden:.3} mixed vs {homo_acc:.3} homogeneous, drop {drop:.1} points (need < 2)"
        ),
    )
}

fn subsampling() -> Outcome {
    let mut full = desk("cronus");
    full.attack_sweep.clear();
    let data = desk_data(&full);
    let full_acc = run_experiment_on(&full, &data).unwrap().runs[0].final_accuracy();
    let mut sub = full.clone();
    sub.protocol.public_subset_per_round = Some(data.public.rows() / 5);
    let sub_acc = run_experiment_on(&sub, &data).unwrap().runs[0].final_accuracy();
    let change = 100.0 * (full_acc - sub_acc).abs();
    outcome(
        change < 2.0,
        format!("full public set {full_acc:.3}, 20% per round {sub_acc:.3}, change {change:.2} points (need < 2)"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 robust mean", robust_mean),
        ("2 krum oracle", krum_oracle),
        ("3 gradients", gradients),
        ("4 breaking points", breaking_points),
        ("5 ofom breaks mwu", ofom_vs_mwu),
        ("6 desk robustness", robustness_reproduction),
        ("7 lie arithmetic", lie_arithmetic),
        ("8 determinism", determinism),
        ("9 heterogeneity", heterogeneity),
        ("10 subsampling", subsampling),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {name}: {verdict} ({:.1}s) {}", start.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
