//! End-to-end acceptance checks. Each test writes one
//! `criterion N: PASS|FAIL ...` line to stderr before asserting; the line
//! bypasses libtest's capture so it shows up in a plain `cargo test`.
//!
//! The slow ones (6, 7, 8) build their own λ-nets.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;

use inet_core::cart::{best_split, cart_fit, CartConfig};
use inet_core::config::{Preset, RunConfig};
use inet_core::datagen::{generate_dataset, is_linearly_separable, QueryStrategy};
use inet_core::distill::{distill_from_points, DistillConfig};
use inet_core::eval::{fidelity, run_benchmark, sample_size_sweep, BenchTarget, BenchmarkConfig};
use inet_core::inet::{build_inet, inet_loss, train_inet, Architecture, INetConfig, LossItem};
use inet_core::lambda::{
    build_corpus, draw_inseparable_dataset, train_lambda_net, CorpusCounts, CorpusSpec, LambdaNet, Split,
};
use inet_core::nn::{bce_with_grad, Activation, Dense, DenseNet};
use inet_core::pipeline;
use inet_core::sdt::{sdt_loss, SdtConfig, SdtParams};
use inet_core::seed::{derive_seed, rng_from_seed, SeededRng};
use inet_core::trees::{decode_standard, eval_standard_soft, ExportFormat, HeadEvaluator, ThetaLayout, TreeFamily};

fn verdict(n: usize, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------- 1

const H: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error of `analytic` against central differences of `f`
/// at the coordinates `idx`.
fn fd_check(theta: &[f64], analytic: &[f64], idx: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut t = theta.to_vec();
    let mut worst: f64 = 0.0;
    for &i in idx {
        let orig = t[i];
        t[i] = orig + H;
        let up = f(&t);
        t[i] = orig - H;
        let down = f(&t);
        t[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    worst
}

fn random_rows(rows: usize, n: usize, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, n), || rng.random::<f64>())
}

fn random_lambda(n: usize, rng: &mut SeededRng) -> LambdaNet {
    let net = DenseNet::init(&[n, 128, 1], &[Activation::Relu, Activation::Sigmoid], &[0.0, 0.0], rng).unwrap();
    LambdaNet {
        net,
        dataset_ref: "random".into(),
        test_accuracy: 0.0,
        holdout_rows: vec![],
    }
}

fn dense_bce_worst(rng: &mut SeededRng) -> f64 {
    let sizes = [4, 6, 5, 1];
    let acts = [Activation::Relu, Activation::Swish, Activation::Sigmoid];
    let net = DenseNet::init(&sizes, &acts, &[0.0; 3], rng).unwrap();
    let x = random_rows(12, 4, rng);
    let targets: Vec<f64> = (0..12).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let (out, cache) = net.forward_train::<SeededRng>(x.view(), None).unwrap();
    let (_, upstream) = bce_with_grad(&out, &targets);
    let analytic = net.backward(&cache, &upstream).unwrap().flatten();
    let theta = net.flatten();
    let idx: Vec<usize> = (0..theta.len()).collect();
    fd_check(&theta, &analytic, &idx, |t| {
        let probe = net.unflatten(t).unwrap();
        bce_with_grad(&probe.forward(x.view()).unwrap(), &targets).0
    })
}

fn soft_head_worst(rng: &mut SeededRng) -> f64 {
    let n = 3;
    let layout = ThetaLayout::new(TreeFamily::StandardDt, n, 3).unwrap();
    let raw: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let theta = layout.activate(&raw).unwrap();
    let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let gamma = rng.random_range(5.0..50.0);
    let mut grad = vec![0.0; theta.len()];
    HeadEvaluator::new(layout.clone(), gamma)
        .unwrap()
        .eval_with_grad(&theta, &x, 1.0, &mut grad)
        .unwrap();
    let idx: Vec<usize> = (0..theta.len()).collect();
    fd_check(&theta, &grad, &idx, |t| {
        eval_standard_soft(t, &layout, &x, gamma).unwrap()
    })
}

fn sdt_params_from(template: &SdtParams, flat: &[f64]) -> SdtParams {
    let mut p = template.clone();
    let (w, rest) = flat.split_at(p.w.len());
    let (b, phi) = rest.split_at(p.b.len());
    p.w.copy_from_slice(w);
    p.b.copy_from_slice(b);
    p.phi.copy_from_slice(phi);
    p
}

fn sdt_worst(univariate: bool, rng: &mut SeededRng) -> f64 {
    let (n, depth) = (3, 3);
    let mut params = SdtParams::random(n, depth, rng);
    params.w.iter_mut().for_each(|w| *w *= 10.0);
    params.b.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let config = SdtConfig {
        depth,
        univariate,
        reg_strength: 0.1,
        weight_decay: 0.01,
        beta: rng.random_range(0.5..3.0),
        ..Default::default()
    };
    let x = random_rows(20, n, rng);
    let targets: Vec<f64> = (0..20).map(|_| rng.random()).collect();
    let mut grad = SdtParams::zeros(n, depth);
    sdt_loss(&params, x.view(), &targets, &config, Some(&mut grad)).unwrap();
    let theta = params.flatten();
    let idx: Vec<usize> = (0..theta.len()).collect();
    fd_check(&theta, &grad.flatten(), &idx, |t| {
        sdt_loss(&sdt_params_from(&params, t), x.view(), &targets, &config, None).unwrap()
    })
}

fn inet_worst(family: TreeFamily, rng: &mut SeededRng) -> f64 {
    let n = 2;
    let config = INetConfig {
        depth: 2,
        architecture: Some(Architecture {
            hidden: vec![6],
            activation: Activation::Swish,
            dropout: vec![0.0],
        }),
        ..Default::default()
    };
    let model = build_inet(family, n, &config, rng.random()).unwrap();
    let items: Vec<LossItem> = (0..2)
        .map(|_| {
            let lambda = random_lambda(n, rng);
            LossItem::from_lambda(&lambda, random_rows(15, n, rng)).unwrap()
        })
        .collect();
    let refs: Vec<&LossItem> = items.iter().collect();
    let (_, grads) = model.loss_and_grad(&refs, None).unwrap();
    let analytic = grads.flatten();
    let theta = model.trunk.flatten();
    let idx: Vec<usize> = (0..25).map(|_| rng.random_range(0..theta.len())).collect();
    fd_check(&theta, &analytic, &idx, |t| {
        let mut probe = model.clone();
        probe.trunk = model.trunk.unflatten(t).unwrap();
        probe.loss(&items).unwrap()
    })
}

#[test]
fn criterion_1_gradients() {
    let start = Instant::now();
    let mut rng = rng_from_seed(101);
    let mut worst = BTreeMap::new();
    let mut record = |name: &str, v: f64| {
        let w = worst.entry(name.to_string()).or_insert(0.0f64);
        *w = w.max(v);
    };
    for _ in 0..50 {
        record("dense_bce", dense_bce_worst(&mut rng));
        record("eval_standard_soft", soft_head_worst(&mut rng));
        record("sdt", sdt_worst(false, &mut rng));
        record("sdt_masked", sdt_worst(true, &mut rng));
        for family in TreeFamily::ALL {
            record(&format!("inet_{}", family.name()), inet_worst(family, &mut rng));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    verdict(
        1,
        max < 1e-4 && secs < 60.0,
        format!("max rel err {max:.2e} {worst:?} in {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- 2

/// Separable by some direction on a fine angular grid.
fn angular_grid_separable(x: &Array2<f64>, y: &[u8]) -> bool {
    const STEPS: usize = 7200;
    (0..STEPS).any(|k| {
        let a = 2.0 * std::f64::consts::PI * k as f64 / STEPS as f64;
        let (c, s) = (a.cos(), a.sin());
        let mut max0 = f64::NEG_INFINITY;
        let mut min1 = f64::INFINITY;
        for (row, &l) in x.rows().into_iter().zip(y) {
            let p = row[0] * c + row[1] * s;
            if l == 0 {
                max0 = max0.max(p);
            } else {
                min1 = min1.min(p);
            }
        }
        max0 < min1
    })
}

#[test]
fn criterion_2_datagen() {
    let (n, m) = (5, 1000);
    let mut ok = 0;
    for seed in 0..1000u64 {
        let ds = generate_dataset(n, m, 5.0, seed).unwrap();
        let labels = &ds.data.labels;
        let balanced = labels.iter().filter(|&&l| l == 1).count() == m / 2;
        let layout = labels.iter().enumerate().all(|(j, &l)| l == u8::from(j >= m / 2));
        let support = ds.data.features.iter().all(|v| (0.0..=1.0).contains(v));
        let m0 = ds.provenance.features.iter().all(|f| (1..m).contains(&f.m0));
        if balanced && layout && support && m0 {
            ok += 1;
        }
    }

    let mut agree = 0;
    let mut separable = 0;
    for i in 0..200u64 {
        let m = 6 + (i as usize % 40);
        let ds = generate_dataset(2, m, 5.0, derive_seed(7, "oracle", i)).unwrap();
        let oracle = angular_grid_separable(&ds.data.features, &ds.data.labels);
        separable += usize::from(oracle);
        if oracle == is_linearly_separable(&ds.data) {
            agree += 1;
        }
    }
    verdict(
        2,
        ok == 1000 && agree == 200,
        format!("{ok}/1000 datasets valid; filter agrees with grid oracle on {agree}/200 ({separable} separable)"),
    );
}

// ---------------------------------------------------------------- 3

/// Exhaustive best split: lowest weighted Gini, ties to the lower feature and
/// then the lower threshold.
fn brute_force(x: &Array2<f64>, y: &[u8]) -> Option<(usize, f64, f64)> {
    let gini = |rows: &[usize]| {
        let n = rows.len() as f64;
        let ones = rows.iter().filter(|&&r| y[r] == 1).count() as f64;
        1.0 - (ones / n).powi(2) - ((n - ones) / n).powi(2)
    };
    let total = y.len() as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x.ncols() {
        let mut values: Vec<f64> = x.column(f).to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| x[[i, f]] < t);
            let imp = (l.len() as f64 * gini(&l) + r.len() as f64 * gini(&r)) / total;
            let better = match best {
                None => true,
                Some((_, _, b)) => imp < b - 1e-12,
            };
            if better {
                best = Some((f, t, imp));
            }
        }
    }
    best
}

#[test]
fn criterion_3_cart_oracle() {
    let mut rng = rng_from_seed(303);
    let mut agree = 0;
    for _ in 0..200 {
        let rows = rng.random_range(2..=50);
        let n = rng.random_range(1..=4);
        // A coarse value grid forces ties between candidate splits.
        let x = Array2::from_shape_simple_fn((rows, n), || f64::from(rng.random_range(0..8u8)) / 8.0);
        let y: Vec<u8> = (0..rows).map(|_| rng.random_range(0..2u8)).collect();
        let all: Vec<usize> = (0..rows).collect();
        let ours = best_split(x.view(), &y, &all, 1);
        let theirs = brute_force(&x, &y);
        let same = match (ours, theirs) {
            (None, None) => true,
            (Some(c), Some((f, t, imp))) => c.feature == f && c.threshold == t && (c.impurity - imp).abs() < 1e-12,
            _ => false,
        };
        // The depth-1 tree must carry the same root split whenever the node is impure.
        let tree = cart_fit(
            x.view(),
            &y,
            &CartConfig {
                max_depth: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let impure = y.iter().any(|&l| l != y[0]);
        let tree_same = match (impure, ours) {
            (true, Some(c)) => tree.features[0] == c.feature && tree.splits[0] == c.threshold,
            _ => true,
        };
        if same && tree_same {
            agree += 1;
        }
    }

    let x = ndarray::array![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
    let y = [0, 1, 1, 0];
    let tree = cart_fit(
        x.view(),
        &y,
        &CartConfig {
            max_depth: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let hits = x
        .rows()
        .into_iter()
        .zip(&y)
        .filter(|(r, &l)| u8::from(tree.eval(r.as_slice().unwrap()).unwrap() >= 0.5) == l)
        .count();
    verdict(
        3,
        agree == 200 && hits == 4,
        format!(
            "{agree}/200 splits match brute force; XOR training accuracy {}",
            hits as f64 / 4.0
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_soft_hard() {
    let mut rng = rng_from_seed(404);
    let (n, depth) = (3, 3);
    let layout = ThetaLayout::new(TreeFamily::StandardDt, n, depth).unwrap();
    let inner = (1 << depth) - 1;
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for _ in 0..100 {
        let mut theta = Vec::with_capacity(layout.len());
        let chosen: Vec<usize> = (0..inner).map(|_| rng.random_range(0..n)).collect();
        for &k in &chosen {
            let mut raw = vec![0.0; n];
            raw[k] = 12.0;
            let z: f64 = raw.iter().map(|v: &f64| v.exp()).sum();
            theta.extend(raw.iter().map(|v| v.exp() / z));
        }
        let splits: Vec<f64> = (0..inner * n).map(|_| rng.random_range(0.1..0.9)).collect();
        theta.extend(&splits);
        theta.extend((0..1 << depth).map(|_| rng.random::<f64>()));
        let hard = decode_standard(&theta, &layout).unwrap();
        let mut tested = 0;
        while tested < 20 {
            let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let clear = chosen
                .iter()
                .enumerate()
                .all(|(j, &k)| (x[k] - splits[j * n + k]).abs() >= 0.05);
            if !clear {
                continue;
            }
            let soft = eval_standard_soft(&theta, &layout, &x, 200.0).unwrap();
            worst = worst.max((soft - hard.eval(&x).unwrap()).abs());
            tested += 1;
        }
        points += tested;
    }
    verdict(
        4,
        worst <= 1e-3,
        format!("max |soft − hard| {worst:.2e} over 100 heads, {points} points"),
    );
}

// ---------------------------------------------------------------- 5

/// λ(x) ≈ step(x0 − 0.3) in the λ-net shape.
fn threshold_lambda() -> LambdaNet {
    let mut w1 = Array2::zeros((2, 128));
    let mut b1 = Array1::zeros(128);
    w1[[0, 0]] = 1.0;
    b1[0] = -0.3;
    w1[[0, 1]] = -1.0;
    b1[1] = 0.3;
    let mut w2 = Array2::zeros((128, 1));
    w2[[0, 0]] = 200.0;
    w2[[1, 0]] = -200.0;
    let layers = vec![
        Dense {
            weights: w1,
            bias: b1,
            activation: Activation::Relu,
        },
        Dense {
            weights: w2,
            bias: Array1::zeros(1),
            activation: Activation::Sigmoid,
        },
    ];
    LambdaNet {
        net: DenseNet::new(layers, vec![0.0, 0.0]).unwrap(),
        dataset_ref: "threshold".into(),
        test_accuracy: 1.0,
        holdout_rows: vec![],
    }
}

#[test]
fn criterion_5_loss_values() {
    let mut rng = rng_from_seed(505);
    let layout = ThetaLayout::new(TreeFamily::StandardDt, 2, 2).unwrap();
    let mut worst_half: f64 = 0.0;
    for _ in 0..20 {
        let lambda = random_lambda(2, &mut rng);
        let raw: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut theta = layout.activate(&raw).unwrap();
        let leaves = theta.len() - 4;
        theta[leaves..].fill(0.5);
        let x = random_rows(50, 2, &mut rng);
        let l = inet_loss(&theta, &layout, &lambda, &x, 25.0).unwrap();
        worst_half = worst_half.max((l - std::f64::consts::LN_2).abs());
    }

    // Root on x0 at 0.3, right subtree all ones, left all zeros; rows kept
    // 0.1 away from the threshold.
    let lambda = threshold_lambda();
    let theta = vec![
        1.0, 0.0, 1.0, 0.0, 1.0, 0.0, // identifiers
        0.3, 0.5, 0.3, 0.5, 0.3, 0.5, // splits
        0.0, 0.0, 1.0, 1.0, // leaves
    ];
    let mut x = random_rows(200, 2, &mut rng);
    x.column_mut(0)
        .mapv_inplace(|v| if v < 0.5 { v * 0.4 } else { 0.4 + (v - 0.5) * 1.2 });
    let perfect = inet_loss(&theta, &layout, &lambda, &x, 200.0).unwrap();
    verdict(
        5,
        worst_half <= 1e-9 && perfect <= 1e-6,
        format!("|L(0.5) − ln 2| ≤ {worst_half:.1e}; perfect agreement loss {perfect:.2e}"),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_sdt_distillation() {
    let start = Instant::now();
    let lambda_config = RunConfig::preset(Preset::Desk).lambda;
    let mut found = None;
    for index in 0..50u64 {
        let ds = draw_inseparable_dataset(2, 1000, 5.0, 606, index).unwrap();
        let lambda = train_lambda_net(&ds.data, "c6", &lambda_config, derive_seed(606, "lambda", index)).unwrap();
        if lambda.test_accuracy >= 0.95 {
            found = Some((index, ds, lambda));
            break;
        }
    }
    let Some((index, ds, lambda)) = found else {
        verdict(6, false, "no λ-net with test accuracy ≥ 0.95 in 50 draws".into());
        return;
    };
    let points = ds
        .sample_like(10_000, &mut rng_from_seed(derive_seed(606, "queries", index)))
        .unwrap();
    let config = DistillConfig::default().with_depth(3);
    let d = distill_from_points(&lambda, TreeFamily::StandardSdt, points, &config, 606).unwrap();
    let held_out = ds.data.features.select(ndarray::Axis(0), &lambda.holdout_rows);
    let fid = fidelity(&d.tree, &lambda, held_out.view()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        fid >= 0.9 && secs < 300.0,
        format!(
            "λ #{index} accuracy {:.3}; SDT fidelity {fid:.4} on {} held-out rows in {secs:.1}s",
            lambda.test_accuracy,
            held_out.nrows()
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_inet_beats_sampling() {
    let start = Instant::now();
    let base = RunConfig::preset(Preset::Desk);
    let mut wins = 0;
    let mut lines = Vec::new();
    for master_seed in 0..3u64 {
        let spec = CorpusSpec {
            master_seed,
            n: 2,
            m: 1000,
            p: base.data.p,
            counts: CorpusCounts {
                train: 500,
                valid: 50,
                test: 50,
            },
        };
        let corpus = build_corpus(&spec, &base.lambda).unwrap();
        let inet_config = INetConfig {
            depth: 2,
            ..base.inet.clone()
        };
        let (model, _) = train_inet(
            &corpus,
            TreeFamily::StandardDt,
            &inet_config,
            derive_seed(master_seed, "c7", 0),
        )
        .unwrap();
        let targets: Vec<BenchTarget> = corpus.split(Split::Test).map(BenchTarget::from_entry).collect();
        let bench = BenchmarkConfig {
            families: vec![TreeFamily::StandardDt],
            strategies: vec![QueryStrategy::StandardUniform],
            trials: base.benchmark.trials,
            record_timing: false,
        };
        let distill_config = DistillConfig {
            query_count: 10_000,
            ..base.distill.clone()
        };
        let inets = BTreeMap::from([(TreeFamily::StandardDt, model)]);
        let report = run_benchmark(&targets, &inets, &bench, &distill_config, master_seed).unwrap();
        let mean = |inet: bool| {
            let v: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| (r.seed.is_none()) == inet)
                .map(|r| r.fidelity)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (i, c) = (mean(true), mean(false));
        if i > c {
            wins += 1;
        }
        lines.push(format!("seed {master_seed}: inet {i:.4} vs cart-uniform {c:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        wins >= 2 && secs < 3600.0,
        format!("{wins}/3 wins [{}] in {secs:.0}s", lines.join("; ")),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_sample_size_plateau() {
    let start = Instant::now();
    let base = RunConfig::preset(Preset::Desk);
    let spec = CorpusSpec {
        master_seed: 808,
        n: 2,
        m: 1000,
        p: base.data.p,
        // The corpus builder insists on non-empty train/valid splits; only
        // the 5 test λ-nets are used.
        counts: CorpusCounts {
            train: 1,
            valid: 1,
            test: 5,
        },
    };
    let corpus = build_corpus(&spec, &base.lambda).unwrap();
    let targets: Vec<BenchTarget> = corpus.split(Split::Test).map(BenchTarget::from_entry).collect();
    let report = sample_size_sweep(
        &targets,
        &[10_000, 100_000],
        &QueryStrategy::ALL,
        10,
        TreeFamily::StandardDt,
        &base.distill,
        808,
    )
    .unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for s in QueryStrategy::ALL {
        let gain = report.mean(100_000, s).unwrap() - report.mean(10_000, s).unwrap();
        pass &= gain < 0.02;
        parts.push(format!("{} {:+.2}pp", s.name(), 100.0 * gain));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        pass && secs < 600.0,
        format!("gain 1e4→1e5: {} in {secs:.0}s", parts.join(", ")),
    );
}

// ---------------------------------------------------------------- 9

fn tiny_config() -> RunConfig {
    let overrides = serde_json::json!({
        "master_seed": 9,
        "data": {"n": 2, "m": 200, "p": 5.0},
        "corpus": {"train": 6, "valid": 2, "test": 2},
        "lambda": {"epochs": 20},
        "inet": {"epochs": 3, "batch_size": 4, "depth": 2,
                 "architecture": {"hidden": [16], "activation": "swish", "dropout": [0.5]}},
        "distill": {"query_count": 300, "sdt": {"epochs": 5}},
        "benchmark": {"families": ["standard_dt"], "trials": 2},
        "sweep": {"sizes": [100, 200], "trials": 2},
        "boundary": {"resolution": 12}
    });
    RunConfig::resolve(&overrides, Preset::Desk).unwrap()
}

fn run_all_stages(config: &RunConfig, out: &Path) -> Vec<(String, String)> {
    let src = out.join("inputs");
    std::fs::create_dir_all(&src).unwrap();
    std::fs::write(
        src.join("table.csv"),
        "id,age,color,size,label\n1,30,red,S,1\n2,,blue,M,0\n3,50,red,L,0\n4,41,green,M,1\n5,22,,S,0\n6,37,blue,L,1\n\
         7,29,red,M,0\n8,61,green,L,1\n9,33,blue,S,0\n10,45,red,M,1\n11,52,green,S,0\n12,27,blue,L,1\n",
    )
    .unwrap();
    std::fs::write(
        src.join("schema.json"),
        r#"{"columns": {"id": {"role": "identifier"}, "age": {"role": "numeric"},
            "color": {"role": "categorical"}, "size": {"role": "ordinal", "order": ["S", "M", "L"]},
            "label": {"role": "label", "positive": ["1"]}}}"#,
    )
    .unwrap();

    let mut text = Vec::new();
    pipeline::gen_data(config, &out.join("gen")).unwrap();
    pipeline::train_lambda(config, &out.join("gen/dataset.csv"), &out.join("lambda")).unwrap();
    pipeline::corpus(config, &out.join("corpus")).unwrap();
    let corpus_dir = out.join("corpus/corpus");
    pipeline::train_inet_stage(config, &corpus_dir, TreeFamily::StandardDt, &out.join("inet")).unwrap();
    let lambda = out.join("lambda/lambda.json");
    let inet = pipeline::inet_path(&out.join("inet"), TreeFamily::StandardDt);
    text.push((
        "interpret.dot".into(),
        pipeline::interpret(&inet, &lambda, ExportFormat::Dot).unwrap(),
    ));
    for family in TreeFamily::ALL {
        pipeline::distill_stage(
            config,
            &lambda,
            Some(&out.join("gen/dataset.csv")),
            family,
            QueryStrategy::MultiDistribution,
            &out.join(format!("distill-{}", family.name())),
        )
        .unwrap();
    }
    pipeline::benchmark(config, &corpus_dir, &out.join("inet"), &out.join("bench")).unwrap();
    pipeline::sweep(config, &corpus_dir, &out.join("sweep")).unwrap();
    pipeline::boundary(config, &lambda, &out.join("boundary")).unwrap();
    pipeline::preprocess_stage(
        config,
        &src.join("table.csv"),
        &src.join("schema.json"),
        &out.join("pre"),
    )
    .unwrap();
    let tree = out.join("distill-standard_dt/distill-standard_dt-multi_distribution.json");
    text.push((
        "export.json".into(),
        pipeline::export(&tree, ExportFormat::Json).unwrap(),
    ));
    text
}

fn collect_files(root: &Path, dir: &Path, into: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, into);
        } else {
            let key = path.strip_prefix(root).unwrap().display().to_string();
            into.insert(key, std::fs::read(&path).unwrap());
        }
    }
}

#[test]
fn criterion_9_determinism() {
    let config = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let text_a = run_all_stages(&config, a.path());
    let text_b = run_all_stages(&config, b.path());
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    collect_files(a.path(), a.path(), &mut fa);
    collect_files(b.path(), b.path(), &mut fb);
    let artifacts = fa
        .keys()
        .filter(|k| k.ends_with(".csv") || k.ends_with(".json"))
        .count();
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let same_keys = fa.keys().eq(fb.keys());
    verdict(
        9,
        same_keys && differing.is_empty() && text_a == text_b && artifacts > 20,
        format!("{artifacts} CSV/JSON artifacts over 11 stages; differing: {differing:?}"),
    );
}
