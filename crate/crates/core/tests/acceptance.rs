//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any of them fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use coffe::data::{read_embedding_bytes, synth_dataset, write_embedding_bytes, EmbeddingDataset, SynthConfig};
use coffe::graph::Graph;
use coffe::losses::chernoff_distance;
use coffe::metrics::{binary_eer, eer_one_vs_all};
use coffe::models::{init_params, read_model_bytes, write_model_bytes, Arch, ArchConfig, Mode, ModelParams};
use coffe::tensor::Tensor;
use coffe::train::{evaluate, record_loss, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.gen_range(1e-6f64..1.0).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

// ---------------------------------------------------------------- gradients

struct GradCase {
    arch: Arch,
    dim_a: usize,
    dim_b: Option<usize>,
    filters: [usize; 2],
    dense: usize,
}

/// Full loss (cross-entropy plus λ·CD for coffe) with a fixed dropout mask.
fn full_loss(params: &ModelParams<f64>, xa: &Tensor<f64>, xb: Option<&Tensor<f64>>, labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let va = g.constant(xa.clone());
    let vb = xb.map(|t| g.constant(t.clone()));
    let mode = Mode::Train { seed: 11, step: 3 };
    let lv = record_loss(params, &mut g, &bound, va, vb, labels, 0.1, mode).expect("forward");
    g.backward(lv.total).expect("backward");
    let grads = bound.vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    (g.value(lv.total).data()[0], grads)
}

fn loss_only(params: &ModelParams<f64>, xa: &Tensor<f64>, xb: Option<&Tensor<f64>>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let va = g.constant(xa.clone());
    let vb = xb.map(|t| g.constant(t.clone()));
    let mode = Mode::Train { seed: 11, step: 3 };
    let lv = record_loss(params, &mut g, &bound, va, vb, labels, 0.1, mode).expect("forward");
    g.value(lv.total).data()[0]
}

/// Checks `sample` parameters per tensor (all of them when `None`) and
/// returns `(checked, worst relative error)`.
fn grad_check(case: &GradCase, seed: u64, sample: Option<usize>) -> (usize, f64) {
    let mut cfg = ArchConfig::new(case.arch, case.dim_a, case.dim_b);
    cfg.conv_filters = case.filters;
    cfg.dense_width = case.dense;
    cfg.chernoff_s = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ModelParams<f64> = init_params(&cfg, seed).unwrap();
    for t in params.layers_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let batch = 2;
    let rand_input = |rng: &mut ChaCha8Rng, dim: usize| {
        let data: Vec<f64> = (0..batch * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![batch, dim], data).unwrap()
    };
    let xa = rand_input(&mut rng, case.dim_a);
    let xb = case.dim_b.map(|d| rand_input(&mut rng, d));
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..cfg.n_classes)).collect();

    let (_, analytic) = full_loss(&params, &xa, xb.as_ref(), &labels);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (li, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let picks: Vec<usize> = match sample {
            None => (0..n).collect(),
            Some(k) => (0..k.min(n)).map(|_| rng.gen_range(0..n)).collect(),
        };
        for j in picks {
            let mut probe = params.clone();
            let orig = probe.layers_mut().nth(li).unwrap().data()[j];
            probe.layers_mut().nth(li).unwrap().data_mut()[j] = orig + h;
            let up = loss_only(&probe, &xa, xb.as_ref(), &labels);
            probe.layers_mut().nth(li).unwrap().data_mut()[j] = orig - h;
            let down = loss_only(&probe, &xa, xb.as_ref(), &labels);
            let numeric = (up - down) / (2.0 * h);
            let a = grad[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (checked, worst)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let micro = |arch, dim_a, dim_b| GradCase {
        arch,
        dim_a,
        dim_b,
        filters: [6, 8],
        dense: 12,
    };
    let full = |arch, dim_a, dim_b| GradCase {
        arch,
        dim_a,
        dim_b,
        filters: [64, 128],
        dense: 128,
    };
    let cases = [
        (micro(Arch::Fcn, 24, None), None),
        (micro(Arch::Cnn, 20, None), None),
        (micro(Arch::Concat, 16, Some(24)), None),
        (micro(Arch::Coffe, 16, Some(24)), None),
        (micro(Arch::Coffe, 32, Some(32)), None),
        (full(Arch::Fcn, 32, None), None),
        (full(Arch::Cnn, 24, None), Some(40)),
        (full(Arch::Concat, 16, Some(32)), Some(40)),
        (full(Arch::Coffe, 16, Some(32)), Some(40)),
    ];
    let mut total = 0;
    let mut worst = 0.0f64;
    for (i, (case, sample)) in cases.iter().enumerate() {
        let (n, w) = grad_check(case, 100 + i as u64, *sample);
        ensure(
            w <= 1e-4,
            format!("{} dims ({}, {:?}): relative error {w:.3e}", case.arch, case.dim_a, case.dim_b),
        )?;
        total += n;
        worst = worst.max(w);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{total} parameters checked, worst relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- chernoff

fn criterion_chernoff() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s_values: Vec<f64> = (1..=10).map(|i| i as f64 / 11.0).collect();
    let mut min_cd = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=16);
        let p = random_simplex(&mut rng, n);
        let q = random_simplex(&mut rng, n);
        for &s in &s_values {
            let cd = chernoff_distance(&p, &q, s).unwrap();
            min_cd = min_cd.min(cd);
            ensure(cd >= -1e-12, format!("negative distance {cd}"))?;
            let same = chernoff_distance(&p, &p, s).unwrap();
            ensure(same <= 1e-9, format!("CD(p, p) = {same}"))?;
        }
        let pq = chernoff_distance(&p, &q, 0.5).unwrap();
        let qp = chernoff_distance(&q, &p, 0.5).unwrap();
        ensure((pq - qp).abs() <= 1e-9, format!("asymmetric at s=0.5: {pq} vs {qp}"))?;
    }
    let p = [0.8, 0.2];
    let q = [0.5, 0.5];
    let oracle = -(0.8f64.powf(0.3) * 0.5f64.powf(0.7) + 0.2f64.powf(0.3) * 0.5f64.powf(0.7)).ln();
    let got = chernoff_distance(&p, &q, 0.3).unwrap();
    ensure((got - oracle).abs() <= 1e-9, format!("example {got} vs oracle {oracle}"))?;
    ensure((got - 0.04547672005010859).abs() <= 1e-9, format!("example {got}"))?;
    Ok(format!("10000 pairs ok, min CD {min_cd:.2e}, example {got:.12}"))
}

// ---------------------------------------------------------------- eer

/// Exhaustive sweep: for every candidate threshold recount both error rates
/// from scratch, then intersect FAR and FRR on the first bracketing segment.
fn eer_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    // Point k rejects every score <= cuts[k - 1]; point 0 accepts everything.
    let point = |k: usize| -> (f64, f64) {
        if k == 0 {
            return (1.0, 0.0);
        }
        let t = cuts[k - 1];
        let fa = neg.iter().filter(|&&s| s > t).count() as f64 / neg.len() as f64;
        let fr = pos.iter().filter(|&&s| s <= t).count() as f64 / pos.len() as f64;
        (fa, fr)
    };
    let mut prev = point(0);
    for k in 1..=cuts.len() {
        let cur = point(k);
        let d0 = prev.1 - prev.0;
        let d1 = cur.1 - cur.0;
        if d1 == 0.0 {
            return cur.0;
        }
        if d1 > 0.0 {
            let alpha = -d0 / (d1 - d0);
            return prev.0 + alpha * (cur.0 - prev.0);
        }
        prev = cur;
    }
    unreachable!("FRR reaches 1 at the last cut")
}

fn criterion_eer() -> Outcome {
    let worked = binary_eer(&[0.9, 0.8, 0.7, 0.4], &[0.6, 0.3, 0.2, 0.1]);
    ensure(worked == Some(0.25), format!("worked example gave {worked:?}"))?;
    ensure(eer_oracle(&[0.9, 0.8, 0.7, 0.4], &[0.6, 0.3, 0.2, 0.1]) == 0.25, "oracle disagrees on worked example")?;

    let k = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for m in 0..100 {
        let n = rng.gen_range(k..=500);
        let coarse = m % 3 == 0;
        let mut scores = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.gen_range(0..k);
            let mut row = random_simplex(&mut rng, k);
            row[label] += rng.gen_range(0.0..1.5);
            let total: f64 = row.iter().sum();
            for v in &mut row {
                *v /= total;
                if coarse {
                    *v = (*v * 20.0).round() / 20.0;
                }
            }
            scores.extend(row);
            labels.push(label);
        }
        let got = eer_one_vs_all(&scores, &labels, k).unwrap();
        let mut defined = Vec::new();
        for c in 0..k {
            let pos: Vec<f64> = (0..n).filter(|&i| labels[i] == c).map(|i| scores[i * k + c]).collect();
            let neg: Vec<f64> = (0..n).filter(|&i| labels[i] != c).map(|i| scores[i * k + c]).collect();
            let want = (!pos.is_empty() && !neg.is_empty()).then(|| eer_oracle(&pos, &neg));
            match (got.per_class[c], want) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    ensure((a - b).abs() <= 1e-12, format!("matrix {m} class {c}: {a} vs {b}"))?;
                    defined.push(b);
                }
                (None, None) => {}
                (a, b) => return Err(format!("matrix {m} class {c}: {a:?} vs {b:?}")),
            }
        }
        let avg = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        match (got.average, avg) {
            (Some(a), Some(b)) => ensure((a - b).abs() <= 1e-12, format!("matrix {m} average {a} vs {b}"))?,
            (a, b) => ensure(a == b, format!("matrix {m} average {a:?} vs {b:?}"))?,
        }
    }
    Ok(format!("100 matrices, worst deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- training

fn default_config(arch: Arch, a: &EmbeddingDataset, b: Option<&EmbeddingDataset>, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(ArchConfig::new(arch, a.dim, b.map(|d| d.dim)));
    cfg.seed = seed;
    cfg
}

fn criterion_convergence() -> Outcome {
    let start = Instant::now();
    let data = synth_dataset(&SynthConfig::new(64, 200, 4.0, 7)).map_err(|e| e.to_string())?;
    let cfg = default_config(Arch::Cnn, &data.train.a, None, 0);
    ensure(cfg.epochs == 50, "default epoch budget changed")?;
    let (params, report) = train::<f64>(&cfg, &data.train.a, None).map_err(|e| e.to_string())?;
    let metrics = evaluate(&params, &data.test.a, None).map_err(|e| e.to_string())?;
    let eer = metrics.eer_avg.ok_or("EER undefined")?;
    let elapsed = start.elapsed();
    ensure(metrics.accuracy >= 0.95, format!("accuracy {:.4}", metrics.accuracy))?;
    ensure(eer <= 0.05, format!("eer_avg {eer:.4}"))?;
    ensure(elapsed < Duration::from_secs(600), format!("took {elapsed:?}"))?;
    Ok(format!(
        "accuracy {:.4}, eer_avg {eer:.4}, stopped at epoch {}, {:.0}s",
        metrics.accuracy,
        report.stopped_epoch,
        elapsed.as_secs_f64()
    ))
}

fn criterion_fusion() -> Outcome {
    let mut acc = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let data = synth_dataset(&SynthConfig::new(32, 150, 2.0, seed)).map_err(|e| e.to_string())?;
        for (slot, arch) in [Arch::Concat, Arch::Coffe].into_iter().enumerate() {
            let cfg = default_config(arch, &data.train.a, Some(&data.train.b), seed);
            let (params, _) = train::<f64>(&cfg, &data.train.a, Some(&data.train.b)).map_err(|e| e.to_string())?;
            let m = evaluate(&params, &data.test.a, Some(&data.test.b)).map_err(|e| e.to_string())?;
            acc[slot].push(m.accuracy);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (concat, coffe) = (mean(&acc[0]), mean(&acc[1]));
    let detail = format!("coffe {coffe:.4} {:?} vs concat {concat:.4} {:?}", acc[1], acc[0]);
    ensure(coffe >= concat - 0.01, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- cli

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_coffe"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("coffe {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn cli_pipeline(dir: &Path) -> Result<(), String> {
    let steps: &[&[&str]] = &[
        &["synth", "--dim", "24", "--per-class", "30", "--spread", "3", "--seed", "5", "--out-prefix", "s"],
        &[
            "train", "--arch", "coffe", "--features-a", "s.train.a.emb", "--features-b", "s.train.b.emb",
            "--epochs", "3", "--seed", "9", "--out", "coffe.cfm", "--report", "train.json",
        ],
        &[
            "eval", "--model", "coffe.cfm", "--features-a", "s.test.a.emb", "--features-b", "s.test.b.emb",
            "--report", "eval.json", "--confusion", "confusion.csv",
        ],
        &["train", "--arch", "cnn", "--features-a", "s.train.a.emb", "--epochs", "2", "--out", "cnn.cfm", "--report", "cnn.json"],
        &["eval", "--model", "cnn.cfm", "--features-a", "s.test.a.emb", "--report", "cnn-eval.json", "--confusion", "cnn.csv"],
        &["export-proj", "--features-a", "s.test.b.emb", "--out", "proj.csv"],
    ];
    for step in steps {
        cli(dir, step)?;
    }
    Ok(())
}

fn criterion_determinism() -> Outcome {
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_pipeline(first.path())?;
    cli_pipeline(second.path())?;
    let mut names: Vec<String> = std::fs::read_dir(first.path())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    ensure(names.len() == 13, format!("unexpected outputs {names:?}"))?;
    for name in &names {
        let a = std::fs::read(first.path().join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.path().join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical", names.len()))
}

// ---------------------------------------------------------------- formats

fn random_dataset(rng: &mut ChaCha8Rng) -> EmbeddingDataset {
    let dim = rng.gen_range(1..=48);
    let count = rng.gen_range(1..=40);
    let n_classes = rng.gen_range(2..=10);
    let with_ids = rng.gen_bool(0.5);
    EmbeddingDataset {
        dim,
        fm_name: format!("enc-{}", rng.gen_range(0..1000)),
        class_names: (0..n_classes).map(|c| format!("S{c}")).collect(),
        labels: (0..count).map(|_| rng.gen_range(0..n_classes as u16)).collect(),
        vectors: (0..count * dim).map(|_| rng.gen_range(-1e3f32..1e3)).collect(),
        sample_ids: with_ids.then(|| (0..count).map(|i| format!("clip_{i}_{}", rng.gen::<u32>())).collect()),
    }
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    let arch = [Arch::Fcn, Arch::Cnn, Arch::Concat, Arch::Coffe][rng.gen_range(0..4)];
    let dim_b = arch.is_fusion().then(|| rng.gen_range(10..=40));
    let mut cfg = ArchConfig::new(arch, rng.gen_range(10..=40), dim_b);
    cfg.conv_filters = [rng.gen_range(1..=8), rng.gen_range(1..=8)];
    cfg.dense_width = rng.gen_range(1..=16);
    cfg.n_classes = rng.gen_range(2..=8);
    cfg.dropout_rate = rng.gen_range(0.0..0.9);
    cfg.chernoff_s = rng.gen_range(0.05..0.95);
    let mut params = init_params(&cfg, rng.gen()).unwrap();
    for t in params.layers_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
    }
    params
}

fn criterion_formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let ds = random_dataset(&mut rng);
        let bytes = write_embedding_bytes(&ds).map_err(|e| e.to_string())?;
        let back = read_embedding_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(back == ds, format!("dataset {i} changed on read"))?;
        let again = write_embedding_bytes(&back).map_err(|e| e.to_string())?;
        ensure(again == bytes, format!("dataset {i} bytes differ"))?;

        let model = random_model(&mut rng);
        let bytes = write_model_bytes(&model).map_err(|e| e.to_string())?;
        let back: ModelParams<f64> = read_model_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(back == model, format!("model {i} changed on read"))?;
        let again = write_model_bytes(&back).map_err(|e| e.to_string())?;
        ensure(again == bytes, format!("model {i} bytes differ"))?;
    }
    Ok("100 datasets and 100 models".into())
}

// ---------------------------------------------------------------- budget

fn criterion_budget() -> Outcome {
    let cfg = ArchConfig::new(Arch::Coffe, 1024, Some(768));
    let params: ModelParams<f32> = init_params(&cfg, 0).map_err(|e| e.to_string())?;
    let n = params.param_count();
    // Hand count: two conv stacks, then the dense head over both flattened views.
    let branch = (64 * 3 + 64) + (128 * 64 * 3 + 128);
    let flat = |dim: usize| ((dim - 2) / 2 - 2) / 2 * 128;
    let want = 2 * branch + (flat(1024) + flat(768)) * 128 + 128 + 128 * 8 + 8;
    ensure(n == want, format!("count {n} vs hand count {want}"))?;
    ensure((3_000_000..=8_000_000).contains(&n), format!("{n} outside the band"))?;
    Ok(format!("{n} parameters"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", criterion_gradients),
        ("chernoff properties", criterion_chernoff),
        ("EER oracle equivalence", criterion_eer),
        ("synthetic convergence", criterion_convergence),
        ("fusion direction", criterion_fusion),
        ("determinism", criterion_determinism),
        ("format round-trips", criterion_formats),
        ("parameter budget", criterion_budget),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
