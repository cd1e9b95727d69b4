//! Acceptance criteria. Each criterion prints one `PASS`/`FAIL` line on stdout
//! (written past the test harness capture) and then asserts.
//!
//! The training criteria (3-6) share one set of runs: three seeds of the
//! default configuration, each with a pre-trained stage, the full model and the
//! toggles-off baseline.

#[path = "../../../core/tests/exact_math.rs"]
mod exact_math;
#[path = "../../../core/tests/gradients.rs"]
mod gradients;
#[path = "../../../core/tests/pipeline.rs"]
mod pipeline;
#[path = "../../../core/tests/properties.rs"]
mod properties;
#[path = "../../../core/tests/stochastic.rs"]
mod stochastic;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bima_core::checkpoint::save_checkpoint;
use bima_core::config::RunConfig;
use bima_core::eval::{alpha_sweep_rows, eval_corpus, sweep_csv, Evaluator};
use bima_core::model::{FeatureSource, Toggles};
use bima_core::train::{prepare_data, pretrain, train, train_from_pretrained};

const SEEDS: [u64; 3] = [0, 1, 2];
const ALPHAS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

fn report(id: u8, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "{} criterion {id} ({name}): {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

/// Runs every check, returning the names of the failing ones and the elapsed time.
fn run_suite(suites: Vec<Vec<(&'static str, fn())>>) -> (Vec<&'static str>, usize, Duration) {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut n = 0;
    for (name, f) in suites.into_iter().flatten() {
        n += 1;
        if std::panic::catch_unwind(f).is_err() {
            failed.push(name);
        }
    }
    (failed, n, start.elapsed())
}

#[derive(Debug)]
struct SeedRun {
    chance_r1: f64,
    content_r1: f64,
    bias_r1: f64,
    alpha_r1: Vec<f64>,
    base_r1: f64,
    full_ood_rsum: f64,
    base_ood_rsum: f64,
    /// Pre-training plus full-model training.
    train_secs: f64,
}

fn seed_run(seed: u64) -> SeedRun {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    let data = prepare_data(&cfg, &cfg.corpus.profile).unwrap();
    let start = Instant::now();
    let pre = pretrain(&cfg, &data).unwrap();
    let full = train_from_pretrained(&cfg, &data, &pre).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let mut base_cfg = cfg.clone();
    base_cfg.toggles = Toggles::preset("exp1").unwrap();
    let base = train_from_pretrained(&base_cfg, &data, &pre).unwrap();

    let eval = data.eval();
    let ood = eval_corpus(&cfg, true).unwrap();
    let ev_full = Evaluator::new(&full).unwrap();
    let ev_base = Evaluator::new(&base).unwrap();
    let content = ev_full.evaluate(&eval, FeatureSource::Content, None).unwrap();
    let bias = ev_full.evaluate(&eval, FeatureSource::Bias, None).unwrap();
    let alpha_r1 = ev_full
        .alpha_sweep(&eval, &ALPHAS)
        .unwrap()
        .iter()
        .map(|r| r.t2v.r1)
        .collect();
    let run = SeedRun {
        chance_r1: 100.0 / eval.len() as f64,
        content_r1: content.t2v.r1,
        bias_r1: bias.t2v.r1,
        alpha_r1,
        base_r1: ev_base.evaluate(&eval, FeatureSource::Content, None).unwrap().t2v.r1,
        full_ood_rsum: ev_full.ood_evaluate(&ood).unwrap().t2v.rsum,
        base_ood_rsum: ev_base.ood_evaluate(&ood).unwrap().t2v.rsum,
        train_secs,
    };
    let line = format!("seed {seed}: {run:?}\n");
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    run
}

fn runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| seed_run(s)).collect())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(rx.iter().copied()), mean(ry.iter().copied()));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[test]
fn spearman_hand_cases() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]), 1.0);
    assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]), 0.0);
}

#[test]
fn criterion_1_exact_math() {
    let (failed, n, t) = run_suite(vec![exact_math::suite()]);
    let pass = failed.is_empty() && t < Duration::from_secs(5);
    report(1, "exact math", pass, &format!("{n} checks, {} failed {failed:?}, {:.2} s", failed.len(), t.as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_2_gradients() {
    let (failed, n, t) = run_suite(vec![gradients::suite()]);
    let pass = failed.is_empty() && t < Duration::from_secs(60);
    report(2, "gradients", pass, &format!("{n} checks, {} failed {failed:?}, {:.1} s", failed.len(), t.as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_3_disentanglement() {
    let r = runs();
    let content = mean(r.iter().map(|s| s.content_r1));
    let bias = mean(r.iter().map(|s| s.bias_r1));
    let chance = mean(r.iter().map(|s| s.chance_r1));
    let slowest = r.iter().map(|s| s.train_secs).fold(0.0, f64::max);
    let pass = content >= 5.0 * bias && bias <= 2.0 * chance && slowest <= 300.0;
    report(
        3,
        "disentanglement",
        pass,
        &format!(
            "content R@1 {content:.2}, bias R@1 {bias:.2}, chance {chance:.2}, slowest seed {slowest:.0} s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_alpha_degradation() {
    let r = runs();
    let each = r.iter().all(|s| s.alpha_r1[ALPHAS.len() - 1] < s.alpha_r1[0]);
    let curve: Vec<f64> = (0..ALPHAS.len()).map(|i| mean(r.iter().map(|s| s.alpha_r1[i]))).collect();
    let rho = spearman(&ALPHAS, &curve);
    let pass = each && rho < 0.0;
    report(
        4,
        "alpha degradation",
        pass,
        &format!("mean R@1 over alpha {curve:.2?}, spearman {rho:.3}, endpoint drop on every seed: {each}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_module_ablation() {
    let r = runs();
    let full = mean(r.iter().map(|s| s.content_r1));
    let base = mean(r.iter().map(|s| s.base_r1));
    let pass = full >= base + 2.0;
    report(5, "module ablation", pass, &format!("full R@1 {full:.2}, baseline R@1 {base:.2}"));
    assert!(pass);
}

#[test]
fn criterion_6_ood() {
    let r = runs();
    let full = mean(r.iter().map(|s| s.full_ood_rsum));
    let base = mean(r.iter().map(|s| s.base_ood_rsum));
    let pass = full >= base;
    report(6, "out-of-distribution", pass, &format!("full Rsum {full:.2}, baseline Rsum {base:.2}"));
    assert!(pass);
}

#[test]
fn criterion_7_determinism() {
    let mut cfg = RunConfig::default();
    cfg.corpus.n_pairs = 160;
    cfg.corpus.eval_size = 24;
    cfg.model.d = 16;
    cfg.train.epochs = 2;
    cfg.train.pretrain_epochs = 1;
    cfg.train.kappa = 3;
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        let data = prepare_data(&cfg, &cfg.corpus.profile).unwrap();
        let t = train(&cfg, &data).unwrap();
        save_checkpoint(d.path(), &t).unwrap();
        let ev = Evaluator::new(&t).unwrap();
        let eval = data.eval();
        for (name, source) in [("content.json", FeatureSource::Content), ("bias.json", FeatureSource::Bias)] {
            let rep = ev.evaluate(&eval, source, None).unwrap();
            std::fs::write(d.path().join(name), rep.to_json().unwrap()).unwrap();
        }
        let ood = ev.ood_evaluate(&eval_corpus(&cfg, true).unwrap()).unwrap();
        std::fs::write(d.path().join("ood.json"), ood.to_json().unwrap()).unwrap();
        let values: Vec<String> = ALPHAS.iter().map(|a| a.to_string()).collect();
        let rows = alpha_sweep_rows(&t, &eval, &values).unwrap();
        std::fs::write(d.path().join("sweep.csv"), sweep_csv(&rows)).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let differing: Vec<String> = names
        .iter()
        .filter(|n| std::fs::read(dirs[0].path().join(n)).ok() != std::fs::read(dirs[1].path().join(n)).ok())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    let pass = differing.is_empty();
    report(
        7,
        "determinism",
        pass,
        &format!("{} files compared, differing {differing:?}", names.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_8_invariants() {
    let (failed, n, t) = run_suite(vec![
        properties::suite(),
        stochastic::suite(),
        pipeline::suite(),
    ]);
    let pass = failed.is_empty();
    report(
        8,
        "invariants",
        pass,
        &format!("{n} properties, {} failed {failed:?}, {:.1} s", failed.len(), t.as_secs_f64()),
    );
    assert!(pass);
}
