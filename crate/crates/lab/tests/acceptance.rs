//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ancon_core::data::ShiftKind;
use ancon_core::metrics::SelectionCriterion;
use ancon_core::model::{self, max_relative_error, mean_ce_loss};
use ancon_core::selftrain::Strategy;
use ancon_core::theory::{self, Check, VerifyConfig};
use ancon_core::{LinearParams, Minibatch, SoftTarget};
use ancon_lab::config::RunSpec;
use ancon_lab::experiment::{self, CellResult, RunOptions};
use ancon_lab::ExperimentConfig;
use rand::Rng;
use rayon::prelude::*;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const LEVELS: [u8; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Synthetic benchmark: 5 Gaussian clusters in 20 dimensions, 5 seeds, 50 epochs.
fn benchmark(shift: ShiftKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.classes = 5;
    cfg.data.dim = 20;
    cfg.data.n_per_class = 100;
    cfg.data.target_n_per_class = 100;
    cfg.data.spread = 0.3;
    cfg.data.shift = shift;
    cfg.data.intensities = LEVELS.to_vec();
    cfg.source.epochs = 30;
    cfg.source.lr = 0.1;
    cfg.adapt.epochs = 50;
    cfg.adapt.lr = 0.05;
    cfg.adapt.batch_size = 32;
    cfg.adapt.seeds = SEEDS.to_vec();
    cfg.adapt.strategies = vec![Strategy::Vanilla, Strategy::Ancon];
    cfg
}

fn spec(strategy: Strategy, lambda: f64, beta: f64, intensity: u8, seed: u64) -> RunSpec {
    RunSpec {
        strategy,
        lambda,
        beta,
        intensity,
        seed,
    }
}

struct Bench {
    cfg: ExperimentConfig,
    sources: BTreeMap<u64, LinearParams>,
}

impl Bench {
    fn new(shift: ShiftKind) -> Self {
        let cfg = benchmark(shift);
        let sources = SEEDS
            .par_iter()
            .map(|&s| (s, experiment::source_model(&cfg, s).expect("source trains").params))
            .collect();
        Self { cfg, sources }
    }

    fn run(&self, specs: &[RunSpec]) -> Vec<CellResult> {
        specs
            .par_iter()
            .map(|sp| {
                let domain = experiment::target_domain(&self.cfg, sp.seed, sp.intensity).expect("domain");
                experiment::run_cell(&self.cfg, sp, &self.sources[&sp.seed], &domain).expect("run")
            })
            .collect()
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn selected_accuracy(c: &CellResult) -> f64 {
    c.summary
        .selected(SelectionCriterion::Infomax)
        .and_then(|s| s.accuracy)
        .expect("labeled target")
}

fn selected_ece(c: &CellResult) -> f64 {
    c.summary
        .selected(SelectionCriterion::Infomax)
        .and_then(|s| s.ece)
        .expect("labeled target")
}

fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

fn find<'a>(checks: &'a [Check], id: &str, quantity: &str) -> &'a Check {
    checks
        .iter()
        .find(|c| c.config_id == id && c.quantity == quantity)
        .unwrap_or_else(|| panic!("missing check {id}/{quantity}"))
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut r = ancon_core::rng::seeded(20_240_601);
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..100 {
        let d = r.gen_range(1..=10);
        let k = r.gen_range(2..=5);
        let b = r.gen_range(1..=8);
        let w: Vec<f64> = (0..d * k).map(|_| r.gen_range(-1.5..1.5)).collect();
        let params = LinearParams::from_weights(d, k, w.clone()).unwrap();
        let xs: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| r.gen_range(-2.0..2.0)).collect())
            .collect();
        let targets: Vec<SoftTarget> = (0..b)
            .map(|_| {
                if r.gen_bool(0.5) {
                    SoftTarget::one_hot(r.gen_range(0..k), k)
                } else {
                    // unnormalized smoothed targets, as AnCon produces
                    SoftTarget::new((0..k).map(|_| r.gen_range(0.0..2.0)).collect()).unwrap()
                }
            })
            .collect();
        let batch = Minibatch::new(xs.iter().map(Vec::as_slice).collect(), (0..b).collect()).unwrap();
        let analytic = model::grad_linear_ce(&params, &batch, &targets).unwrap();
        let numeric: Vec<f64> = (0..d * k)
            .map(|i| {
                let mut plus = w.clone();
                let mut minus = w.clone();
                plus[i] += h;
                minus[i] -= h;
                let lp = mean_ce_loss(&LinearParams::from_weights(d, k, plus).unwrap(), &batch, &targets).unwrap();
                let lm = mean_ce_loss(&LinearParams::from_weights(d, k, minus).unwrap(), &batch, &targets).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-5 && within(t, 5),
        format!(
            "max relative error {worst:.2e} < 1e-5 over 100 instances, {:.2}s < 5s",
            t.as_secs_f64()
        ),
    )
}

fn tail_dominance() -> Outcome {
    let start = Instant::now();
    let cfg = VerifyConfig::default();
    let checks = theory::tail_checks(&cfg, theory::xi).unwrap();
    let anchor = theory::chernoff_tail_bound(&[0.8; 10], 0.5).unwrap();
    let anchor_ok = (anchor - 0.522055).abs() < 1e-6 && (anchor - 0.52207).abs() < 5e-5;
    let failures = find(&checks, "random-tails", "dominance_failures").value;
    let half = find(&checks, "random-tails", "half_form_abs_error").value;
    let t = start.elapsed();
    outcome(
        all_pass(&checks) && anchor_ok && within(t, 60),
        format!(
            "{} configs x {} trials: {failures} dominance failures; q=1/2 form error {half:.1e} <= 1e-12; anchor bound {anchor:.6}; {:.1}s < 60s",
            cfg.tail_configs,
            cfg.mc_trials,
            t.as_secs_f64()
        ),
    )
}

fn ensemble_concentration() -> Outcome {
    let start = Instant::now();
    let cfg = VerifyConfig::default();
    let checks = theory::ensemble_checks(&cfg, theory::xi).unwrap();
    let at50 = theory::ensemble_error_rate(0.7, 50, 2, cfg.mc_trials, cfg.seed.wrapping_add(2002)).unwrap();
    let q50 = find(&checks, "ensemble-q50", "error_rate");
    let stated_ok = at50.estimate <= 0.20426 + 3.0 * at50.std_error;
    let rates: Vec<String> = checks
        .iter()
        .filter(|c| c.quantity == "error_rate")
        .map(|c| format!("{}={:.5}", c.config_id.trim_start_matches("ensemble-"), c.value))
        .collect();
    let t = start.elapsed();
    outcome(
        all_pass(&checks) && stated_ok && q50.value == at50.estimate && within(t, 60),
        format!(
            "error rates {}; Q=50 {:.5} <= exp(-25 xi(0.7)) = {:.6} (stated 0.20426) + 3 se; non-increasing within noise; {:.1}s < 60s",
            rates.join(" "),
            at50.estimate,
            (-25.0 * theory::xi(0.7)).exp(),
            t.as_secs_f64()
        ),
    )
}

fn neighborhood_identity() -> Outcome {
    let start = Instant::now();
    let cfg = VerifyConfig::default();
    let checks = theory::neighborhood_checks(&cfg).unwrap();
    let res = find(&checks, "random-samples", "identity_rel_residual").value;
    let gap = find(&checks, "random-samples", "n_opt_minus_n0").value;
    let gain = find(&checks, "random-samples", "grid_rel_improvement").value;
    let t = start.elapsed();
    outcome(
        all_pass(&checks) && within(t, 10),
        format!(
            "{} sample sets: worst residual {res:.1e} < 1e-10, max N(λ†)−N(0) {gap:.2e} <= 0, best grid gain {gain:.1e}; {:.2}s < 10s",
            cfg.sample_sets,
            t.as_secs_f64()
        ),
    )
}

fn vanilla_equivalence(bench: &Bench) -> Outcome {
    let mut specs = Vec::new();
    for &seed in &SEEDS {
        for level in [1, 5] {
            specs.push(spec(Strategy::Vanilla, 0.3, 0.9, level, seed));
            specs.push(spec(Strategy::Ancon, 0.0, 0.9, level, seed));
        }
    }
    let cells = bench.run(&specs);
    let pairs = cells.chunks(2).count();
    let identical = cells
        .chunks(2)
        .filter(|p| p[0].records == p[1].records && p[0].params == p[1].params && p[0].eval == p[1].eval)
        .count();
    outcome(
        identical == pairs,
        format!("{identical}/{pairs} λ=0 trajectories bit-identical to vanilla (records, evaluations, final weights)"),
    )
}

struct LadderResult {
    acc: BTreeMap<(Strategy, u8), f64>,
    ece: BTreeMap<(Strategy, u8), f64>,
}

fn rotation_ladder(bench: &Bench) -> (LadderResult, Duration) {
    let start = Instant::now();
    let mut specs = Vec::new();
    for strategy in [Strategy::Vanilla, Strategy::Ancon] {
        for level in LEVELS {
            for seed in SEEDS {
                specs.push(spec(strategy, 0.3, 0.9, level, seed));
            }
        }
    }
    let cells = bench.run(&specs);
    let mut acc = BTreeMap::new();
    let mut ece = BTreeMap::new();
    for group in cells.chunks(SEEDS.len()) {
        let key = (group[0].summary.spec.strategy, group[0].summary.spec.intensity);
        acc.insert(key, mean(group.iter().map(selected_accuracy)));
        ece.insert(key, mean(group.iter().map(selected_ece)));
    }
    (LadderResult { acc, ece }, start.elapsed())
}

fn qualitative_improvement(r: &LadderResult, t: Duration) -> Outcome {
    println!("  gap table (rotation, InfoMax-selected target accuracy, mean of 5 seeds, 50 epochs)");
    println!("  {:>5} {:>9} {:>9} {:>9}", "level", "vanilla", "ancon", "gap");
    let mut pass = true;
    for level in LEVELS {
        let v = r.acc[&(Strategy::Vanilla, level)];
        let a = r.acc[&(Strategy::Ancon, level)];
        let gap = a - v;
        println!(
            "  {level:>5} {:>9.2} {:>9.2} {:>+9.2}",
            100.0 * v,
            100.0 * a,
            100.0 * gap
        );
        pass &= gap >= 0.0 && (level < 4 || gap > 0.0);
    }
    outcome(
        pass && within(t, 300),
        format!(
            "AnCon >= vanilla at every level, > at levels 4-5; {:.1}s < 300s",
            t.as_secs_f64()
        ),
    )
}

fn early_learning(bench: &Bench) -> Outcome {
    let specs: Vec<RunSpec> = [Strategy::Vanilla, Strategy::Ancon]
        .iter()
        .flat_map(|&s| SEEDS.map(|seed| spec(s, 0.3, 0.9, 5, seed)))
        .collect();
    let cells = bench.run(&specs);
    let deg = |s: Strategy| {
        mean(
            cells
                .iter()
                .filter(|c| c.summary.spec.strategy == s)
                .map(|c| c.summary.degradation().unwrap()),
        )
    };
    let (v, a) = (deg(Strategy::Vanilla), deg(Strategy::Ancon));
    outcome(
        v - a >= 0.03,
        format!(
            "translation level 5, peak−final: vanilla {:.2} pts, AnCon {:.2} pts, difference {:.2} >= 3",
            100.0 * v,
            100.0 * a,
            100.0 * (v - a)
        ),
    )
}

fn calibration(r: &LadderResult) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for level in [4, 5] {
        let v = r.ece[&(Strategy::Vanilla, level)];
        let a = r.ece[&(Strategy::Ancon, level)];
        pass &= a <= v;
        parts.push(format!(
            "level {level}: AnCon {:.2} vs vanilla {:.2}",
            100.0 * a,
            100.0 * v
        ));
    }
    outcome(pass, format!("selected-checkpoint ECE (pts) {}", parts.join("; ")))
}

fn robustness(bench: &Bench) -> Outcome {
    let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut specs = Vec::new();
    for lambda in grid {
        for beta in grid {
            for seed in SEEDS {
                specs.push(spec(Strategy::Ancon, lambda, beta, 3, seed));
            }
        }
    }
    let cells = bench.run(&specs);
    let means: Vec<f64> = cells
        .chunks(SEEDS.len())
        .map(|g| mean(g.iter().map(selected_accuracy)))
        .collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    outcome(
        hi - lo <= 0.03,
        format!(
            "25 (λ, β) cells at rotation level 3: mean accuracy {:.2}..{:.2}, spread {:.2} <= 3 pts",
            100.0 * lo,
            100.0 * hi,
            100.0 * (hi - lo)
        ),
    )
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn determinism() -> Outcome {
    let mut cfg = benchmark(ShiftKind::Rotation);
    cfg.data.intensities = vec![5];
    cfg.adapt.seeds = vec![0, 1];
    cfg.adapt.epochs = 12;
    cfg.adapt.strategies = vec![Strategy::Vanilla, Strategy::Ancon, Strategy::ElrAsAux];
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, opts: RunOptions| experiment::run_grid(&cfg, &dir.path().join(name), opts).unwrap();
    run("a", RunOptions::default());
    run("b", RunOptions::default());
    let stopped = run(
        "c",
        RunOptions {
            stop_after_epochs: Some(5),
        },
    );
    let resumed = run("c", RunOptions::default());
    let a = tree(&dir.path().join("a"));
    let same = a == tree(&dir.path().join("b"));
    let resumed_same = a == tree(&dir.path().join("c"));
    outcome(
        same && resumed_same && stopped.incomplete == 6 && resumed.resumed == 6,
        format!(
            "{} files bytewise identical across reruns: {same}; killed after 5 of 12 epochs and resumed ({} runs): identical {resumed_same}",
            a.len(),
            resumed.resumed
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; listing mode must not run the suite.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    report(1, "gradient correctness", gradient_correctness());
    report(2, "tail-bound dominance", tail_dominance());
    report(3, "ensemble concentration", ensemble_concentration());
    report(4, "neighborhood identity and optimality", neighborhood_identity());

    let rotation = Bench::new(ShiftKind::Rotation);
    report(5, "vanilla equivalence", vanilla_equivalence(&rotation));
    let (ladder, t) = rotation_ladder(&rotation);
    report(6, "qualitative improvement", qualitative_improvement(&ladder, t));
    let translation = Bench::new(ShiftKind::Translation);
    report(7, "early-learning mitigation", early_learning(&translation));
    report(8, "calibration", calibration(&ladder));
    report(9, "hyperparameter robustness", robustness(&rotation));
    report(10, "determinism and persistence", determinism());

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
