//! Acceptance runner: one line per criterion, `[PASS]` or `[FAIL]`.
//!
//! Criteria 1–6 are exact property checks and make the process exit non-zero
//! when they fail. Criteria 7–12 are directional reproductions on a desk-scale
//! analog; their failures are reported but only fail the process when
//! `ACCEPTANCE_STRICT=1` is set.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};

use rewind_core::checkpoint::Checkpoint;
use rewind_core::data::{select_subset, Dataset, Strategy, SubsetSelector, SyntheticSpec};
use rewind_core::experiment::*;
use rewind_core::imp::{imp_run, ImpPlan};
use rewind_core::landscape::*;
use rewind_core::model::{build_mlp, grad_f64, mlp_spec, Layer, ModelSpec, ParamVector};
use rewind_core::prune::{apply_mask, magnitude_prune, sparsity_after_rounds, PruneMask, PruneScope};
use rewind_core::scores::{el2n_of, el2n_scores};
use rewind_core::stats::{mean, spearman, std_err};
use rewind_core::train::{resume, train, TrainConfig};

/// Desk-scale analog of the CIFAR-10 setup: a 784-100-10 MLP on 10,000
/// synthetic 28×28 ten-class examples.
struct Desk {
    per_class: usize,
    test_per_class: usize,
    total: u64,
    t_star: u64,
    pretrain_lr: f64,
    main_lr: f64,
    subset: usize,
    replicates: usize,
    el2n_t: u64,
    el2n_networks: usize,
}

const DESK: Desk = Desk {
    per_class: 1000,
    test_per_class: 300,
    total: 800,
    t_star: 100,
    pretrain_lr: 0.1,
    main_lr: 0.4,
    subset: 1000,
    replicates: 4,
    el2n_t: 100,
    el2n_networks: 4,
};

const SPARSE: f64 = 0.21;

fn schedule(lr: f64, total: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 128,
        peak_lr: lr,
        momentum: 0.9,
        weight_decay: 1e-4,
        lr_decay_factor: 0.1,
        lr_milestones: vec![total / 2, total * 3 / 4],
        warmup_steps: 0,
        total_steps: total,
        order_seed: 0,
        augment_seed: 0,
        init_seed: 0,
        augment: false,
        reset_momentum_on_rewind: false,
    }
}

fn desk_dataset() -> DatasetConfig {
    DatasetConfig::Synthetic { spec: SyntheticSpec::mnist_like(DESK.per_class, 2024), test_per_class: DESK.test_per_class }
}

fn desk_config(name: &str, out: &Path, t_r: RewindStep, subset: Option<(Selection, usize)>, corruption: f64) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        dataset: desk_dataset(),
        model: ModelConfig::Mlp { widths: vec![784, 100, 10] },
        subset: subset.map(|(selection, size)| SubsetConfig {
            selection,
            size,
            scores: (selection != Selection::Random).then_some(ScoreSource::El2n { t: DESK.el2n_t, networks: DESK.el2n_networks, seed: 99 }),
        }),
        t_r,
        t_star: DESK.t_star,
        rounds: 8,
        fraction: 0.2,
        scope: PruneScope::Global,
        replicates: DESK.replicates,
        seed: 7,
        corruption,
        pretrain: schedule(DESK.pretrain_lr, DESK.total),
        train: schedule(DESK.main_lr, DESK.total),
        out_dir: out.to_path_buf(),
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- exact checks

fn c1_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for case in common::grad_cases() {
        let checks = common::run_grad_case(&case, 100, 1);
        let w = checks.iter().map(|c| c.relative_error()).fold(0.0, f64::max);
        worst = worst.max(w);
        parts.push(format!("{} {}×{:.1e}", case.name, checks.len(), w));
        if checks.len() < 100 {
            return verdict(false, format!("{} has only {} coordinates", case.name, checks.len()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 1e-3 && secs < 60.0, format!("max rel err {worst:.2e} ({}) in {secs:.1}s", parts.join(", ")))
}

fn c2_sparsity() -> Verdict {
    let (spec, params) = build_mlp(&[784, 100, 10], 5).unwrap();
    let p = spec.prunable_count() as f64;
    let mut mask = PruneMask::full(&spec);
    let mut worst = 0.0f64;
    for r in 1..=12 {
        mask = magnitude_prune(&params, &mask, 0.2).unwrap();
        worst = worst.max((mask.density() - 0.8f64.powi(r)).abs() * p);
    }
    let shown: Vec<String> = [8, 10, 12].iter().map(|&r| format!("{:.1}%", 100.0 * sparsity_after_rounds(r, 0.2))).collect();
    let exact = shown == ["16.8%", "10.7%", "6.9%"];
    verdict(worst <= 1.0 && exact, format!("max |density − 0.8^r|·P = {worst:.3} counts; r=8/10/12 → {}", shown.join("/")))
}

fn small_plan<'a>(train_ds: &'a Dataset, test: &'a Dataset) -> ImpPlan<'a> {
    ImpPlan {
        pretrain: train_ds,
        train: train_ds,
        test,
        t_r: 20,
        rounds: 3,
        fraction: 0.2,
        scope: PruneScope::Global,
        cfg_pre: TrainConfig { order_seed: 1, augment_seed: 2, ..schedule(0.1, 150) },
        cfg_main: TrainConfig { order_seed: 3, augment_seed: 4, ..schedule(0.1, 150) },
    }
}

fn c3_determinism() -> Verdict {
    let cfg = DatasetConfig::Synthetic { spec: SyntheticSpec::mnist_like(200, 3), test_per_class: 50 };
    let splits = cfg.load().unwrap();
    let (_, init) = build_mlp(&[784, 100, 10], 11).unwrap();
    let plan = small_plan(&splits.train, &splits.test);
    let a = imp_run(&init, &plan).unwrap();
    let b = imp_run(&init, &plan).unwrap();
    let identical = a.records == b.records && a.finals.iter().zip(&b.finals).all(|(x, y)| x.values() == y.values());

    // independently re-derive every round's starting point through the trainer
    let mut rewind_ok = true;
    let mut zeros_ok = true;
    for (mask, fin) in a.masks.iter().zip(&a.finals) {
        let start = Checkpoint { params: apply_mask(&a.rewind_point.params, mask), ..a.rewind_point.clone() };
        let snap = resume(&start, &splits.train, &plan.cfg_main, 1, Some(mask), &[plan.t_r]).unwrap().checkpoints.remove(0);
        for (i, keep) in mask.keep().iter().enumerate() {
            let expect = if *keep { a.rewind_point.params.values()[i] } else { 0.0 };
            rewind_ok &= snap.params.values()[i].to_bits() == expect.to_bits();
            if !*keep {
                zeros_ok &= fin.values()[i] == 0.0;
            }
        }
    }
    verdict(
        identical && rewind_ok && zeros_ok,
        format!("bitwise repeat {identical}, rewind fidelity {rewind_ok}, masked = 0 after training {zeros_ok} over {} rounds", a.masks.len()),
    )
}

fn c4_el2n() -> Verdict {
    let perfect = el2n_of(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2);
    let uniform = el2n_of(&[0.1; 10], 4);
    let worst = el2n_of(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 9);
    let closed = perfect == 0.0 && (uniform - 0.9f64.sqrt()).abs() < 1e-6 && (worst - 2f64.sqrt()).abs() < 1e-12;
    let cfg = DatasetConfig::Synthetic { spec: SyntheticSpec::mnist_like(200, 4), test_per_class: 10 };
    let splits = cfg.load().unwrap();
    let spec = Arc::new(mlp_spec(&[784, 100, 10]).unwrap());
    let table = el2n_scores(&spec, &splits.train, 100, &schedule(0.1, 100), &[1, 2]).unwrap();
    let (lo, hi) = table.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (_, s)| (l.min(s), h.max(s)));
    let bounded = lo >= 0.0 && hi <= 2f64.sqrt();
    verdict(
        closed && bounded,
        format!("closed forms {closed} (uniform {uniform:.6}); {} trained scores in [{lo:.4}, {hi:.4}]", table.len()),
    )
}

struct Square;

impl PerExampleLoss for Square {
    fn ids(&self) -> Vec<u64> {
        vec![0]
    }
    fn per_example(&self, p: &ParamVector) -> rewind_core::Result<Vec<f64>> {
        Ok(vec![(p.values()[0] as f64).powi(2)])
    }
}

fn c5_barriers() -> Verdict {
    let cfg = DatasetConfig::Synthetic { spec: SyntheticSpec::mnist_like(30, 5), test_per_class: 5 };
    let ds = cfg.load().unwrap().train;
    let spec = Arc::new(mlp_spec(&[784, 100, 10]).unwrap());
    let w = spec.initialize(1);
    let ce = ModelLoss { ds: &ds, metric: Metric::CrossEntropy };
    let same = barrier_of(&ce, &w, &w, Metric::CrossEntropy, &BarrierMode::default_sweep()).unwrap();
    let zero = same.aggregate == 0.0 && same.per_example.iter().all(|&(_, b)| b == 0.0);

    let one = Arc::new(ModelSpec::from_layers(vec![1], vec![Layer::Dense { inputs: 1, outputs: 1, bias: false }]).unwrap());
    let (a, b) = (ParamVector::from_values(&one, vec![1.0]).unwrap(), ParamVector::from_values(&one, vec![-1.0]).unwrap());
    let quad = barrier_of(&Square, &a, &b, Metric::CrossEntropy, &BarrierMode::Midpoint).unwrap().aggregate;
    let quad_ok = (quad + 1.0).abs() < 1e-12;

    let mut sweep_ok = true;
    let mut agg_err = 0.0f64;
    for k in 0..20 {
        let (x, y) = (spec.initialize(100 + k), spec.initialize(200 + k));
        let mid = barrier_of(&ce, &x, &y, Metric::CrossEntropy, &BarrierMode::Midpoint).unwrap();
        let sw = barrier_of(&ce, &x, &y, Metric::CrossEntropy, &BarrierMode::default_sweep()).unwrap();
        sweep_ok &= sw.aggregate >= mid.aggregate;
        sweep_ok &= sw.per_example.iter().zip(&mid.per_example).all(|(s, m)| s.1 >= m.1);
        for r in [&mid, &sw] {
            agg_err = agg_err.max((r.aggregate - mean(&r.values())).abs());
        }
    }
    verdict(
        zero && quad_ok && sweep_ok && agg_err <= 1e-6,
        format!("identical → 0: {zero}; w² midpoint {quad}; sweep ≥ midpoint on 20 pairs: {sweep_ok}; |aggregate − mean| ≤ {agg_err:.1e}"),
    )
}

/// The gradient of `scale · loss`.
struct Scaled<'a> {
    inner: ModelObjective<'a>,
    scale: f64,
}

impl GradientOracle for Scaled<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn grad(&self, w: &[f64]) -> rewind_core::Result<Vec<f64>> {
        Ok(self.inner.grad(w)?.into_iter().map(|g| g * self.scale).collect())
    }
}

fn explicit_top_eigenvalue(spec: &ModelSpec, w: &[f64], ds: &Dataset) -> f64 {
    let (x, y) = ds.batch(&(0..ds.len()).collect::<Vec<_>>());
    let x: Vec<f64> = x.into_iter().map(f64::from).collect();
    let n = w.len();
    let h = 1e-5;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut wp = w.to_vec();
        wp[j] += h;
        let mut wm = w.to_vec();
        wm[j] -= h;
        let gp = grad_f64(spec, &wp, &x, &y).unwrap().1;
        let gm = grad_f64(spec, &wm, &x, &y).unwrap().1;
        for i in 0..n {
            m[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    // power iteration converges to the eigenvalue of largest magnitude
    eig.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap()
}

fn c6_hessian() -> Verdict {
    let start = Instant::now();
    let ds = rewind_core::data::generate(&SyntheticSpec::blobs(2, 40, 4, 2.0, 6)).unwrap();
    // two stacked linear layers: non-convex but smooth, so finite differences stay exact
    let layers = vec![Layer::Dense { inputs: 4, outputs: 5, bias: true }, Layer::Dense { inputs: 5, outputs: 2, bias: true }];
    let spec = Arc::new(ModelSpec::from_layers(vec![4], layers).unwrap());
    let init = spec.initialize(3);
    let trained = train(&init, &ds, &schedule(0.05, 200), 200, None, &[]).unwrap().state.params;
    let w: Vec<f64> = trained.values().iter().map(|&v| v as f64).collect();
    let oracle_value = explicit_top_eigenvalue(&spec, &w, &ds);
    let opts = PowerIteration { iterations: 2000, tolerance: 1e-10, seed: 4 };
    let objective = ModelObjective::new(&spec, &ds).unwrap();
    let lambda = top_eigenvalue(&objective, &w, opts).unwrap();
    let scaled = top_eigenvalue(&Scaled { inner: ModelObjective::new(&spec, &ds).unwrap(), scale: 3.0 }, &w, opts).unwrap();
    let linear = (scaled - 3.0 * lambda).abs() <= 1e-3 * (3.0 * lambda).abs().max(1.0);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        (lambda - oracle_value).abs() <= 1e-3 && linear && secs < 120.0,
        format!("{} params: power {lambda:.6} vs explicit {oracle_value:.6}; ×3 loss → {scaled:.6}; {secs:.1}s", spec.total),
    )
}

// ------------------------------------------------------- desk-scale analogs

struct Grid {
    runs: BTreeMap<&'static str, ExperimentRun>,
}

const ALL_T_STAR: &str = "all@t*";
const ALL_HALF: &str = "all@t*/2";
const EASY: &str = "easy-M@t*/2";
const RANDOM: &str = "random-M@t*/2";
const HARD: &str = "hard-M@t*/2";
const ZERO: &str = "@0";
const EASY_CORRUPT: &str = "easy-M@t*/2 (50% noisy)";
const RANDOM_CORRUPT: &str = "random-M@t*/2 (50% noisy)";

fn run_grid(out: &Path) -> Grid {
    use RewindName::*;
    let half = RewindStep::Named(HalfTStar);
    let m = DESK.subset;
    let configs: Vec<(&'static str, ExperimentConfig)> = vec![
        (ALL_T_STAR, desk_config("all-tstar", out, RewindStep::Named(TStar), None, 0.0)),
        (ALL_HALF, desk_config("all-half", out, half, None, 0.0)),
        (EASY, desk_config("easy-half", out, half, Some((Selection::Easiest, m)), 0.0)),
        (RANDOM, desk_config("random-half", out, half, Some((Selection::Random, m)), 0.0)),
        (HARD, desk_config("hard-half", out, half, Some((Selection::Hardest, m)), 0.0)),
        (ZERO, desk_config("zero", out, RewindStep::Named(Zero), None, 0.0)),
        (EASY_CORRUPT, desk_config("easy-noisy", out, half, Some((Selection::Easiest, m)), 0.5)),
        (RANDOM_CORRUPT, desk_config("random-noisy", out, half, Some((Selection::Random, m)), 0.5)),
    ];
    let mut runs = BTreeMap::new();
    for (name, cfg) in configs {
        let t = Instant::now();
        let run = run_experiment_detailed(&cfg).unwrap();
        let sparse: Vec<String> = run.curve.at_most(SPARSE).map(|r| format!("{:.4}±{:.4}", r.mean, r.stderr)).collect();
        eprintln!("    {name:<26} sparse acc {} ({:.0}s)", sparse.join(" "), t.elapsed().as_secs_f64());
        runs.insert(name, run);
    }
    Grid { runs }
}

impl Grid {
    fn curve(&self, name: &str) -> &SparsityCurve {
        &self.runs[name].curve
    }
}

/// Rows at densities ≤ 21% of two curves, paired.
fn sparse_pairs<'a>(a: &'a SparsityCurve, b: &'a SparsityCurve) -> Vec<(&'a CurveRow, &'a CurveRow)> {
    a.at_most(SPARSE).zip(b.at_most(SPARSE)).collect()
}

fn c7_ordering(g: &Grid) -> Verdict {
    let (ts, half, zero) = (g.curve(ALL_T_STAR), g.curve(ALL_HALF), g.curve(ZERO));
    let mut ordered = true;
    let mut margins = Vec::new();
    for ((a, b), c) in ts.at_most(SPARSE).zip(half.at_most(SPARSE)).zip(zero.at_most(SPARSE)) {
        ordered &= a.mean >= b.mean && b.mean >= c.mean;
        margins.push((a.density, a.mean - c.mean - pooled(a, c)));
    }
    let gap_ok = margins.iter().all(|&(_, m)| m >= 0.02);
    let shown: Vec<String> = margins.iter().map(|(d, m)| format!("{:.1}%: {:+.2} pts", 100.0 * d, 100.0 * m)).collect();
    verdict(ordered && gap_ok, format!("t* ≥ t*/2 ≥ 0 at every sparse density: {ordered}; (t* − 0) − pooled se: {}", shown.join(", ")))
}

fn c8_matching(g: &Grid) -> Verdict {
    let reference = g.curve(ALL_T_STAR);
    let easy = matching_initialization_check(g.curve(EASY), reference, 1.0).unwrap();
    let hard = matching_initialization_check(g.curve(HARD), reference, 1.0).unwrap();
    let random = matching_initialization_check(g.curve(RANDOM), reference, 1.0).unwrap();
    verdict(easy && !hard, format!("matching vs all@t*: easy {easy}, hard {hard} (random {random})"))
}

fn c9_corruption(g: &Grid) -> Verdict {
    let pairs = sparse_pairs(g.curve(EASY_CORRUPT), g.curve(RANDOM_CORRUPT));
    let ok = pairs.iter().all(|(e, r)| e.mean > r.mean + pooled(e, r));
    let shown: Vec<String> = pairs.iter().map(|(e, r)| format!("{:.1}%: {:.4} vs {:.4} (se {:.4})", 100.0 * e.density, e.mean, r.mean, pooled(e, r))).collect();
    verdict(ok, format!("easy vs random under 50% noise: {}", shown.join(", ")))
}

/// Mean per-example train-loss barrier of three children spawned from each
/// replicate's rewind point, one value per child pair.
fn pair_barriers(run: &ExperimentRun, train_ds: &Dataset, cfg: &TrainConfig, replicates: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for rep in 0..replicates {
        let parent = run.rewind_point(rep).unwrap();
        for pair in spawn_children(&parent, 3, train_ds, cfg, 500 + rep as u64).unwrap() {
            out.push(loss_barrier(&pair, train_ds, Metric::CrossEntropy, &BarrierMode::Midpoint).unwrap().aggregate);
        }
    }
    out
}

fn c10_barriers(g: &Grid) -> Verdict {
    let splits = desk_dataset().load().unwrap();
    let cfg = schedule(DESK.main_lr, DESK.total);
    let mut points = Vec::new();
    let mut per_config = BTreeMap::new();
    for (name, run) in &g.runs {
        let b = pair_barriers(run, &splits.train, &cfg, 1);
        let acc = mean(&run.curve.at_most(SPARSE).map(|r| r.mean).collect::<Vec<_>>());
        let pre = mean(&run.replicates.iter().map(|r| r.pretrain_test_acc).collect::<Vec<_>>());
        points.push((mean(&b), pre, acc));
        per_config.insert(*name, b);
    }
    let (easy, all) = (&per_config[EASY], &per_config[ALL_T_STAR]);
    let (me, se_e, ma, se_a) = (mean(easy), std_err(easy), mean(all), std_err(all));
    let overlap = (me - ma).abs() <= se_e + se_a;
    let barrier: Vec<f64> = points.iter().map(|p| p.0).collect();
    let pre: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fin: Vec<f64> = points.iter().map(|p| p.2).collect();
    let (rb, rp) = (spearman(&barrier, &fin), spearman(&pre, &fin));
    let corr = rb.abs() >= rp.abs();
    verdict(
        overlap && corr && points.len() >= 8,
        format!(
            "easy {me:.4}±{se_e:.4} vs all@t* {ma:.4}±{se_a:.4} over {} pairs; |ρ(barrier, acc)| {:.3} vs |ρ(pre-train acc, acc)| {:.3} over {} configs",
            easy.len(),
            rb.abs(),
            rp.abs(),
            points.len()
        ),
    )
}

/// Mean minibatch gradient norm over the first `steps` steps, averaged over
/// replicates, for each of the two training sets.
fn mean_grad_norms(sets: [&Dataset; 2], steps: u64) -> [f64; 2] {
    sets.map(|ds| {
        let norms: Vec<f64> = (0..DESK.replicates as u64)
            .map(|rep| {
                let (_, init) = build_mlp(&[784, 100, 10], 40 + rep).unwrap();
                let cfg = TrainConfig { order_seed: rep, augment_seed: rep, ..schedule(DESK.pretrain_lr, DESK.total) };
                train(&init, ds, &cfg, steps, None, &[]).unwrap().log.mean_grad_norm(steps as usize)
            })
            .collect();
        mean(&norms)
    })
}

fn c11_grad_norm(g: &Grid) -> Verdict {
    // the grid's pre-training fits the easy subset within a few steps, so the
    // comparison runs on noisier data where it is still being fit, with the
    // easiest half of the examples
    let mut spec = SyntheticSpec::mnist_like(DESK.per_class, 2024);
    spec.noise = 1.6;
    let splits = DatasetConfig::Synthetic { spec, test_per_class: DESK.test_per_class }.load().unwrap();
    let model = Arc::new(mlp_spec(&[784, 100, 10]).unwrap());
    let source = ScoreSource::El2n { t: DESK.el2n_t, networks: DESK.el2n_networks, seed: 99 };
    let table = compute_scores(&source, &splits.train, &model, &schedule(DESK.pretrain_lr, DESK.total)).unwrap();
    let half = splits.train.len() / 2;
    let pick = |strategy, table| select_subset(&splits.train, &SubsetSelector { strategy, size: half, seed: 1 }, table).unwrap();
    let easy = pick(Strategy::LowestScore, Some(&table));
    let random = pick(Strategy::RandomBalanced, None);
    let t_r = DESK.t_star / 2;
    let [e, r] = mean_grad_norms([&easy, &random], t_r);

    let grid = |name: &str| mean(&g.runs[name].replicates.iter().filter_map(|r| r.pretrain_grad_norm).collect::<Vec<_>>());
    verdict(
        e > r,
        format!(
            "first {t_r} steps on {half} of {} noisy examples: easy {e:.4} vs random {r:.4}; grid (M = {}, fit quickly): easy {:.4} vs random {:.4}",
            splits.train.len(),
            DESK.subset,
            grid(EASY),
            grid(RANDOM)
        ),
    )
}

fn c12_warmup(out: &Path) -> Verdict {
    let cfg = WarmupSweepConfig {
        dataset: desk_dataset(),
        model: ModelConfig::Mlp { widths: vec![784, 100, 10] },
        base: schedule(WARMUP_LR, DESK.total),
        warmups: vec![0, WARMUP_SHORT, WARMUP_LONG],
        subsets: vec![
            WarmupSubset { name: "easy".into(), selection: Selection::Easiest, size: Some(DESK.subset) },
            WarmupSubset { name: "random".into(), selection: Selection::Random, size: Some(DESK.subset) },
            WarmupSubset { name: "all".into(), selection: Selection::Random, size: None },
        ],
        replicates: DESK.replicates,
        seed: 31,
        scores: Some(ScoreSource::El2n { t: DESK.el2n_t, networks: DESK.el2n_networks, seed: 99 }),
        probe_examples: 1000,
        power: PowerIteration { iterations: 50, tolerance: 1e-4, seed: 0 },
    };
    let rows = warmup_sweep(&cfg).unwrap();
    std::fs::write(out.join("warmup_sweep.csv"), WarmupRow::csv(&rows)).unwrap();
    let acc = |w: u64, s: &str| mean(&rows.iter().filter(|r| r.warmup == w && r.subset == s).map(|r| r.test_acc).collect::<Vec<_>>());
    let lam = |w: u64| mean(&rows.iter().filter(|r| r.warmup == w && r.subset == "all").map(|r| r.top_eigenvalue).collect::<Vec<_>>());
    let (easy, random) = (acc(WARMUP_SHORT, "easy"), acc(WARMUP_SHORT, "random"));
    let (none, warmed) = (lam(0), lam(WARMUP_LONG));
    let diverged = rows.iter().filter(|r| r.diverged).count();
    verdict(
        easy < random && warmed < none,
        format!(
            "warmup {WARMUP_SHORT}: easy {easy:.4} vs random {random:.4}; top eigenvalue none {none:.3} vs warmup {WARMUP_LONG} {warmed:.3}; no warmup acc {:.4}; {diverged} diverged",
            acc(0, "all")
        ),
    )
}

const WARMUP_LR: f64 = 0.2;
const WARMUP_SHORT: u64 = 50;
const WARMUP_LONG: u64 = 200;

// ------------------------------------------------------------------ runner

fn run(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> (u32, bool) {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let tag = if v.pass { "[PASS]" } else { "[FAIL]" };
    println!("{tag} {id:>2}. {name}: {} ({})", v.detail, fmt_secs(start.elapsed()));
    (id, v.pass)
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn main() {
    // libtest-style flags are accepted and ignored
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let want = |id: u32| filter.is_none_or(|f| f == id);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let dir = tempfile::tempdir().unwrap();
    let mut results = Vec::new();

    type Check = (u32, &'static str, fn() -> Verdict);
    let exact: [Check; 6] = [
        (1, "gradient correctness", c1_gradients),
        (2, "sparsity arithmetic", c2_sparsity),
        (3, "determinism and rewind fidelity", c3_determinism),
        (4, "EL2N closed forms", c4_el2n),
        (5, "barrier oracles", c5_barriers),
        (6, "Hessian probe", c6_hessian),
    ];
    for (id, name, f) in exact {
        if want(id) {
            results.push(run(id, name, f));
        }
    }

    if (7..=11).any(want) {
        let t = Instant::now();
        eprintln!("    running the desk-scale grid…");
        let grid = run_grid(dir.path());
        eprintln!("    grid done in {}", fmt_secs(t.elapsed()));
        let directional: [(u32, &str, &dyn Fn() -> Verdict); 5] = [
            (7, "rewind-step ordering", &|| c7_ordering(&grid)),
            (8, "easy subset finds a matching initialization", &|| c8_matching(&grid)),
            (9, "robustness to corrupted labels", &|| c9_corruption(&grid)),
            (10, "barrier shift and correlation", &|| c10_barriers(&grid)),
            (11, "gradient norm on easy data", &|| c11_grad_norm(&grid)),
        ];
        for (id, name, f) in directional {
            if want(id) {
                results.push(run(id, name, f));
            }
        }
    }
    if want(12) {
        results.push(run(12, "warmup on easy data", || c12_warmup(dir.path())));
    }

    let passed = results.iter().filter(|r| r.1).count();
    println!("{passed}/{} criteria passed", results.len());
    let exact_failed = results.iter().any(|&(id, ok)| id <= 6 && !ok);
    let any_failed = results.iter().any(|r| !r.1);
    if exact_failed || (strict && any_failed) {
        std::process::exit(1);
    }
}
