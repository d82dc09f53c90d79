//! End-to-end acceptance gate: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything (about ten minutes on one
//! core); `cargo test --test acceptance -- 1 6 7` runs a subset.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zoomloc::config::Config;
use zoomloc::downstream::{majority_vote, vote_winner, PREDICTIONS_FILE};
use zoomloc::eval::{aggregate_runs, mean_class_accuracy, ConfusionMatrix, Variant};
use zoomloc::pipeline::{self, Layout, ABLATION_FILE};
use zoomloc::pretext::{build_dataset, DatasetSpec, PretextShard, PretextTask, TRAIN_SHARD, VAL_SHARD};
use zoomloc::pyramid::{read_pyramid, write_pyramid, PatchRef, PyramidImage, Raster};
use zoomloc::synth::SynthCohort;
use zoomloc::train::{DownstreamSchedule, Stage, StallAction, StallMonitor};
use zoomloc_nn::gradcheck::run_suite;

const ORACLE_SAMPLES: usize = 1000;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_MIN_SHAPES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const GEOMETRY_CASES: u32 = 1000;
const MIN_PRETEXT_COUNT: usize = 20_000;
const LOCATION_MIN_ACC: f64 = 0.50;
const PAIR_MIN_ACC: f64 = 0.75;
const PRETEXT_BUDGET: Duration = Duration::from_secs(30 * 60);
const TRANSFER_FRACTION: f64 = 0.33;
const TRANSFER_MARGIN: f64 = 0.05;
const TRANSFER_RUNS: usize = 5;
const LR_TOL: f64 = 1e-12;
const BALANCE_PAIRS: usize = 10_000;
const BALANCE_RANGE: (f64, f64) = (0.47, 0.53);

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn runner_config() -> RunnerConfig {
    RunnerConfig {
        cases: GEOMETRY_CASES,
        failure_persistence: None,
        ..RunnerConfig::default()
    }
}

fn c1_oracle(cfg: &Config) -> Check {
    let t = Instant::now();
    let r = pipeline::oracle_check(cfg, ORACLE_SAMPLES).map_err(err)?;
    let dt = t.elapsed();
    ensure(r.samples >= ORACLE_SAMPLES, format!("only {} samples", r.samples))?;
    ensure(
        r.passed(),
        format!("{}/{} matched; first: {:?}", r.matched, r.samples, r.mismatches.first()),
    )?;
    ensure(dt < ORACLE_BUDGET, format!("took {dt:?}"))?;
    Ok(format!("{}/{} labels recovered, n={}", r.matched, r.samples, cfg.pretext.sampler.n))
}

fn c2_gradients() -> Check {
    let t = Instant::now();
    let checks = run_suite(&mut ChaCha8Rng::seed_from_u64(20), 2, GRAD_STEP).map_err(err)?;
    let dt = t.elapsed();
    let worst = checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed(GRAD_TOL))
        .map(|c| format!("{} {:?} {:.2e}", c.op, c.shapes, c.report.max_rel_error))
        .collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    ensure(checks.len() >= GRAD_MIN_SHAPES, format!("only {} shapes", checks.len()))?;
    ensure(dt < GRAD_BUDGET, format!("took {dt:?}"))?;
    let ops: HashSet<&str> = checks.iter().map(|c| c.op).collect();
    Ok(format!(
        "{} ops x {} shapes, max rel err {worst:.2e} < {GRAD_TOL:e}",
        ops.len(),
        checks.len()
    ))
}

fn random_pyramid(levels: usize, w: usize, h: usize, bytes: &[u8]) -> PyramidImage<f32> {
    let mut k = 0;
    let rasters = (0..levels)
        .map(|t| {
            let (lw, lh) = (w << t, h << t);
            let px: Vec<u8> = (0..lw * lh * 3)
                .map(|_| {
                    k += 1;
                    bytes[k % bytes.len()].wrapping_add((k / bytes.len()) as u8)
                })
                .collect();
            Raster::from_u8(lw, lh, 3, &px).unwrap()
        })
        .collect();
    PyramidImage::new(rasters).unwrap()
}

fn c3_geometry() -> Check {
    let mut runner = TestRunner::new(runner_config());
    let window = (0usize..3, 1usize..4, 1usize..3, 1usize..40, 1usize..40, 0usize..64, 0usize..64);
    runner
        .run(&window, |(level, n, a, h, w, row, col)| {
            let p = PatchRef::new(level, row, col, h, w);
            let top = level + n + 1;
            // disjoint cover and cardinality
            let kids = p.children_set(n, top).unwrap();
            prop_assert_eq!(kids.len(), 1usize << (2 * n));
            let region = p.child_region(n, top).unwrap();
            let corners: HashSet<(usize, usize)> = kids.iter().map(|c| (c.row, c.col)).collect();
            prop_assert_eq!(corners.len(), kids.len());
            prop_assert_eq!(kids.iter().map(|c| c.height * c.width).sum::<usize>(), region.height * region.width);
            for c in &kids {
                prop_assert!(c.row >= region.row && c.row + c.height <= region.row + region.height);
                prop_assert!(c.col >= region.col && c.col + c.width <= region.col + region.width);
            }
            // composition: zooming by a then by n + 1 - a equals zooming by n + 1
            let m = n + 1;
            let a = a.min(m - 1);
            let direct: HashSet<PatchRef> = p.children_set(m, top).unwrap().into_iter().collect();
            let staged: HashSet<PatchRef> = p
                .children_set(a, top)
                .unwrap()
                .iter()
                .flat_map(|c| c.children_set(m - a, top).unwrap())
                .collect();
            prop_assert_eq!(staged.len(), 1usize << (2 * m));
            prop_assert_eq!(staged, direct);
            Ok(())
        })
        .map_err(|e| format!("children_set: {e}"))?;

    let mut runner = TestRunner::new(runner_config());
    let scratch = tempfile::tempdir().map_err(err)?;
    let dir = scratch.path().to_path_buf();
    runner
        .run(
            &(3usize..5, 1usize..4, 1usize..4, proptest::collection::vec(any::<u8>(), 1..64)),
            |(levels, w, h, bytes)| {
                let img = random_pyramid(levels, w, h, &bytes);
                write_pyramid(&img, &dir).unwrap();
                let back: PyramidImage<f32> = read_pyramid(&dir).unwrap();
                prop_assert_eq!(back, img);
                Ok(())
            },
        )
        .map_err(|e| format!("pyramid io: {e}"))?;
    Ok(format!(
        "{GEOMETRY_CASES} cases each: disjoint cover, 4^n cardinality, composition, I/O round trip"
    ))
}

struct DeskRun {
    location_acc: f64,
    pair_acc: f64,
    pretext_time: Duration,
    layout: Layout,
}

fn desk_pretext(cfg: &Config, root: &Path) -> std::result::Result<DeskRun, String> {
    let layout = Layout::new(root);
    pipeline::gen_synth(cfg, &layout.cohort()).map_err(err)?;
    let t = Instant::now();
    let mut accs = BTreeMap::new();
    for task in [PretextTask::Location, PretextTask::Pair] {
        let mut c = cfg.clone();
        c.pretext.task = task;
        let info = pipeline::gen_pretext(&c, &layout.cohort(), &layout.pretext_data(task)).map_err(err)?;
        ensure(
            info.train_count + info.val_count >= MIN_PRETEXT_COUNT,
            format!("dataset has {} records", info.train_count + info.val_count),
        )?;
        let s = pipeline::train_pretext(&c, &layout.pretext_data(task), &layout.pretext_model(task)).map_err(err)?;
        accs.insert(pipeline::task_name(task), s.best_val_acc);
    }
    Ok(DeskRun {
        location_acc: accs["location"],
        pair_acc: accs["pair"],
        pretext_time: t.elapsed(),
        layout,
    })
}

fn c4_learnability(run: &std::result::Result<DeskRun, String>) -> Check {
    let r = run.as_ref().map_err(Clone::clone)?;
    let msg = format!(
        "location {:.3} (>= {LOCATION_MIN_ACC}, chance 0.0625), pair {:.3} (>= {PAIR_MIN_ACC}, chance 0.5), {:.0} s",
        r.location_acc,
        r.pair_acc,
        r.pretext_time.as_secs_f64()
    );
    ensure(
        r.location_acc >= LOCATION_MIN_ACC && r.pair_acc >= PAIR_MIN_ACC && r.pretext_time < PRETEXT_BUDGET,
        msg.clone(),
    )?;
    Ok(msg)
}

fn c5_transfer(cfg: &Config, run: &std::result::Result<DeskRun, String>) -> Check {
    let r = run.as_ref().map_err(Clone::clone)?;
    let mut c = cfg.clone();
    c.eval.ablation.variants = vec![Variant::LocationSsl, Variant::RandomInit];
    c.eval.ablation.runs = TRANSFER_RUNS;
    ensure(c.eval.ablation.fractions.contains(&TRANSFER_FRACTION), "0.33 missing from fractions")?;
    let mut encoders = BTreeMap::new();
    encoders.insert(Variant::LocationSsl, r.layout.pretext_model(PretextTask::Location));
    let res = pipeline::ablate(&c, &r.layout.cohort(), &encoders, &r.layout.ablation()).map_err(err)?;
    let ssl = res.point(Variant::LocationSsl, TRANSFER_FRACTION).ok_or("no ssl point")?;
    let rnd = res.point(Variant::RandomInit, TRANSFER_FRACTION).ok_or("no random point")?;
    let gap = ssl.mean_acc - rnd.mean_acc;
    let curve: Vec<_> = c
        .eval
        .ablation
        .fractions
        .iter()
        .map(|&f| res.point(Variant::LocationSsl, f).expect("point"))
        .collect();
    let monotone = curve
        .windows(2)
        .all(|w| w[1].mean_acc >= w[0].mean_acc - w[0].std_acc.max(w[1].std_acc));
    let shape: Vec<String> = curve
        .iter()
        .map(|p| format!("{:.2}:{:.3}+-{:.3}", p.fraction, p.mean_acc, p.std_acc))
        .collect();
    let msg = format!(
        "at 0.33 ssl {:.3} vs random {:.3} (gap {:+.3}, need >= {TRANSFER_MARGIN}); ssl curve {}",
        ssl.mean_acc,
        rnd.mean_acc,
        gap,
        shape.join(" ")
    );
    ensure(gap >= TRANSFER_MARGIN && monotone, msg.clone())?;
    Ok(msg)
}

fn c6_schedules() -> Check {
    let actions = vec![StallAction::RaiseLr(1e-4), StallAction::RaiseBatch(64)];
    let fire = |trace: &[f64], delta: f64| -> Vec<usize> {
        let mut m = StallMonitor::new(3, delta, actions.clone());
        trace
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| m.observe(l).map(|_| i + 1))
            .collect()
    };
    ensure(fire(&[1.0, 0.99, 0.99, 0.99], 0.02) == vec![4], "plateau trace")?;
    ensure(fire(&[1.0; 13], 1e-3) == vec![4, 7], "exhaustion trace")?;
    ensure(fire(&[1.0, 0.9, 0.895, 0.899, 0.8, 0.8, 0.8, 0.8], 0.01) == vec![8], "improving trace")?;

    let s = DownstreamSchedule {
        stage2_epochs: 10,
        ..DownstreamSchedule::default()
    };
    let (ipe, total) = (40, 400);
    let w = s.warmup_iters(total);
    let lr = |i| s.lr_at(Stage::Finetune, i, ipe).unwrap();
    let cases = [(0, 0.0), (w / 2, s.peak_lr / 2.0), (w, s.peak_lr), (total - 1, 0.0)];
    for (i, expect) in cases {
        ensure((lr(i) - expect).abs() <= LR_TOL, format!("lr_at({i}) = {:e}, want {expect:e}", lr(i)))?;
    }
    ensure(w == 20, format!("warmup {w}"))?;
    Ok(format!("stalls at evals 4 / 4,7 / 8; lr_at 0, w/2, w={w}, T-1 within {LR_TOL:e}"))
}

fn c7_votes_metrics() -> Check {
    let (w, votes, _) = majority_vote(&[vec![0.8, 0.2], vec![0.7, 0.3], vec![0.1, 0.9]], 2).map_err(err)?;
    ensure(w == 0 && votes == vec![2, 1], "majority [A,A,B]")?;
    ensure(vote_winner(&[1, 1], &[1.3, 1.1]) == 0, "tie rule by softmax mass")?;
    let (w, _, _) = majority_vote(&[vec![0.1, 0.2, 0.7]], 3).map_err(err)?;
    ensure(w == 2, "single patch")?;
    let cm = ConfusionMatrix::from_rows(vec![vec![3, 1], vec![1, 1]]).map_err(err)?;
    let mca = mean_class_accuracy(&cm).map_err(err)?;
    ensure(mca == 0.625, format!("mean class accuracy {mca}"))?;
    let same = aggregate_runs(&[cm.clone(), cm.clone()]).map_err(err)?;
    ensure(same.std_class_accuracy == 0.0 && same.cell_std.iter().flatten().all(|&s| s == 0.0), "identical runs")?;
    let other = ConfusionMatrix::from_rows(vec![vec![5, 1], vec![1, 1]]).map_err(err)?;
    let s = aggregate_runs(&[cm, other]).map_err(err)?;
    ensure(s.cell_std[0][0] == 2f64.sqrt(), format!("cell std {}", s.cell_std[0][0]))?;
    Ok("majority, tie rule, 0.625, std 0 and sqrt(2) exact".into())
}

/// Reduced configuration for the twice-run determinism check.
fn small_config(seed: u64) -> Config {
    let mut c = Config::desk();
    c.synth.train_patients = vec![2; 4];
    c.synth.test_patients = vec![2; 4];
    c.pretext.count = 2000;
    c.train.pretext.max_epochs = 2;
    c.train.downstream.stage1 = vec![(1, 1e-3)];
    c.train.downstream.stage2_epochs = 2;
    c.downstream.label_fraction = 0.5;
    c.eval.ablation.variants = vec![Variant::LocationSsl, Variant::PairSsl, Variant::RandomInit];
    c.eval.ablation.fractions = vec![0.5, 1.0];
    c.eval.ablation.runs = 2;
    c.set_seed(seed);
    c
}

fn full_pipeline(cfg: &Config, root: &Path) -> std::result::Result<(Vec<u8>, Vec<u8>), String> {
    let l = Layout::new(root);
    pipeline::gen_synth(cfg, &l.cohort()).map_err(err)?;
    let mut encoders = BTreeMap::new();
    for (task, variant) in [(PretextTask::Location, Variant::LocationSsl), (PretextTask::Pair, Variant::PairSsl)] {
        let mut c = cfg.clone();
        c.pretext.task = task;
        pipeline::gen_pretext(&c, &l.cohort(), &l.pretext_data(task)).map_err(err)?;
        pipeline::train_pretext(&c, &l.pretext_data(task), &l.pretext_model(task)).map_err(err)?;
        encoders.insert(variant, l.pretext_model(task));
    }
    let enc = l.pretext_model(PretextTask::Location);
    pipeline::train_downstream(cfg, &l.cohort(), Some((Variant::LocationSsl, &enc)), &l.downstream_model())
        .map_err(err)?;
    pipeline::evaluate(cfg, &l.cohort(), &l.downstream_model(), &l.evaluation()).map_err(err)?;
    pipeline::ablate(cfg, &l.cohort(), &encoders, &l.ablation()).map_err(err)?;
    let preds = fs::read(l.evaluation().join(PREDICTIONS_FILE)).map_err(err)?;
    let abl = fs::read(l.ablation().join(ABLATION_FILE)).map_err(err)?;
    Ok((preds, abl))
}

fn c8_determinism() -> Check {
    let cfg = small_config(42);
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let first = full_pipeline(&cfg, a.path())?;
    let second = full_pipeline(&cfg, b.path())?;
    ensure(first.0 == second.0, "predictions.csv differs")?;
    ensure(first.1 == second.1, "ablation.csv differs")?;
    let rows = String::from_utf8_lossy(&first.1).lines().count() - 1;
    Ok(format!(
        "predictions.csv ({} B) and ablation.csv ({rows} rows) byte-identical across two runs",
        first.0.len()
    ))
}

fn c9_pair_balance(cfg: &Config) -> Check {
    let cohort = SynthCohort::plan(&cfg.synth).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let spec = DatasetSpec {
        task: PretextTask::Pair,
        count: BALANCE_PAIRS,
        ..cfg.pretext.clone()
    };
    build_dataset(&cohort, &spec, dir.path()).map_err(err)?;
    let mut labels = Vec::new();
    for f in [TRAIN_SHARD, VAL_SHARD] {
        labels.extend(PretextShard::load(&dir.path().join(f)).map_err(err)?.labels);
    }
    ensure(labels.len() == BALANCE_PAIRS, format!("{} pairs", labels.len()))?;
    let frac = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
    let msg = format!("positive fraction {frac:.4} over {} pairs", labels.len());
    ensure((BALANCE_RANGE.0..=BALANCE_RANGE.1).contains(&frac), msg.clone())?;
    Ok(msg)
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| wanted.is_empty() || wanted.contains(&i);
    let cfg = Config::desk();
    let scratch = tempfile::tempdir().expect("tempdir");

    let mut results: Vec<(usize, &str, Check, Duration)> = Vec::new();
    let mut record = |i: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if want(i) {
            let t = Instant::now();
            let r = f();
            let dt = t.elapsed();
            print_line(i, name, &r, dt);
            results.push((i, name, r, dt));
        }
    };

    record(1, "label oracle", &mut || c1_oracle(&cfg));
    record(2, "gradient checks", &mut c2_gradients);
    record(3, "geometry properties", &mut c3_geometry);
    record(6, "schedules", &mut c6_schedules);
    record(7, "voting and metrics", &mut c7_votes_metrics);
    record(9, "pair label balance", &mut || c9_pair_balance(&cfg));
    let desk = if want(4) || want(5) {
        Some(desk_pretext(&cfg, scratch.path()))
    } else {
        None
    };
    if let Some(d) = &desk {
        record(4, "pretext learnability", &mut || c4_learnability(d));
        record(5, "transfer benefit", &mut || c5_transfer(&cfg, d));
    }
    record(8, "pipeline determinism", &mut c8_determinism);

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (i, name, r, dt) in &results {
        print_line(*i, name, r, *dt);
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line(i: usize, name: &str, r: &Check, dt: Duration) {
    let (tag, detail) = match r {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {i}. {name}: {detail} ({:.1} s)", dt.as_secs_f64());
}

