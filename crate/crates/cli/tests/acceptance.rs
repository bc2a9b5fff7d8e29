//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are reported as FAIL but do not fail
//! the target; any other FAIL exits 1.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use errslice_core::documents::{RunDocument, ScoringMode};
use errslice_core::trend::{slope_trend_analysis, TrendConfig};
use errslice_core::{
    p_yes_from_logits, precision_at_k, CandidateSlice, GroundTruthSlice, Hypothesis, HypothesisOrigin, Manifest,
    PromptType, ScoredRegion, SliceCategory, TaskKind,
};
use errslice_engine::evaluate::{default_sweep, evaluate_manifest_run, judge_consistency, threshold_sweep};
use errslice_engine::generation::hypothesis_id;
use errslice_engine::replay::{read_rows, replay};
use errslice_engine::verify::{new_run, run_verification};
use errslice_engine::{planted, PipelineConfig};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_FAILURES: [&str; 1] = ["reference table replay"];

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let over = took > budget;
    let note = format!(" [{:.2}s, budget {}s]", took.as_secs_f64(), budget.as_secs_f64());
    match outcome {
        Outcome::Pass(d) if over => Outcome::Fail(d + &note + " over budget"),
        Outcome::Pass(d) => Outcome::Pass(d + &note),
        Outcome::Fail(d) => Outcome::Fail(d + &note),
        skip => skip,
    }
}

/// Softmax over the two logits after subtracting their maximum.
fn softmax_yes(ly: f64, ln: f64) -> f64 {
    let m = ly.max(ln);
    let (ey, en) = ((ly - m).exp(), (ln - m).exp());
    ey / (ey + en)
}

fn confidence_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (ly, ln) = (rng.random_range(-30.0..5.0), rng.random_range(-30.0..5.0));
        worst = worst.max((p_yes_from_logits(ly, ln) - softmax_yes(ly, ln)).abs());
    }
    let mut shifts_exact = 0;
    for _ in 0..100 {
        // Logits and shifts on a 2^-20 grid keep the shifted gap exact.
        let q = |x: f64| (x * 1048576.0).round() / 1048576.0;
        let (ly, ln, s) = (q(rng.random_range(-20.0..5.0)), q(rng.random_range(-20.0..5.0)), q(rng.random_range(-50.0..50.0)));
        if p_yes_from_logits(ly + s, ln + s) == p_yes_from_logits(ly, ln) {
            shifts_exact += 1;
        }
    }
    check(
        worst <= 1e-9 && shifts_exact == 100,
        format!("max |p - oracle| {worst:.2e} over 1000 pairs, {shifts_exact}/100 shifts exact"),
    )
}

fn brute_precision(gt: &BTreeSet<String>, members: &[(String, f64)], k: usize) -> (f64, usize) {
    // Highest confidence first, ties by region id.
    let mut order: Vec<&(String, f64)> = members.iter().collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let k_used = k.min(order.len());
    if k_used == 0 {
        return (0.0, 0);
    }
    let top: HashSet<&String> = order[..k_used].iter().map(|m| &m.0).collect();
    let hits = top.iter().filter(|id| gt.contains(**id)).count();
    (hits as f64 / k_used as f64, k_used)
}

fn precision_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut agree, mut short_slices) = (0, 0);
    for f in 0..200 {
        let pool: Vec<String> = (0..60).map(|i| format!("r{i:02}")).collect();
        let size = rng.random_range(0..40);
        let chosen: Vec<String> = pool.choose_multiple(&mut rng, size).cloned().collect();
        // Confidences on a coarse grid so ties exercise the region id order.
        let members: Vec<(String, f64)> =
            chosen.into_iter().map(|id| (id, f64::from(rng.random_range(0..20u8)) / 20.0)).collect();
        let gt_size = rng.random_range(1..30);
        let gt_ids: BTreeSet<String> = pool.choose_multiple(&mut rng, gt_size).cloned().collect();
        let k = rng.random_range(0..50);
        short_slices += usize::from(k > members.len());
        let gt = GroundTruthSlice {
            gt_id: format!("gt-{f}"),
            name: String::new(),
            member_region_ids: gt_ids.clone(),
            category: SliceCategory::SemanticConfusion,
            task: TaskKind::Detection,
        };
        let slice = CandidateSlice::new(
            "h",
            members
                .iter()
                .map(|(id, c)| ScoredRegion {
                    region_id: id.clone(),
                    confidence: *c,
                    is_model_error: false,
                    degraded: false,
                })
                .collect(),
        );
        if precision_at_k(&gt, &slice, k) == brute_precision(&gt_ids, &members, k) {
            agree += 1;
        }
    }
    let fixed = {
        let slice = CandidateSlice::new(
            "h",
            (0..7)
                .map(|i| ScoredRegion {
                    region_id: format!("r{i}"),
                    confidence: 0.5,
                    is_model_error: false,
                    degraded: false,
                })
                .collect(),
        );
        let gt = GroundTruthSlice {
            gt_id: "gt".into(),
            name: String::new(),
            member_region_ids: ["r0", "r3", "r9"].map(String::from).into(),
            category: SliceCategory::SemanticConfusion,
            task: TaskKind::Detection,
        };
        precision_at_k(&gt, &slice, 10)
    };
    check(
        agree == 200 && fixed == (2.0 / 7.0, 7),
        format!("{agree}/200 fixtures exact ({short_slices} with k > |slice|), k=10 on 7 members gives k_used {}", fixed.1),
    )
}

fn synthetic_slice(seed: u64, p_error: impl Fn(f64) -> f64) -> CandidateSlice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members = (0..2000)
        .map(|i| {
            let confidence: f64 = rng.random();
            ScoredRegion {
                region_id: format!("r{i:04}"),
                confidence,
                is_model_error: rng.random::<f64>() < p_error(confidence),
                degraded: false,
            }
        })
        .collect();
    CandidateSlice::new("h", members)
}

const SLOPE_SEEDS: u64 = 20;

fn slope_monotone() -> Outcome {
    let mut slopes = Vec::new();
    let mut ok = true;
    for seed in 0..SLOPE_SEEDS {
        let r = slope_trend_analysis(&synthetic_slice(seed, |c| c), &TrendConfig::default());
        ok &= (0.85..=1.15).contains(&r.max_slope) && r.is_systematic_error;
        slopes.push(r.max_slope);
    }
    let (lo, hi) = slopes.iter().fold((f64::MAX, f64::MIN), |(l, h), s| (l.min(*s), h.max(*s)));
    check(ok, format!("{SLOPE_SEEDS} seeds, n=2000, max_slope in [{lo:.3}, {hi:.3}], all systematic: {ok}"))
}

fn slope_independent() -> Outcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for seed in 0..SLOPE_SEEDS {
        let r = slope_trend_analysis(&synthetic_slice(100 + seed, |_| 0.2), &TrendConfig::default());
        ok &= r.max_slope.abs() < 0.15 && !r.is_systematic_error;
        worst = worst.max(r.max_slope.abs());
    }
    check(ok, format!("{SLOPE_SEEDS} seeds, n=2000, max |max_slope| {worst:.3}, none systematic: {ok}"))
}

fn errslice(dir: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_errslice"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{} exited {:?}: {}", args[0], o.status.code(), String::from_utf8_lossy(&o.stderr).trim()));
    }
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    Ok(out.lines().last().unwrap_or_default().to_string())
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap_or_default()));
            }
        }
    }
    out.sort();
    out
}

/// generate, verify and eval through the binary; returns the run directory.
fn cli_pipeline(dir: &Path) -> Result<PathBuf, String> {
    let config = fixtures().join("planted/pipeline.toml").display().to_string();
    let manifest = fixtures().join("planted/manifest.json").display().to_string();
    let hyps = errslice(dir, &["generate", "--config", &config, "--manifest", &manifest, "--mock"])?;
    let run = errslice(
        dir,
        &["verify", "--config", &config, "--manifest", &manifest, "--hypotheses", &hyps, "--mock"],
    )?;
    errslice(dir, &["eval", "--manifest", &manifest, "--run", &run, "--config", &config, "--judge", "--mock"])?;
    Ok(dir.join(Path::new(&run).parent().unwrap()))
}

fn planted_end_to_end() -> Outcome {
    let attempt = || -> Result<Outcome, String> {
        let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
        let run_dir = cli_pipeline(a.path())?;
        cli_pipeline(b.path())?;
        let identical = tree(&a.path().join("out")) == tree(&b.path().join("out"));
        let eval: serde_json::Value =
            serde_json::from_slice(&std::fs::read(run_dir.join("evaluation.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let run: RunDocument =
            serde_json::from_slice(&std::fs::read(run_dir.join("run.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let row = eval["report"]["per_slice"]
            .as_array()
            .and_then(|rows| rows.iter().find(|r| r["gt_id"] == "gt-01"))
            .cloned()
            .unwrap_or_default();
        let p10 = row["precision_at_k"].as_f64().unwrap_or(-1.0);
        let flagged: Vec<&str> = run
            .results
            .iter()
            .filter(|r| r.report.is_systematic_error)
            .map(|r| r.hypothesis_id.as_str())
            .collect();
        let planted_id = hypothesis_id(planted::PLANTED_QUERY);
        Ok(check(
            p10 == 1.0 && flagged == [planted_id.as_str()] && identical,
            format!(
                "P@10 {p10} for {}, systematic {flagged:?} of {}, byte-identical rerun: {identical}",
                row["best_query"], run.results.len()
            ),
        ))
    };
    attempt().unwrap_or_else(Outcome::Fail)
}

fn reference_replay() -> Outcome {
    let stated = [("detection", 0.729, 6usize), ("segmentation", 0.805, 8usize)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (task, mean, perfect) in stated {
        let report = match read_rows(&fixtures().join(format!("reference/{task}.tsv"))).map(|rows| replay(&rows)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => return Outcome::Fail(format!("{task}: {e}")),
            Err(e) => return Outcome::Fail(format!("{task}: {e}")),
        };
        let got = format!("{:.3}", report.mean_precision_at_k);
        let n = report.per_slice.len();
        let good = got == format!("{mean:.3}") && report.perfect_matches == perfect;
        ok &= good;
        parts.push(format!(
            "{task} mean {got} (stated {mean:.3}) perfect {}/{n} (stated {perfect}/{n})",
            report.perfect_matches
        ));
    }
    check(ok, parts.join("; "))
}

fn search(query: &str) -> Hypothesis {
    Hypothesis {
        hypothesis_id: hypothesis_id(query),
        query: query.into(),
        origin: HypothesisOrigin::KnowledgeDriven,
        prompt_type: PromptType::Search,
        factor: String::new(),
        title: String::new(),
        description: String::new(),
        provenance: vec![],
    }
}

fn threshold_comparison(rt: &tokio::runtime::Runtime) -> Outcome {
    let attempt = || -> Result<Outcome, String> {
        let pipeline = PipelineConfig::load(&fixtures().join("planted/pipeline.toml")).map_err(|e| e.to_string())?;
        let gateway = pipeline.gateway(true).map_err(|e| e.to_string())?;
        let judge = pipeline.judge_gateway(true).map_err(|e| e.to_string())?;
        let manifest = planted::manifest();
        let queries = [
            planted::PLANTED_QUERY,
            planted::DECOY_QUERY,
            planted::CLUSTER_QUERY,
            planted::DATA_QUERIES[0],
            planted::DATA_QUERIES[1],
        ];
        let mut run = new_run(pipeline.run_config(), queries.iter().map(|q| search(q)).collect(), &manifest)
            .map_err(|e| e.to_string())?;
        let doc = rt.block_on(async {
            run_verification(&gateway, &mut run, &manifest, 2, |_| Ok(())).await.map_err(|e| e.to_string())?;
            evaluate_manifest_run(&manifest, &run, 10, Some(&judge)).await.map_err(|e| e.to_string())
        })?;
        let rows = threshold_sweep(&run, &judge_consistency(&doc.judge_decisions), &default_sweep());
        let wins = rows.iter().filter(|r| r.slope.f1 >= r.baseline.f1).count();
        let mean = |f: fn(&errslice_engine::evaluate::SweepRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        Ok(check(
            rows.len() == 10 && wins >= 7,
            format!(
                "slope F1 >= baseline F1 at {wins}/10 thresholds, mean F1 {:.3} vs {:.3}",
                mean(|r| r.slope.f1),
                mean(|r| r.baseline.f1)
            ),
        ))
    };
    attempt().unwrap_or_else(Outcome::Fail)
}

/// Needs `ERRSLICE_LIVE_CONFIG` (pipeline TOML with live endpoints),
/// `ERRSLICE_LIVE_MANIFEST` and `ERRSLICE_LIVE_QUERY`.
fn scoring_directionality(rt: &tokio::runtime::Runtime) -> Outcome {
    let vars = ["ERRSLICE_LIVE_CONFIG", "ERRSLICE_LIVE_MANIFEST", "ERRSLICE_LIVE_QUERY"].map(|v| std::env::var(v).ok());
    let [Some(config), Some(manifest), Some(query)] = vars else {
        return Outcome::Skip("needs a live VLM; set ERRSLICE_LIVE_CONFIG, ERRSLICE_LIVE_MANIFEST, ERRSLICE_LIVE_QUERY".into());
    };
    let attempt = || -> Result<Outcome, String> {
        let mut pipeline = PipelineConfig::load(Path::new(&config)).map_err(|e| e.to_string())?;
        pipeline.apply_env(|k| std::env::var(k).ok());
        let gateway = pipeline.gateway(false).map_err(|e| e.to_string())?;
        let manifest = Manifest::parse(&std::fs::read_to_string(&manifest).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let mut slopes = Vec::new();
        for scoring in [ScoringMode::Instance, ScoringMode::ImageLevel] {
            let mut cfg = pipeline.run_config();
            cfg.scoring = scoring;
            let mut run = new_run(cfg, vec![search(&query)], &manifest).map_err(|e| e.to_string())?;
            rt.block_on(run_verification(&gateway, &mut run, &manifest, 1, |_| Ok(())))
                .map_err(|e| e.to_string())?;
            let r = run.results.first().ok_or("hypothesis was not scored")?;
            slopes.push(r.report.max_slope);
        }
        Ok(check(slopes[0] > slopes[1], format!("instance max_slope {:.3} vs image-level {:.3}", slopes[0], slopes[1])))
    };
    attempt().unwrap_or_else(Outcome::Fail)
}

fn main() {
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let secs = Duration::from_secs;
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("confidence oracle", Box::new(|| timed(secs(1), confidence_oracle))),
        ("precision@k oracle", Box::new(|| timed(secs(1), precision_oracle))),
        ("slope oracle, monotone", Box::new(|| timed(secs(5), slope_monotone))),
        ("slope oracle, independent", Box::new(|| timed(secs(5), slope_independent))),
        ("planted end-to-end", Box::new(|| timed(secs(30), planted_end_to_end))),
        ("reference table replay", Box::new(|| timed(secs(5), reference_replay))),
        ("slope vs error-rate threshold sweep", Box::new(|| timed(secs(30), || threshold_comparison(&rt)))),
        ("instance vs image-level slope (live VLM)", Box::new(|| scoring_directionality(&rt))),
    ];
    let mut unexpected = Vec::new();
    for (name, run) in criteria {
        match run() {
            Outcome::Pass(d) => println!("PASS  {name}: {d}"),
            Outcome::Skip(d) => println!("SKIP  {name}: {d}"),
            Outcome::Fail(d) => {
                let known = KNOWN_FAILURES.contains(&name);
                println!("FAIL  {name}: {d}{}", if known { " (known failure, see decisions ledger)" } else { "" });
                if !known {
                    unexpected.push(name);
                }
            }
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
