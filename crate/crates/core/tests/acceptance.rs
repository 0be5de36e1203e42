//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use memegrid::backends::{BackendHandle, Client, MockBackend, RetryPolicy};
use memegrid::gridrun::{
    best_run, enumerate_grid, execute_run, load_runs, render_report, run_grid, GridOptions, ReportFormat, RunContext,
};
use memegrid::labeling::{consistency_filter, distill, DistillSettings};
use memegrid::metrics::{auroc, Confusion};
use memegrid::parsing::scale_to_binary;
use memegrid::promptkit::{compose, PromptLibrary};
use memegrid::{Class, LabelKind, Modality, PromptKind};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Duration);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Area under the ROC curve by counting every positive/negative pair.
fn auroc_pairs(scores: &[f64], truths: &[Class]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !truths[i].is_hateful() {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if truths[j].is_hateful() {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn auroc_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(20240601);
    let mut worst: f64 = 0.0;
    let mut tied = 0;
    for case in 0..1000 {
        let n = rng.random_range(2..=200);
        // Coarse score grids force ties; fine ones mostly avoid them.
        let levels: u32 = if case % 2 == 0 { rng.random_range(2..=10) } else { 1_000_000 };
        let mut truths: Vec<Class> = (0..n).map(|_| if rng.random_bool(0.5) { Class::Hateful } else { Class::NotHateful }).collect();
        truths[0] = Class::Hateful;
        truths[1] = Class::NotHateful;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels)).collect();
        if scores.iter().map(|s| s.to_bits()).collect::<HashSet<_>>().len() < n {
            tied += 1;
        }
        let fast = auroc(&scores, &truths).map_err(|e| format!("case {case}: {e}"))?;
        let slow = auroc_pairs(&scores, &truths);
        worst = worst.max((fast - slow).abs());
        ensure((fast - slow).abs() <= 1e-12, format!("case {case}: rank {fast} vs pairs {slow}"))?;
    }
    Ok(format!("max |diff| {worst:.1e}, {tied} instances with ties"))
}

fn metric_identities() -> Check {
    let mut rng = StdRng::seed_from_u64(7);
    for case in 0..1000 {
        let mut c = Confusion {
            tp: rng.random_range(0..500),
            fp: rng.random_range(0..500),
            tn: rng.random_range(0..500),
            fn_: rng.random_range(0..500),
        };
        // Every tenth matrix has an empty row or column.
        match case % 40 {
            0 => (c.tp, c.fp) = (0, 0),
            10 => (c.tp, c.fn_) = (0, 0),
            20 => c.tp = 0,
            30 => c = Confusion::default(),
            _ => {}
        }
        let n = c.n();
        if n > 0 {
            // accuracy is stored as (tp+tn)/n in f64; multiplying back by n
            // recovers the integer count and differs from it by at most one ulp.
            let scaled = c.accuracy() * n as f64;
            let exact = (c.tp + c.tn) as f64;
            ensure(scaled.round() as u64 == c.tp + c.tn, format!("case {case}: accuracy*n = {scaled}, tp+tn = {exact}"))?;
            ensure((scaled - exact).abs() <= f64::EPSILON * exact, format!("case {case}: accuracy*n off by more than 1 ulp"))?;
        } else {
            ensure(c.accuracy() == 0.0, "empty matrix accuracy")?;
        }
        let (p, r) = (c.precision(), c.recall());
        if c.tp + c.fp == 0 {
            ensure(p == 0.0, format!("case {case}: precision with no predicted positives"))?;
        }
        if c.tp + c.fn_ == 0 {
            ensure(r == 0.0, format!("case {case}: recall with no positives"))?;
        }
        if c.tn + c.fp == 0 {
            ensure(c.specificity() == 0.0, format!("case {case}: specificity with no negatives"))?;
        }
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        ensure((c.f1() - f1).abs() <= 1e-12, format!("case {case}: f1 {} vs {f1}", c.f1()))?;
    }
    Ok("1000 matrices".into())
}

fn synthetic_grid() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = write_data(dir.path(), &balanced_split(3000));
    let spec = mock_grid(&data, 0.2);
    let out = dir.path().join("out");
    let results = run_grid(&spec, &out, &GridOptions::default()).map_err(|e| e.to_string())?;
    ensure(results.len() == 4, format!("{} runs", results.len()))?;
    let mut accs = Vec::new();
    for (config, outcome) in &results {
        let m = outcome.manifest.as_ref().and_then(|m| m.metrics.as_ref()).ok_or("run without metrics")?;
        let points = m.accuracy * 100.0;
        ensure((points - 80.0).abs() <= 2.0, format!("run {} accuracy {points:.3}", config.run_id))?;
        if config.label == LabelKind::Scale {
            let a = m.auroc.ok_or("scale run without auroc")?;
            ensure(a > 0.5, format!("run {} auroc {a}", config.run_id))?;
        }
        accs.push(format!("{points:.3}"));
    }
    let runs = load_runs(&out).map_err(|e| e.to_string())?;
    let csv_text = render_report(&runs, ReportFormat::Csv);
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let width = reader.headers().map_err(|e| e.to_string())?.len();
    let rows: Vec<_> = reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure(rows.len() == 4 && width == 9 && rows.iter().all(|r| r.len() == 9), format!("report {}x{width}", rows.len()))?;
    let table = render_report(&runs, ReportFormat::Table);
    ensure(table.lines().count() == 6, "table should have header, rule and 4 rows")?;
    Ok(format!("accuracies {}", accs.join(" / ")))
}

fn distillation_filter() -> Check {
    let split = balanced_split(3000);
    let wrong: HashSet<String> = split.records.iter().enumerate().filter(|(i, _)| i % 10 < 3).map(|(_, r)| r.id.clone()).collect();
    let truth = split.records.iter().map(|r| (r.id.clone(), r.label.unwrap())).collect();
    let teacher = ScriptedTeacher { truth, wrong: wrong.clone() };
    let client = Client::new(BackendHandle::new("teacher", "mock", Box::new(teacher), RetryPolicy::default()), None);
    let settings = DistillSettings { modality: Modality::TextOnly, ..DistillSettings::default() };
    let scaled = distill(&split, &client, &PromptLibrary::default(), &settings).map_err(|e| e.to_string())?;
    let kept = consistency_filter(&scaled, settings.threshold);
    let kept_ids: HashSet<&str> = kept.iter().map(|s| s.record.id.as_str()).collect();
    let expected: HashSet<&str> = split.records.iter().map(|r| r.id.as_str()).filter(|id| !wrong.contains(*id)).collect();
    ensure(kept_ids == expected, format!("kept {} records, expected {}", kept_ids.len(), expected.len()))?;
    let consistent = kept
        .iter()
        .filter(|s| s.teacher_scale.is_some_and(|v| Some(scale_to_binary(v, settings.threshold)) == s.record.label))
        .count();
    ensure(consistent == kept.len(), format!("{consistent}/{} consistent", kept.len()))?;
    Ok(format!("kept {} of {}, all consistent", kept.len(), split.len()))
}

fn prompt_goldens() -> Check {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for &p in PromptKind::ALL {
        for &l in LabelKind::ALL {
            let name = format!("{}_{}.txt", p.as_str(), l.as_str());
            let golden = std::fs::read(dir.join(&name)).map_err(|e| format!("{name}: {e}"))?;
            let text = compose(p, l).text;
            ensure(text.as_bytes() == golden.as_slice(), format!("{name} differs"))?;
            match l {
                LabelKind::Binary => ensure(!text.contains("scale from 0 to 9"), format!("{name} mentions the scale"))?,
                LabelKind::Scale => ensure(!text.contains("`TRUE`"), format!("{name} mentions `TRUE`"))?,
            }
        }
    }
    Ok("4 compositions byte-equal".into())
}

fn grid_enumeration() -> Check {
    let spec = ablation_grid();
    let runs = enumerate_grid(&spec).map_err(|e| e.to_string())?;
    ensure(runs.len() == 12, format!("{} configs", runs.len()))?;
    ensure(runs == enumerate_grid(&spec).map_err(|e| e.to_string())?, "enumeration is not deterministic")?;
    let order: Vec<(String, PromptKind, LabelKind)> = runs.iter().map(|r| (r.arm.clone(), r.prompt, r.label)).collect();
    let mut expected = Vec::new();
    for arm in &spec.model_arms {
        for &p in &spec.prompts {
            for &l in &spec.labels {
                expected.push((arm.name.clone(), p, l));
            }
        }
    }
    ensure(order == expected, "configs out of order")?;

    let summaries = reference_summaries();
    let best = best_run(&summaries).ok_or("no best run")?;
    let c = &best.config;
    ensure(
        c.finetune && c.modality == Modality::Multimodal && c.prompt == PromptKind::Category && c.label == LabelKind::Binary,
        format!("best is {} / {} / {} / {}", c.arm, c.prompt, c.label, c.modality),
    )?;
    Ok(format!("12 configs; best {} {} {} {}", c.category, c.arm, c.prompt, c.label))
}

fn resume_idempotence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let split = balanced_split(3000);
    let data = write_data(dir.path(), &split);
    let config = enumerate_grid(&mock_grid(&data, 0.2)).map_err(|e| e.to_string())?.remove(1);
    let prompts = PromptLibrary::default();
    let mock = || MockBackend::from_truth_file(&data, 0.2, 7, 0).unwrap();
    let client_of = |b: Box<dyn memegrid::backends::Backend>| Client::new(BackendHandle::new("mock", "mock", b, RetryPolicy::default()), None);

    let whole_out = dir.path().join("whole");
    let client = client_of(Box::new(mock()));
    let whole = execute_run(&config, &split, &RunContext::new(&client, &prompts, dir.path(), &whole_out)).map_err(|e| e.to_string())?;

    let out = dir.path().join("resumed");
    let flag = Arc::new(AtomicBool::new(false));
    let client = client_of(Box::new(CancelAfter { inner: mock(), limit: 1000, calls: AtomicU64::new(0), flag: Arc::clone(&flag) }));
    let mut ctx = RunContext::new(&client, &prompts, dir.path(), &out);
    ctx.cancel = Some(&flag);
    let first = execute_run(&config, &split, &ctx).map_err(|e| e.to_string())?;
    ensure(first.interrupted, "run was not interrupted")?;
    let k = first.processed;

    let client = client_of(Box::new(mock()));
    let second = execute_run(&config, &split, &RunContext::new(&client, &prompts, dir.path(), &out)).map_err(|e| e.to_string())?;
    ensure(second.resumed == k, format!("resumed from {} instead of {k}", second.resumed))?;
    ensure(second.backend_calls == (3000 - k) as u64, format!("{} new calls, expected {}", second.backend_calls, 3000 - k))?;
    let a = std::fs::read(&whole.predictions_path).map_err(|e| e.to_string())?;
    let b = std::fs::read(&second.predictions_path).map_err(|e| e.to_string())?;
    ensure(a == b, "prediction files differ")?;
    Ok(format!("interrupted at k={k}, resumed with {} calls, files identical", second.backend_calls))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("AUROC oracle equivalence", auroc_oracle, Duration::from_secs(10)),
        ("Metric identities", metric_identities, Duration::from_secs(1)),
        ("End-to-end synthetic grid", synthetic_grid, Duration::from_secs(60)),
        ("Distillation filter soundness", distillation_filter, Duration::from_secs(5)),
        ("Prompt golden files", prompt_goldens, Duration::from_secs(5)),
        ("Grid enumeration and best run", grid_enumeration, Duration::from_secs(5)),
        ("Resume idempotence", resume_idempotence, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= budget {
                Ok(detail)
            } else {
                Err(format!("took {:.2} s, budget {} s", elapsed.as_secs_f64(), budget.as_secs()))
            }
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} ({:.2} s)", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} ({:.2} s)", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
