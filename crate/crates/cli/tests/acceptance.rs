//! End-to-end acceptance run. Every criterion prints one PASS or FAIL line;
//! the process fails if any criterion does.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use modabric::attr::{build_attr_model, InputGroup};
use modabric::data::synth::SynthSpec;
use modabric::multitask::{self, Split, TrainOptions};
use modabric::recsys::WMRB_EPSILON;
use modabric::RngState;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = support::gradient_suite(100);
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let bad: Vec<String> = reports
        .iter()
        .filter(|r| !(r.worst < 1e-4) || r.instances < 100)
        .map(|r| format!("{} ({:e})", r.name, r.worst))
        .collect();
    let pass = bad.is_empty() && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "{} paths x 100 instances, worst relative error {:.1e}, {:.1}s{}",
            reports.len(),
            worst,
            elapsed.as_secs_f64(),
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
        ),
    )
}

fn metric_oracles() -> Outcome {
    let reports = support::metric_oracle_suite(1000, 7);
    let pass = reports.iter().all(|r| r.worst <= 1e-12);
    let detail: Vec<String> = reports.iter().map(|r| format!("{} {:.0e}", r.name, r.worst)).collect();
    outcome(pass, format!("1000 instances, worst deviation: {}", detail.join(", ")))
}

const MULTITASK_CYCLES: usize = 1500;
const MIN_SUPPORT: usize = 20;

fn attr_spec(seed: u64) -> SynthSpec {
    // Customers play no part in attribute training.
    SynthSpec {
        seed,
        n_customers: 1,
        ..Default::default()
    }
}

fn multitask_protocol() -> Outcome {
    let start = Instant::now();
    let config = support::desk_attr_config();
    let spec = attr_spec(0);
    let setup = support::multitask_setup(&spec, &config, MIN_SUPPORT);
    let tasks: Vec<_> = setup.datasets.iter().map(|d| d.task.clone()).collect();
    let (model, mut store) = build_attr_model(&config, &tasks, setup.sizes, None, &mut RngState::new(0)).unwrap();
    let options = TrainOptions {
        no_history: true,
        ..Default::default()
    };
    multitask::train(&model, &mut store, &setup.datasets, &setup.records, &support::train_plan(MULTITASK_CYCLES, 0, &config), options).unwrap();
    let evals = multitask::evaluate(&model, &store, &setup.datasets, &setup.records, Split::Test).unwrap();
    let elapsed = start.elapsed();
    let margins: Vec<String> = evals
        .iter()
        .map(|e| format!("{} {:.3} vs {:.3}", e.task, e.accuracy, e.baseline_accuracy))
        .collect();
    let pass = evals.len() == spec.tasks.len()
        && evals.iter().all(|e| e.accuracy - e.baseline_accuracy >= 0.15)
        && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "{} products, {} attributes, mask rate {}; accuracy vs baseline: {}; {:.0}s",
            setup.records.len(),
            evals.len(),
            spec.mask_rate,
            margins.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn head_isolation() -> Outcome {
    let results: Vec<_> = (0..20).map(support::head_isolation_step).collect();
    let pass = results.iter().all(|&(same, a, shared)| same && a && shared);
    outcome(pass, "20 crafted two-task models; task-b head bit-identical after a task-a step that moved head a and the shared layers")
}

fn ablation_direction() -> Outcome {
    let config = support::desk_attr_config();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let setup = support::multitask_setup(&attr_spec(seed), &config, MIN_SUPPORT);
        let plan = support::train_plan(MULTITASK_CYCLES, seed, &config);
        let f1 = |drop: Option<InputGroup>| support::mean_f1(&multitask::ablate(&setup.records, &setup.datasets, &config, setup.sizes, &plan, drop).unwrap());
        let (full, no_text, no_meta) = (f1(None), f1(Some(InputGroup::Text)), f1(Some(InputGroup::Metadata)));
        pass &= full - no_text > full - no_meta;
        lines.push(format!("seed {}: full {:.3}, no_text {:.3}, no_metadata {:.3}", seed, full, no_text, no_meta));
    }
    outcome(pass, format!("mean weighted F1, {}", lines.join("; ")))
}

fn recommender_ordering() -> Outcome {
    let start = Instant::now();
    let runs: Vec<support::Comparison> = (0..5).map(support::run_comparison).collect();
    let elapsed = start.elapsed();
    let mean = |f: &dyn Fn(&support::Comparison) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let all: Vec<f64> = (0..4).map(|i| mean(&|c| c.all[i])).collect();
    let cold: Vec<f64> = (0..4).map(|i| mean(&|c| c.cold[i])).collect();
    let (pop, cf, content, hybrid) = (0, 1, 2, 3);
    let pass = all[hybrid] > all[cf] && all[hybrid] > all[pop] && cold[content] > cold[cf] && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "mean prec@10 over 5 seeds: popularity {:.4}, cf {:.4}, content {:.4}, hybrid {:.4}; cold items: cf {:.4}, content {:.4}; {:.0}s",
            all[pop],
            all[cf],
            all[content],
            all[hybrid],
            cold[cf],
            cold[content],
            elapsed.as_secs_f64()
        ),
    )
}

fn wmrb_spot_checks() -> Outcome {
    let mut pass = true;
    let mut worst = 0.0f64;
    for z in [1, 10, 100] {
        let (equal, separated) = support::wmrb_spot_losses(z);
        let d1 = (equal - (z as f64 + WMRB_EPSILON).ln()).abs();
        let d2 = (separated - WMRB_EPSILON.ln()).abs();
        worst = worst.max(d1).max(d2);
        pass &= d1 < 1e-9 && d2 < 1e-9;
    }
    outcome(pass, format!("z in {{1, 10, 100}}, worst deviation {:.1e}", worst))
}

fn normalisation() -> Outcome {
    let (worst, nonzero) = support::normalisation_deviation(10_000, 12, 3);
    outcome(worst < 1e-9, format!("{} nonzero rows of 10000, worst |norm - 1| {:.1e}", nonzero, worst))
}

// CLI determinism.

const SMALL_SPEC: &str = r#"
n_products = 300
n_cold_products = 30
n_customers = 200
shot_dim = 4

[interactions]
train_events_min = 10
train_events_max = 20
"#;

const SMALL_CONFIG: &[&str] = &[
    "data.min_support=5",
    "attr_train.cycles=40",
    "attr_train.eval_every=20",
    "attr_model.word_embed_dim=4",
    "attr_model.conv_filters=4",
    "attr_model.text_dense_units=4",
    "attr_model.meta_embed_dim=2",
    "attr_model.image_fusion_units=4",
    "attr_model.shared_dense_units=8",
    "attr_model.batch_size=16",
    "attr_model.max_seq_len=12",
    "rec.k=8",
    "rec.z=10",
    "rec.batch_size=64",
    "rec.max_epochs=3",
];

fn modabric(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_modabric"))
        .args(args)
        .env("MODABRIC_THREADS", threads)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)))
    }
}

/// Runs every pipeline into `root` and returns the files produced.
fn pipelines(root: &Path, threads: &str) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    std::fs::write(root.join("spec.toml"), SMALL_SPEC).map_err(|e| e.to_string())?;
    modabric(&["synth-gen", "--spec", &p("spec.toml"), "--out", &p("data"), "--seed", "5"], threads)?;
    let mut config: Vec<String> = vec!["--config".into(), p("data/windows.toml"), "--seed".into(), "5".into()];
    for s in SMALL_CONFIG {
        config.push("--set".into());
        config.push(s.to_string());
    }
    let with = |head: &[&str]| -> Vec<String> { head.iter().map(|s| s.to_string()).chain(config.iter().cloned()).collect() };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        modabric(&refs, threads)
    };
    let (cat, tax, feats, log) = (p("data/catalogue.jsonl"), p("data/taxonomy.json"), p("data/item_features.jsonl"), p("data/interactions.csv"));
    run(with(&["attr-train", "--catalogue", &cat, "--taxonomy", &tax, "--out", &p("attr")]))?;
    run(with(&["attr-ablate", "--catalogue", &cat, "--taxonomy", &tax, "--out", &p("ablation.csv")]))?;
    run(vec!["attr-eval".into(), "--model".into(), p("attr"), "--catalogue".into(), cat.clone(), "--taxonomy".into(), tax.clone(), "--out".into(), p("attr_eval.csv")])?;
    run(vec!["attr-predict".into(), "--model".into(), p("attr"), "--catalogue".into(), cat.clone(), "--out".into(), p("predictions.jsonl")])?;
    for mode in ["cf", "content", "hybrid"] {
        run(with(&["rec-train", "--mode", mode, "--features", &feats, "--interactions", &log, "--out", &p(&format!("rec_{}", mode))]))?;
    }
    run(with(&["rec-eval", "--features", &feats, "--interactions", &log, "--out", &p("rec_eval.csv"), "--runs", "2", "--cold-subset"]))?;
    let seed_item = std::fs::read_to_string(root.join("data/cold_products.txt")).map_err(|e| e.to_string())?;
    let seed_item = seed_item.lines().next().unwrap_or_default().to_string();
    run(vec![
        "rec-similar".into(),
        "--model".into(),
        p("rec_hybrid"),
        "--model".into(),
        p("rec_cf"),
        "--features".into(),
        feats.clone(),
        "--item".into(),
        seed_item,
        "--n".into(),
        "5".into(),
        "--out".into(),
        p("similar.csv"),
    ])?;
    run(vec![
        "rec-recommend".into(),
        "--model".into(),
        p("rec_hybrid"),
        "--features".into(),
        feats,
        "--interactions".into(),
        log,
        "--n".into(),
        "5".into(),
        "--out".into(),
        p("recommend.csv"),
    ])?;
    let mut files = BTreeMap::new();
    collect(root, root, &mut files)?;
    Ok(files)
}

fn collect(root: &Path, dir: &Path, files: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<(), String> {
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_dir() {
            collect(root, &path, files)?;
        } else {
            let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            files.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let run = || -> Result<(BTreeMap<PathBuf, Vec<u8>>, BTreeMap<PathBuf, Vec<u8>>), String> {
        let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
        Ok((pipelines(a.path(), "1")?, pipelines(b.path(), "2")?))
    };
    match run() {
        Err(e) => outcome(false, e),
        Ok((a, b)) => {
            let differing: Vec<String> = a
                .keys()
                .chain(b.keys())
                .filter(|k| a.get(*k) != b.get(*k))
                .map(|k| k.display().to_string())
                .collect();
            let pass = differing.is_empty() && a.len() > 20;
            outcome(
                pass,
                if pass {
                    format!("every pipeline run twice (1 and 2 worker threads): {} output files byte-identical", a.len())
                } else {
                    format!("{} files, differing: {}", a.len(), differing.join(", "))
                },
            )
        }
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradients),
        ("metric oracles", metric_oracles),
        ("multi-task protocol", multitask_protocol),
        ("missing-label isolation", head_isolation),
        ("ablation direction", ablation_direction),
        ("recommender ordering", recommender_ordering),
        ("WMRB spot-checks", wmrb_spot_checks),
        ("determinism", determinism),
        ("normalisation", normalisation),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
