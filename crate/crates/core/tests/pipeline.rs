mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use common::reference::{fnv1a64, SplitMix};
use common::f32_checkpoint;
use merge_forge::checkpoint::{load_checkpoint, save_checkpoint, DTypePolicy};
use merge_forge::merge::{MergeMethod, MergeRecipe, RecipeInput};
use merge_forge::metrics::{MetricsError, ScoreTable};
use merge_forge::pipeline::{
    plan_stage1, plan_stage2, run, select_top2, EntryStatus, Outcome, PipelineConfig,
    PipelineError, PipelineState, RunMode, Stage3Outcome, SweepManifest,
};
use proptest::prelude::*;
use serde_json::json;

fn config(value: serde_json::Value) -> PipelineConfig {
    PipelineConfig::from_json(&value.to_string()).unwrap()
}

fn fmt_gamma(g: f64) -> String {
    format!("{g}")
}

/// Resumes repeatedly, answering each requested manifest with `score(model_id)`.
fn drive_resume(
    cfg: &PipelineConfig,
    tasks: &[&str],
    score: impl Fn(&str, &str) -> f64,
) -> PipelineState {
    let mut table = ScoreTable::new(tasks.iter().map(|t| t.to_string()).collect());
    for _ in 0..5 {
        let report = run(cfg, RunMode::Resume(table.clone()), None).unwrap();
        match report.outcome {
            Outcome::Complete => return report.state,
            Outcome::AwaitingScores { manifest, .. } => {
                for e in SweepManifest::load(&manifest).unwrap().entries {
                    for t in tasks {
                        table.insert(&e.model_id, t, score(&e.model_id, t));
                    }
                }
            }
            Outcome::Planned { .. } => unreachable!(),
        }
    }
    panic!("pipeline did not complete");
}

#[test]
fn plan_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy();
    let three = config(json!({
        "method": "ties", "base": "b", "output_dir": out,
        "domains": {"f": "f", "m": "m", "j": "j"},
    }));
    let m = plan_stage1(&three).unwrap();
    assert_eq!(m.entries.len(), 27);
    assert!(m.entries.iter().all(|e| e.status == EntryStatus::Planned));

    let one = config(json!({
        "method": "ta", "base": "b", "output_dir": out, "domains": {"f": "f"}, "grid": [0.5],
    }));
    assert_eq!(plan_stage1(&one).unwrap().entries.len(), 1);

    let dare = config(json!({
        "method": "dare-ties", "base": "b", "output_dir": out,
        "domains": {"f": "f", "m": "m"}, "grid": [0.5, 1.0], "seeds": [3, 1, 2],
    }));
    let m = plan_stage1(&dare).unwrap();
    assert_eq!(m.entries.len(), 12);
    assert_eq!(m.entries[0].model_id, "s1-dare-ties-f-g0.5-s3");

    let dup = json!({
        "method": "ta", "base": "b", "output_dir": out, "domains": {"f": "f"}, "grid": [0.5, 0.5],
    });
    assert!(matches!(PipelineConfig::from_json(&dup.to_string()), Err(PipelineError::Config(_))));
}

#[test]
fn plan_mode_writes_manifest_without_merging() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({
        "method": "ta", "base": "b", "output_dir": dir.path(),
        "domains": {"f": "f", "m": "m", "j": "j"},
    }));
    let report = run(&cfg, RunMode::Plan, None).unwrap();
    let Outcome::Planned { stage: 1, manifest } = &report.outcome else {
        panic!("{:?}", report.outcome)
    };
    let first = fs::read(manifest).unwrap();
    assert_eq!(SweepManifest::load(manifest).unwrap().entries.len(), 27);
    assert!(!dir.path().join("stage1").exists());
    run(&cfg, RunMode::Plan, None).unwrap();
    assert_eq!(fs::read(manifest).unwrap(), first);
}

#[test]
fn stage2_recipes_match_hand_built() {
    for method in ["ta", "ties"] {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = config(json!({
            "method": method, "base": "base.st", "output_dir": out,
            "domains": {"f": "f.st", "m": "m.st"}, "grid": [0.25, 0.75],
        }));
        // f wins at 0.75, m at 0.25.
        let state = drive_resume(&cfg, &["t"], |id, _| match id {
            id if id.starts_with("s1-") && id.contains("-f-g0.75") => 9.0,
            id if id.starts_with("s1-") && id.contains("-m-g0.25") => 5.0,
            _ => 1.0,
        });
        let manifest = plan_stage2(&state, &cfg).unwrap();
        let winner = |d: &str, g: &str| format!("s1-{method}-{d}-g{g}");
        let path = |id: &str| out.join("stage1").join(format!("{id}.safetensors")).to_string_lossy().into_owned();
        let (f, m) = (winner("f", "0.75"), winner("m", "0.25"));
        assert_eq!(manifest.parents, [f.clone(), m.clone()]);
        let expected: Vec<MergeRecipe> = [0.25, 0.75]
            .iter()
            .map(|&g| {
                let ta = method == "ta";
                MergeRecipe {
                    method: if ta { MergeMethod::Ta } else { MergeMethod::Ties },
                    base: "base.st".into(),
                    inputs: vec![
                        RecipeInput { path: path(&f), weight: if ta { g } else { 1.0 } },
                        RecipeInput { path: path(&m), weight: if ta { 1.0 - g } else { 1.0 } },
                    ],
                    density: if ta { None } else { Some(g) },
                    lambda: 1.0,
                    dare_seed: 0,
                    ties_inner_density: 1.0,
                    dtype: DTypePolicy::Preserve,
                }
            })
            .collect();
        let got: Vec<MergeRecipe> = manifest.entries.iter().map(|e| e.recipe.clone()).collect();
        assert_eq!(got, expected);
        for e in &manifest.entries {
            assert_eq!(e.inputs, [f.clone(), m.clone()]);
            assert_eq!(e.model_id, format!("s2-{method}-f+m-g{}", fmt_gamma(e.gamma)));
        }
    }
}

/// Published stage-1 Overall scores feed the stage-2 pair and stage-3 partner.
#[test]
fn published_stage1_scores_select_published_pairs() {
    let order: Vec<String> = ["F", "M", "J"].iter().map(|s| s.to_string()).collect();
    let cases = [
        ("ta", [36.50, 27.43, 26.00], ("F", "M"), "J"),
        ("ties", [35.72, 26.49, 26.16], ("F", "M"), "J"),
        ("dare-ties", [34.49, 25.15, 25.61], ("F", "J"), "M"),
    ];
    for (method, overall, pair, partner) in cases {
        let scores: Vec<(String, f64)> = order.iter().cloned().zip(overall).collect();
        let top = select_top2(&scores, &order).unwrap();
        assert_eq!((top.0.as_str(), top.1.as_str()), pair);

        let dir = tempfile::tempdir().unwrap();
        let cfg = config(json!({
            "method": method, "base": "b", "output_dir": dir.path(),
            "domains": {"F": "f", "M": "m", "J": "j"}, "grid": [1.0],
        }));
        let state = drive_resume(&cfg, &["overall"], |id, _| {
            let domain = id.split('-').find(|s| ["F", "M", "J"].contains(s)).unwrap_or_default();
            match (id.starts_with("s1-"), domain) {
                (true, "F") => overall[0],
                (true, "M") => overall[1],
                (true, "J") => overall[2],
                _ => 30.0,
            }
        });
        let s1 = state.stage1.unwrap();
        assert_eq!((s1.pair.0.as_str(), s1.pair.1.as_str()), pair, "{method}");
        assert_eq!(s1.remaining.as_deref(), Some(partner), "{method}");
    }
}

#[test]
fn dominant_domain_is_always_selected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({
        "method": "ta", "base": "b", "output_dir": dir.path(),
        "domains": {"j": "j", "m": "m", "f": "f"}, "grid": [0.2, 0.4, 0.6],
    }));
    let state = drive_resume(&cfg, &["a", "b"], |id, task| {
        let h = fnv1a64(format!("{id}/{task}").as_bytes()) % 50;
        h as f64 + if id.contains("-f-") { 100.0 } else { 0.0 }
    });
    let s1 = state.stage1.unwrap();
    assert_eq!(s1.pair.0, "f");
    assert_eq!(s1.ranking[0], "f");
}

/// Scores drawn from a tiny integer range so ties are common.
fn synthetic_score(seed: u64, id: &str, task: &str) -> f64 {
    let mut g = SplitMix(fnv1a64(format!("{id}\0{task}").as_bytes()) ^ seed);
    (g.next() % 5) as f64
}

struct Expected {
    gammas: BTreeMap<String, f64>,
    pair: (String, String),
    remaining: Option<String>,
    gamma2: f64,
    gamma3: Option<f64>,
}

/// Direct evaluation of the selection rules from raw scores.
fn brute_force(
    method: &str,
    domains: &[String],
    order: &[String],
    grid: &[f64],
    seeds: &[Option<u64>],
    tasks: &[&str],
    score: &dyn Fn(&str, &str) -> f64,
) -> Expected {
    let id = |stage: u8, ds: &[String], g: f64, s: Option<u64>| {
        let suffix = s.map(|s| format!("-s{s}")).unwrap_or_default();
        format!("s{stage}-{method}-{}-g{}{suffix}", ds.join("+"), fmt_gamma(g))
    };
    let value = |stage: u8, ds: &[String], g: f64| {
        let per_chain: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let model = id(stage, ds, g, s);
                tasks.iter().map(|t| score(&model, t)).sum::<f64>() / tasks.len() as f64
            })
            .collect();
        per_chain.iter().sum::<f64>() / per_chain.len() as f64
    };
    let argmax = |stage: u8, ds: &[String]| {
        let mut best: Option<(f64, f64)> = None;
        for &g in grid {
            let v = value(stage, ds, g);
            best = match best {
                Some((bg, bv)) if bv > v || (bv == v && bg < g) => Some((bg, bv)),
                _ => Some((g, v)),
            };
        }
        best.unwrap()
    };
    let mut gammas = BTreeMap::new();
    let mut best_scores = Vec::new();
    for d in domains {
        let (g, v) = argmax(1, std::slice::from_ref(d));
        gammas.insert(d.clone(), g);
        best_scores.push((d.clone(), v));
    }
    let mut ranked = order.to_vec();
    let lookup = |d: &String| best_scores.iter().find(|(x, _)| x == d).unwrap().1;
    // Stable sort keeps declared order among equal scores.
    ranked.sort_by(|a, b| lookup(b).partial_cmp(&lookup(a)).unwrap());
    let pair = (ranked[0].clone(), ranked[1].clone());
    let remaining = ranked.get(2).cloned();
    let gamma2 = argmax(2, &[pair.0.clone(), pair.1.clone()]).0;
    let gamma3 = remaining
        .as_ref()
        .map(|r| argmax(3, &[pair.0.clone(), pair.1.clone(), r.clone()]).0);
    Expected { gammas, pair, remaining, gamma2, gamma3 }
}

fn arb_instance() -> impl Strategy<Value = (String, Vec<String>, Vec<String>, Vec<f64>, Vec<u64>, u64)> {
    let names = ["f", "m", "j", "k"];
    (
        prop::sample::select(vec!["ta", "ties", "dare-ties"]),
        2usize..=4,
        prop::sample::subsequence((1..=10).map(|k| f64::from(k) / 10.0).collect::<Vec<_>>(), 1..=5),
        prop::sample::subsequence(vec![0u64, 7, 42], 1..=2),
        any::<u64>(),
    )
        .prop_flat_map(move |(method, n, grid, seeds, seed)| {
            let domains: Vec<String> = names[..n].iter().map(|s| s.to_string()).collect();
            (
                Just(method.to_string()),
                Just(domains.clone()),
                Just(domains).prop_shuffle(),
                Just(grid).prop_shuffle(),
                Just(seeds),
                Just(seed),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn recorded_decisions_match_brute_force(
        (method, domains, order, grid, seeds, seed) in arb_instance()
    ) {
        let dir = tempfile::tempdir().unwrap();
        let domain_map: serde_json::Map<String, serde_json::Value> =
            domains.iter().map(|d| (d.clone(), json!(format!("{d}.st")))).collect();
        let cfg = config(json!({
            "method": method, "base": "b.st", "output_dir": dir.path(),
            "domains": domain_map, "grid": grid, "seeds": seeds, "tie_break_order": order,
        }));
        let tasks = ["t1", "t2"];
        let score = |id: &str, t: &str| synthetic_score(seed, id, t);
        let state = drive_resume(&cfg, &tasks, score);
        let chains: Vec<Option<u64>> = if method == "dare-ties" {
            seeds.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        let expected = brute_force(&method, &domains, &order, &grid, &chains, &tasks, &score);

        let s1 = state.stage1.as_ref().unwrap();
        for b in &s1.per_domain {
            prop_assert_eq!(b.gamma, expected.gammas[&b.domain]);
            prop_assert_eq!(b.model_ids.len(), chains.len());
        }
        prop_assert_eq!(&s1.pair, &expected.pair);
        prop_assert_eq!(&s1.remaining, &expected.remaining);
        prop_assert_eq!(state.stage2.as_ref().unwrap().gamma, expected.gamma2);
        match (&state.stage3, expected.gamma3) {
            (Some(Stage3Outcome::Decided(d)), Some(g)) => prop_assert_eq!(d.gamma, g),
            (Some(Stage3Outcome::Skipped), None) => {}
            (got, want) => prop_assert!(false, "stage 3 {got:?} vs {want:?}"),
        }
        let fin = state.final_model.as_ref().unwrap();
        prop_assert_eq!(fin.stage, if expected.gamma3.is_some() { 3 } else { 2 });
    }
}

#[test]
fn resume_rejects_partial_and_incomplete_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({
        "method": "ta", "base": "b", "output_dir": dir.path(),
        "domains": {"f": "f", "m": "m"}, "grid": [0.5, 1.0], "selection_tasks": ["x", "y"],
    }));
    let mut table = ScoreTable::new(vec!["x".into(), "y".into()]);
    table.insert("s1-ta-f-g0.5", "x", 1.0);
    table.insert("s1-ta-f-g0.5", "y", 1.0);
    let err = run(&cfg, RunMode::Resume(table.clone()), None).unwrap_err();
    assert!(matches!(err, PipelineError::MissingScores { stage: 1, ref model_id } if model_id == "s1-ta-f-g1"));

    for id in ["s1-ta-f-g1", "s1-ta-m-g0.5", "s1-ta-m-g1"] {
        table.insert(id, "x", 2.0);
    }
    table.insert("s1-ta-f-g1", "y", 2.0);
    table.insert("s1-ta-m-g0.5", "y", 2.0);
    let err = run(&cfg, RunMode::Resume(table), None).unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Metrics(MetricsError::MissingCell { ref model, ref task }) if model == "s1-ta-m-g1" && task == "y"
    ));
}

#[test]
fn decisions_survive_later_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({
        "method": "ties", "base": "b", "output_dir": dir.path(),
        "domains": {"f": "f", "m": "m", "j": "j"}, "grid": [0.3, 0.6, 0.9],
    }));
    let first = drive_resume(&cfg, &["t"], |id, t| synthetic_score(1, id, t));
    let state_path = dir.path().join("state.json");
    let bytes = fs::read(&state_path).unwrap();

    let mut other = ScoreTable::new(vec!["t".into()]);
    for stage in 1..=3 {
        let path = dir.path().join(SweepManifest::file_name(stage));
        for e in SweepManifest::load(&path).unwrap().entries {
            other.insert(&e.model_id, "t", synthetic_score(2, &e.model_id, "t"));
        }
    }
    let again = run(&cfg, RunMode::Resume(other), None).unwrap();
    assert_eq!(again.outcome, Outcome::Complete);
    assert_eq!(again.state, first);
    assert_eq!(fs::read(&state_path).unwrap(), bytes);

    let mut changed = cfg.clone();
    changed.grid = vec![0.3, 0.6];
    assert!(matches!(
        run(&changed, RunMode::Plan, None),
        Err(PipelineError::StateConflict { field: "grid", .. })
    ));
}

/// Writes a base and three domain checkpoints on a dyadic grid.
fn write_models(dir: &Path) -> BTreeMap<&'static str, PathBuf> {
    let mut paths = BTreeMap::new();
    let values = |k: i32| -> Vec<f32> { (0..64).map(|i| ((i * k) % 17 - 8) as f32 / 8.0).collect() };
    for (name, k) in [("base", 1), ("f", 3), ("m", 5), ("j", 7)] {
        let ckpt = f32_checkpoint(name, &[("layers.0.w", values(k)), ("layers.1.w", values(k + 1))]);
        let path = dir.join(format!("{name}.safetensors"));
        save_checkpoint(&ckpt, &path, DTypePolicy::Preserve).unwrap();
        paths.insert(name, path);
    }
    paths
}

/// `sh` evaluator: the score is the length of the model id, plus 10 when it
/// contains `bonus`; it fails when the id contains `fail`.
fn sh_evaluator(bonus: &str, fail: &str) -> serde_json::Value {
    let script = format!(
        "case \"$0\" in *{fail}*) echo boom >&2; exit 3;; esac; \
         s=${{#0}}; case \"$0\" in *{bonus}*) s=$((s+10));; esac; \
         printf '{{\"models\":{{\"%s\":{{\"t\":%s}}}}}}' \"$0\" \"$s\" > \"$1\""
    );
    json!({"command": ["sh", "-c", script, "{model_id}", "{out}"]})
}

fn execute_config(dir: &Path, models: &BTreeMap<&str, PathBuf>, method: &str, evaluator: serde_json::Value) -> PipelineConfig {
    config(json!({
        "method": method,
        "base": models["base"],
        "domains": {"f": models["f"], "m": models["m"], "j": models["j"]},
        "grid": [0.5, 1.0],
        "seeds": [4, 9],
        "output_dir": dir.join("out"),
        "evaluator": evaluator,
    }))
}

#[test]
fn execute_runs_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let models = write_models(dir.path());
    // Prefer γ = 1 everywhere so the stage-2 winner is the identity merge.
    let cfg = execute_config(dir.path(), &models, "ta", sh_evaluator("g1", "nothing"));
    let report = run(&cfg, RunMode::Execute, None).unwrap();
    assert_eq!(report.outcome, Outcome::Complete);
    let state = report.state;
    let s1 = state.stage1.as_ref().unwrap();
    let s2 = state.stage2.as_ref().unwrap();
    assert_eq!(s2.gamma, 1.0);
    assert!(matches!(state.stage3, Some(Stage3Outcome::Decided(_))));
    assert_eq!(state.final_model.as_ref().unwrap().stage, 3);

    for stage in 1..=3u8 {
        let m = SweepManifest::load(&cfg.output_path().join(SweepManifest::file_name(stage))).unwrap();
        assert!(m.entries.iter().all(|e| e.status == EntryStatus::Scored && Path::new(&e.output).exists()));
    }

    // TA with weights (1, 0) reproduces the first stage-1 winner.
    let first = &s1.best(&s1.pair.0).model_ids[0];
    let winner = load_checkpoint(cfg.output_path().join("stage1").join(format!("{first}.safetensors"))).unwrap();
    let merged = load_checkpoint(cfg.output_path().join("stage2").join(format!("{}.safetensors", s2.model_ids[0]))).unwrap();
    for (name, t) in winner.iter() {
        assert_eq!(merged.get(name).unwrap().bytes(), t.bytes());
    }
    assert_eq!(merged.id(), s2.model_ids[0]);
    assert_eq!(merged.provenance.get("merge_method").map(String::as_str), Some("ta"));
}

#[test]
fn execute_is_deterministic_across_directories() {
    let outputs = |dir: &Path| {
        let models = write_models(dir);
        let cfg = execute_config(dir, &models, "dare-ties", sh_evaluator("s9", "nothing"));
        run(&cfg, RunMode::Execute, None).unwrap();
        let mut files = BTreeMap::new();
        for stage in 1..=3 {
            for entry in fs::read_dir(cfg.output_path().join(format!("stage{stage}"))).unwrap() {
                let path = entry.unwrap().path();
                files.insert(path.file_name().unwrap().to_owned(), fs::read(&path).unwrap());
            }
        }
        files.insert("state.json".into(), fs::read(cfg.output_path().join("state.json")).unwrap());
        files
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (fa, fb) = (outputs(a.path()), outputs(b.path()));
    assert_eq!(fa.len(), 2 * 3 * 2 + 2 * 2 + 2 * 2 + 1);
    assert_eq!(fa, fb);
}

#[test]
fn evaluator_failure_is_recorded_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let models = write_models(dir.path());
    let failing = execute_config(dir.path(), &models, "ties", sh_evaluator("g1", "s2-"));
    let err = run(&failing, RunMode::Execute, None).unwrap_err();
    let PipelineError::Evaluator { model_id, message } = &err else { panic!("{err}") };
    assert!(model_id.starts_with("s2-ties-"));
    assert!(message.contains("boom"));

    let out = failing.output_path();
    let state = PipelineState::load(&out.join("state.json")).unwrap();
    assert_eq!(state.last_error.as_ref().unwrap().model_id, *model_id);
    assert!(state.stage1.is_some() && state.stage2.is_none());
    let s1 = SweepManifest::load(&out.join(SweepManifest::file_name(1))).unwrap();
    assert!(s1.entries.iter().all(|e| e.status == EntryStatus::Scored));
    let s2 = SweepManifest::load(&out.join(SweepManifest::file_name(2))).unwrap();
    assert_eq!(s2.entries[0].status, EntryStatus::Merged);
    assert!(s2.entries[1..].iter().all(|e| e.status == EntryStatus::Planned));

    let fixed = execute_config(dir.path(), &models, "ties", sh_evaluator("g1", "nothing"));
    let report = run(&fixed, RunMode::Execute, None).unwrap();
    assert_eq!(report.outcome, Outcome::Complete);
    assert!(report.state.last_error.is_none());
    assert_eq!(report.state.stage1, state.stage1);
}

#[test]
fn malformed_evaluator_output_is_an_evaluator_error() {
    let dir = tempfile::tempdir().unwrap();
    let models = write_models(dir.path());
    let cfg = execute_config(
        dir.path(),
        &models,
        "ta",
        json!({"command": ["sh", "-c", "printf '{' > \"$0\"", "{out}"]}),
    );
    let err = run(&cfg, RunMode::Execute, None).unwrap_err();
    assert!(matches!(err, PipelineError::Evaluator { ref message, .. } if message.contains("malformed")));
    let state = PipelineState::load(&cfg.output_path().join("state.json")).unwrap();
    assert_eq!(state.last_error.unwrap().model_id, "s1-ta-f-g0.5");
}

#[test]
fn two_domain_pipeline_skips_stage_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({
        "method": "ta", "base": "b", "output_dir": dir.path(),
        "domains": {"f": "f", "m": "m"}, "grid": [0.5],
    }));
    let state = drive_resume(&cfg, &["t"], |_, _| 1.0);
    assert_eq!(state.stage3, Some(Stage3Outcome::Skipped));
    assert_eq!(state.final_model.unwrap().stage, 2);
    assert!(!dir.path().join(SweepManifest::file_name(3)).exists());
}
