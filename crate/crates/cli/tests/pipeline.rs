use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use branchgen_cli::pipeline::{
    eval_file, read_eval_summary, read_filter_summary, CANDIDATES_FILE, DATASET_FILE, EXPANDED_FILE, FILTER_FILE,
    MANIFEST_FILE, TVF_FILE,
};
use branchgen_cli::plot::render_branches;
use branchgen_cli::report::report;
use branchgen_cli::{smoke_config, stage_seed, Pipeline, PipelineError, RunConfig, RunManifest, Stage};
use branchgen_core::branch::read_candidate_log;
use branchgen_core::dataset::load_dataset;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Smaller than the smoke config; enough for plumbing tests.
fn tiny_config() -> RunConfig {
    let mut c = smoke_config();
    c.dataset.stitch.dead_end_count = 4;
    c.dataset.stitch.goal_count = 4;
    c.tvf.steps = 20;
    c.diffusion.steps = 20;
    c.dt.steps = 20;
    c.eval.episodes = 2;
    c.eval.random_episodes = 4;
    c.eval.expert_episodes = 1;
    c
}

/// One complete paired tiny run shared by the read-only tests.
fn finished_run() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        Pipeline::open(tiny_config(), dir.path(), None).unwrap().run_all().unwrap();
        dir
    })
    .path()
}

fn branchgen(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_branchgen")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn smoke_file_matches_builtin_smoke_config() {
    let file = RunConfig::load(workspace_root().join("configs/smoke.toml")).unwrap();
    assert_eq!(file, smoke_config());
}

#[test]
fn shipped_configs_are_valid() {
    for name in ["smoke.toml", "stitch.toml"] {
        RunConfig::load(workspace_root().join("configs").join(name)).unwrap();
    }
}

#[test]
fn config_round_trips_through_toml() {
    let c = tiny_config();
    let back = RunConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(matches!(RunConfig::from_toml("sed = 3\n"), Err(PipelineError::Config(_))));
    assert!(RunConfig::from_toml("[tvf]\ntau = 1.5\n").is_err());
}

#[test]
fn config_hash_changes_iff_a_field_changes() {
    let base = tiny_config();
    assert_eq!(base.hash(), base.clone().hash());
    let mutations: Vec<fn(&mut RunConfig)> = vec![
        |c| c.seed += 1,
        |c| c.maze.physics.dt *= 2.0,
        |c| c.dataset.stitch.goal_count += 1,
        |c| c.dataset.stitch.goal_noise += 0.01,
        |c| c.tvf.tau = 0.8,
        |c| c.tvf.w = 0.0,
        |c| c.tvf.gamma = 0.98,
        |c| c.diffusion.sigma_steps += 1,
        |c| c.diffusion.sigma_max = 40.0,
        |c| c.filter.percentile = 80.0,
        |c| c.filter.enabled = false,
        |c| c.filter.budget_fraction = 0.5,
        |c| c.dt.context += 1,
        |c| c.eval.episodes += 1,
        |c| c.eval.target_rtg_scale = 1.5,
    ];
    for (i, mutate) in mutations.iter().enumerate() {
        let mut c = base.clone();
        mutate(&mut c);
        assert_ne!(c.hash(), base.hash(), "mutation {i} left the hash unchanged");
    }
}

#[test]
fn stage_seeds_differ_by_stage_and_master() {
    let seeds: Vec<u64> = Stage::ALL.iter().map(|s| stage_seed(s.name(), 0)).collect();
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            assert_ne!(seeds[i], seeds[j]);
        }
    }
    assert_ne!(stage_seed("collect", 0), stage_seed("collect", 1));
    assert_eq!(stage_seed("collect", 7), stage_seed("collect", 7));
}

#[test]
fn expand_before_gen_branches_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(tiny_config(), dir.path(), None).unwrap();
    p.run(Stage::Collect, false).unwrap();
    p.run(Stage::TrainTvf, false).unwrap();
    let err = p.run(Stage::Expand, false).unwrap_err();
    match &err {
        PipelineError::MissingStage { needed, .. } => assert_eq!(needed, "gen-branches"),
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("gen-branches"));
}

#[test]
fn missing_artifact_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(tiny_config(), dir.path(), None).unwrap();
    p.run(Stage::Collect, false).unwrap();
    std::fs::remove_file(dir.path().join(DATASET_FILE)).unwrap();
    assert!(matches!(p.run(Stage::TrainTvf, false), Err(PipelineError::MissingArtifact { .. })));
}

#[test]
fn config_mismatch_with_existing_artifacts_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::open(tiny_config(), dir.path(), None).unwrap().run(Stage::Collect, false).unwrap();
    let mut other = tiny_config();
    other.seed = 1;
    assert!(matches!(Pipeline::open(other, dir.path(), None), Err(PipelineError::ConfigMismatch { .. })));
    assert!(Pipeline::open(tiny_config(), dir.path(), None).is_ok());
}

#[test]
fn rerunning_a_stage_gives_identical_bytes_and_drops_downstream_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(tiny_config(), dir.path(), None).unwrap();
    p.run(Stage::Collect, false).unwrap();
    p.run(Stage::TrainTvf, false).unwrap();
    let dataset = std::fs::read(dir.path().join(DATASET_FILE)).unwrap();
    let tvf = std::fs::read(dir.path().join(TVF_FILE)).unwrap();

    p.run(Stage::TrainTvf, false).unwrap();
    assert_eq!(std::fs::read(dir.path().join(TVF_FILE)).unwrap(), tvf);
    p.run(Stage::Collect, false).unwrap();
    assert_eq!(std::fs::read(dir.path().join(DATASET_FILE)).unwrap(), dataset);
    assert!(!p.manifest().stages.contains_key("train-tvf"));
    assert!(matches!(p.run(Stage::GenBranches, false), Err(PipelineError::MissingStage { .. })));
}

#[test]
fn seed_override_applies_to_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::open(tiny_config(), dir.path(), Some(42)).unwrap();
    for s in Stage::ALL {
        assert_eq!(p.seed(s), 42);
    }
    let q = Pipeline::open(tiny_config(), dir.path(), None).unwrap();
    assert_eq!(q.seed(Stage::Collect), stage_seed("collect", 0));
}

#[test]
fn full_run_records_every_stage_in_the_manifest() {
    let dir = finished_run();
    let m = RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.config_hash, tiny_config().hash());
    for s in Stage::ALL {
        let record = &m.stages[&s.key(false)];
        assert!(!record.artifacts.is_empty());
        for a in &record.artifacts {
            assert!(dir.join(a).exists(), "{a} missing");
        }
    }
    assert!(m.stages.contains_key("train-dt-baseline"));
    assert!(m.stages.contains_key("eval-baseline"));
    assert_eq!(m.stages["train-dt"].seed, m.stages["train-dt-baseline"].seed);
    assert_eq!(m.stages["eval"].seed, m.stages["eval-baseline"].seed);
}

#[test]
fn expanded_dataset_holds_the_accepted_branches() {
    let dir = finished_run();
    let ds = load_dataset(dir.join(DATASET_FILE)).unwrap();
    let expanded = load_dataset(dir.join(EXPANDED_FILE)).unwrap();
    let accepted = read_candidate_log(dir.join(CANDIDATES_FILE)).unwrap().iter().filter(|c| c.accepted).count();
    assert_eq!(expanded.len(), ds.len() + accepted);
}

#[test]
fn report_lists_both_runs_with_identical_seeds_and_exact_acceptance_rate() {
    let dir = finished_run();
    let text = report(&dir.join(MANIFEST_FILE)).unwrap();
    let base = read_eval_summary(&dir.join(eval_file(true))).unwrap();
    let full = read_eval_summary(&dir.join(eval_file(false))).unwrap();
    assert_eq!((base.seed, base.dt_seed), (full.seed, full.dt_seed));
    let seeds = format!("(dt seed {}, eval seed {})", full.dt_seed, full.seed);
    let lines: Vec<&str> = text.lines().collect();
    let base_line = lines.iter().find(|l| l.starts_with("DT-baseline")).expect("baseline line");
    let full_line = lines.iter().find(|l| l.starts_with("BG+DT")).expect("BG+DT line");
    assert!(base_line.ends_with(&seeds) && full_line.ends_with(&seeds));

    let candidates = read_candidate_log(dir.join(CANDIDATES_FILE)).unwrap();
    let accepted = candidates.iter().filter(|c| c.accepted).count();
    let filter = read_filter_summary(&dir.join(FILTER_FILE)).unwrap();
    assert_eq!(filter.attempted, candidates.len());
    assert_eq!(filter.accepted, accepted);
    let rate = accepted as f64 / candidates.len() as f64;
    let expected = format!("accepted {accepted} of {} (rate {rate:.3})", candidates.len());
    assert!(text.contains(&expected), "{text}");
}

#[test]
fn report_without_eval_names_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(tiny_config(), dir.path(), None).unwrap();
    p.run(Stage::Collect, false).unwrap();
    let err = report(&dir.path().join(MANIFEST_FILE)).unwrap_err();
    assert!(matches!(&err, PipelineError::MissingStage { needed, .. } if needed == "eval"));
    assert!(err.to_string().contains("eval"));
}

fn parse_svg(svg: &str) -> roxmltree::Document<'_> {
    roxmltree::Document::parse(svg).expect("well-formed SVG")
}

fn polylines<'a>(doc: &'a roxmltree::Document<'a>, class: &str) -> Vec<roxmltree::Node<'a, 'a>> {
    doc.descendants().filter(|n| n.has_tag_name("polyline") && n.attribute("class") == Some(class)).collect()
}

#[test]
fn plot_with_empty_log_shows_dataset_only() {
    let dir = finished_run();
    let config = tiny_config();
    let spec = config.maze_spec().unwrap();
    let ds = load_dataset(dir.join(DATASET_FILE)).unwrap();
    let svg = render_branches(&spec, &ds, &[]);
    let doc = parse_svg(&svg);
    assert!(!polylines(&doc, "trajectory").is_empty());
    assert!(polylines(&doc, "branch").is_empty());
    assert!(doc.descendants().any(|n| n.attribute("class") == Some("goal")));
    assert!(doc.descendants().any(|n| n.attribute("class") == Some("walls")));
}

#[test]
fn plot_draws_h_points_per_accepted_branch() {
    let dir = finished_run();
    let config = tiny_config();
    let out = dir.join("test-branches.svg");
    branchgen_cli::plot::plot_branches(
        &config.maze_spec().unwrap(),
        &dir.join(DATASET_FILE),
        &dir.join(CANDIDATES_FILE),
        &out,
    )
    .unwrap();
    let svg = std::fs::read_to_string(&out).unwrap();
    let doc = parse_svg(&svg);
    let accepted = read_candidate_log(dir.join(CANDIDATES_FILE)).unwrap().into_iter().filter(|c| c.accepted).count();
    let branches = polylines(&doc, "branch");
    assert_eq!(branches.len(), accepted);
    assert_eq!(polylines(&doc, "condition").len(), accepted);
    for b in branches {
        assert_eq!(b.attribute("points").unwrap().split_whitespace().count(), config.diffusion.h);
    }
}

#[test]
fn plot_of_unreadable_artifacts_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_config().maze_spec().unwrap();
    let missing = dir.path().join("nothing");
    assert!(branchgen_cli::plot::plot_branches(&spec, &missing, &missing, &dir.path().join("x.svg")).is_err());
}

#[test]
fn exit_codes_follow_usage_and_pipeline_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, tiny_config().to_toml()).unwrap();
    let out = dir.path().join("run");
    let (config, out) = (config.to_str().unwrap(), out.to_str().unwrap());

    assert_eq!(branchgen(&["--help"]).status.code(), Some(0));
    assert_eq!(branchgen(&[]).status.code(), Some(1));
    assert_eq!(branchgen(&["collect"]).status.code(), Some(1));
    assert_eq!(branchgen(&["frobnicate", "--config", config]).status.code(), Some(1));
    assert_eq!(branchgen(&["collect", "--config", "/nonexistent.toml"]).status.code(), Some(1));

    assert_eq!(branchgen(&["collect", "--config", config, "--out-dir", out]).status.code(), Some(0));
    let failed = branchgen(&["expand", "--config", config, "--out-dir", out]);
    assert_eq!(failed.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("train-tvf"));
    let report = branchgen(&["report", "--config", config, "--out-dir", out]);
    assert_eq!(report.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&report.stderr).contains("eval"));
}

#[test]
fn misspelled_nested_keys_are_rejected() {
    for text in ["[tvf]\ntua = 0.8\n", "[dataset.stitch]\ngoal_cont = 3\n", "[maze.physics]\nvmaxx = 1.0\n"] {
        assert!(matches!(RunConfig::from_toml(text), Err(PipelineError::Config(_))), "{text}");
    }
}
