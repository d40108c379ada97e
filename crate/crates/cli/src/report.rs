use std::fmt::Write as _;
use std::path::Path;

use branchgen_core::branch::read_candidate_log;

use crate::error::{PipelineError, Result};
use crate::pipeline::{
    eval_file, read_eval_summary, read_filter_summary, EvalSummary, RunManifest, Stage, CANDIDATES_FILE, FILTER_FILE,
};

fn score_line(out: &mut String, label: &str, s: &EvalSummary) {
    writeln!(
        out,
        "{label:<12} normalized score {:>6.1}  success rate {:.2}  mean return {:.3}  target RTG {:.3}  (dt seed {}, eval seed {})",
        s.normalized_score, s.success_rate, s.mean_return, s.target_rtg, s.dt_seed, s.seed
    )
    .expect("writing to a string");
}

/// Human-readable summary of a run directory. Needs the eval stage; the
/// baseline line appears when the paired baseline was run.
pub fn report(manifest_path: &Path) -> Result<String> {
    let manifest = RunManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let eval_key = Stage::Eval.key(false);
    if !manifest.stages.contains_key(&eval_key) {
        return Err(PipelineError::MissingStage { stage: "report".into(), needed: eval_key });
    }
    let mut out = String::new();
    writeln!(out, "config {}  master seed {}  {}", manifest.config_hash, manifest.master_seed, manifest.version)
        .expect("writing to a string");
    if manifest.stages.contains_key(&Stage::Eval.key(true)) {
        score_line(&mut out, "DT-baseline", &read_eval_summary(&dir.join(eval_file(true)))?);
    }
    score_line(&mut out, "BG+DT", &read_eval_summary(&dir.join(eval_file(false)))?);

    let candidates = read_candidate_log(dir.join(CANDIDATES_FILE))?;
    let accepted = candidates.iter().filter(|c| c.accepted).count();
    let rate = if candidates.is_empty() { 0.0 } else { accepted as f64 / candidates.len() as f64 };
    let filter = read_filter_summary(&dir.join(FILTER_FILE))?;
    let delta = match (filter.enabled, filter.delta) {
        (false, _) => "off".to_string(),
        (true, Some(d)) => format!("{d:.6} (p = {})", filter.percentile),
        (true, None) => "uncalibrated".to_string(),
    };
    writeln!(out, "branches     accepted {accepted} of {} (rate {rate:.3}), filter threshold {delta}", candidates.len())
        .expect("writing to a string");
    out.push_str("stage seeds ");
    for (name, record) in &manifest.stages {
        write!(out, " {name}={}", record.seed).expect("writing to a string");
    }
    out.push('\n');
    Ok(out)
}
