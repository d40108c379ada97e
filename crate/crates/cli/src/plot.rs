use std::fmt::Write as _;
use std::path::Path;

use branchgen_core::branch::{read_candidate_log, BranchCandidate};
use branchgen_core::dataset::{load_dataset, Dataset};
use branchgen_core::env::MazeSpec;

use crate::error::{PipelineError, Result};

const PX_PER_UNIT: f64 = 60.0;
/// Steps per colored piece of a dataset trajectory.
const PIECE_STEPS: usize = 20;
const LIGHT: [f64; 3] = [198.0, 219.0, 239.0];
const DARK: [f64; 3] = [8.0, 48.0, 107.0];

fn shade(frac: f64) -> String {
    let c: Vec<u8> = LIGHT.iter().zip(DARK).map(|(l, d)| (l + (d - l) * frac.clamp(0.0, 1.0)).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn points<'a>(xy: impl Iterator<Item = &'a [f64]>) -> String {
    let mut out = String::new();
    for p in xy {
        if !out.is_empty() {
            out.push(' ');
        }
        write!(out, "{:.2},{:.2}", p[0] * PX_PER_UNIT, p[1] * PX_PER_UNIT).expect("writing to a string");
    }
    out
}

/// SVG of the maze, the dataset trajectories shaded light to dark along
/// time, and the accepted branches with their condition segments.
pub fn render_branches(spec: &MazeSpec, dataset: &Dataset, candidates: &[BranchCandidate]) -> String {
    let (w, h) = (spec.cols() as f64 * spec.cell_size * PX_PER_UNIT, spec.rows() as f64 * spec.cell_size * PX_PER_UNIT);
    let mut svg = String::new();
    let mut line = |s: String| {
        svg.push_str(&s);
        svg.push('\n');
    };
    line(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    ));
    line(format!(r##"<rect x="0" y="0" width="{w:.0}" height="{h:.0}" fill="#ffffff"/>"##));
    line(r##"<g class="walls" fill="#444444">"##.into());
    let cell = spec.cell_size * PX_PER_UNIT;
    for (r, row) in spec.walls.iter().enumerate() {
        for (c, &wall) in row.iter().enumerate() {
            if wall {
                line(format!(
                    r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}"/>"#,
                    c as f64 * cell,
                    r as f64 * cell
                ));
            }
        }
    }
    line("</g>".into());
    let (s0, s1) = (spec.start.min, spec.start.max);
    line(format!(
        r##"<rect class="start" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#2ca02c" stroke-dasharray="4 3"/>"##,
        s0[0] * PX_PER_UNIT,
        s0[1] * PX_PER_UNIT,
        (s1[0] - s0[0]) * PX_PER_UNIT,
        (s1[1] - s0[1]) * PX_PER_UNIT
    ));
    line(format!(
        r##"<circle class="goal" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#2ca02c" fill-opacity="0.35" stroke="#2ca02c"/>"##,
        spec.goal[0] * PX_PER_UNIT,
        spec.goal[1] * PX_PER_UNIT,
        spec.goal_radius * PX_PER_UNIT
    ));

    line(r#"<g class="dataset" fill="none" stroke-width="1" stroke-opacity="0.6">"#.into());
    let ds = dataset.state_dim();
    for traj in dataset.trajectories() {
        let len = traj.len();
        let mut start = 0;
        while start + 1 < len {
            let end = (start + PIECE_STEPS).min(len - 1);
            let frac = (start + end) as f64 / 2.0 / (len - 1) as f64;
            let pts = points((start..=end).map(|t| &traj.states[t * ds..t * ds + 2]));
            line(format!(r#"<polyline class="trajectory" stroke="{}" points="{pts}"/>"#, shade(frac)));
            start = end;
        }
    }
    line("</g>".into());

    line(r#"<g class="branches" fill="none">"#.into());
    for c in candidates.iter().filter(|c| c.accepted) {
        let cond = points(c.condition.iter().map(|r| &r[..2]));
        let branch = points(c.branch.iter().map(|r| &r[..2]));
        line(format!(
            r##"<polyline class="condition" stroke="#ff7f0e" stroke-width="3" points="{cond}" data-source="{} {}"/>"##,
            c.n, c.t
        ));
        line(format!(r##"<polyline class="branch" stroke="#d62728" stroke-width="2" points="{branch}"/>"##));
    }
    line("</g>".into());
    line("</svg>".into());
    svg
}

/// Read the artifacts and write the figure.
pub fn plot_branches(spec: &MazeSpec, dataset_path: &Path, candidates_path: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(dataset_path)?;
    let candidates = read_candidate_log(candidates_path)?;
    let svg = render_branches(spec, &dataset, &candidates);
    std::fs::write(out, svg).map_err(|e| PipelineError::io(out, e))
}
