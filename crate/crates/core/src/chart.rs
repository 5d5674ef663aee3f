//! Minimal SVG line chart of median loss against round `t`.
//!
//! One panel per `(M, p)`; within a panel each remaining cell coordinate
//! (n₀, heterogeneity, graph, rule) is one solid line, and the pooled oracle
//! median, when present, is a dashed horizontal line in the same colour.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::eval::{summarize, ExperimentResults};

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;
const LEGEND_H: f64 = 18.0;
const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

struct Line {
    label: String,
    medians: Vec<f64>,
    baseline: Option<f64>,
}

fn median_or_nan(values: &[f64]) -> f64 {
    summarize(values).map_or(f64::NAN, |s| s.median)
}

/// Renders the chart of `stat` (one of the reduction names).
pub fn render_svg(results: &ExperimentResults, stat: &str) -> String {
    let mut panels: BTreeMap<(usize, usize), Vec<Line>> = BTreeMap::new();
    for c in &results.cells {
        let medians = (0..=results.rounds).map(|t| median_or_nan(&c.round_values(t, stat))).collect();
        let baseline = results
            .baseline
            .then(|| median_or_nan(&c.baseline_values(stat)))
            .filter(|b| b.is_finite());
        let cell = &c.cell;
        panels.entry((cell.sites, cell.p)).or_default().push(Line {
            label: format!("n0={} h={} {} {}", cell.n0, cell.hete_ratio, cell.graph, cell.rule),
            medians,
            baseline,
        });
    }

    let cols = panels.len().clamp(1, 3);
    let rows = panels.len().div_ceil(cols).max(1);
    let max_lines = panels.values().map(Vec::len).max().unwrap_or(0);
    let cell_h = PANEL_H + LEGEND_H * max_lines as f64;
    let width = PANEL_W * cols as f64;
    let height = cell_h * rows as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if panels.is_empty() {
        let _ = writeln!(svg, r#"<text x="20" y="40">no data</text>"#);
    }
    for (i, ((m, p), lines)) in panels.iter().enumerate() {
        let ox = PANEL_W * (i % cols) as f64;
        let oy = cell_h * (i / cols) as f64;
        panel(&mut svg, ox, oy, *m, *p, lines, results.rounds, stat);
    }
    svg.push_str("</svg>\n");
    svg
}

#[allow(clippy::too_many_arguments)]
fn panel(svg: &mut String, ox: f64, oy: f64, m: usize, p: usize, lines: &[Line], rounds: usize, stat: &str) {
    let x0 = ox + MARGIN_L;
    let x1 = ox + PANEL_W - MARGIN_R;
    let y0 = oy + PANEL_H - MARGIN_B;
    let y1 = oy + MARGIN_T;

    let finite = lines
        .iter()
        .flat_map(|l| l.medians.iter().copied().chain(l.baseline))
        .filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() {
        let lo = lo.min(0.0);
        (lo, if hi > lo { hi * 1.05 } else { lo + 1.0 })
    } else {
        (0.0, 1.0)
    };
    let sx = |t: f64| x0 + if rounds == 0 { 0.5 } else { t / rounds as f64 } * (x1 - x0);
    let sy = |v: f64| y0 - (v - lo) / (hi - lo) * (y0 - y1);

    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">M = {m}, p = {p}</text>"#, (x0 + x1) / 2.0, oy + 20.0);
    let _ = writeln!(svg, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x1:.1}" y2="{y0:.1}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{y1:.1}" stroke="black"/>"#);
    for t in 0..=rounds {
        let x = sx(t as f64);
        let _ = writeln!(svg, r#"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, y0 + 4.0);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, y0 + 16.0);
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(svg, r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0:.1}" y2="{y:.1}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">t</text>"#, (x0 + x1) / 2.0, y0 + 32.0);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">median {stat}</text>"#,
        ox + 14.0,
        (y0 + y1) / 2.0,
        ox + 14.0,
        (y0 + y1) / 2.0
    );

    for (k, line) in lines.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = line
            .medians
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(t, &v)| format!("{:.1},{:.1}", sx(t as f64), sy(v)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, pts.join(" "));
            for pt in &pts {
                let (x, y) = pt.split_once(',').expect("formatted point");
                let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="{colour}"/>"#);
            }
        }
        if let Some(b) = line.baseline {
            let y = sy(b);
            let _ = writeln!(svg, r#"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="{colour}" stroke-dasharray="6 4"/>"#);
        }
        let ly = oy + PANEL_H + LEGEND_H * k as f64 - 8.0;
        let _ = writeln!(svg, r#"<line x1="{x0:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/>"#, x0 + 18.0);
        let suffix = if line.baseline.is_some() { " (dashed: pooled oracle)" } else { "" };
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}{suffix}</text>"#, x0 + 24.0, ly + 4.0, line.label);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::GraphKind;
    use crate::eval::{Cell, CellOutcome, LossKind, Reductions, Replication};
    use crate::threshold::ThresholdFamily;

    fn red(v: f64) -> Reductions {
        Reductions { one: v, two: v, inf: v, frobenius_sq_over_p: v }
    }

    fn outcome(sites: usize, p: usize) -> CellOutcome {
        CellOutcome {
            cell: Cell { n0: 100, p, sites, hete_ratio: 0.0, graph: GraphKind::ErdosRenyi, rule: ThresholdFamily::Scad },
            replications: vec![Replication {
                rep: 0,
                series: vec![red(3.0), red(2.0), red(1.0)],
                baseline: Some(red(1.5)),
                heterogeneity_f1: f64::NAN,
            }],
            failures: vec![],
        }
    }

    fn results(cells: Vec<CellOutcome>) -> ExperimentResults {
        ExperimentResults { cells, rounds: 2, loss: LossKind::L1, r: 1.0, baseline: true, replications: 1, seed: 0 }
    }

    #[test]
    fn one_panel_per_sites_and_dimension() {
        let svg = render_svg(&results(vec![outcome(2, 10), outcome(5, 10), outcome(5, 20)]), "one");
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert_eq!(svg.matches("stroke-dasharray").count(), 3);
        assert!(svg.contains("M = 2, p = 10") && svg.contains("M = 5, p = 20"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_results_still_render() {
        let svg = render_svg(&results(vec![]), "one");
        assert!(svg.contains("no data"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let r = results(vec![outcome(5, 10)]);
        assert_eq!(render_svg(&r, "two"), render_svg(&r, "two"));
    }
}
