//! SVG line charts of learning curves: one panel per per-class size, one
//! line per topology, mean accuracy over seeds against examples seen.

use std::fmt::Write;

use super::curve::LearningCurve;
use crate::composite::Topology;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 40.0;

fn color(t: Topology) -> &'static str {
    match t {
        Topology::Finetune => "#d62728",
        Topology::TwoTowers => "#1f77b4",
        Topology::Stitch => "#2ca02c",
        Topology::Scratch => "#7f7f7f",
    }
}

pub fn plot_svg(curve: &LearningCurve) -> String {
    let mut per_class: Vec<usize> = curve.rows.iter().map(|r| r.per_class).collect();
    per_class.sort_unstable();
    per_class.dedup();
    let mut topologies: Vec<Topology> = curve.rows.iter().map(|r| r.topology).collect();
    topologies.sort();
    topologies.dedup();

    let width = MARGIN + per_class.len().max(1) as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.0 * MARGIN + 20.0 * topologies.len() as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (p, &pc) in per_class.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let xmax = curve
            .rows
            .iter()
            .filter(|r| r.per_class == pc)
            .map(|r| r.examples_seen)
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">per_class = {pc}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 - 8.0
        )
        .unwrap();
        for tick in [0.0, 0.5, 1.0] {
            let y = y0 + PANEL_H * (1.0 - tick);
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#, x0 - 4.0, y + 4.0).unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{xmax}</text>"#,
            x0 + PANEL_W,
            y0 + PANEL_H + 14.0
        )
        .unwrap();
        for &t in &topologies {
            let pts: Vec<String> = curve
                .mean_series(t, pc)
                .iter()
                .map(|&(x, a)| {
                    format!(
                        "{:.2},{:.2}",
                        x0 + PANEL_W * x as f64 / xmax,
                        y0 + PANEL_H * (1.0 - a)
                    )
                })
                .collect();
            if !pts.is_empty() {
                writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                    color(t),
                    pts.join(" ")
                )
                .unwrap();
            }
        }
    }
    for (i, t) in topologies.iter().enumerate() {
        let y = MARGIN + PANEL_H + 34.0 + 20.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{t}</text>"#,
            MARGIN + 24.0,
            color(*t),
            MARGIN + 30.0,
            y + 4.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::curve::CurveRow;

    #[test]
    fn one_polyline_per_topology_and_panel() {
        let mut c = LearningCurve::default();
        for pc in [1, 2] {
            for t in [Topology::Finetune, Topology::Stitch] {
                for b in 0..3 {
                    c.rows.push(CurveRow {
                        seed: 0,
                        topology: t,
                        per_class: pc,
                        examples_seen: 10 * (b + 1),
                        batch_index: b as usize,
                        test_accuracy: 0.3,
                    });
                }
            }
        }
        let svg = plot_svg(&c);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("per_class = 2"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(plot_svg(&c), svg);
    }
}
