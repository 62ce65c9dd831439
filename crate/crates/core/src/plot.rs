//! F1 learning curves: mean ± standard error over repetitions, rendered as SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LseError, Result};
use crate::experiment::TraceRow;

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub n_sampled: f64,
    pub mean_super: f64,
    pub stderr_super: f64,
    pub mean_sub: f64,
    pub stderr_sub: f64,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodCurve {
    pub method: String,
    pub points: Vec<CurvePoint>,
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Groups rows by method (first-seen order) and iteration.
pub fn summarize(rows: &[TraceRow]) -> Vec<MethodCurve> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(usize, usize), Vec<&TraceRow>> = BTreeMap::new();
    for r in rows {
        let m = match order.iter().position(|m| *m == r.method) {
            Some(m) => m,
            None => {
                order.push(r.method.clone());
                order.len() - 1
            }
        };
        groups.entry((m, r.iteration)).or_default().push(r);
    }
    order
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let points = groups
                .range((m, 0)..=(m, usize::MAX))
                .map(|(&(_, iteration), g)| {
                    let sup: Vec<f64> = g.iter().map(|r| r.f1_super).collect();
                    let sub: Vec<f64> = g.iter().map(|r| r.f1_sub).collect();
                    let (mean_super, stderr_super) = mean_stderr(&sup);
                    let (mean_sub, stderr_sub) = mean_stderr(&sub);
                    CurvePoint {
                        iteration,
                        n_sampled: g.iter().map(|r| r.n_sampled as f64).sum::<f64>()
                            / g.len() as f64,
                        mean_super,
                        stderr_super,
                        mean_sub,
                        stderr_sub,
                        repetitions: g.len(),
                    }
                })
                .collect();
            MethodCurve {
                method: name.clone(),
                points,
            }
        })
        .collect()
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 50.0;

/// Two panels (F1 of the super- and sub-level set) with shaded ±1 SE bands.
pub fn render_svg(curves: &[MethodCurve]) -> Result<String> {
    if curves.iter().all(|c| c.points.is_empty()) {
        return Err(LseError::invalid("nothing to plot"));
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in curves.iter().flat_map(|c| &c.points) {
        x_min = x_min.min(p.n_sampled);
        x_max = x_max.max(p.n_sampled);
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    let width = 2.0 * (PANEL_W + 2.0 * MARGIN);
    let height = PANEL_H + 2.0 * MARGIN + 20.0 * curves.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for (panel, title) in ["F1 (super-level set)", "F1 (sub-level set)"]
        .iter()
        .enumerate()
    {
        let ox = MARGIN + panel as f64 * (PANEL_W + 2.0 * MARGIN);
        let oy = MARGIN;
        let sx = |x: f64| ox + (x - x_min) / (x_max - x_min) * PANEL_W;
        let sy = |y: f64| oy + (1.0 - y.clamp(0.0, 1.0)) * PANEL_H;
        let _ = writeln!(
            svg,
            r#"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{title}</text>"#,
            ox + PANEL_W / 2.0,
            oy - 10.0
        );
        for t in 0..=4 {
            let y = t as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{y:.2}</text>"#,
                ox - 5.0,
                sy(y) + 4.0
            );
            let x = x_min + (x_max - x_min) * t as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{x:.0}</text>"#,
                sx(x),
                oy + PANEL_H + 15.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">samples</text>"#,
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 32.0
        );

        for (ci, curve) in curves.iter().enumerate() {
            let color = PALETTE[ci % PALETTE.len()];
            let stat = |p: &CurvePoint| {
                if panel == 0 {
                    (p.mean_super, p.stderr_super)
                } else {
                    (p.mean_sub, p.stderr_sub)
                }
            };
            let upper: Vec<String> = curve
                .points
                .iter()
                .map(|p| {
                    let (m, s) = stat(p);
                    format!("{:.2},{:.2}", sx(p.n_sampled), sy(m + s))
                })
                .collect();
            let lower: Vec<String> = curve
                .points
                .iter()
                .rev()
                .map(|p| {
                    let (m, s) = stat(p);
                    format!("{:.2},{:.2}", sx(p.n_sampled), sy(m - s))
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
            let line: Vec<String> = curve
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", sx(p.n_sampled), sy(stat(p).0)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
    }

    for (ci, curve) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let y = MARGIN + PANEL_H + 50.0 + 20.0 * ci as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN}" y="{}" width="14" height="4" fill="{color}"/>"#,
            y - 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{y}">{}</text>"#,
            MARGIN + 20.0,
            escape(&curve.method)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn emit_plot(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let svg = render_svg(&summarize(rows))?;
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, rep: usize, it: usize, f1: f64) -> TraceRow {
        TraceRow {
            method: method.into(),
            repetition: rep,
            iteration: it,
            n_sampled: 10 + 5 * it,
            f1_super: f1,
            f1_sub: 1.0 - f1,
            threshold: 0.5,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn summary_uses_sample_standard_error() {
        let rows = vec![
            row("a", 0, 0, 0.2),
            row("a", 1, 0, 0.4),
            row("b", 0, 0, 0.9),
        ];
        let curves = summarize(&rows);
        assert_eq!(curves.len(), 2);
        let p = &curves[0].points[0];
        assert!((p.mean_super - 0.3).abs() < 1e-12);
        let expected = (0.02f64 / 2.0).sqrt();
        assert!((p.stderr_super - expected).abs() < 1e-12);
        assert_eq!(curves[1].points[0].stderr_super, 0.0);
    }

    #[test]
    fn svg_contains_each_method() {
        let rows = vec![
            row("exphlse", 0, 0, 0.5),
            row("exphlse", 0, 1, 0.7),
            row("random", 0, 0, 0.3),
        ];
        let svg = render_svg(&summarize(&rows)).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("exphlse") && svg.contains("random"));
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(render_svg(&[]).is_err());
    }
}
