//! Accuracy-versus-task curves as a standalone SVG.

use std::fmt::Write as _;

use ttacil_core::protocol::Method;

use crate::report::dedup;
use crate::runner::RunRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

/// Mean accuracy after each task, per method, on clean data at the base
/// ordering and grid point.
pub fn curves(records: &[RunRecord]) -> Vec<(Method, Vec<f64>)> {
    let records = dedup(records);
    Method::ALL
        .into_iter()
        .filter_map(|m| {
            let rs: Vec<&RunRecord> = records
                .iter()
                .copied()
                .filter(|r| {
                    r.spec.method == m && r.spec.corruption.is_none() && r.spec.ordering == r.base_ordering() && r.at_base_variant()
                })
                .collect();
            let tasks = rs.iter().map(|r| r.metrics.per_task.len()).min()?;
            let mean = (0..tasks)
                .map(|t| rs.iter().map(|r| r.metrics.per_task[t]).sum::<f64>() / rs.len() as f64)
                .collect();
            Some((m, mean))
        })
        .collect()
}

pub fn render_svg(curves: &[(Method, Vec<f64>)]) -> String {
    let tasks = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(1).max(2);
    let x = |t: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * t as f64 / (tasks - 1) as f64;
    let y = |a: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * a;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for i in 0..=5 {
        let a = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2:.1}" y="{3:.1}" text-anchor="end">{4}</text>"##,
            y(a),
            WIDTH - MARGIN,
            MARGIN - 6.0,
            y(a) + 4.0,
            (a * 100.0).round()
        );
    }
    for t in 0..tasks {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x(t), HEIGHT - MARGIN + 18.0, t + 1);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">task</text><text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">accuracy (%)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (i, (method, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = curve.iter().enumerate().map(|(t, &a)| format!("{:.1},{:.1}", x(t), y(a))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        for p in &points {
            let (px, py) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="{color}" stroke-width="2"/><text x="{3:.1}" y="{4:.1}">{method}</text>"#,
            WIDTH - MARGIN - 150.0,
            ly,
            WIDTH - MARGIN - 130.0,
            WIDTH - MARGIN - 124.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_curve() {
        let svg = render_svg(&[(Method::FrozenPc, vec![0.9, 0.8, 0.7]), (Method::Ttacil, vec![0.95, 0.85, 0.75])]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 6);
        assert!(svg.contains(">ttacil</text>"));
    }

    #[test]
    fn accuracy_maps_inside_the_frame() {
        let svg = render_svg(&[(Method::FrozenPc, vec![0.0, 1.0])]);
        assert!(svg.contains(&format!("{:.1},{:.1}", MARGIN, HEIGHT - MARGIN)));
        assert!(svg.contains(&format!("{:.1},{:.1}", WIDTH - MARGIN, MARGIN)));
    }
}
