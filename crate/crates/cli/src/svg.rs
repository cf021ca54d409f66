//! Minimal SVG charts: a bar plot of influence weights against lag and a
//! line plot of ablation performance against window size.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

struct Canvas {
    body: String,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(body, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        Self { body }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, style: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" {style}/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn axes(&mut self, x_label: &str, y_label: &str) {
        let (x0, y0) = (LEFT, HEIGHT - BOTTOM);
        self.line(x0, y0, WIDTH - RIGHT, y0, r#"stroke="black""#);
        self.line(x0, TOP, x0, y0, r#"stroke="black""#);
        self.text((LEFT + WIDTH - RIGHT) / 2.0, HEIGHT - 10.0, "middle", x_label);
        let _ = writeln!(
            self.body,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            (TOP + y0) / 2.0,
            (TOP + y0) / 2.0,
            escape(y_label)
        );
    }

    fn y_ticks(&mut self, y_max: f64) {
        for i in 0..=4 {
            let v = y_max * i as f64 / 4.0;
            let y = y_pos(v, y_max);
            self.line(LEFT - 4.0, y, LEFT, y, r#"stroke="black""#);
            self.text(LEFT - 6.0, y + 4.0, "end", &format!("{v:.3}"));
        }
    }

    fn marker(&mut self, x: f64, label: &str) {
        self.line(x, TOP, x, HEIGHT - BOTTOM, r#"stroke="crimson" stroke-dasharray="4 3""#);
        self.text(x + 4.0, TOP + 12.0, "start", label);
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_pos(v: f64, y_max: f64) -> f64 {
    let span = HEIGHT - TOP - BOTTOM;
    HEIGHT - BOTTOM - span * (v / y_max).clamp(0.0, 1.0)
}

fn nice_max(v: f64) -> f64 {
    if v.is_finite() && v > 0.0 {
        v * 1.05
    } else {
        1.0
    }
}

/// Bars of `weights_by_lag[l]` at lag `l`, with a marker at `rho_hat`.
pub fn profile_chart(title: &str, weights_by_lag: &[f64], rho_hat: Option<f64>) -> String {
    let mut c = Canvas::new(title);
    let n = weights_by_lag.len().max(1);
    let y_max = nice_max(weights_by_lag.iter().copied().fold(0.0, f64::max));
    c.axes("lag (steps back)", "influence weight");
    c.y_ticks(y_max);
    let plot_w = WIDTH - LEFT - RIGHT;
    let slot = plot_w / n as f64;
    let x_of = |lag: f64| LEFT + slot * (lag + 0.5);
    for (lag, w) in weights_by_lag.iter().enumerate() {
        let y = y_pos(*w, y_max);
        let _ = writeln!(
            c.body,
            r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="steelblue"/>"#,
            LEFT + slot * lag as f64 + slot * 0.1,
            slot * 0.8,
            HEIGHT - BOTTOM - y
        );
    }
    let step = (n / 8).max(1);
    for lag in (0..n).step_by(step) {
        c.text(x_of(lag as f64), HEIGHT - BOTTOM + 16.0, "middle", &lag.to_string());
    }
    match rho_hat {
        Some(r) => c.marker(x_of(r), &format!("rho_hat = {r:.3}")),
        None => c.text(WIDTH - RIGHT, TOP + 12.0, "end", "degenerate: all weights zero"),
    }
    c.finish()
}

/// Normalized performance against window on a log2 axis, with an optional
/// marker at `rho_hat`.
pub fn ablation_chart(title: &str, points: &[(usize, f64)], rho_hat: Option<f64>) -> String {
    let mut c = Canvas::new(title);
    let y_max = nice_max(points.iter().map(|p| p.1).fold(1.0, f64::max));
    c.axes("window m (log2)", "normalized performance");
    c.y_ticks(y_max);
    let lo = points.first().map_or(1.0, |p| p.0 as f64).max(1.0).log2();
    let hi = points.last().map_or(2.0, |p| p.0 as f64).log2().max(lo + 1.0);
    let plot_w = WIDTH - LEFT - RIGHT;
    let x_of = |m: f64| LEFT + plot_w * ((m.max(1.0).log2() - lo) / (hi - lo)).clamp(0.0, 1.0);
    let path: Vec<String> = points
        .iter()
        .map(|&(m, v)| format!("{:.2},{:.2}", x_of(m as f64), y_pos(v, y_max)))
        .collect();
    let _ = writeln!(
        c.body,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path.join(" ")
    );
    for &(m, v) in points {
        let (x, y) = (x_of(m as f64), y_pos(v, y_max));
        let _ = writeln!(c.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="steelblue"/>"#);
        c.text(x, HEIGHT - BOTTOM + 16.0, "middle", &m.to_string());
    }
    if let Some(r) = rho_hat {
        c.marker(x_of(r), &format!("rho_hat = {r:.3}"));
    }
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_has_bars_and_marker() {
        let svg = profile_chart("p", &[0.0, 1.0, 3.0], Some(1.75));
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains("rho_hat = 1.750"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn degenerate_profile_is_labelled() {
        let svg = profile_chart("p", &[0.0, 0.0], None);
        assert!(svg.contains("degenerate"));
        assert!(!svg.contains("stroke-dasharray"));
    }

    #[test]
    fn ablation_marker_optional() {
        let pts = [(1, 0.25), (2, 0.25), (4, 1.0), (8, 1.0)];
        assert!(!ablation_chart("a", &pts, None).contains("stroke-dasharray"));
        let svg = ablation_chart("a", &pts, Some(3.0));
        assert!(svg.contains("stroke-dasharray"));
        assert_eq!(svg.matches("<circle").count(), 4);
    }

    #[test]
    fn titles_are_escaped() {
        assert!(profile_chart("a<b", &[1.0], None).contains("a&lt;b"));
    }
}
