//! Hand-written SVG figures on a fixed 800x500 canvas.
//!
//! The plot area spans `x in [MARGIN_L, WIDTH - MARGIN_R]` and
//! `y in [MARGIN_T, HEIGHT - MARGIN_B]`. A data point `(x, y)` in the
//! frame `[x0, x1] x [y0, y1]` maps to
//!
//! ```text
//! px = MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R)
//! py = HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B)
//! ```
//!
//! so larger values sit higher on the page.

use std::fmt::Write as _;

use saferl_core::online::MetricRow;

use crate::CliError;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;
pub const MARGIN_L: f64 = 70.0;
pub const MARGIN_R: f64 = 20.0;
pub const MARGIN_T: f64 = 40.0;
pub const MARGIN_B: f64 = 50.0;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Frame {
    /// Frame covering the points, padded so that flat series still have
    /// a non-empty range.
    pub fn covering(xs: impl IntoIterator<Item = f64>, ys: impl IntoIterator<Item = f64>) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if lo > hi {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(&mut xs.into_iter());
        let (y0, y1) = span(&mut ys.into_iter());
        Self { x0, x1, y0, y1 }
    }

    pub fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    pub fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

/// Mean and range across seeds at each evaluation step.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Band {
    pub fn from_runs(runs: &[Vec<MetricRow>], value: impl Fn(&MetricRow) -> f64) -> Result<Self, CliError> {
        let first = runs.first().ok_or_else(|| CliError::Input("no metrics files".into()))?;
        for (i, r) in runs.iter().enumerate() {
            if r.len() != first.len() || r.iter().zip(first).any(|(a, b)| a.step != b.step) {
                return Err(CliError::Input(format!("metrics file {} has different evaluation steps than file 1", i + 1)));
            }
        }
        let mut band = Band {
            steps: Vec::new(),
            mean: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
        };
        for (k, row) in first.iter().enumerate() {
            let vals: Vec<f64> = runs.iter().map(|r| value(&r[k])).collect();
            band.steps.push(row.step as f64);
            band.mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
            band.lo.push(vals.iter().cloned().fold(f64::INFINITY, f64::min));
            band.hi.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        Ok(band)
    }
}

fn open(s: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{title}</text>"#, WIDTH / 2.0);
    let (l, r, t, b) = (MARGIN_L, WIDTH - MARGIN_R, MARGIN_T, HEIGHT - MARGIN_B);
    let _ = writeln!(s, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
    for i in 0..=4 {
        let x = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let y = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, f.px(x), b + 18.0, tick(x));
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, l - 6.0, f.py(y) + 4.0, tick(y));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, (l + r) / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{ylabel}</text>"#,
        (t + b) / 2.0
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn polyline(s: &mut String, f: &Frame, xs: &[f64], ys: &[f64], color: &str, extra: &str) {
    let pts: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y))).collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{extra}/>"#,
        pts.join(" ")
    );
}

/// Mean curve with a shaded min-max band; a dashed horizontal line marks
/// `threshold` when given.
pub fn learning_curve(title: &str, ylabel: &str, band: &Band, threshold: Option<f64>) -> String {
    let ys = band.lo.iter().chain(&band.hi).cloned().chain(threshold);
    let f = Frame::covering(band.steps.iter().cloned(), ys);
    let mut s = String::new();
    open(&mut s, title, "step", ylabel, &f);
    let upper = band.steps.iter().zip(&band.hi).map(|(x, y)| (*x, *y));
    let lower = band.steps.iter().zip(&band.lo).rev().map(|(x, y)| (*x, *y));
    let pts: Vec<String> = upper.chain(lower).map(|(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
    let _ = writeln!(s, r#"<polygon class="band" points="{}" fill="{}" fill-opacity="0.25" stroke="none"/>"#, pts.join(" "), COLORS[0]);
    polyline(&mut s, &f, &band.steps, &band.mean, COLORS[0], r#" class="mean""#);
    if let Some(c) = threshold {
        let y = f.py(c);
        let _ = writeln!(
            s,
            r#"<line class="threshold" x1="{MARGIN_L}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="black" stroke-dasharray="6 4"/>"#,
            WIDTH - MARGIN_R
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One curve per run: best evaluation return so far against cumulative
/// cost paid in the environment.
pub fn cost_vs_reward(runs: &[(String, Vec<MetricRow>)]) -> String {
    let xs = runs.iter().flat_map(|(_, r)| r.iter().map(|m| m.cum_env_cost));
    let ys = runs.iter().flat_map(|(_, r)| r.iter().map(|m| m.max_return_so_far));
    let f = Frame::covering(xs, ys);
    let mut s = String::new();
    open(&mut s, "Cumulative cost vs. maximum reward", "cumulative cost", "maximum reward", &f);
    for (i, (name, rows)) in runs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let xs: Vec<f64> = rows.iter().map(|m| m.cum_env_cost).collect();
        let ys: Vec<f64> = rows.iter().map(|m| m.max_return_so_far).collect();
        polyline(&mut s, &f, &xs, &ys, color, r#" class="run""#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            MARGIN_L + 10.0,
            MARGIN_T + 16.0 * (i + 1) as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, ret: f64, cost: f64, cum: f64) -> MetricRow {
        MetricRow {
            step,
            eval_return: ret,
            eval_cost: cost,
            lambda: 0.0,
            kp: 0.0,
            ki: 0.0,
            kd: 0.0,
            err: 0.0,
            cum_env_cost: cum,
            max_return_so_far: ret,
        }
    }

    #[test]
    fn frame_maps_corners() {
        let f = Frame { x0: 0.0, x1: 10.0, y0: -1.0, y1: 1.0 };
        assert_eq!(f.px(0.0), MARGIN_L);
        assert_eq!(f.px(10.0), WIDTH - MARGIN_R);
        assert_eq!(f.py(-1.0), HEIGHT - MARGIN_B);
        assert_eq!(f.py(1.0), MARGIN_T);
        let flat = Frame::covering([2.0, 2.0], [5.0]);
        assert!(flat.x1 > flat.x0 && flat.y1 > flat.y0);
    }

    #[test]
    fn band_stats() {
        let a = vec![row(1, 1.0, 0.0, 0.0), row(2, 3.0, 0.0, 1.0)];
        let b = vec![row(1, 3.0, 0.0, 0.0), row(2, 7.0, 0.0, 1.0)];
        let band = Band::from_runs(&[a.clone(), b], |m| m.eval_return).unwrap();
        assert_eq!(band.mean, [2.0, 5.0]);
        assert_eq!(band.lo, [1.0, 3.0]);
        assert_eq!(band.hi, [3.0, 7.0]);
        let single = Band::from_runs(&[a.clone()], |m| m.eval_return).unwrap();
        assert_eq!(single.lo, single.hi);
        let short = vec![row(1, 1.0, 0.0, 0.0)];
        assert!(Band::from_runs(&[a, short], |m| m.eval_return).is_err());
    }

    #[test]
    fn threshold_line_position() {
        let runs = vec![vec![row(1, 0.0, 5.0, 0.0), row(2, 0.0, 40.0, 0.0)]];
        let band = Band::from_runs(&runs, |m| m.eval_cost).unwrap();
        let svg = learning_curve("Cost", "cost", &band, Some(20.0));
        let f = Frame::covering([1.0, 2.0], [5.0, 40.0, 5.0, 40.0, 20.0]);
        assert!(svg.contains(&format!(r#"y1="{:.2}""#, f.py(20.0))), "{svg}");
        assert!(svg.starts_with("<svg") && svg.contains(r#"width="800" height="500""#));
    }
}
