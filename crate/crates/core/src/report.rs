//! Static report artifacts: JSON profile, CSV table, SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::{BudgetCurve, RiskProfile};
use crate::rero::BoundRow;

pub const CSV_FIXED_COLUMNS: [&str; 8] = [
    "epsilon",
    "noise_multiplier",
    "attack_noise_multiplier",
    "clip_norm",
    "worst_case",
    "relaxed",
    "realistic",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Svg,
    All,
}

impl Format {
    pub fn parse(s: &str) -> Option<Format> {
        match s {
            "json" => Some(Format::Json),
            "csv" => Some(Format::Csv),
            "svg" => Some(Format::Svg),
            "all" => Some(Format::All),
            _ => None,
        }
    }

    fn includes(self, other: Format) -> bool {
        self == Format::All || self == other
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        crate::serde_ext::render(v).to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

/// One row per budget: the fixed columns, then mean and SD per metric.
pub fn profile_csv(profile: &RiskProfile) -> String {
    let names: Vec<&str> = profile
        .rows
        .iter()
        .flat_map(|r| r.utility.iter().map(|m| m.name.as_str()))
        .fold(Vec::new(), |mut acc, n| {
            if !acc.contains(&n) {
                acc.push(n);
            }
            acc
        });
    let mut header: Vec<String> = CSV_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for n in &names {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_sd"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in &profile.rows {
        let mut cells = vec![
            r.epsilon.render(),
            opt(r.noise_multiplier),
            opt(r.attack_noise_multiplier),
            opt(r.clip_norm),
            num(r.worst_case),
            num(r.relaxed),
            num(r.realistic),
            if r.failed() { "failed" } else { "ok" }.to_string(),
        ];
        for n in &names {
            match r.utility.iter().find(|m| m.name == *n) {
                Some(m) => {
                    cells.push(num(m.mean));
                    cells.push(num(m.sd));
                }
                None => cells.extend([String::new(), String::new()]),
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

struct Plot {
    body: String,
    x_range: (f64, f64),
}

impl Plot {
    fn new(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64)) -> Plot {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(body, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(body, r#"<text x="{}" y="18" text-anchor="middle">{title}</text>"#, WIDTH / 2.0);
        let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
        let _ = writeln!(body, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
        let _ = writeln!(body, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, (x0 + x1) / 2.0, HEIGHT - 10.0);
        let _ = writeln!(
            body,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0
        );
        for (v, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
            let y = Self::py(v);
            let _ = writeln!(body, r#"<text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#, x0 - 4.0, y + 4.0);
        }
        for (v, label) in [(x_range.0, x_range.0), (x_range.1, x_range.1)] {
            let x = Plot::px_in(v, x_range);
            let _ = writeln!(body, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{label}</text>"#, y0 + 14.0);
        }
        Plot { body, x_range }
    }

    fn px_in(x: f64, range: (f64, f64)) -> f64 {
        MARGIN + (x - range.0) / (range.1 - range.0) * (WIDTH - 1.5 * MARGIN)
    }

    fn py(y: f64) -> f64 {
        let (top, bottom) = (MARGIN / 1.5, HEIGHT - MARGIN);
        bottom - y.clamp(0.0, 1.0) * (bottom - top)
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str, label: &str, index: usize) {
        let pts: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", Self::px_in(x, self.x_range), Self::py(y)))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{label}</title></polyline>"#,
            pts.join(" ")
        );
        let ly = MARGIN / 1.5 + 14.0 * index as f64 + 8.0;
        let lx = WIDTH - MARGIN * 2.6;
        let _ = writeln!(
            self.body,
            r#"<text x="{lx}" y="{ly:.2}" fill="{color}">{label}</text>"#
        );
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// Cumulative SSIM-error step curves, one polyline per budget.
pub fn curves_svg(curves: &[BudgetCurve]) -> String {
    let mut plot = Plot::new("Reconstruction error", "SSIM error", "fraction of images", (0.0, 1.0));
    for (i, c) in curves.iter().enumerate() {
        let mut pts = Vec::with_capacity(2 * c.curve.grid.len());
        for (k, (&g, &f)) in c.curve.grid.iter().zip(&c.curve.fraction).enumerate() {
            if k > 0 {
                pts.push((g, c.curve.fraction[k - 1]));
            }
            pts.push((g, f));
        }
        let label = format!("eps = {}", c.epsilon.render());
        plot.polyline(&pts, PALETTE[i % PALETTE.len()], &label, i);
    }
    plot.finish()
}

/// Worst-case and relaxed bounds against `log10 ε`.
pub fn bounds_svg(rows: &[BoundRow]) -> String {
    let xs: Vec<f64> = rows.iter().map(|r| r.epsilon.log10()).collect();
    let range = match (xs.first(), xs.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        _ => (0.0, 1.0),
    };
    let mut plot = Plot::new("Reconstruction bounds", "log10 epsilon", "success bound", range);
    let worst: Vec<(f64, f64)> = xs.iter().zip(rows).map(|(&x, r)| (x, r.worst_case)).collect();
    let relaxed: Vec<(f64, f64)> = xs.iter().zip(rows).map(|(&x, r)| (x, r.relaxed)).collect();
    plot.polyline(&worst, "#7b3294", "worst case", 0);
    plot.polyline(&relaxed, "#e66101", "relaxed", 1);
    plot.finish()
}

/// Writes the requested artifacts into `dir` and returns their paths.
pub fn emit_report(profile: &RiskProfile, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    if format.includes(Format::Json) {
        put("profile.json", profile.to_json()?)?;
    }
    if format.includes(Format::Csv) {
        put("profile.csv", profile_csv(profile))?;
        for c in &profile.curves {
            put(&format!("curve_{}.csv", c.epsilon.id()), c.curve.to_csv())?;
        }
    }
    if format.includes(Format::Svg) {
        put("curves.svg", curves_svg(&profile.curves))?;
        put("bounds.svg", bounds_svg(&profile.bound_grid))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::evalrecon::CumulativeCurve;
    use crate::pipeline::{Budget, MetricSummary, RiskRow, PROFILE_SCHEMA_VERSION};

    fn profile() -> RiskProfile {
        let row = |eps: Budget, metrics: &[&str]| RiskRow {
            epsilon: eps,
            noise_multiplier: eps.is_private().then_some(1.5),
            attack_noise_multiplier: None,
            clip_norm: Some(1.0),
            utility: metrics
                .iter()
                .map(|n| MetricSummary {
                    name: n.to_string(),
                    mean: 0.5,
                    sd: 0.1,
                    p_value: None,
                })
                .collect(),
            worst_case: 1.0,
            relaxed: 0.5,
            realistic: 0.0,
            seeds_ok: 1,
            errors: Vec::new(),
        };
        let curve = CumulativeCurve {
            grid: vec![0.0, 0.5, 1.0],
            fraction: vec![0.0, 0.5, 1.0],
        };
        RiskProfile {
            schema_version: PROFILE_SCHEMA_VERSION,
            config: ExperimentConfig::default(),
            n_train: 10,
            kappa: 0.1,
            distance: "1-ssim".into(),
            rows: vec![row(Budget(1.0), &["dice_1", "dice_2"]), row(Budget::NONPRIVATE, &["dice_1", "dice_2"])],
            curves: vec![
                BudgetCurve {
                    epsilon: Budget(1.0),
                    curve: curve.clone(),
                },
                BudgetCurve {
                    epsilon: Budget::NONPRIVATE,
                    curve,
                },
            ],
            bound_grid: vec![
                BoundRow {
                    epsilon: 1.0,
                    noise_multiplier: Some(2.0),
                    worst_case: 0.3,
                    relaxed: 0.2,
                },
                BoundRow {
                    epsilon: 100.0,
                    noise_multiplier: Some(0.5),
                    worst_case: 1.0,
                    relaxed: 0.9,
                },
            ],
        }
    }

    #[test]
    fn csv_schema() {
        let csv = profile_csv(&profile());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        for l in &lines {
            assert_eq!(l.split(',').count(), 8 + 2 * 2);
        }
        assert!(lines[2].starts_with("inf,,"));
    }

    #[test]
    fn svg_has_one_polyline_per_budget() {
        let svg = curves_svg(&profile().curves);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("eps = inf"));
        assert_eq!(bounds_svg(&profile().bound_grid).matches("<polyline").count(), 2);
    }

    #[test]
    fn emit_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let a = emit_report(&profile(), &dir.path().join("a"), Format::All).unwrap();
        let b = emit_report(&profile(), &dir.path().join("b"), Format::All).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let json = fs::read_to_string(dir.path().join("a/profile.json")).unwrap();
        assert_eq!(RiskProfile::from_json(&json).unwrap(), profile());
        assert_eq!(emit_report(&profile(), &dir.path().join("c"), Format::Svg).unwrap().len(), 2);
    }
}
