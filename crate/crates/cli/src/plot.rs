//! Learning curves from metrics CSVs: mean across seeds with a one-standard
//! deviation band, one curve per run name, rendered as standalone SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub path: PathBuf,
    pub run: String,
    pub seed: Option<u64>,
    pub columns: Vec<String>,
    /// One entry per data row; blank cells are `None`.
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsFile {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// `(env_steps, metric)` points where the metric is present.
    pub fn series(&self, metric: &str) -> Result<Vec<(f64, f64)>, CliError> {
        let missing = |c: &str| CliError::Config(format!("{}: no column {c:?}", self.path.display()));
        let x = self.column("env_steps").ok_or_else(|| missing("env_steps"))?;
        let y = self.column(metric).ok_or_else(|| missing(metric))?;
        Ok(self.rows.iter().filter_map(|r| Some((r[x]?, r[y]?))).collect())
    }
}

/// Parse a metrics CSV. The first line must be the
/// `# priocomm metrics v1 run=<name> seed=<seed>` comment.
pub fn read_metrics(path: &Path) -> Result<MetricsFile, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let bad = |line: usize, msg: String| CliError::Config(format!("{}:{line}: {msg}", path.display()));
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let comment = first
        .trim_end()
        .strip_prefix("# priocomm metrics v")
        .ok_or_else(|| bad(1, "missing '# priocomm metrics' header comment".into()))?;
    let mut run = None;
    let mut seed = None;
    for field in comment.split_whitespace().skip(1) {
        if let Some(v) = field.strip_prefix("run=") {
            run = Some(v.to_string());
        } else if let Some(v) = field.strip_prefix("seed=") {
            seed = Some(v.parse().map_err(|_| bad(1, format!("bad seed {v:?}")))?);
        }
    }
    let run = run.ok_or_else(|| bad(1, "header comment lacks run=<name>".into()))?;

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| bad(2, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 3;
        let record = record.map_err(|e| bad(line, e.to_string()))?;
        let row = record
            .iter()
            .map(|cell| {
                let cell = cell.trim();
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>()
                        .map(Some)
                        .map_err(|_| bad(line, format!("not a number: {cell:?}")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(MetricsFile {
        path: path.to_path_buf(),
        run,
        seed,
        columns,
        rows,
    })
}

/// Linear interpolation on sorted `points`, constant beyond the ends.
pub fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let k = points.partition_point(|p| p.0 <= x);
    let (x0, y0) = points[k - 1];
    let (x1, y1) = points[k];
    if x1 == x0 {
        y1
    } else {
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCurve {
    pub name: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Last value of each seed.
    pub finals: Vec<f64>,
}

impl GroupCurve {
    pub fn final_mean(&self) -> f64 {
        mean(&self.finals)
    }

    pub fn final_std(&self) -> f64 {
        sample_std(&self.finals)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub first: String,
    pub second: String,
    /// `final_mean(first) - final_mean(second)`.
    pub difference: f64,
    /// `sqrt((s_first^2 + s_second^2) / 2)`.
    pub pooled_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSummary {
    pub metric: String,
    pub groups: Vec<GroupCurve>,
}

impl PlotSummary {
    pub fn group(&self, name: &str) -> Option<&GroupCurve> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn comparisons(&self) -> Vec<Comparison> {
        let mut out = Vec::new();
        for (i, a) in self.groups.iter().enumerate() {
            for b in &self.groups[i + 1..] {
                out.push(Comparison {
                    first: a.name.clone(),
                    second: b.name.clone(),
                    difference: a.final_mean() - b.final_mean(),
                    pooled_std: ((a.final_std().powi(2) + b.final_std().powi(2)) / 2.0).sqrt(),
                });
            }
        }
        out
    }
}

/// Group files by run name (in order of first appearance) and average each
/// group on the step grid of its first file.
pub fn build_curves(files: &[MetricsFile], metric: &str) -> Result<Vec<GroupCurve>, CliError> {
    let mut names: Vec<&str> = Vec::new();
    for f in files {
        if !names.contains(&f.run.as_str()) {
            names.push(&f.run);
        }
    }
    let mut groups = Vec::new();
    for name in names {
        let series = files
            .iter()
            .filter(|f| f.run == name)
            .map(|f| {
                let s = f.series(metric)?;
                if s.is_empty() {
                    return Err(CliError::Config(format!(
                        "{}: no values of {metric:?}",
                        f.path.display()
                    )));
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let x: Vec<f64> = series[0].iter().map(|p| p.0).collect();
        let mut mean_line = Vec::with_capacity(x.len());
        let mut std_line = Vec::with_capacity(x.len());
        for &xi in &x {
            let ys: Vec<f64> = series.iter().map(|s| interpolate(s, xi)).collect();
            mean_line.push(mean(&ys));
            std_line.push(sample_std(&ys));
        }
        let finals = series.iter().map(|s| s[s.len() - 1].1).collect();
        groups.push(GroupCurve {
            name: name.to_string(),
            x,
            mean: mean_line,
            std: std_line,
            finals,
        });
    }
    Ok(groups)
}

const PALETTE: &[&str] = &["#2a9d4b", "#2b6cb0", "#d9822b", "#b83280", "#6b46c1", "#718096"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn render_svg(groups: &[GroupCurve], metric: &str, title: Option<&str>) -> String {
    let (w, h) = (820.0, 500.0);
    let (left, right, top, bottom) = (80.0, 200.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for g in groups {
        for i in 0..g.x.len() {
            x_min = x_min.min(g.x[i]);
            x_max = x_max.max(g.x[i]);
            y_min = y_min.min(g.mean[i] - g.std[i]);
            y_max = y_max.max(g.mean[i] + g.std[i]);
        }
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    if y_max <= y_min {
        y_max = y_min + 1.0;
        y_min -= 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_min, y_max) = (y_min - pad, y_max + pad);
    let sx = |x: f64| left + (x - x_min) / (x_max - x_min) * pw;
    let sy = |y: f64| top + (y_max - y) / (y_max - y_min) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if let Some(t) = title {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            left + pw / 2.0,
            escape(t)
        );
    }
    for k in 0..=5 {
        let fx = x_min + (x_max - x_min) * k as f64 / 5.0;
        let fy = y_min + (y_max - y_min) * k as f64 / 5.0;
        let (px, py) = (sx(fx), sy(fy));
        let _ = writeln!(
            s,
            r##"<line x1="{px:.1}" y1="{top}" x2="{px:.1}" y2="{:.1}" stroke="#eee"/>"##,
            top + ph
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#eee"/>"##,
            left + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            top + ph + 18.0,
            fmt_tick(fx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py + 4.0,
            fmt_tick(fy)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#,
        left + pw / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(metric)
    );

    for (gi, g) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let mut band = String::new();
        for i in 0..g.x.len() {
            let _ = write!(band, "{:.2},{:.2} ", sx(g.x[i]), sy(g.mean[i] + g.std[i]));
        }
        for i in (0..g.x.len()).rev() {
            let _ = write!(band, "{:.2},{:.2} ", sx(g.x[i]), sy(g.mean[i] - g.std[i]));
        }
        let _ = writeln!(
            s,
            r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.trim_end()
        );
        let line: Vec<String> = (0..g.x.len())
            .map(|i| format!("{:.2},{:.2}", sx(g.x[i]), sy(g.mean[i])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 10.0 + 36.0 * gi as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&g.name)
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" fill="#555" font-size="10">final {} +- {} (n={})</text>"##,
            lx + 26.0,
            ly + 18.0,
            fmt_tick(g.final_mean()),
            fmt_tick(g.final_std()),
            g.finals.len()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Read the inputs, write the SVG to `out` and a per-group table of final
/// values next to it (`<out>.summary.csv`).
pub fn render_plot(inputs: &[PathBuf], metric: &str, title: Option<&str>, out: &Path) -> Result<PlotSummary, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Config("plot needs at least one metrics CSV".into()));
    }
    let files = inputs.iter().map(|p| read_metrics(p)).collect::<Result<Vec<_>, _>>()?;
    let groups = build_curves(&files, metric)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, render_svg(&groups, metric, title))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    let summary = PlotSummary {
        metric: metric.to_string(),
        groups,
    };
    let mut table = String::from("# priocomm plot-summary v1\nrun,seeds,final_mean,final_std\n");
    for g in &summary.groups {
        let _ = writeln!(
            table,
            "{},{},{},{}",
            g.name,
            g.finals.len(),
            g.final_mean(),
            g.final_std()
        );
    }
    fs::write(out.with_extension("summary.csv"), table)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation() {
        let pts = [(0.0, 0.0), (10.0, 5.0), (20.0, -5.0)];
        assert_eq!(interpolate(&pts, -1.0), 0.0);
        assert_eq!(interpolate(&pts, 5.0), 2.5);
        assert_eq!(interpolate(&pts, 15.0), 0.0);
        assert_eq!(interpolate(&pts, 25.0), -5.0);
    }

    #[test]
    fn sample_std_values() {
        assert_eq!(sample_std(&[3.0]), 0.0);
        assert_eq!(
            sample_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]),
            (32.0f64 / 7.0).sqrt()
        );
    }

    #[test]
    fn svg_has_one_band_and_line_per_group() {
        let g = GroupCurve {
            name: "a<b".into(),
            x: vec![0.0, 1.0],
            mean: vec![1.0, 2.0],
            std: vec![0.0, 0.5],
            finals: vec![2.0],
        };
        let svg = render_svg(&[g.clone(), GroupCurve { name: "c".into(), ..g }], "m", Some("t"));
        assert_eq!(svg.matches("class=\"band\"").count(), 2);
        assert_eq!(svg.matches("class=\"mean\"").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }
}
