//! Result emission: CSV tables, self-contained SVG line plots, and run
//! manifests.
//!
//! Everything written here is deterministic given identical inputs:
//! floats are formatted with Rust's shortest round-trip `Display`, rows
//! are emitted in insertion order, and plots embed their own data table
//! in a `<metadata id="series-data">` block so tests compare data rather
//! than pixels. The only non-deterministic manifest field is the wall
//! clock, which is informational.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Version tag of the CSV/manifest/plot layout emitted by this crate.
pub const SCHEMA_VERSION: u32 = 1;

/// Build identifier baked into manifests (override with the `BUILD_ID`
/// environment variable at compile time).
pub fn build_id() -> &'static str {
    option_env!("BUILD_ID").unwrap_or(concat!("psample-v", env!("CARGO_PKG_VERSION")))
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// One CSV cell. `From` impls cover the types experiments emit; floats
/// use shortest round-trip formatting so re-parsing reproduces the exact
/// bit pattern.
#[derive(Clone, Debug)]
pub enum Cell {
    Str(String),
    Float(f64),
    Int(i64),
    Uint(u64),
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Str(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Str(v)
    }
}
impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Uint(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Uint(v as u64)
    }
}

impl Cell {
    fn render(&self, out: &mut String) {
        match self {
            Cell::Str(s) => {
                if s.contains([',', '"', '\n', '\r']) {
                    out.push('"');
                    out.push_str(&s.replace('"', "\"\""));
                    out.push('"');
                } else {
                    out.push_str(s);
                }
            }
            Cell::Float(v) => {
                let _ = write!(out, "{v}");
            }
            Cell::Int(v) => {
                let _ = write!(out, "{v}");
            }
            Cell::Uint(v) => {
                let _ = write!(out, "{v}");
            }
        }
    }
}

/// A rectangular CSV table with a header row. Rows must match the header
/// width; [`Table::write`] emits RFC-4180-style CSV with `\n` line ends.
#[derive(Clone, Debug)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    /// Append one row.
    ///
    /// # Panics
    /// If the cell count does not match the header width.
    pub fn row(&mut self, cells: impl IntoIterator<Item = Cell>) {
        let row: Vec<Cell> = cells.into_iter().collect();
        assert_eq!(
            row.len(),
            self.columns.len(),
            "CSV row width {} does not match header width {}",
            row.len(),
            self.columns.len()
        );
        self.rows.push(row);
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Render the full table as CSV text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, c) in self.columns.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            Cell::Str(c.clone()).render(&mut out);
        }
        out.push('\n');
        for row in &self.rows {
            for (k, cell) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                cell.render(&mut out);
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.render())
    }
}

/// Write text to a file, creating parent directories as needed.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Reproducibility record written next to every result bundle. The
/// `(config, seed)` pair pins the outputs bit for bit; the wall clock is
/// informational only.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub build_id: String,
    pub seed: u64,
    /// The configuration document exactly as provided.
    pub config: serde_json::Value,
    /// SHA-256 of the canonical JSON serialization of `config`.
    pub config_sha256: String,
    pub wall_clock_seconds: f64,
    /// Experiment-specific annotations (fallbacks taken, fitted slopes,
    /// stationarity flags, ...).
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(config: serde_json::Value, seed: u64) -> Self {
        let canonical = serde_json::to_string(&config).expect("JSON value serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let config_sha256 = format!("{:x}", hasher.finalize());
        Self {
            schema_version: SCHEMA_VERSION,
            tool: "psample".into(),
            build_id: build_id().into(),
            seed,
            config,
            config_sha256,
            wall_clock_seconds: 0.0,
            notes: serde_json::Map::new(),
        }
    }

    pub fn note(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.notes.insert(key.to_string(), value.into());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_text(path, &text)
    }
}

// ---------------------------------------------------------------------------
// SVG line plots
// ---------------------------------------------------------------------------

/// One plotted series.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Dashed stroke (used for fitted reference lines).
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, xs: Vec<f64>, ys: Vec<f64>) -> Self {
        Self { label: label.into(), xs, ys, dashed: false }
    }

    pub fn dashed(label: impl Into<String>, xs: Vec<f64>, ys: Vec<f64>) -> Self {
        Self { label: label.into(), xs, ys, dashed: true }
    }
}

/// A self-contained SVG line plot: axes, ticks, legend, optional log
/// scales, optional horizontal reference lines, and the full data table
/// embedded under `<metadata id="series-data">` as `label,x,y` CSV rows
/// (reference lines appear with an empty `x` field).
#[derive(Clone, Debug, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    /// Horizontal reference lines `(y, label)`.
    pub hlines: Vec<(f64, String)>,
}

const PLOT_W: f64 = 720.0;
const PLOT_H: f64 = 480.0;
const MARGIN_L: f64 = 78.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 58.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick positions for a linear axis: a 1/2/5 x 10^k step chosen to give
/// roughly `target` ticks.
fn linear_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / target.max(2) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    } * mag;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

/// Tick positions for a log axis: {1, 2, 5} x 10^k within the range.
fn log_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let mut ticks = Vec::new();
    let k_lo = lo.log10().floor() as i32 - 1;
    let k_hi = hi.log10().ceil() as i32 + 1;
    for k in k_lo..=k_hi {
        for m in [1.0, 2.0, 5.0] {
            let v = m * 10f64.powi(k);
            if v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12) {
                ticks.push(v);
            }
        }
    }
    ticks
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        // Trim float noise: round to 10 significant digits first.
        let s = format!("{v:.10e}");
        let parsed: f64 = s.parse().unwrap_or(v);
        format!("{parsed}")
    } else {
        format!("{v:e}")
    }
}

impl LinePlot {
    fn data_table(&self) -> String {
        let mut out = String::from("label,x,y\n");
        for s in &self.series {
            for (x, y) in s.xs.iter().zip(&s.ys) {
                let _ = writeln!(out, "{},{x},{y}", s.label);
            }
        }
        for (y, label) in &self.hlines {
            let _ = writeln!(out, "{label},,{y}");
        }
        out
    }

    /// Render the SVG document. Fails if a log axis is requested but no
    /// plotted point has a positive coordinate on that axis.
    pub fn render_svg(&self) -> Result<String> {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for s in &self.series {
            if s.xs.len() != s.ys.len() {
                return Err(Error::InvalidArgument(format!(
                    "series '{}' has {} x values but {} y values",
                    s.label,
                    s.xs.len(),
                    s.ys.len()
                )));
            }
            for (&x, &y) in s.xs.iter().zip(&s.ys) {
                if x.is_finite() && y.is_finite() {
                    pts.push((x, y));
                }
            }
        }
        let usable = |v: f64, log: bool| !log || v > 0.0;
        pts.retain(|&(x, y)| usable(x, self.log_x) && usable(y, self.log_y));
        if pts.is_empty() {
            return Err(Error::InvalidArgument(
                "plot has no finite data points (after log-axis filtering)".into(),
            ));
        }
        let (mut x_lo, mut x_hi) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
        let (mut y_lo, mut y_hi) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
        for &(y, _) in &self.hlines {
            if usable(y, self.log_y) {
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
            }
        }
        // Pad the ranges so strokes do not sit on the frame.
        let pad = |lo: &mut f64, hi: &mut f64, log: bool| {
            if log {
                let f = (*hi / *lo).max(1.0).powf(0.05).max(1.02);
                *lo /= f;
                *hi *= f;
            } else {
                let span = (*hi - *lo).max(1e-12 * (1.0 + hi.abs()));
                *lo -= 0.05 * span;
                *hi += 0.05 * span;
            }
        };
        pad(&mut x_lo, &mut x_hi, self.log_x);
        pad(&mut y_lo, &mut y_hi, self.log_y);

        let map = |v: f64, lo: f64, hi: f64, log: bool| -> f64 {
            if log {
                (v.ln() - lo.ln()) / (hi.ln() - lo.ln())
            } else {
                (v - lo) / (hi - lo)
            }
        };
        let px = |x: f64| MARGIN_L + map(x, x_lo, x_hi, self.log_x) * (PLOT_W - MARGIN_L - MARGIN_R);
        let py = |y: f64| PLOT_H - MARGIN_B - map(y, y_lo, y_hi, self.log_y) * (PLOT_H - MARGIN_T - MARGIN_B);

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\" \
             width=\"{PLOT_W}\" height=\"{PLOT_H}\" font-family=\"Menlo, Consolas, monospace\" \
             font-size=\"12\">"
        );
        let _ = writeln!(svg, "<metadata id=\"series-data\">{}</metadata>", xml_escape(&self.data_table()));
        let _ = writeln!(svg, "<rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>");
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
            PLOT_W / 2.0,
            xml_escape(&self.title)
        );

        // Frame.
        let _ = writeln!(
            svg,
            "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{}\" height=\"{}\" fill=\"none\" \
             stroke=\"#333\"/>",
            PLOT_W - MARGIN_L - MARGIN_R,
            PLOT_H - MARGIN_T - MARGIN_B
        );

        // Ticks and grid.
        let x_ticks = if self.log_x { log_ticks(x_lo, x_hi) } else { linear_ticks(x_lo, x_hi, 6) };
        let y_ticks = if self.log_y { log_ticks(y_lo, y_hi) } else { linear_ticks(y_lo, y_hi, 6) };
        for &t in &x_ticks {
            let x = px(t);
            let _ = writeln!(
                svg,
                "<line x1=\"{x}\" y1=\"{MARGIN_T}\" x2=\"{x}\" y2=\"{}\" stroke=\"#ddd\"/>",
                PLOT_H - MARGIN_B
            );
            let _ = writeln!(
                svg,
                "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                PLOT_H - MARGIN_B + 18.0,
                xml_escape(&format_tick(t))
            );
        }
        for &t in &y_ticks {
            let y = py(t);
            let _ = writeln!(
                svg,
                "<line x1=\"{MARGIN_L}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>",
                PLOT_W - MARGIN_R
            );
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                MARGIN_L - 8.0,
                y + 4.0,
                xml_escape(&format_tick(t))
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
            PLOT_H - 14.0,
            xml_escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
            (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
            (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
            xml_escape(&self.y_label)
        );

        // Reference lines.
        for (y, label) in &self.hlines {
            if !usable(*y, self.log_y) {
                continue;
            }
            let yy = py(*y);
            let _ = writeln!(
                svg,
                "<line x1=\"{MARGIN_L}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"#777\" \
                 stroke-dasharray=\"6 4\" data-baseline=\"{y}\"/>",
                PLOT_W - MARGIN_R
            );
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#555\">{}</text>",
                PLOT_W - MARGIN_R - 6.0,
                yy - 5.0,
                xml_escape(label)
            );
        }

        // Series.
        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let mut points = String::new();
            for (&x, &y) in s.xs.iter().zip(&s.ys) {
                if x.is_finite() && y.is_finite() && usable(x, self.log_x) && usable(y, self.log_y)
                {
                    let _ = write!(points, "{:.3},{:.3} ", px(x), py(y));
                }
            }
            let dash = if s.dashed { " stroke-dasharray=\"8 5\"" } else { "" };
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>",
                points.trim_end()
            );
        }

        // Legend (top-right inside the frame).
        let legend_x = PLOT_W - MARGIN_R - 190.0;
        let mut legend_y = MARGIN_T + 16.0;
        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let dash = if s.dashed { " stroke-dasharray=\"8 5\"" } else { "" };
            let _ = writeln!(
                svg,
                "<line x1=\"{legend_x}\" y1=\"{legend_y}\" x2=\"{}\" y2=\"{legend_y}\" \
                 stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>",
                legend_x + 26.0
            );
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\">{}</text>",
                legend_x + 32.0,
                legend_y + 4.0,
                xml_escape(&s.label)
            );
            legend_y += 17.0;
        }

        svg.push_str("</svg>\n");
        Ok(svg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.render_svg()?)
    }
}

/// Extract the embedded data table from an SVG produced by [`LinePlot`].
/// Returns the CSV text (`label,x,y` header included). Used by tests to
/// compare plotted data without parsing geometry.
pub fn embedded_series_data(svg: &str) -> Option<String> {
    let start_tag = "<metadata id=\"series-data\">";
    let start = svg.find(start_tag)? + start_tag.len();
    let end = svg[start..].find("</metadata>")? + start;
    let escaped = &svg[start..end];
    Some(escaped.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_renders_exact_roundtrip_floats() {
        let mut t = Table::new(["n", "value", "name"]);
        t.row([16usize.into(), 0.1f64.into(), "alpha".into()]);
        t.row([32usize.into(), (1.0f64 / 3.0).into(), "b,c".into()]);
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n,value,name");
        assert_eq!(lines[1], "16,0.1,alpha");
        assert_eq!(lines[2], "32,0.3333333333333333,\"b,c\"");
        let parsed: f64 = "0.3333333333333333".parse().unwrap();
        assert_eq!(parsed, 1.0 / 3.0);
    }

    #[test]
    fn csv_quotes_embedded_quotes() {
        let mut t = Table::new(["s"]);
        t.row([Cell::Str("say \"hi\"".into())]);
        assert_eq!(t.render().lines().nth(1).unwrap(), "\"say \"\"hi\"\"\"");
    }

    #[test]
    #[should_panic(expected = "row width")]
    fn csv_rejects_ragged_rows() {
        let mut t = Table::new(["a", "b"]);
        t.row([1u64.into()]);
    }

    #[test]
    fn manifest_hash_is_stable_and_json_valid() {
        let cfg: serde_json::Value = serde_json::json!({"seed": 3, "x": [1, 2]});
        let a = Manifest::new(cfg.clone(), 3);
        let b = Manifest::new(cfg, 3);
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);
        let text = serde_json::to_string(&a).unwrap();
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["schema_version"], SCHEMA_VERSION);
        assert_eq!(back["seed"], 3);
    }

    #[test]
    fn plot_embeds_its_data_and_is_deterministic() {
        let mut plot = LinePlot {
            title: "demo".into(),
            x_label: "t".into(),
            y_label: "v".into(),
            ..Default::default()
        };
        plot.series.push(Series::new("one", vec![0.0, 1.0, 2.0], vec![0.5, 0.25, 0.125]));
        plot.hlines.push((0.2, "baseline".into()));
        let svg1 = plot.render_svg().unwrap();
        let svg2 = plot.render_svg().unwrap();
        assert_eq!(svg1, svg2);
        let data = embedded_series_data(&svg1).unwrap();
        let lines: Vec<&str> = data.lines().collect();
        assert_eq!(lines[0], "label,x,y");
        assert_eq!(lines[1], "one,0,0.5");
        assert_eq!(lines[4], "baseline,,0.2");
        assert!(svg1.contains("</svg>"));
        assert!(svg1.contains("polyline"));
    }

    #[test]
    fn log_axes_reject_empty_positive_data_and_accept_valid_data() {
        let mut plot = LinePlot { log_x: true, log_y: true, ..Default::default() };
        plot.series.push(Series::new("bad", vec![-1.0, -2.0], vec![1.0, 2.0]));
        assert!(plot.render_svg().is_err());

        let mut ok = LinePlot { log_x: true, log_y: true, ..Default::default() };
        ok.series.push(Series::new(
            "decay",
            vec![16.0, 64.0, 256.0, 1024.0],
            vec![0.25, 0.125, 0.0625, 0.03125],
        ));
        let svg = ok.render_svg().unwrap();
        assert!(svg.contains("polyline"));
        // Log ticks include powers of ten inside the padded range.
        assert!(svg.contains(">100<"));
    }

    #[test]
    fn tick_layout_covers_ranges() {
        let t = linear_ticks(0.0, 10.0, 6);
        assert_eq!(t, vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        let lt = log_ticks(0.011, 9.0);
        assert_eq!(lt, vec![0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0]);
    }

    #[test]
    fn xml_special_characters_are_escaped() {
        let mut plot = LinePlot { title: "a<b & c>d".into(), ..Default::default() };
        plot.series.push(Series::new("s<1>", vec![0.0, 1.0], vec![1.0, 2.0]));
        let svg = plot.render_svg().unwrap();
        assert!(svg.contains("a&lt;b &amp; c&gt;d"));
        assert!(!svg.contains("a<b"));
        let data = embedded_series_data(&svg).unwrap();
        assert!(data.contains("s<1>,0,1"));
    }

    #[test]
    fn tick_labels_avoid_float_noise() {
        assert_eq!(format_tick(0.30000000000000004), "0.3");
        assert_eq!(format_tick(1e-7), "1e-7");
        assert_eq!(format_tick(0.0), "0");
        assert_eq!(format_tick(250000.0), "2.5e5");
    }
}
