//! Two-panel SVG of a result file: node states with their thresholds on
//! top, controls with the input bound below.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::CliError;

pub const PANEL_WIDTH: f64 = 960.0;
pub const PANEL_HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Time series read back from a result file.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub times: Vec<f64>,
    /// `states[i][k]` is node `i` at row `k`.
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

/// Reference lines drawn on top of the traces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Limits {
    pub thresholds: Vec<f64>,
    pub u_max: Vec<f64>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Data(format!("missing column {name}")))
}

/// Parses the `t`, `x_i` and `u_i` columns of a result file.
pub fn read_trajectories(text: &str) -> Result<Trajectories, CliError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("unreadable header: {e}")))?
        .clone();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(CliError::Data("missing column t".into()));
    }
    let t_col = column(&headers, "t")?;
    let n = (1..).take_while(|i| headers.iter().any(|h| h == format!("x_{i}"))).count();
    if n == 0 {
        return Err(CliError::Data("missing column x_1".into()));
    }
    let x_cols = (1..=n).map(|i| column(&headers, &format!("x_{i}"))).collect::<Result<Vec<_>, _>>()?;
    let u_cols = (1..=n).map(|i| column(&headers, &format!("u_{i}"))).collect::<Result<Vec<_>, _>>()?;

    let mut out = Trajectories {
        times: Vec::new(),
        states: vec![Vec::new(); n],
        controls: vec![Vec::new(); n],
    };
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("row {}: {e}", row + 1)))?;
        let cell = |col: usize| -> Result<f64, CliError> {
            let raw = record.get(col).unwrap_or("");
            raw.trim().parse::<f64>().map_err(|_| {
                CliError::Data(format!("column {}: row {}: not a number: {raw:?}", &headers[col], row + 1))
            })
        };
        out.times.push(cell(t_col)?);
        for i in 0..n {
            out.states[i].push(cell(x_cols[i])?);
            out.controls[i].push(cell(u_cols[i])?);
        }
    }
    if out.times.is_empty() {
        return Err(CliError::Data("no rows".into()));
    }
    Ok(out)
}

struct Frame {
    top: f64,
    t0: f64,
    t1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, t: f64) -> f64 {
        let w = PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        if self.t1 > self.t0 {
            MARGIN_LEFT + w * (t - self.t0) / (self.t1 - self.t0)
        } else {
            MARGIN_LEFT + w / 2.0
        }
    }

    fn y(&self, v: f64) -> f64 {
        let h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        self.top + MARGIN_TOP + h * (1.0 - (v - self.y0) / (self.y1 - self.y0))
    }
}

fn axis_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0, f64::max);
    if m > 0.0 {
        m * 1.1
    } else {
        1.0
    }
}

fn panel(svg: &mut String, frame: &Frame, title: &str, ylabel: &str, times: &[f64], series: &[Vec<f64>]) {
    let plot_w = PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_LEFT}" y="{:.2}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##,
        frame.top + MARGIN_TOP
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="16">{title}</text>"#,
        PANEL_WIDTH / 2.0,
        frame.top + MARGIN_TOP - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" font-size="14" transform="rotate(-90 16 {:.2})" text-anchor="middle">{ylabel}</text>"#,
        frame.top + PANEL_HEIGHT / 2.0,
        frame.top + PANEL_HEIGHT / 2.0
    );
    for k in 0..=4 {
        let v = frame.y0 + (frame.y1 - frame.y0) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{v:.3}</text>"#,
            MARGIN_LEFT - 6.0,
            frame.y(v) + 4.0
        );
        let t = frame.t0 + (frame.t1 - frame.t0) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{t:.3}</text>"#,
            frame.x(t),
            frame.top + PANEL_HEIGHT - MARGIN_BOTTOM + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">t</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        frame.top + PANEL_HEIGHT - 10.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if times.len() == 1 {
            let _ = writeln!(
                svg,
                r#"<circle class="trace-point" data-node="{}" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                i + 1,
                frame.x(times[0]),
                frame.y(s[0])
            );
            continue;
        }
        let mut points = String::new();
        for (&t, &v) in times.iter().zip(s) {
            let _ = write!(points, "{:.2},{:.2} ", frame.x(t), frame.y(v));
        }
        let _ = writeln!(
            svg,
            r#"<polyline class="trace" data-node="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            i + 1,
            points.trim_end()
        );
    }
}

fn hline(svg: &mut String, frame: &Frame, v: f64, class: &str, color: &str, dash: &str) {
    let _ = writeln!(
        svg,
        r#"<line class="{class}" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="1.2" stroke-dasharray="{dash}"/>"#,
        MARGIN_LEFT,
        PANEL_WIDTH - MARGIN_RIGHT,
        y = frame.y(v)
    );
}

/// Renders both panels. Thresholds are drawn dotted in the node's color;
/// each distinct control bound is drawn once, dashed and black.
pub fn render_svg(traj: &Trajectories, limits: &Limits) -> String {
    let times = &traj.times;
    let t0 = times.iter().copied().fold(f64::INFINITY, f64::min);
    let t1 = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let state_frame = Frame {
        top: 0.0,
        t0,
        t1,
        y0: 0.0,
        y1: axis_max(traj.states.iter().flatten().copied().chain(limits.thresholds.iter().copied())),
    };
    let control_frame = Frame {
        top: PANEL_HEIGHT,
        t0,
        t1,
        y0: 0.0,
        y1: axis_max(traj.controls.iter().flatten().copied().chain(limits.u_max.iter().copied())),
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_WIDTH}" height="{}" viewBox="0 0 {PANEL_WIDTH} {}">"#,
        2.0 * PANEL_HEIGHT,
        2.0 * PANEL_HEIGHT
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    svg.push_str("<g class=\"panel\" id=\"states\">\n");
    panel(&mut svg, &state_frame, "Node states", "x_i", times, &traj.states);
    for (i, &xbar) in limits.thresholds.iter().enumerate() {
        hline(&mut svg, &state_frame, xbar, "threshold", PALETTE[i % PALETTE.len()], "2 4");
    }
    svg.push_str("</g>\n");

    svg.push_str("<g class=\"panel\" id=\"controls\">\n");
    panel(&mut svg, &control_frame, "Controls", "u_i", times, &traj.controls);
    let mut bounds = limits.u_max.clone();
    bounds.sort_by(f64::total_cmp);
    bounds.dedup();
    for ubar in bounds {
        hline(&mut svg, &control_frame, ubar, "limit", "#000", "8 6");
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}

/// Reads `result`, renders it and writes `out`.
pub fn plot_file(result: &Path, out: &Path, limits: &Limits) -> Result<(), CliError> {
    let text = std::fs::read_to_string(result).map_err(|e| CliError::io(result, e))?;
    let traj = read_trajectories(&text)?;
    if !limits.thresholds.is_empty() && limits.thresholds.len() != traj.states.len() {
        return Err(CliError::Data(format!(
            "{} thresholds for {} nodes",
            limits.thresholds.len(),
            traj.states.len()
        )));
    }
    std::fs::write(out, render_svg(&traj, limits)).map_err(|e| CliError::io(out, e))
}
