//! Trajectory log serialization: a fixed-layout CSV that round-trips
//! bit-exactly, and a small self-contained SVG plotter for quick looks.

use crate::error::Error;
use crate::filter::{Mode, StepStatus};
use crate::sim::{SimRecord, SimStep};
use crate::Result;
use nalgebra::DVector;
use std::fmt::Write as _;
use std::path::Path;

/// Formats with 17 significant digits, enough for exact `f64` round trips.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Column layout: `t,x0..,u0..,mode,d0..,dhat0..,ebar,h,hb_T,min_h_margin,qp_status`.
pub fn csv_header(n: usize, m: usize) -> String {
    let mut h = String::from("t");
    for i in 0..n {
        write!(h, ",x{i}").unwrap();
    }
    for i in 0..m {
        write!(h, ",u{i}").unwrap();
    }
    h.push_str(",mode");
    for i in 0..n {
        write!(h, ",d{i}").unwrap();
    }
    for i in 0..n {
        write!(h, ",dhat{i}").unwrap();
    }
    h.push_str(",ebar,h,hb_T,min_h_margin,qp_status");
    h
}

/// Serializes a record to CSV text with LF line endings. A record with no
/// steps is an error, so no output is ever produced for one.
pub fn csv_string(record: &SimRecord) -> Result<String> {
    if record.steps.is_empty() {
        return Err(Error::EmptyRecord);
    }
    let mut out = csv_header(record.n, record.m);
    out.push('\n');
    for s in &record.steps {
        write!(out, "{}", fmt_f64(s.t)).unwrap();
        for v in s.x.iter().chain(s.u.iter()) {
            write!(out, ",{}", fmt_f64(*v)).unwrap();
        }
        write!(out, ",{}", s.mode.as_str()).unwrap();
        for v in s.d.iter().chain(s.d_hat.iter()) {
            write!(out, ",{}", fmt_f64(*v)).unwrap();
        }
        write!(
            out,
            ",{},{},{},{},{}",
            fmt_f64(s.e_bar),
            fmt_f64(s.h),
            fmt_f64(s.hb_terminal),
            fmt_f64(s.min_h_margin),
            s.qp_status.as_str()
        )
        .unwrap();
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(record: &SimRecord, path: impl AsRef<Path>) -> Result<()> {
    let text = csv_string(record)?;
    std::fs::write(path.as_ref(), text)
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

/// Steps reconstructed from a CSV log. Fields absent from the log (the KKT
/// residual) come back as `None`.
#[derive(Debug, Clone)]
pub struct CsvData {
    pub n: usize,
    pub m: usize,
    pub steps: Vec<SimStep>,
}

fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "qp" => Ok(Mode::Qp),
        "backup" => Ok(Mode::Backup),
        other => Err(Error::Parse(format!("unknown mode '{other}'"))),
    }
}

fn parse_status(s: &str) -> Result<StepStatus> {
    match s {
        "optimal" => Ok(StepStatus::Optimal),
        "infeasible" => Ok(StepStatus::Infeasible),
        "stalled" => Ok(StepStatus::Stalled),
        other => Err(Error::Parse(format!("unknown qp_status '{other}'"))),
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse(format!("bad float '{s}'")))
}

pub fn parse_csv(text: &str) -> Result<CsvData> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n = cols.iter().filter(|c| c.starts_with('x') && c[1..].parse::<usize>().is_ok()).count();
    let m = cols.iter().filter(|c| c.starts_with('u') && c[1..].parse::<usize>().is_ok()).count();
    if n == 0 || m == 0 || header != csv_header(n, m) {
        return Err(Error::Parse(format!("unrecognized header '{header}'")));
    }
    let width = 1 + n + m + 1 + 2 * n + 5;
    let mut steps = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, found {}",
                lineno + 2,
                width,
                f.len()
            )));
        }
        let mut it = f.into_iter();
        let t = parse_f64(it.next().unwrap())?;
        let x = (&mut it).take(n).map(parse_f64).collect::<Result<Vec<_>>>()?;
        let u = (&mut it).take(m).map(parse_f64).collect::<Result<Vec<_>>>()?;
        let mode = parse_mode(it.next().unwrap())?;
        let d = (&mut it).take(n).map(parse_f64).collect::<Result<Vec<_>>>()?;
        let d_hat = (&mut it).take(n).map(parse_f64).collect::<Result<Vec<_>>>()?;
        let e_bar = parse_f64(it.next().unwrap())?;
        let h = parse_f64(it.next().unwrap())?;
        let hb_terminal = parse_f64(it.next().unwrap())?;
        let min_h_margin = parse_f64(it.next().unwrap())?;
        let qp_status = parse_status(it.next().unwrap())?;
        steps.push(SimStep {
            t,
            x: DVector::from_vec(x),
            u: DVector::from_vec(u),
            mode,
            d: DVector::from_vec(d),
            d_hat: DVector::from_vec(d_hat),
            e_bar,
            h,
            hb_terminal,
            min_h_margin,
            qp_status,
            kkt: None,
        });
    }
    if steps.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    Ok(CsvData { n, m, steps })
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<CsvData> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    parse_csv(&text)
}

const PANEL_W: f64 = 430.0;
const PANEL_H: f64 = 280.0;
const MARGIN: f64 = 52.0;
const GAP: f64 = 34.0;

/// One plotted curve: label, points, stroke color.
type Series = (String, Vec<(f64, f64)>, &'static str);

struct Panel {
    title: String,
    /// Non-finite samples are dropped before drawing.
    series: Vec<Series>,
    zero_line: bool,
}

fn finite(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    points.into_iter().filter(|(a, b)| a.is_finite() && b.is_finite()).collect()
}

fn panel_svg(out: &mut String, p: &Panel, ox: f64, oy: f64) {
    let pts: Vec<(f64, f64)> = p.series.iter().flat_map(|(_, v, _)| v.iter().copied()).collect();
    let (mut x0, mut x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (x, _)| (a.min(*x), b.max(*x)));
    let (mut y0, mut y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, y)| (a.min(*y), b.max(*y)));
    if !x0.is_finite() || x1 - x0 < 1e-12 {
        x0 = if x0.is_finite() { x0 - 1.0 } else { 0.0 };
        x1 = x0 + 2.0;
    }
    if !y0.is_finite() || y1 - y0 < 1e-12 {
        y0 = if y0.is_finite() { y0 - 1.0 } else { 0.0 };
        y1 = y0 + 2.0;
    }
    if p.zero_line {
        y0 = y0.min(0.0);
        y1 = y1.max(0.0);
    }
    let pad_x = 0.04 * (x1 - x0);
    let pad_y = 0.06 * (y1 - y0);
    let (x0, x1, y0, y1) = (x0 - pad_x, x1 + pad_x, y0 - pad_y, y1 + pad_y);
    let sx = |x: f64| ox + (x - x0) / (x1 - x0) * PANEL_W;
    let sy = |y: f64| oy + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;

    write!(
        out,
        "<rect x='{ox}' y='{oy}' width='{PANEL_W}' height='{PANEL_H}' fill='white' stroke='#444'/>"
    )
    .unwrap();
    write!(
        out,
        "<text x='{}' y='{}' font-size='15' text-anchor='middle' fill='#111'>{}</text>",
        ox + PANEL_W / 2.0,
        oy - 10.0,
        p.title
    )
    .unwrap();
    for (v, anchor, dx, dy) in [(x0, "start", 0.0, 16.0), (x1, "end", PANEL_W, 16.0)] {
        write!(
            out,
            "<text x='{}' y='{}' font-size='11' text-anchor='{}' fill='#555'>{:.3}</text>",
            ox + dx,
            oy + PANEL_H + dy,
            anchor,
            v
        )
        .unwrap();
    }
    for (v, dy) in [(y1, 12.0), (y0, PANEL_H)] {
        write!(
            out,
            "<text x='{}' y='{}' font-size='11' text-anchor='end' fill='#555'>{:.3}</text>",
            ox - 6.0,
            oy + dy,
            v
        )
        .unwrap();
    }
    if p.zero_line && y0 < 0.0 && y1 > 0.0 {
        write!(
            out,
            "<line x1='{}' y1='{z}' x2='{}' y2='{z}' stroke='#c33' stroke-dasharray='6 4'/>",
            ox,
            ox + PANEL_W,
            z = sy(0.0)
        )
        .unwrap();
    }
    for (si, (label, points, color)) in p.series.iter().enumerate() {
        if points.is_empty() {
            continue;
        }
        let path: String = points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect::<Vec<_>>()
            .join(" ");
        write!(out, "<polyline points='{path}' fill='none' stroke='{color}' stroke-width='1.4'/>")
            .unwrap();
        write!(
            out,
            "<text x='{}' y='{}' font-size='11' fill='{color}'>{label}</text>",
            ox + 8.0,
            oy + 16.0 + 14.0 * si as f64,
        )
        .unwrap();
    }
}

const COLORS: [&str; 6] = ["#1a6fb4", "#d07c1c", "#2b8a4b", "#8548b0", "#b23950", "#4d4d4d"];

/// Four quick-look panels: a phase plot of the first two states, the
/// barrier value, the applied inputs, and the estimation error against its
/// envelope.
pub fn svg_string(record: &SimRecord) -> Result<String> {
    if record.steps.is_empty() {
        return Err(Error::EmptyRecord);
    }
    let steps = &record.steps;
    let phase = Panel {
        title: format!("{}: x0 vs x1", record.scenario),
        series: vec![(
            "trajectory".into(),
            finite(steps.iter().map(|s| (s.x[0], *s.x.get(1).unwrap_or(&0.0))).collect()),
            COLORS[0],
        )],
        zero_line: false,
    };
    let barrier = Panel {
        title: "barrier h(x(t))".into(),
        series: vec![("h".into(), finite(steps.iter().map(|s| (s.t, s.h)).collect()), COLORS[2])],
        zero_line: true,
    };
    let inputs = Panel {
        title: "applied input u(t)".into(),
        series: (0..record.m)
            .map(|i| {
                (
                    format!("u{i}"),
                    finite(steps.iter().map(|s| (s.t, s.u[i])).collect()),
                    COLORS[(i + 1) % COLORS.len()],
                )
            })
            .collect(),
        zero_line: false,
    };
    let est = Panel {
        title: "estimation error vs envelope".into(),
        series: vec![
            (
                "||d - dhat||".into(),
                finite(steps.iter().map(|s| (s.t, (&s.d - &s.d_hat).norm())).collect()),
                COLORS[4],
            ),
            ("ebar".into(), finite(steps.iter().map(|s| (s.t, s.e_bar)).collect()), COLORS[5]),
        ],
        zero_line: false,
    };

    let total_w = MARGIN * 2.0 + PANEL_W * 2.0 + GAP;
    let total_h = MARGIN * 2.0 + PANEL_H * 2.0 + GAP * 2.0;
    let mut out = String::new();
    write!(
        out,
        "<svg xmlns='http://www.w3.org/2000/svg' width='{total_w}' height='{total_h}' \
         viewBox='0 0 {total_w} {total_h}' font-family='sans-serif'>"
    )
    .unwrap();
    write!(out, "<rect width='{total_w}' height='{total_h}' fill='#fafafa'/>").unwrap();
    for (i, p) in [phase, barrier, inputs, est].iter().enumerate() {
        let ox = MARGIN + (i % 2) as f64 * (PANEL_W + GAP);
        let oy = MARGIN + (i / 2) as f64 * (PANEL_H + GAP * 2.0);
        panel_svg(&mut out, p, ox, oy);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_svg(record: &SimRecord, path: impl AsRef<Path>) -> Result<()> {
    let text = svg_string(record)?;
    std::fs::write(path.as_ref(), text)
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}
