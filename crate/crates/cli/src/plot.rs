//! Deterministic SVG renderings of metrics and sweep summaries. Purely
//! presentational: every byte is derived from the input CSV.

use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    LossCurve,
    SweepBars,
}

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("malformed CSV: {0}")]
    Malformed(String),
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn parse_csv(text: &str) -> Result<Csv, PlotError> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| PlotError::Malformed("missing header row".to_string()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(PlotError::Malformed(format!(
                "row {} has {} fields, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(Csv { header, rows })
}

fn col(csv: &Csv, name: &str) -> Result<usize, PlotError> {
    csv.header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| PlotError::Malformed(format!("missing column '{name}'")))
}

fn num(s: &str) -> Result<f64, PlotError> {
    s.parse()
        .map_err(|_| PlotError::Malformed(format!("not a number: '{s}'")))
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-300);
        LEFT + (v - self.x_min) / span * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-300);
        HEIGHT - BOTTOM - (v - self.y_min) / span * (HEIGHT - TOP - BOTTOM)
    }
}

fn svg_open(out: &mut String) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{LEFT}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        HEIGHT - BOTTOM,
        HEIGHT - BOTTOM,
        WIDTH - RIGHT,
        HEIGHT - BOTTOM,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 12.0,
        x_label,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        y_label,
    );
}

fn tick_labels(out: &mut String, frame: &Frame) {
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x_min + t * (frame.x_max - frame.x_min);
        let yv = frame.y_min + t * (frame.y_max - frame.y_min);
        let _ = write!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{:.3}</text>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>\n",
            frame.x(xv),
            HEIGHT - BOTTOM + 16.0,
            xv,
            LEFT - 6.0,
            frame.y(yv) + 4.0,
            yv,
        );
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 14.0 + 16.0 * i as f64;
        let _ = write!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            WIDTH - RIGHT - 150.0,
            y - 10.0,
            COLORS[i % COLORS.len()],
            WIDTH - RIGHT - 132.0,
            y,
            name,
        );
    }
}

/// Training curves: post- and pre-adaptation eval loss against iteration.
pub fn loss_curve(csv: &Csv) -> Result<String, PlotError> {
    let it = col(csv, "iteration")?;
    let post = col(csv, "post_adapt_eval_loss")?;
    let pre = col(csv, "pre_adapt_eval_loss")?;

    let mut out = String::new();
    svg_open(&mut out);
    axes(&mut out, "iteration", "eval loss");
    if csv.rows.is_empty() {
        out.push_str("</svg>\n");
        return Ok(out);
    }

    let mut xs = Vec::new();
    let mut series = vec![Vec::new(), Vec::new()];
    for row in &csv.rows {
        xs.push(num(&row[it])?);
        series[0].push(num(&row[post])?);
        series[1].push(num(&row[pre])?);
    }
    let ys: Vec<f64> = series.iter().flatten().copied().collect();
    let frame = Frame {
        x_min: xs.iter().cloned().fold(f64::MAX, f64::min),
        x_max: xs.iter().cloned().fold(f64::MIN, f64::max),
        y_min: ys.iter().cloned().fold(f64::MAX, f64::min).min(0.0),
        y_max: ys.iter().cloned().fold(f64::MIN, f64::max),
    };
    tick_labels(&mut out, &frame);
    for (si, s) in series.iter().enumerate() {
        let points: Vec<String> = xs
            .iter()
            .zip(s)
            .map(|(&x, &y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
            .collect();
        let _ = write!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            points.join(" "),
            COLORS[si],
        );
    }
    legend(&mut out, &["post-adaptation", "pre-adaptation"]);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Grouped bars from a sweep summary: one series per mode, one group per
/// swept value. Spread rows are annotations, not bars.
pub fn sweep_bars(csv: &Csv) -> Result<String, PlotError> {
    if csv.header.len() < 3 {
        return Err(PlotError::Malformed(
            "sweep summary needs mode, sweep value, and metric columns".to_string(),
        ));
    }
    let y_label = csv.header[2].clone();
    let mut modes: Vec<String> = Vec::new();
    let mut groups: Vec<String> = Vec::new();
    let mut bars: Vec<(usize, usize, f64)> = Vec::new();
    for row in &csv.rows {
        if row[1] == "spread" {
            continue;
        }
        let mi = modes.iter().position(|m| *m == row[0]).unwrap_or_else(|| {
            modes.push(row[0].clone());
            modes.len() - 1
        });
        let gi = groups.iter().position(|g| *g == row[1]).unwrap_or_else(|| {
            groups.push(row[1].clone());
            groups.len() - 1
        });
        bars.push((mi, gi, num(&row[2])?));
    }

    let mut out = String::new();
    svg_open(&mut out);
    axes(&mut out, &csv.header[1], &y_label);
    if bars.is_empty() {
        out.push_str("</svg>\n");
        return Ok(out);
    }

    let y_max = bars.iter().map(|b| b.2).fold(f64::MIN, f64::max).max(1e-300);
    let plot_w = WIDTH - LEFT - RIGHT;
    let group_w = plot_w / groups.len() as f64;
    let bar_w = group_w * 0.8 / modes.len() as f64;
    for &(mi, gi, v) in &bars {
        let x = LEFT + gi as f64 * group_w + group_w * 0.1 + mi as f64 * bar_w;
        let h = v / y_max * (HEIGHT - TOP - BOTTOM);
        let _ = write!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>\n",
            x,
            HEIGHT - BOTTOM - h,
            bar_w,
            h,
            COLORS[mi % COLORS.len()],
        );
    }
    for (gi, g) in groups.iter().enumerate() {
        let _ = write!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            LEFT + (gi as f64 + 0.5) * group_w,
            HEIGHT - BOTTOM + 16.0,
            g,
        );
    }
    let _ = write!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>\n",
        LEFT - 6.0,
        TOP + 4.0,
        y_max,
    );
    let mode_refs: Vec<&str> = modes.iter().map(String::as_str).collect();
    legend(&mut out, &mode_refs);
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_plot(csv_text: &str, kind: PlotKind) -> Result<String, PlotError> {
    let csv = parse_csv(csv_text)?;
    match kind {
        PlotKind::LossCurve => loss_curve(&csv),
        PlotKind::SweepBars => sweep_bars(&csv),
    }
}
