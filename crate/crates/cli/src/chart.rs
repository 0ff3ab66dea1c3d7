//! Plot-data files and the static SVG charts rendered from them.
//!
//! A plot-data file is plain text: `# key: value` header lines (`kind`,
//! `title`, `x`, `y`), then whitespace-separated data rows. `bar` rows are
//! `label value`, `line` rows are `x y`, `heat` rows are one matrix row each.
//! [`render`] reads nothing else, so a chart can always be rebuilt from its
//! data file.

use std::fmt::Write;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChartKind {
    Bar,
    Line,
    Heat,
}

impl ChartKind {
    fn name(self) -> &'static str {
        match self {
            ChartKind::Bar => "bar",
            ChartKind::Line => "line",
            ChartKind::Heat => "heat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    pub kind: ChartKind,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub rows: Vec<Vec<String>>,
}

impl PlotData {
    pub fn new(kind: ChartKind, title: &str, x_label: &str, y_label: &str) -> Self {
        PlotData {
            kind,
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# kind: {}\n# title: {}\n# x: {}\n# y: {}\n",
            self.kind.name(),
            self.title,
            self.x_label,
            self.y_label
        );
        for row in &self.rows {
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut data = PlotData::new(ChartKind::Bar, "", "", "");
        let mut kind = None;
        for line in text.lines() {
            if let Some(header) = line.strip_prefix('#') {
                let (key, value) = header
                    .split_once(':')
                    .ok_or_else(|| CliError::Parse(format!("bad plot header `{line}`")))?;
                let value = value.trim().to_string();
                match key.trim() {
                    "kind" => {
                        kind = Some(match value.as_str() {
                            "bar" => ChartKind::Bar,
                            "line" => ChartKind::Line,
                            "heat" => ChartKind::Heat,
                            other => return Err(CliError::Parse(format!("unknown chart kind `{other}`"))),
                        })
                    }
                    "title" => data.title = value,
                    "x" => data.x_label = value,
                    "y" => data.y_label = value,
                    other => return Err(CliError::Parse(format!("unknown plot header `{other}`"))),
                }
            } else if !line.trim().is_empty() {
                data.rows
                    .push(line.split_whitespace().map(str::to_string).collect());
            }
        }
        data.kind = kind.ok_or_else(|| CliError::Parse("plot data has no kind".into()))?;
        Ok(data)
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn num(cell: &str) -> Result<f64, CliError> {
    cell.parse::<f64>()
        .map_err(|_| CliError::Parse(format!("`{cell}` is not a number")))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(data: &PlotData, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n\
         <line x1=\"{LEFT}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.1}\" stroke=\"black\"/>\n{body}</svg>\n",
        W / 2.0,
        escape(&data.title),
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 12.0,
        escape(&data.x_label),
        TOP + (H - TOP - BOTTOM) / 2.0,
        TOP + (H - TOP - BOTTOM) / 2.0,
        escape(&data.y_label),
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM,
        H - BOTTOM,
    )
}

fn y_axis(body: &mut String, lo: f64, hi: f64) {
    let plot_h = H - TOP - BOTTOM;
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - BOTTOM - plot_h * i as f64 / 4.0;
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            LEFT - 6.0,
            y + 4.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0f64, f64::MIN);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    (lo, hi)
}

fn bar(data: &PlotData) -> Result<String, CliError> {
    let mut pairs = Vec::with_capacity(data.rows.len());
    for row in &data.rows {
        match row.as_slice() {
            [label, value] => pairs.push((label.as_str(), num(value)?)),
            _ => return Err(CliError::Parse("bar rows need `label value`".into())),
        }
    }
    let (lo, hi) = range(pairs.iter().map(|p| p.1));
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let slot = plot_w / pairs.len().max(1) as f64;
    let mut body = String::new();
    y_axis(&mut body, lo, hi);
    let zero_y = H - BOTTOM - plot_h * (0.0 - lo) / (hi - lo);
    for (i, (label, v)) in pairs.iter().enumerate() {
        let y = H - BOTTOM - plot_h * (v - lo) / (hi - lo);
        let x = LEFT + slot * i as f64 + slot * 0.1;
        let _ = writeln!(
            body,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#4a78b0\"/>",
            y.min(zero_y),
            slot * 0.8,
            (zero_y - y).abs()
        );
        if pairs.len() <= 24 {
            let _ = writeln!(
                body,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                x + slot * 0.4,
                H - BOTTOM + 14.0,
                escape(label)
            );
        }
    }
    Ok(frame(data, &body))
}

fn line(data: &PlotData) -> Result<String, CliError> {
    let mut pts = Vec::with_capacity(data.rows.len());
    for row in &data.rows {
        match row.as_slice() {
            [x, y] => pts.push((num(x)?, num(y)?)),
            _ => return Err(CliError::Parse("line rows need `x y`".into())),
        }
    }
    let (xlo, xhi) = range(pts.iter().map(|p| p.0));
    let (ylo, yhi) = range(pts.iter().map(|p| p.1));
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let at = |(x, y): (f64, f64)| {
        (
            LEFT + plot_w * (x - xlo) / (xhi - xlo),
            H - BOTTOM - plot_h * (y - ylo) / (yhi - ylo),
        )
    };
    let mut body = String::new();
    y_axis(&mut body, ylo, yhi);
    let path: Vec<String> = pts
        .iter()
        .map(|&p| {
            let (x, y) = at(p);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    let _ = writeln!(
        body,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>",
        path.join(" ")
    );
    for &p in &pts {
        let (x, y) = at(p);
        let _ = writeln!(body, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"#c0392b\"/>");
        let _ = writeln!(
            body,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            H - BOTTOM + 14.0,
            tick(p.0)
        );
    }
    Ok(frame(data, &body))
}

fn heat(data: &PlotData) -> Result<String, CliError> {
    let grid: Vec<Vec<f64>> = data
        .rows
        .iter()
        .map(|r| r.iter().map(|c| num(c)).collect())
        .collect::<Result<_, _>>()?;
    let n_rows = grid.len();
    let n_cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let max = grid.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let cell_w = (W - LEFT - RIGHT) / n_cols.max(1) as f64;
    let cell_h = (H - TOP - BOTTOM) / n_rows.max(1) as f64;
    let mut body = String::new();
    for (r, row) in grid.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let shade = if max > 0.0 { v / max } else { 0.0 };
            let level = (255.0 * (1.0 - shade)).round() as u8;
            let (x, y) = (LEFT + cell_w * c as f64, TOP + cell_h * r as f64);
            let _ = writeln!(
                body,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell_w:.1}\" height=\"{cell_h:.1}\" fill=\"rgb({level},{level},255)\" stroke=\"#dddddd\"/>"
            );
            let _ = writeln!(
                body,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                x + cell_w / 2.0,
                y + cell_h / 2.0 + 4.0,
                tick(v)
            );
        }
    }
    Ok(frame(data, &body))
}

pub fn render(data: &PlotData) -> Result<String, CliError> {
    match data.kind {
        ChartKind::Bar => bar(data),
        ChartKind::Line => line(data),
        ChartKind::Heat => heat(data),
    }
}

/// Renders the chart for a plot-data file's text.
pub fn render_text(text: &str) -> Result<String, CliError> {
    render(&PlotData::parse(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: ChartKind) -> PlotData {
        let mut d = PlotData::new(kind, "t & <t>", "x", "y");
        match kind {
            ChartKind::Bar => {
                d.push(vec!["a".into(), "3".into()]);
                d.push(vec!["b".into(), "5".into()]);
            }
            ChartKind::Line => {
                d.push(vec!["0.1".into(), "0.5".into()]);
                d.push(vec!["0.2".into(), "0.25".into()]);
            }
            ChartKind::Heat => {
                d.push(vec!["4".into(), "0".into()]);
                d.push(vec!["1".into(), "3".into()]);
            }
        }
        d
    }

    #[test]
    fn plot_data_round_trips() {
        for kind in [ChartKind::Bar, ChartKind::Line, ChartKind::Heat] {
            let d = sample(kind);
            assert_eq!(PlotData::parse(&d.to_text()).unwrap(), d);
        }
    }

    #[test]
    fn rendering_is_a_function_of_the_text() {
        for kind in [ChartKind::Bar, ChartKind::Line, ChartKind::Heat] {
            let text = sample(kind).to_text();
            let svg = render_text(&text).unwrap();
            assert_eq!(svg, render_text(&text).unwrap());
            assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
            assert!(svg.contains("t &amp; &lt;t&gt;"));
        }
    }

    #[test]
    fn malformed_data_is_rejected() {
        assert!(render_text("3 4\n").is_err());
        assert!(render_text("# kind: bar\na b c\n").is_err());
        assert!(render_text("# kind: line\nx 1\n").is_err());
        assert!(render_text("# kind: pie\n").is_err());
    }
}
