//! Static SVG rendering for the pipeline figures.
//!
//! Output is plain text built with fixed-precision number formatting, so the
//! same inputs always give the same bytes.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::clustering::SymbolRow;
use crate::rmt::{mp_density, ClusterSpectrum};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn palette(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Tick label: compact for large magnitudes, three decimals otherwise.
fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        let mut svg = Self {
            width,
            height,
            body: String::new(),
        };
        svg.rect(0.0, 0.0, width, height, "#ffffff", None);
        svg
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: Option<&str>) {
        let stroke = stroke
            .map(|s| format!(" stroke=\"{s}\" stroke-width=\"1\""))
            .unwrap_or_default();
        let _ = writeln!(
            self.body,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\"{stroke}/>",
            num(x),
            num(y),
            num(w),
            num(h)
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"1\"/>",
            num(x1),
            num(y1),
            num(x2),
            num(y2)
        );
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], stroke: &str, width: f64, dashed: bool) {
        if points.is_empty() {
            return;
        }
        let pts: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{},{}", num(x), num(y)))
            .collect();
        let dash = if dashed {
            " stroke-dasharray=\"4 3\""
        } else {
            ""
        };
        let _ = writeln!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{}\"{dash}/>",
            pts.join(" "),
            num(width)
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        let _ = writeln!(
            self.body,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"{}\" text-anchor=\"{anchor}\">{}</text>",
            num(x),
            num(y),
            num(size),
            escape(content)
        );
    }

    pub fn vertical_text(&mut self, x: f64, y: f64, size: f64, content: &str) {
        let _ = writeln!(
            self.body,
            "<text x=\"{0}\" y=\"{1}\" font-family=\"sans-serif\" font-size=\"{2}\" text-anchor=\"middle\" transform=\"rotate(-90 {0} {1})\">{3}</text>",
            num(x),
            num(y),
            num(size),
            escape(content)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n{}</svg>\n",
            self.body,
            w = num(self.width),
            h = num(self.height)
        )
    }
}

/// A rectangular plotting area with linear data-to-pixel maps.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Frame {
    pub fn px(&self, v: f64) -> f64 {
        let (lo, hi) = self.x_range;
        self.x + (v - lo) / (hi - lo) * self.w
    }

    pub fn py(&self, v: f64) -> f64 {
        let (lo, hi) = self.y_range;
        self.y + self.h - (v - lo) / (hi - lo) * self.h
    }

    pub fn draw_axes(&self, svg: &mut Svg, title: &str, x_label: &str, y_label: &str) {
        svg.rect(self.x, self.y, self.w, self.h, "none", Some("#333333"));
        svg.text(self.x + self.w / 2.0, self.y - 8.0, 13.0, "middle", title);
        svg.text(
            self.x + self.w / 2.0,
            self.y + self.h + 34.0,
            11.0,
            "middle",
            x_label,
        );
        svg.vertical_text(self.x - 48.0, self.y + self.h / 2.0, 11.0, y_label);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x_range.0 + f * (self.x_range.1 - self.x_range.0);
            let yv = self.y_range.0 + f * (self.y_range.1 - self.y_range.0);
            let (px, py) = (self.px(xv), self.py(yv));
            svg.line(px, self.y + self.h, px, self.y + self.h + 4.0, "#333333");
            svg.text(px, self.y + self.h + 16.0, 10.0, "middle", &tick(xv));
            svg.line(self.x - 4.0, py, self.x, py, "#333333");
            svg.text(self.x - 6.0, py + 3.0, 10.0, "end", &tick(yv));
        }
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

fn draw_series(svg: &mut Svg, frame: &Frame, series: &[Series<'_>]) {
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|&(x, y)| (frame.px(x), frame.py(y)))
            .collect();
        svg.polyline(&pts, s.color, 1.2, s.dashed);
        let ly = frame.y + 14.0 + 14.0 * i as f64;
        svg.line(
            frame.x + frame.w - 110.0,
            ly - 4.0,
            frame.x + frame.w - 92.0,
            ly - 4.0,
            s.color,
        );
        svg.text(frame.x + frame.w - 88.0, ly, 10.0, "start", s.name);
    }
}

fn frame_for(x: f64, y: f64, w: f64, h: f64, series: &[Series<'_>]) -> Frame {
    Frame {
        x,
        y,
        w,
        h,
        x_range: padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))),
        y_range: padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))),
    }
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let mut svg = Svg::new(760.0, 420.0);
    let frame = frame_for(80.0, 40.0, 640.0, 320.0, series);
    frame.draw_axes(&mut svg, title, x_label, y_label);
    draw_series(&mut svg, &frame, series);
    svg.finish()
}

/// Raw vs filtered counts (left) and power spectra before/after (right).
pub fn filter_effect(
    region: &str,
    raw: &[f64],
    filtered: &[f64],
    freq: &[f64],
    power_raw: &[f64],
    power_filtered: &[f64],
) -> String {
    let mut svg = Svg::new(1200.0, 420.0);
    let idx = |v: &[f64]| -> Vec<(f64, f64)> {
        v.iter().enumerate().map(|(t, &y)| (t as f64, y)).collect()
    };
    let series = [
        Series {
            name: "raw",
            color: "#999999",
            points: idx(raw),
            dashed: false,
        },
        Series {
            name: "filtered",
            color: "#1f77b4",
            points: idx(filtered),
            dashed: false,
        },
    ];
    let left = frame_for(80.0, 40.0, 480.0, 320.0, &series);
    left.draw_axes(&mut svg, &format!("{region}: daily counts"), "day", "count");
    draw_series(&mut svg, &left, &series);

    let pair = |p: &[f64]| -> Vec<(f64, f64)> {
        freq.iter()
            .copied()
            .zip(p.iter().map(|v| (v + 1e-12).log10()))
            .collect()
    };
    let spectra = [
        Series {
            name: "raw",
            color: "#999999",
            points: pair(power_raw),
            dashed: false,
        },
        Series {
            name: "filtered",
            color: "#d62728",
            points: pair(power_filtered),
            dashed: false,
        },
    ];
    let right = frame_for(680.0, 40.0, 480.0, 320.0, &spectra);
    right.draw_axes(
        &mut svg,
        &format!("{region}: power spectrum"),
        "frequency [1/day]",
        "log10 power",
    );
    draw_series(&mut svg, &right, &spectra);
    svg.finish()
}

/// Diverging blue-white-red map of `[-1, 1]`.
fn diverging(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 {
        (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
    } else {
        (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
    };
    format!(
        "#{:02x}{:02x}{:02x}",
        r.round() as u8,
        g.round() as u8,
        b.round() as u8
    )
}

pub fn heatmap(title: &str, matrix: &DMatrix<f64>, labels: &[String]) -> String {
    let n = matrix.nrows().max(1);
    let cell = (560.0 / n as f64).clamp(4.0, 40.0);
    let side = cell * n as f64;
    let (x0, y0) = (160.0, 50.0);
    let mut svg = Svg::new(x0 + side + 110.0, y0 + side + 150.0);
    svg.text(x0 + side / 2.0, 28.0, 14.0, "middle", title);
    for i in 0..matrix.nrows() {
        for j in 0..matrix.ncols() {
            svg.rect(
                x0 + j as f64 * cell,
                y0 + i as f64 * cell,
                cell,
                cell,
                &diverging(matrix[(i, j)]),
                None,
            );
        }
    }
    svg.rect(x0, y0, side, side, "none", Some("#333333"));
    let font = (cell * 0.8).min(10.0);
    for (i, label) in labels.iter().enumerate().take(matrix.nrows()) {
        let c = (i as f64 + 0.5) * cell;
        svg.text(x0 - 4.0, y0 + c + font / 3.0, font, "end", label);
    }
    // Color bar.
    let bar_x = x0 + side + 30.0;
    for s in 0..100 {
        let v = 1.0 - 2.0 * s as f64 / 99.0;
        svg.rect(
            bar_x,
            y0 + s as f64 * side / 100.0,
            16.0,
            side / 100.0 + 0.5,
            &diverging(v),
            None,
        );
    }
    svg.text(bar_x + 20.0, y0 + 8.0, 10.0, "start", "1");
    svg.text(bar_x + 20.0, y0 + side / 2.0, 10.0, "start", "0");
    svg.text(bar_x + 20.0, y0 + side, 10.0, "start", "-1");
    svg.finish()
}

/// Cluster label per epoch as colored bars, with an optional daily incidence
/// line on a secondary axis.
pub fn symbolic_strip(
    title: &str,
    rows: &[SymbolRow],
    k: usize,
    window: usize,
    incidence: Option<&[f64]>,
) -> String {
    let mut svg = Svg::new(1000.0, 360.0);
    let last_day = rows
        .iter()
        .map(|r| r.epoch_start_day + window)
        .max()
        .unwrap_or(1)
        .max(incidence.map_or(0, <[f64]>::len)) as f64;
    let frame = Frame {
        x: 80.0,
        y: 40.0,
        w: 820.0,
        h: 240.0,
        x_range: (0.0, last_day),
        y_range: (0.5, k as f64 + 0.5),
    };
    frame.draw_axes(&mut svg, title, "day", "cluster");
    for r in rows {
        let x0 = frame.px(r.epoch_start_day as f64);
        let x1 = frame.px((r.epoch_start_day + window) as f64);
        let y = frame.py(r.cluster_id as f64 + 1.0);
        svg.rect(
            x0,
            y - 8.0,
            (x1 - x0).max(1.0),
            16.0,
            palette(r.cluster_id),
            None,
        );
    }
    if let Some(series) = incidence.filter(|s| !s.is_empty()) {
        let max = series.iter().copied().fold(0.0_f64, f64::max).max(1e-12);
        let pts: Vec<(f64, f64)> = series
            .iter()
            .enumerate()
            .map(|(t, &v)| (frame.px(t as f64), frame.y + frame.h - v / max * frame.h))
            .collect();
        svg.polyline(&pts, "#444444", 1.0, true);
        svg.text(
            frame.x + frame.w + 8.0,
            frame.y + 10.0,
            10.0,
            "start",
            "incidence",
        );
    }
    for c in 0..k {
        svg.text(
            frame.x + frame.w + 8.0,
            frame.py(c as f64 + 1.0) + 3.0,
            10.0,
            "start",
            &format!("C{}", c + 1),
        );
    }
    svg.finish()
}

/// Empirical histogram bars, ensemble histogram steps, binned and analytic
/// Marchenko-Pastur curves.
pub fn spectrum_overlay(spectrum: &ClusterSpectrum) -> String {
    let mut svg = Svg::new(760.0, 440.0);
    let hi = *spectrum.empirical.edges.last().unwrap_or(&1.0);
    let curve: Vec<(f64, f64)> = (1..400)
        .map(|i| {
            let x = hi * i as f64 / 400.0;
            (x, mp_density(x, &spectrum.mp))
        })
        .collect();
    let ymax = spectrum
        .empirical
        .densities
        .iter()
        .chain(&spectrum.wishart_histogram.densities)
        .chain(&spectrum.mp_histogram.densities)
        .copied()
        .chain(curve.iter().map(|p| p.1))
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let frame = Frame {
        x: 80.0,
        y: 40.0,
        w: 640.0,
        h: 320.0,
        x_range: (0.0, hi),
        y_range: (0.0, ymax * 1.05),
    };
    frame.draw_axes(
        &mut svg,
        &format!(
            "Cluster {}: eigenvalue density ({} matrices, mean corr {})",
            spectrum.cluster_id + 1,
            spectrum.n_matrices,
            num(spectrum.centroid_mean_correlation)
        ),
        "eigenvalue",
        "density",
    );
    let e = &spectrum.empirical;
    for (w, &d) in e.edges.windows(2).zip(&e.densities) {
        let (x0, x1) = (frame.px(w[0]), frame.px(w[1]));
        let y = frame.py(d);
        svg.rect(
            x0,
            y,
            (x1 - x0).max(0.5),
            frame.y + frame.h - y,
            "#9ecae1",
            Some("#6baed6"),
        );
    }
    let steps = |h: &crate::rmt::Histogram| -> Vec<(f64, f64)> {
        h.edges
            .windows(2)
            .zip(&h.densities)
            .flat_map(|(w, &d)| [(frame.px(w[0]), frame.py(d)), (frame.px(w[1]), frame.py(d))])
            .collect()
    };
    svg.polyline(&steps(&spectrum.wishart_histogram), "#d62728", 1.5, false);
    svg.polyline(&steps(&spectrum.mp_histogram), "#2ca02c", 1.5, true);
    let curve_px: Vec<(f64, f64)> = curve
        .iter()
        .map(|&(x, y)| (frame.px(x), frame.py(y)))
        .collect();
    svg.polyline(&curve_px, "#2ca02c", 1.0, false);
    for (i, (name, color)) in [
        ("empirical", "#6baed6"),
        ("Wishart (constant corr.)", "#d62728"),
        ("Marchenko-Pastur", "#2ca02c"),
    ]
    .iter()
    .enumerate()
    {
        let ly = frame.y + 16.0 + 14.0 * i as f64;
        svg.line(
            frame.x + frame.w - 170.0,
            ly - 4.0,
            frame.x + frame.w - 152.0,
            ly - 4.0,
            color,
        );
        svg.text(frame.x + frame.w - 148.0, ly, 10.0, "start", name);
    }
    svg.finish()
}
