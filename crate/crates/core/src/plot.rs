//! SVG rendering of one analysed window: observed MBP, forecast trend,
//! forecast cut-off and drug infusion intervals.

use std::fmt::Write as _;

use crate::analysis::{AnalysisReport, MismatchRecord};
use crate::preprocess::inverse_scale;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 45.0;

/// Geometry needed to place a record on the clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotLayout {
    pub step_min: i64,
    pub lookback_steps: usize,
    pub scale_max: f64,
}

impl From<&AnalysisReport> for PlotLayout {
    fn from(r: &AnalysisReport) -> Self {
        Self {
            step_min: r.step_min,
            lookback_steps: r.lookback_steps,
            scale_max: r.scale_max,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Frame {
    t0: f64,
    t1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, t: f64) -> f64 {
        MARGIN_LEFT + (t - self.t0) / (self.t1 - self.t0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn polyline(frame: &Frame, points: impl Iterator<Item = (f64, f64)>) -> String {
    points
        .map(|(t, v)| format!("{:.2},{:.2}", frame.x(t), frame.y(v)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders `record` as a standalone SVG document. Time runs in minutes
/// relative to the cut-off; values are shown in mmHg. Output depends only on
/// the inputs.
pub fn render_record(record: &MismatchRecord, layout: PlotLayout) -> String {
    let step = layout.step_min as f64;
    let lookback = layout.lookback_steps;
    let observed = inverse_scale(&record.observed, layout.scale_max);
    let forecast = inverse_scale(&record.forecast_trend, layout.scale_max);
    let time = |k: usize| (k as f64 - lookback as f64) * step;

    let t0 = time(0);
    let t1 = time(observed.len().saturating_sub(1)).max(t0 + step);
    let (mut lo, mut hi) = observed
        .iter()
        .chain(&forecast)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, layout.scale_max);
    }
    let pad = ((hi - lo) * 0.1).max(1.0);
    let frame = Frame {
        t0,
        t1,
        y0: (lo - pad).floor(),
        y1: (hi + pad).ceil(),
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<title>{} trend DTW {:.6e}</title>"#,
        escape(&record.window_id),
        record.trend_dtw
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    let (plot_left, plot_right) = (frame.x(t0), frame.x(t1));
    for e in &record.drug_events {
        let start = ((e.start_min - record.cutoff_min) as f64).clamp(t0, t1);
        let end = ((e.end_min - record.cutoff_min) as f64).clamp(t0, t1);
        if end <= start {
            continue;
        }
        let _ = writeln!(
            svg,
            r##"<rect class="drug-interval" x="{:.2}" y="{MARGIN_TOP:.2}" width="{:.2}" height="{:.2}" fill="#f4a582" fill-opacity="0.35"><title>{}</title></rect>"##,
            frame.x(start),
            frame.x(end) - frame.x(start),
            HEIGHT - MARGIN_TOP - MARGIN_BOTTOM,
            escape(&e.drug_name)
        );
    }

    // Axes with ticks every hour.
    let bottom = HEIGHT - MARGIN_BOTTOM;
    let _ = writeln!(
        svg,
        r#"<path class="axes" d="M{plot_left:.2},{MARGIN_TOP:.2} L{plot_left:.2},{bottom:.2} L{plot_right:.2},{bottom:.2}" fill="none" stroke="black"/>"#
    );
    let mut tick = (t0 / 60.0).ceil() * 60.0;
    while tick <= t1 {
        let x = frame.x(tick);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            bottom + 16.0,
            tick / 60.0
        );
        tick += 60.0;
    }
    for v in [frame.y0, frame.y1] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v}</text>"#,
            plot_left - 6.0,
            frame.y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">hours from cut-off</text>"#,
        (plot_left + plot_right) / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">MBP (mmHg)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    let _ = writeln!(
        svg,
        r##"<polyline class="observed" points="{}" fill="none" stroke="#2166ac" stroke-width="1.5"/>"##,
        polyline(&frame, observed.iter().enumerate().map(|(k, &v)| (time(k), v)))
    );
    let _ = writeln!(
        svg,
        r##"<polyline class="forecast-trend" points="{}" fill="none" stroke="#b2182b" stroke-width="2"/>"##,
        polyline(
            &frame,
            forecast.iter().enumerate().map(|(k, &v)| (time(lookback + k), v))
        )
    );
    let cx = frame.x(0.0);
    let _ = writeln!(
        svg,
        r#"<line class="cutoff" x1="{cx:.2}" y1="{MARGIN_TOP:.2}" x2="{cx:.2}" y2="{bottom:.2}" stroke="black" stroke-dasharray="6 4"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
        MARGIN_LEFT,
        MARGIN_TOP - 10.0,
        escape(&record.window_id)
    );
    svg.push_str("</svg>\n");
    svg
}
