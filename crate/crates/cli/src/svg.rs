//! Just enough SVG for bar and line figures: a plot area with linear axes.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Round step for about `n` ticks across `span`.
pub fn nice_step(span: f64, n: f64) -> f64 {
    if !(span.is_finite() && span > 0.0) {
        return 1.0;
    }
    let raw = span / n;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.5 {
        2.0
    } else if f < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

pub struct Figure {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
    legend: Vec<(String, String)>,
    title: String,
    x_label: String,
    y_label: String,
}

impl Figure {
    /// Data ranges are widened if empty so the mapping stays finite.
    pub fn new(title: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(a, b): (f64, f64)| if b - a > 1e-12 { (a, b) } else { (a - 0.5, b + 0.5) };
        Self {
            body: String::new(),
            x: widen(x),
            y: widen(y),
            legend: Vec::new(),
            title: title.to_string(),
            x_label: String::new(),
            y_label: String::new(),
        }
    }

    pub fn labels(mut self, x: &str, y: &str) -> Self {
        self.x_label = x.to_string();
        self.y_label = y.to_string();
        self
    }

    /// Shrinks the plot area along one axis so one data unit is the same
    /// length on both.
    pub fn equal_aspect(&mut self) {
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = pw / (self.x.1 - self.x.0);
        let sy = ph / (self.y.1 - self.y.0);
        if sx > sy {
            let extra = (pw / sy - (self.x.1 - self.x.0)) / 2.0;
            self.x = (self.x.0 - extra, self.x.1 + extra);
        } else {
            let extra = (ph / sx - (self.y.1 - self.y.0)) / 2.0;
            self.y = (self.y.0 - extra, self.y.1 + extra);
        }
    }

    pub fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    pub fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    pub fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, fill: &str) {
        let (a, b) = (self.px(x0.min(x1)), self.py(y0.max(y1)));
        let (w, h) = (self.px(x0.max(x1)) - a, self.py(y0.min(y1)) - b);
        let _ = writeln!(
            self.body,
            r#"<rect x="{a:.2}" y="{b:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    pub fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{stroke}" stroke-width="{width}"/>"#,
            self.px(x0),
            self.py(y0),
            self.px(x1),
            self.py(y1)
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, dashed: bool) {
        if pts.len() < 2 {
            return;
        }
        let mut d = String::new();
        for (x, y) in pts {
            let _ = write!(d, "{:.2},{:.2} ", self.px(*x), self.py(*y));
        }
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.6"{dash}/>"#,
            d.trim_end()
        );
    }

    /// Vertical bar from zero with a ± error whisker.
    pub fn bar(&mut self, center: f64, half_width: f64, value: f64, err: f64, fill: &str) {
        self.rect(center - half_width, 0.0, center + half_width, value, fill);
        if err > 0.0 {
            let cap = half_width * 0.4;
            self.line(center, value - err, center, value + err, "#222", 1.2);
            self.line(center - cap, value + err, center + cap, value + err, "#222", 1.2);
            self.line(center - cap, value - err, center + cap, value - err, "#222", 1.2);
        }
    }

    pub fn text_at(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}" font-size="12">{}</text>"#,
            self.px(x),
            self.py(y),
            esc(s)
        );
    }

    pub fn legend(&mut self, label: &str, color: &str) {
        self.legend.push((label.to_string(), color.to_string()));
    }

    /// Category labels under the x axis instead of numeric ticks.
    pub fn finish_categorical(self, cats: &[(f64, String)]) -> String {
        self.finish_inner(Some(cats))
    }

    pub fn finish(self) -> String {
        self.finish_inner(None)
    }

    fn finish_inner(self, cats: Option<&[(f64, String)]>) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(&self.title));
        let (x0, x1) = (LEFT, W - RIGHT);
        let (y0, y1) = (H - BOTTOM, TOP);
        // y ticks with light grid lines
        let step = nice_step(self.y.1 - self.y.0, 5.0);
        let mut v = (self.y.0 / step).ceil() * step;
        while v <= self.y.1 + step * 1e-9 {
            let p = self.py(v);
            let _ = writeln!(s, r##"<line x1="{x0}" y1="{p:.2}" x2="{x1}" y2="{p:.2}" stroke="#ddd"/>"##);
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{}</text>"#,
                x0 - 6.0,
                p + 4.0,
                fmt_tick(v, step)
            );
            v += step;
        }
        match cats {
            Some(cats) => {
                for (x, label) in cats {
                    let _ = writeln!(
                        s,
                        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
                        self.px(*x),
                        y0 + 18.0,
                        esc(label)
                    );
                }
            }
            None => {
                let step = nice_step(self.x.1 - self.x.0, 6.0);
                let mut v = (self.x.0 / step).ceil() * step;
                while v <= self.x.1 + step * 1e-9 {
                    let p = self.px(v);
                    let _ = writeln!(s, r##"<line x1="{p:.2}" y1="{y0}" x2="{p:.2}" y2="{y1}" stroke="#eee"/>"##);
                    let _ = writeln!(
                        s,
                        r#"<text x="{p:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#,
                        y0 + 16.0,
                        fmt_tick(v, step)
                    );
                    v += step;
                }
            }
        }
        s.push_str(&self.body);
        let _ = writeln!(s, r##"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="#333"/>"##, x1 - x0, y0 - y1);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 10.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle" font-size="12">{}</text>"#,
            (y0 + y1) / 2.0,
            esc(&self.y_label)
        );
        for (i, (label, color)) in self.legend.iter().enumerate() {
            let ly = TOP + 10.0 + i as f64 * 20.0;
            let lx = W - RIGHT + 12.0;
            let _ = writeln!(s, r#"<rect x="{lx}" y="{:.2}" width="14" height="10" fill="{color}"/>"#, ly - 9.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" font-size="11">{}</text>"#, lx + 20.0, esc(label));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let v = if v.abs() < step * 1e-9 { 0.0 } else { v };
    format!("{v:.decimals$}")
}
