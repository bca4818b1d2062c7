//! Minimal native SVG line plots (polylines + axes + labels); figures are
//! diagnostics, not the artifact's product.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One named series of (x, y) points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn data_range(series: &[Series], pick: fn(&(f64, f64)) -> f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for p in &s.points {
            let v = pick(p);
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Render a line plot; returns the SVG document as a string.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x_lo, x_hi) = data_range(series, |p| p.0);
    let (y_lo, y_hi) = data_range(series, |p| p.1);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN),
            HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN),
        )
    };

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    ));
    // Tick labels at the axis extremes.
    out.push_str(&format!(
        "<text x=\"{m}\" y=\"{y}\" font-size=\"11\" text-anchor=\"middle\">{x_lo:.3}</text>\n\
         <text x=\"{r}\" y=\"{y}\" font-size=\"11\" text-anchor=\"middle\">{x_hi:.3}</text>\n\
         <text x=\"{xl}\" y=\"{b}\" font-size=\"11\" text-anchor=\"end\">{y_lo:.3}</text>\n\
         <text x=\"{xl}\" y=\"{t}\" font-size=\"11\" text-anchor=\"end\">{y_hi:.3}</text>\n",
        m = MARGIN,
        r = WIDTH - MARGIN,
        y = HEIGHT - MARGIN + 18.0,
        xl = MARGIN - 6.0,
        b = HEIGHT - MARGIN,
        t = MARGIN + 4.0
    ));
    // Titles.
    out.push_str(&format!(
        "<text x=\"{cx}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{title}</text>\n\
         <text x=\"{cx}\" y=\"{yb}\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{cy}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {cy})\">{y_label}</text>\n",
        cx = WIDTH / 2.0,
        yb = HEIGHT - 12.0,
        cy = HEIGHT / 2.0
    ));
    // Series polylines + legend.
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = MARGIN + 16.0 * i as f64 + 8.0;
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{ly}\" x2=\"{x1}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n\
             <text x=\"{xt}\" y=\"{yt}\" font-size=\"11\">{label}</text>\n",
            x0 = WIDTH - MARGIN - 120.0,
            x1 = WIDTH - MARGIN - 100.0,
            xt = WIDTH - MARGIN - 94.0,
            yt = ly + 4.0,
            label = s.label
        ));
    }
    out.push_str("</svg>\n");
    out
}
