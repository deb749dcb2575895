//! Minimal SVG emission for line charts and heatmaps. Data-first plotting:
//! every chart has a CSV twin, the SVG is a convenience rendering.

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Polyline chart of one or more named series over a shared x axis.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, ml, mb, mt, mr) = (640.0, 400.0, 60.0, 40.0, 36.0, 16.0);
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in &points {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if points.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mb - mt);

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    ));
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    for (i, frac) in [0.0f64, 0.5, 1.0].iter().enumerate() {
        let _ = i;
        let xv = x0 + frac * (x1 - x0);
        let yv = y0 + frac * (y1 - y0);
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{:.3}</text>\n",
            sx(xv),
            h - mb + 14.0,
            xv
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{:.4}</text>\n",
            ml - 4.0,
            sy(yv) + 3.0,
            yv
        ));
    }
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            w - mr - 150.0,
            mt + 14.0 * si as f64,
            escape(name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Grid heatmap with labeled rows and columns; cell shade scales with
/// |value| and sign picks the hue.
pub fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let cell = 36.0;
    let (ml, mt) = (170.0, 70.0);
    let w = ml + cell * cols.len() as f64 + 20.0;
    let h = mt + cell * rows.len() as f64 + 20.0;
    let vmax = values
        .iter()
        .flatten()
        .fold(1e-12f64, |a, v| a.max(v.abs()));
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    ));
    for (j, name) in cols.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
            ml + cell * (j as f64 + 0.5),
            mt - 8.0,
            escape(name)
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{}</text>\n",
            ml - 6.0,
            mt + cell * (i as f64 + 0.6),
            escape(row)
        ));
        for (j, v) in values[i].iter().enumerate() {
            let intensity = (v.abs() / vmax * 255.0).round() as u8;
            let fill = if *v >= 0.0 {
                format!("rgb({},{},255)", 255 - intensity, 255 - intensity)
            } else {
                format!("rgb(255,{},{})", 255 - intensity, 255 - intensity)
            };
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"#999\"/>\n",
                ml + cell * j as f64,
                mt + cell * i as f64
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}
