//! Minimal static SVG plots: line charts and ring heat strips. No
//! interactivity, no dependencies; output is deterministic for byte
//! identical reruns.

use lrd_core::error::Result;
use std::io::Write;
use std::path::Path;

const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
const W: f64 = 720.0;
const H: f64 = 440.0;
const MARGIN: f64 = 60.0;

fn finite_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Multi-series line plot; optional log axes (values must be positive
/// on a logged axis, others are skipped).
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    log_x: bool,
    log_y: bool,
) -> Result<()> {
    let tx = |v: f64| if log_x { v.log10() } else { v };
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let ok = |v: f64, log: bool| v.is_finite() && (!log || v > 0.0);

    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, p)| p.iter())
        .filter(|(x, y)| ok(*x, log_x) && ok(*y, log_y))
        .map(|(x, y)| (tx(*x), ty(*y)))
        .collect();
    let (x_lo, x_hi) = finite_bounds(pts.iter().map(|p| p.0));
    let (y_lo, y_hi) = finite_bounds(pts.iter().map(|p| p.1));
    let sx = (W - 2.0 * MARGIN) / (x_hi - x_lo);
    let sy = (H - 2.0 * MARGIN) / (y_hi - y_lo);
    let px = |x: f64| MARGIN + (x - x_lo) * sx;
    let py = |y: f64| H - MARGIN - (y - y_lo) * sy;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
        W / 2.0,
        title
    ));
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{}{}</text>\n",
        W / 2.0,
        H - 16.0,
        x_label,
        if log_x { " (log10)" } else { "" }
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 16 {})\">{}{}</text>\n",
        H / 2.0,
        H / 2.0,
        y_label,
        if log_y { " (log10)" } else { "" }
    ));
    // Axis extremes.
    for (v, x, y, anchor) in [
        (x_lo, px(x_lo), H - MARGIN + 16.0, "middle"),
        (x_hi, px(x_hi), H - MARGIN + 16.0, "middle"),
        (y_lo, MARGIN - 6.0, py(y_lo), "end"),
        (y_hi, MARGIN - 6.0, py(y_hi), "end"),
    ] {
        out.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{y:.1}\" font-size=\"10\" text-anchor=\"{anchor}\" font-family=\"sans-serif\">{v:.4}</text>\n"
        ));
    }

    for (si, (name, points)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|(x, y)| ok(*x, log_x) && ok(*y, log_y))
            .map(|(x, y)| format!("{:.2},{:.2}", px(tx(*x)), py(ty(*y))))
            .collect();
        if coords.len() > 1 {
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                coords.join(" ")
            ));
        }
        for c in &coords {
            let mut it = c.split(',');
            let (x, y) = (it.next().unwrap(), it.next().unwrap());
            out.push_str(&format!(
                "<circle cx=\"{x}\" cy=\"{y}\" r=\"2.2\" fill=\"{color}\"/>\n"
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"{color}\">{}</text>\n",
            W - MARGIN - 150.0,
            MARGIN + 16.0 * si as f64 + 4.0,
            name
        ));
    }
    out.push_str("</svg>\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Horizontal heat strips: one row of colored cells per labelled series
/// (a flat ring rendered as a bar). Blue is low, red is high.
pub fn ring_heatmap(path: &Path, title: &str, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let (lo, hi) = finite_bounds(rows.iter().flat_map(|(_, v)| v.iter().copied()));
    let cell_h = 28.0;
    let label_w = 180.0;
    let height = 60.0 + rows.len() as f64 * (cell_h + 10.0);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" viewBox=\"0 0 {W} {height}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
        W / 2.0,
        title
    ));
    for (ri, (name, values)) in rows.iter().enumerate() {
        let y = 44.0 + ri as f64 * (cell_h + 10.0);
        out.push_str(&format!(
            "<text x=\"8\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\">{}</text>\n",
            y + cell_h * 0.65,
            name
        ));
        let cell_w = (W - label_w - MARGIN) / values.len() as f64;
        for (i, v) in values.iter().enumerate() {
            let frac = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
            let r = (255.0 * frac) as u8;
            let b = (255.0 * (1.0 - frac)) as u8;
            out.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.2}\" height=\"{cell_h}\" fill=\"rgb({r},64,{b})\"/>\n",
                label_w + i as f64 * cell_w,
                cell_w.max(1.0)
            ));
        }
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{:.1}\" font-size=\"10\" font-family=\"sans-serif\">range [{lo:.4}, {hi:.4}]</text>\n",
        label_w,
        height - 10.0
    ));
    out.push_str("</svg>\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_render_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let line = dir.path().join("line.svg");
        let series = vec![
            ("a".to_string(), vec![(1.0, 2.0), (2.0, 1.5), (3.0, 2.5)]),
            ("b".to_string(), vec![(1.0, 1.0), (3.0, 3.0)]),
        ];
        line_plot(&line, "demo", "x", "y", &series, false, false).unwrap();
        let first = std::fs::read(&line).unwrap();
        line_plot(&line, "demo", "x", "y", &series, false, false).unwrap();
        assert_eq!(first, std::fs::read(&line).unwrap());
        assert!(String::from_utf8(first).unwrap().contains("polyline"));

        let heat = dir.path().join("heat.svg");
        ring_heatmap(
            &heat,
            "map",
            &[("crps".to_string(), vec![0.1, 0.4, 0.2, 0.9])],
        )
        .unwrap();
        assert!(std::fs::read_to_string(&heat).unwrap().contains("rect"));
    }

    #[test]
    fn log_axes_skip_nonpositive_points() {
        let dir = tempfile::tempdir().unwrap();
        let line = dir.path().join("log.svg");
        let series = vec![(
            "v".to_string(),
            vec![(10.0, 0.5), (100.0, 0.0), (1000.0, 0.2)],
        )];
        line_plot(&line, "log demo", "years", "loss", &series, true, true).unwrap();
        assert!(line.exists());
    }
}
