//! Render a training metrics CSV as static SVG curves: one panel for the
//! loss components, one for the validation F1 series.

use crate::error::DataError;

struct Series {
    name: &'static str,
    color: &'static str,
    points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 760.0;
const PANEL_HEIGHT: f64 = 300.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 40.0;

const LOSS_COLUMNS: [(usize, &str, &str); 6] = [
    (1, "crf", "#1f77b4"),
    (2, "entity", "#ff7f0e"),
    (3, "relation", "#2ca02c"),
    (4, "intra", "#d62728"),
    (5, "inter", "#9467bd"),
    (6, "total", "#000000"),
];

const F1_COLUMNS: [(usize, &str, &str); 3] = [
    (7, "entity F1", "#ff7f0e"),
    (8, "relation F1", "#2ca02c"),
    (9, "triple F1", "#000000"),
];

fn parse_csv(csv: &str) -> Result<(Vec<Series>, Vec<Series>), DataError> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::parse("metrics csv", "empty file"))?;
    if !header.starts_with("step,") {
        return Err(DataError::parse(
            "metrics csv",
            format!("unexpected header `{header}`"),
        ));
    }
    let mut losses: Vec<Series> = LOSS_COLUMNS
        .iter()
        .map(|(_, name, color)| Series {
            name,
            color,
            points: Vec::new(),
        })
        .collect();
    let mut f1s: Vec<Series> = F1_COLUMNS
        .iter()
        .map(|(_, name, color)| Series {
            name,
            color,
            points: Vec::new(),
        })
        .collect();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 10 {
            return Err(DataError::parse(
                format!("metrics csv line {}", idx + 2),
                "expected 10 columns",
            ));
        }
        let step: f64 = cols[0].parse().map_err(|_| {
            DataError::parse(format!("metrics csv line {}", idx + 2), "bad step")
        })?;
        for (series, (col, _, _)) in losses.iter_mut().zip(LOSS_COLUMNS.iter()) {
            if let Ok(v) = cols[*col].parse::<f64>() {
                series.points.push((step, v));
            }
        }
        for (series, (col, _, _)) in f1s.iter_mut().zip(F1_COLUMNS.iter()) {
            if !cols[*col].is_empty() {
                if let Ok(v) = cols[*col].parse::<f64>() {
                    series.points.push((step, v));
                }
            }
        }
    }
    Ok((losses, f1s))
}

fn panel(svg: &mut String, series: &[Series], title: &str, y_offset: f64) {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let (mut x_max, mut y_max) = (1.0f64, 1e-9f64);
    let mut y_min = 0.0f64;
    for s in series {
        for (x, y) in &s.points {
            x_max = x_max.max(*x);
            y_max = y_max.max(*y);
            y_min = y_min.min(*y);
        }
    }
    let y_span = (y_max - y_min).max(1e-9);
    let sx = |x: f64| MARGIN_LEFT + x / x_max * plot_w;
    let sy = |y: f64| y_offset + MARGIN_TOP + (1.0 - (y - y_min) / y_span) * plot_h;

    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"14\" font-family=\"sans-serif\">{title}</text>\n",
        MARGIN_LEFT,
        y_offset + 18.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y1}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"#444\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"#444\"/>\n",
        x0 = MARGIN_LEFT,
        x1 = MARGIN_LEFT + plot_w,
        y0 = y_offset + MARGIN_TOP,
        y1 = y_offset + MARGIN_TOP + plot_h,
    ));
    // y tick labels
    for frac in [0.0, 0.5, 1.0] {
        let y_val = y_min + frac * y_span;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"end\">{:.3}</text>\n",
            MARGIN_LEFT - 6.0,
            sy(y_val) + 3.0,
            y_val
        ));
    }
    // x tick labels
    for frac in [0.0, 0.5, 1.0] {
        let x_val = frac * x_max;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"middle\">{:.0}</text>\n",
            sx(x_val),
            y_offset + MARGIN_TOP + plot_h + 16.0,
            x_val
        ));
    }
    let mut legend_y = y_offset + MARGIN_TOP + 10.0;
    for s in series {
        if s.points.is_empty() {
            continue;
        }
        let path: Vec<String> = s
            .points
            .iter()
            .map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            s.color,
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"{c}\" stroke-width=\"2\"/>\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" font-family=\"sans-serif\">{name}</text>\n",
            x = WIDTH - MARGIN_RIGHT + 10.0,
            x2 = WIDTH - MARGIN_RIGHT + 30.0,
            y = legend_y,
            c = s.color,
            tx = WIDTH - MARGIN_RIGHT + 36.0,
            ty = legend_y + 4.0,
            name = s.name
        ));
        legend_y += 16.0;
    }
}

/// Turn a metrics CSV (as produced by training) into a standalone SVG.
pub fn render_svg(csv: &str) -> Result<String, DataError> {
    let (losses, f1s) = parse_csv(csv)?;
    let total_h = PANEL_HEIGHT * 2.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{total_h}\" viewBox=\"0 0 {WIDTH} {total_h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    panel(&mut svg, &losses, "training loss components", 0.0);
    panel(
        &mut svg,
        &f1s,
        "validation micro F1 (stddev over episodes)",
        PANEL_HEIGHT,
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "\
step,loss_crf,loss_entity,loss_relation,loss_intra,loss_inter,loss_total,val_entity_f1,val_relation_f1,val_triple_f1
0,2.0,1.5,1.2,0.4,0.9,5.275,,,
1,1.8,1.4,1.1,0.3,0.8,4.78,0.5,0.7,0.4
2,1.6,1.2,1.0,0.3,0.7,4.325,,,
";

    #[test]
    fn renders_polylines_for_all_series() {
        let svg = render_svg(CSV).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("relation F1"));
        assert!(svg.contains("total"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_or_malformed_input_is_an_error() {
        assert!(render_svg("").is_err());
        assert!(render_svg("nope\n1,2\n").is_err());
        assert!(render_svg("step,loss_crf\n0,1\n").is_err());
    }
}
