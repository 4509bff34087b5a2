//! Minimal static SVG bar charts for per-condition success rates. No
//! external renderer; the output is a self-contained grouped bar chart.

use crate::report::ExperimentReport;

const PALETTE: [&str; 8] = [
    "#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c", "#dc7ec0", "#797979",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart: one group per family, one bar per condition, y axis
/// success rate in percent.
pub fn success_bar_chart(report: &ExperimentReport, title: &str) -> String {
    let conditions = report.condition_ids();
    let families: Vec<String> = {
        let mut f = Vec::new();
        for row in &report.rows {
            if !f.contains(&row.family) {
                f.push(row.family.clone());
            }
        }
        f
    };

    let width = 900.0;
    let height = 420.0;
    let margin_l = 60.0;
    let margin_r = 20.0;
    let margin_t = 50.0;
    let margin_b = 80.0;
    let plot_w = width - margin_l - margin_r;
    let plot_h = height - margin_t - margin_b;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"28\" font-size=\"18\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        esc(title)
    ));

    // y axis with gridlines every 20%
    for tick in 0..=5 {
        let pct = tick as f64 * 20.0;
        let y = margin_t + plot_h * (1.0 - pct / 100.0);
        s.push_str(&format!(
            "<line x1=\"{margin_l}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>\n",
            margin_l + plot_w
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{pct:.0}%</text>\n",
            margin_l - 8.0,
            y + 4.0
        ));
    }

    if !families.is_empty() && !conditions.is_empty() {
        let group_w = plot_w / families.len() as f64;
        let bar_w = (group_w * 0.8) / conditions.len() as f64;
        for (fi, fam) in families.iter().enumerate() {
            let group_x = margin_l + fi as f64 * group_w + group_w * 0.1;
            for (ci, cond) in conditions.iter().enumerate() {
                let rate = report
                    .rows
                    .iter()
                    .find(|r| &r.condition_id == cond && &r.family == fam)
                    .map(|r| r.success_rate)
                    .unwrap_or(0.0);
                let bar_h = plot_h * rate / 100.0;
                let x = group_x + ci as f64 * bar_w;
                let y = margin_t + plot_h - bar_h;
                let color = PALETTE[ci % PALETTE.len()];
                s.push_str(&format!(
                    "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{bar_h:.2}\" \
                     fill=\"{color}\"><title>{}: {rate:.1}%</title></rect>\n",
                    bar_w * 0.9,
                    esc(cond)
                ));
            }
            s.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
                group_x + group_w * 0.4,
                margin_t + plot_h + 20.0,
                esc(fam)
            ));
        }
        // legend
        for (ci, cond) in conditions.iter().enumerate() {
            let x = margin_l + ci as f64 * 160.0;
            let y = height - 30.0;
            let color = PALETTE[ci % PALETTE.len()];
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
                y - 10.0
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{y}\" font-size=\"12\">{}</text>\n",
                x + 16.0,
                esc(cond)
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::ReportRow;

    #[test]
    fn chart_contains_bars_and_labels() {
        let mut rep = ExperimentReport::default();
        for (id, fam, rate) in [
            ("tuned-ret", "reach", 80.0),
            ("tuned-rand", "reach", 10.0),
            ("tuned-ret", "bimodal-avoid", 60.0),
        ] {
            rep.rows.push(ReportRow {
                condition_id: id.into(),
                mode: "x".into(),
                schedule: "tuned".into(),
                rank: 1,
                n_start: 500,
                n_steps: 1000,
                family: fam.into(),
                success_rate: rate,
                mean_final_err: 1.0,
                episodes: 8,
            });
        }
        let svg = success_bar_chart(&rep, "Success rate");
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("tuned-ret"));
        assert!(svg.contains("bimodal-avoid"));
        assert!(svg.matches("<rect").count() >= 6); // bars + legend swatches
        // missing (condition, family) cells render zero-height bars, not panics
        assert!(svg.contains("height=\"0.00\""));
    }

    #[test]
    fn labels_are_escaped() {
        let rep = ExperimentReport::default();
        let svg = success_bar_chart(&rep, "a < b & c");
        assert!(svg.contains("a &lt; b &amp; c"));
    }
}
