//! Static SVG rendering of run instrumentation: G-effect curves with the
//! per-group breakdown, the PG-effect scatter bucketed by NPO weight, and
//! the diagnostics traces. Hand-rolled SVG keeps the output dependency-free
//! and byte-deterministic.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::geffect::{GEffectRecord, PGEffectSample, PG_BUCKET_EDGES};
use crate::model::Group;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 7] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];

struct Series {
    label: String,
    color: &'static str,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

fn finite(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points
        .iter()
        .copied()
        .filter(|&(x, y)| x.is_finite() && y.is_finite())
        .collect()
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
        let shift = 0.5;
        return (xmin, xmax, ymin - shift, ymax - shift + 1.0);
    }
    let pad = (ymax - ymin) * 0.05;
    (xmin, xmax, ymin - pad, ymax + pad)
}

fn chart(title: &str, x_label: &str, y_label: &str, series: &[Series], scatter: bool) -> String {
    let (xmin, xmax, ymin, ymax) = bounds(series);
    let px = |x: f64| MARGIN_L + (x - xmin) / (xmax - xmin) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - ymin) / (ymax - ymin) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0
    );

    // axes with five ticks per dimension
    let _ = writeln!(
        svg,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>",
        l = MARGIN_L,
        r = WIDTH - MARGIN_R,
        t = MARGIN_T,
        b = HEIGHT - MARGIN_B
    );
    for i in 0..=4 {
        let fx = xmin + (xmax - xmin) * i as f64 / 4.0;
        let fy = ymin + (ymax - ymin) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>",
            px(fx),
            HEIGHT - MARGIN_B + 18.0,
            fx
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.2e}</text>",
            MARGIN_L - 6.0,
            py(fy) + 4.0,
            fy
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{l}\" y1=\"{y:.1}\" x2=\"{r}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>",
            l = MARGIN_L,
            r = WIDTH - MARGIN_R,
            y = py(fy)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{y_label}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    // zero reference line when the range crosses it
    if ymin < 0.0 && ymax > 0.0 {
        let _ = writeln!(
            svg,
            "<line x1=\"{l}\" y1=\"{y:.1}\" x2=\"{r}\" y2=\"{y:.1}\" stroke=\"#888888\" stroke-dasharray=\"2 2\"/>",
            l = MARGIN_L,
            r = WIDTH - MARGIN_R,
            y = py(0.0)
        );
    }

    for (idx, s) in series.iter().enumerate() {
        if scatter {
            for &(x, y) in &s.points {
                let _ = writeln!(
                    svg,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
                    px(x),
                    py(y),
                    s.color
                );
            }
        } else if !s.points.is_empty() {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let dash = if s.dashed { " stroke-dasharray=\"5 3\"" } else { "" };
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{dash}/>",
                pts.join(" "),
                s.color
            );
        }
        let ly = MARGIN_T + 14.0 * idx as f64 + 8.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{x1:.1}\" y1=\"{ly:.1}\" x2=\"{x2:.1}\" y2=\"{ly:.1}\" stroke=\"{c}\" stroke-width=\"2\"{dash}/>\n<text x=\"{tx:.1}\" y=\"{ty:.1}\">{label}</text>",
            x1 = WIDTH - MARGIN_R + 10.0,
            x2 = WIDTH - MARGIN_R + 34.0,
            c = s.color,
            dash = if s.dashed { " stroke-dasharray=\"5 3\"" } else { "" },
            tx = WIDTH - MARGIN_R + 40.0,
            ty = ly + 4.0,
            label = s.label
        );
    }
    if series.iter().all(|s| s.points.is_empty()) {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#888888\">no data</text>",
            (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
            HEIGHT / 2.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// G-effect curves: total e_u and e_r solid, per-group contributions dashed.
pub fn geffect_chart(records: &[GEffectRecord]) -> String {
    let steps: Vec<f64> = records.iter().map(|r| r.step as f64).collect();
    let mut series = vec![
        Series {
            label: "e_u".into(),
            color: PALETTE[0],
            dashed: false,
            points: finite(
                &steps
                    .iter()
                    .zip(records)
                    .map(|(&s, r)| (s, r.e_u))
                    .collect::<Vec<_>>(),
            ),
        },
        Series {
            label: "e_r".into(),
            color: PALETTE[1],
            dashed: false,
            points: finite(
                &steps
                    .iter()
                    .zip(records)
                    .map(|(&s, r)| (s, r.e_r))
                    .collect::<Vec<_>>(),
            ),
        },
    ];
    for (i, group) in Group::ALL.iter().enumerate() {
        let pts: Vec<(f64, f64)> = steps
            .iter()
            .zip(records)
            .filter_map(|(&s, r)| r.per_group.get(group.as_str()).map(|&(eu, _)| (s, eu)))
            .collect();
        series.push(Series {
            label: format!("e_u:{}", group.as_str()),
            color: PALETTE[(i + 2) % PALETTE.len()],
            dashed: true,
            points: finite(&pts),
        });
    }
    chart("G-effect per step", "step", "gradient dot product", &series, false)
}

/// Cumulative G-effect curves.
pub fn cumulative_chart(records: &[GEffectRecord]) -> String {
    let series = vec![
        Series {
            label: "cum e_u".into(),
            color: PALETTE[0],
            dashed: false,
            points: finite(
                &records
                    .iter()
                    .map(|r| (r.step as f64, r.cumulative_e_u))
                    .collect::<Vec<_>>(),
            ),
        },
        Series {
            label: "cum e_r".into(),
            color: PALETTE[1],
            dashed: false,
            points: finite(
                &records
                    .iter()
                    .map(|r| (r.step as f64, r.cumulative_e_r))
                    .collect::<Vec<_>>(),
            ),
        },
    ];
    chart("Cumulative G-effect", "step", "running sum", &series, false)
}

/// Per-record PG-effect against the risk gradient, one color per NPO
/// weight bucket.
pub fn pgeffect_chart(samples: &[PGEffectSample]) -> String {
    let mut series = Vec::new();
    for (b, window) in PG_BUCKET_EDGES.windows(2).enumerate() {
        let last = b + 2 == PG_BUCKET_EDGES.len();
        let pts: Vec<(f64, f64)> = samples
            .iter()
            .filter(|s| {
                s.weight >= window[0] && (s.weight < window[1] || (last && s.weight >= window[1]))
            })
            .map(|s| (s.weight, s.pg_u))
            .collect();
        series.push(Series {
            label: format!("w in [{:.1},{:.1}{}", window[0], window[1], if last { "]+" } else { ")" }),
            color: PALETTE[b % PALETTE.len()],
            dashed: false,
            points: finite(&pts),
        });
    }
    chart("PG-effect by NPO weight", "npo weight", "pg_u", &series, true)
}

/// Diagnostics traces: mean forget-answer probability, mean inverse
/// confidence, and (when defined) the mean NPO weight.
pub fn diagnostics_chart(records: &[GEffectRecord]) -> String {
    let mut series = vec![
        Series {
            label: "mean_prob".into(),
            color: PALETTE[0],
            dashed: false,
            points: finite(
                &records
                    .iter()
                    .map(|r| (r.step as f64, r.diag_mean_prob))
                    .collect::<Vec<_>>(),
            ),
        },
        Series {
            label: "mean_inv_conf".into(),
            color: PALETTE[1],
            dashed: false,
            points: finite(
                &records
                    .iter()
                    .map(|r| (r.step as f64, r.diag_mean_inv_conf.log10()))
                    .collect::<Vec<_>>(),
            ),
        },
    ];
    let npo: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.step as f64, r.diag_mean_npo_weight))
        .collect();
    let npo = finite(&npo);
    if !npo.is_empty() {
        series.push(Series {
            label: "mean_npo_weight".into(),
            color: PALETTE[2],
            dashed: false,
            points: npo,
        });
    }
    chart(
        "Unlearning diagnostics",
        "step",
        "value (inv_conf in log10)",
        &series,
        false,
    )
}

/// Render the standard figure set for one run into `out_dir`; returns the
/// written paths (always at least three files).
pub fn plot_run(
    records: &[GEffectRecord],
    pg_samples: &[PGEffectSample],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let figures = [
        ("geffect.svg", geffect_chart(records)),
        ("geffect_cumulative.svg", cumulative_chart(records)),
        ("pgeffect_scatter.svg", pgeffect_chart(pg_samples)),
        ("diagnostics.svg", diagnostics_chart(records)),
    ];
    let mut paths = Vec::new();
    for (name, svg) in figures {
        let path = out_dir.join(name);
        std::fs::write(&path, svg)?;
        paths.push(path);
    }
    Ok(paths)
}
