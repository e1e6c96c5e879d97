//! Static SVG export: per-component loss curves, the HOS curve, and a 2D
//! PCA scatter of source vs target features colored by domain and verdict.

use crate::error::Result;
use crate::thresholds::TargetDecision;
use crate::trainer::MetricsRow;
use std::path::Path;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut f = Frame {
            x_min: f64::MAX,
            x_max: f64::MIN,
            y_min: f64::MAX,
            y_max: f64::MIN,
        };
        for &(x, y) in points {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            f.x_min = f.x_min.min(x);
            f.x_max = f.x_max.max(x);
            f.y_min = f.y_min.min(y);
            f.y_max = f.y_max.max(y);
        }
        if f.x_min > f.x_max {
            // No finite points at all; any frame will do.
            f = Frame {
                x_min: 0.0,
                x_max: 1.0,
                y_min: 0.0,
                y_max: 1.0,
            };
        }
        if f.x_max == f.x_min {
            f.x_max += 1.0;
            f.x_min -= 1.0;
        }
        if f.y_max == f.y_min {
            f.y_max += 1.0;
            f.y_min -= 1.0;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axes(f: &Frame, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    let (x1, y1) = (WIDTH - MARGIN, MARGIN);
    s.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{x0}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{:.4}</text>\n\
         <text x=\"{x1}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.4}</text>\n",
        y0 + 16.0,
        f.x_min,
        y0 + 16.0,
        f.x_max
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{y0}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.4}</text>\n",
        x0 - 6.0,
        f.y_min,
        x0 - 6.0,
        y1 + 4.0,
        f.y_max
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        WIDTH / 2.0,
        HEIGHT - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{y_label}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    s
}

fn polyline(f: &Frame, pts: &[(f64, f64)], color: &str) -> String {
    let finite: Vec<&(f64, f64)> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.len() == 1 {
        let (x, y) = *finite[0];
        return format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
            f.px(x),
            f.py(y)
        );
    }
    let coords: Vec<String> = finite
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y)))
        .collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
        coords.join(" ")
    )
}

fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> Result<()> {
    let frame = Frame::from_points(series.iter().flat_map(|(_, pts)| pts.iter()));
    let mut svg = svg_header(title);
    svg.push_str(&axes(&frame, x_label, y_label));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&polyline(&frame, pts, color));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            WIDTH - MARGIN + 4.0 - 60.0,
            MARGIN + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| crate::error::Error::io(path, e))
}

/// Scatter inputs: features with their domain/verdict tags.
pub struct ScatterData<'a> {
    pub source_features: &'a [Vec<f64>],
    pub target_features: &'a [Vec<f64>],
    pub target_decisions: &'a [TargetDecision],
}

/// Top-2 principal axes of the pooled, mean-centered features, by Jacobi
/// eigendecomposition of the covariance matrix.
fn pca_axes(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let xi = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += xi * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    for c in &mut cov {
        *c /= n as f64;
    }

    // Cyclic Jacobi sweeps.
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _ in 0..64 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += cov[p * d + q] * cov[p * d + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = cov[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = cov[p * d + p];
                let aqq = cov[q * d + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = cov[k * d + p];
                    let akq = cov[k * d + q];
                    cov[k * d + p] = c * akp - s * akq;
                    cov[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = cov[p * d + k];
                    let aqk = cov[q * d + k];
                    cov[p * d + k] = c * apk - s * aqk;
                    cov[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        cov[b * d + b]
            .partial_cmp(&cov[a * d + a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let axis = |col: usize| -> Vec<f64> { (0..d).map(|k| v[k * d + col]).collect() };
    let e1 = axis(order[0]);
    let e2 = if d > 1 { axis(order[1]) } else { vec![0.0] };
    (e1, e2)
}

fn project(r: &[f64], mean: &[f64], e: &[f64]) -> f64 {
    r.iter()
        .zip(mean.iter())
        .zip(e.iter())
        .map(|((x, m), w)| (x - m) * w)
        .sum()
}

fn scatter_chart(path: &Path, data: &ScatterData) -> Result<()> {
    let rows: Vec<&[f64]> = data
        .source_features
        .iter()
        .chain(data.target_features.iter())
        .map(|r| r.as_slice())
        .collect();
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let (e1, e2) = pca_axes(&rows);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (project(r, &mean, &e1), project(r, &mean, &e2)))
        .collect();
    let frame = Frame::from_points(pts.iter());
    let mut svg = svg_header("feature space (PCA)");
    svg.push_str(&axes(&frame, "pc1", "pc2"));
    let ns = data.source_features.len();
    for (i, (x, y)) in pts.iter().enumerate() {
        let color = if i < ns {
            "#1f77b4" // source
        } else if data.target_decisions[i - ns].is_ood() {
            "#d62728" // target flagged OOD
        } else {
            "#2ca02c" // target kept ID
        };
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n",
            frame.px(*x),
            frame.py(*y)
        ));
    }
    for (label, color, dy) in [
        ("source", "#1f77b4", 0.0),
        ("target ID", "#2ca02c", 16.0),
        ("target OOD", "#d62728", 32.0),
    ] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            WIDTH - MARGIN - 60.0,
            MARGIN + dy
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| crate::error::Error::io(path, e))
}

/// Write `losses.svg` and `hos.svg` from the metrics log, plus
/// `scatter.svg` when feature data is supplied. Returns the paths written.
pub fn export_plots(
    metrics: &[MetricsRow],
    scatter: Option<&ScatterData>,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    if metrics.is_empty() {
        return Err(crate::error::Error::InvalidInput(
            "cannot plot an empty metrics log".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::Error::io(out_dir, e))?;
    let mut written = Vec::new();

    type Extract = fn(&MetricsRow) -> f64;
    let components: [(&str, Extract); 5] = [
        ("lpb", |m| m.loss_lpb),
        ("pda", |m| m.loss_pda),
        ("atg", |m| m.loss_atg),
        ("uc", |m| m.loss_uc),
        ("total", |m| m.loss_total),
    ];
    let series: Vec<(&str, Vec<(f64, f64)>)> = components
        .into_iter()
        .map(|(name, f)| {
            (
                name,
                metrics.iter().map(|m| (m.epoch as f64, f(m))).collect(),
            )
        })
        .collect();
    let p = out_dir.join("losses.svg");
    line_chart(&p, "loss components", "epoch", "loss", &series)?;
    written.push(p);

    let hos_series = vec![(
        "hos",
        metrics
            .iter()
            .map(|m| (m.epoch as f64, m.hos))
            .collect::<Vec<_>>(),
    )];
    let p = out_dir.join("hos.svg");
    line_chart(&p, "HOS over training", "epoch", "hos", &hos_series)?;
    written.push(p);

    if let Some(data) = scatter {
        let p = out_dir.join("scatter.svg");
        scatter_chart(&p, data)?;
        written.push(p);
    }
    Ok(written)
}
