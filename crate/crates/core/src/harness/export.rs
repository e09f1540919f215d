use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::projection::{pca_2d, Projection};
use super::stats::GroupStats;
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::offline_rl::LogRow;
use crate::reward::AnnotatedDataset;
use crate::trajdata::SourceLabel;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;
const EXPERT_COLOR: &str = "#d62728";
const SUBOPT_COLOR: &str = "#1f77b4";

/// `<prefix>.<ext>`
fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let widen = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }

    fn open(&self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            xml(title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{PAD},{PAD} V{} H{}" fill="none" stroke="black"/>"#,
            H - PAD,
            W - PAD
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 10.0,
            xml(xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            xml(ylabel)
        );
        for (v, anchor, x, y) in [
            (self.x0, "start", PAD, H - PAD + 16.0),
            (self.x1, "end", W - PAD, H - PAD + 16.0),
        ] {
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3}</text>"#
            );
        }
        for (v, y) in [(self.y0, H - PAD), (self.y1, PAD + 4.0)] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{y}" text-anchor="end">{v:.3}</text>"#,
                PAD - 4.0
            );
        }
        s
    }
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn legend(s: &mut String, entries: &[(&str, &str)]) {
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#,
            W - PAD - 110.0,
            y
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            W - PAD - 95.0,
            y + 9.0,
            xml(name)
        );
    }
}

/// Summary of an exported reward histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub expert: Option<GroupStats>,
    pub suboptimal: Option<GroupStats>,
    pub svg: PathBuf,
    pub csv: PathBuf,
    pub stats_csv: PathBuf,
}

/// Splits per-row rewards by the per-trajectory labels of the test sidecar.
pub fn rewards_by_label(
    ann: &AnnotatedDataset,
    labels: &[Option<SourceLabel>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if labels.len() != ann.dataset.trajectories.len() {
        return Err(Error::config(format!(
            "label sidecar has {} entries for {} trajectories",
            labels.len(),
            ann.dataset.trajectories.len()
        )));
    }
    let mut expert = Vec::new();
    let mut sub = Vec::new();
    let mut off = 0;
    for (t, label) in ann.dataset.trajectories.iter().zip(labels) {
        let r = ann.rewards[off..off + t.len()].iter().map(|&x| x as f64);
        match label {
            Some(SourceLabel::Expert) => expert.extend(r),
            Some(_) => sub.extend(r),
            None => return Err(Error::config("label sidecar has unlabeled trajectories")),
        }
        off += t.len();
    }
    Ok((expert, sub))
}

pub const HISTOGRAM_BINS: usize = 40;

/// Writes `<prefix>.svg`, `<prefix>.csv` (bin fractions) and
/// `<prefix>.stats.csv` (mean, variance, IQR, excess kurtosis per group).
pub fn export_reward_histogram(
    ann: &AnnotatedDataset,
    labels: &[Option<SourceLabel>],
    out_prefix: &Path,
) -> Result<HistogramSummary> {
    let (expert, sub) = rewards_by_label(ann, labels)?;
    let all = expert.iter().chain(&sub);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / HISTOGRAM_BINS as f64
    } else {
        1.0
    };
    let bin = |v: f64| (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
    let count = |x: &[f64]| {
        let mut c = vec![0usize; HISTOGRAM_BINS];
        for &v in x {
            c[bin(v)] += 1;
        }
        c
    };
    let (ce, cs) = (count(&expert), count(&sub));
    let frac = |c: &[usize], n: usize| -> Vec<f64> {
        c.iter()
            .map(|&k| if n > 0 { k as f64 / n as f64 } else { 0.0 })
            .collect()
    };
    let (fe, fs) = (frac(&ce, expert.len()), frac(&cs, sub.len()));

    let mut csv = String::from(
        "bin_lo,bin_hi,expert_fraction,suboptimal_fraction,expert_count,suboptimal_count\n",
    );
    for b in 0..HISTOGRAM_BINS {
        let a = lo + b as f64 * width;
        let _ = writeln!(
            csv,
            "{a},{},{},{},{},{}",
            a + width,
            fe[b],
            fs[b],
            ce[b],
            cs[b]
        );
    }
    let se = GroupStats::of(&expert);
    let ss = GroupStats::of(&sub);
    let mut stats = String::from("group,n,mean,variance,iqr,excess_kurtosis,min,max\n");
    for (name, g) in [("expert", &se), ("suboptimal", &ss)] {
        if let Some(g) = g {
            let _ = writeln!(
                stats,
                "{name},{},{},{},{},{},{},{}",
                g.n, g.mean, g.variance, g.iqr, g.excess_kurtosis, g.min, g.max
            );
        }
    }

    let ymax = fe.iter().chain(&fs).copied().fold(0.0, f64::max);
    let f = Frame::new(lo, lo + width * HISTOGRAM_BINS as f64, 0.0, ymax);
    let mut svg = f.open(
        "Surrogate reward distribution",
        "reward",
        "fraction of transitions",
    );
    for (fr, color) in [(&fs, SUBOPT_COLOR), (&fe, EXPERT_COLOR)] {
        for (b, &v) in fr.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let a = lo + b as f64 * width;
            let (x0, x1) = (f.px(a), f.px(a + width));
            let (y0, y1) = (f.py(v), f.py(0.0));
            let _ = writeln!(
                svg,
                r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                x1 - x0,
                y1 - y0
            );
        }
    }
    legend(
        &mut svg,
        &[("expert", EXPERT_COLOR), ("suboptimal", SUBOPT_COLOR)],
    );
    svg.push_str("</svg>\n");

    let out = HistogramSummary {
        expert: se,
        suboptimal: ss,
        svg: with_ext(out_prefix, "svg"),
        csv: with_ext(out_prefix, "csv"),
        stats_csv: with_ext(out_prefix, "stats.csv"),
    };
    fsutil::atomic_write(&out.svg, svg.as_bytes())?;
    fsutil::atomic_write(&out.csv, csv.as_bytes())?;
    fsutil::atomic_write(&out.stats_csv, stats.as_bytes())?;
    Ok(out)
}

/// Labels of each embedding row, looked up through its origin trajectory.
pub fn embedding_labels(
    set: &EmbeddingSet,
    labels: &[Option<SourceLabel>],
) -> Result<Vec<SourceLabel>> {
    set.origins
        .iter()
        .map(|&(traj, _)| {
            labels.get(traj).copied().flatten().ok_or_else(|| {
                Error::config(format!("label sidecar has no label for trajectory {traj}"))
            })
        })
        .collect()
}

fn label_name(l: SourceLabel) -> &'static str {
    match l {
        SourceLabel::Expert => "expert",
        SourceLabel::Medium => "medium",
        SourceLabel::Random => "random",
    }
}

/// Writes `<prefix>.svg` and `<prefix>.csv` (`x,y,label,trajectory,start`).
pub fn export_embedding_projection(
    set: &EmbeddingSet,
    labels: &[Option<SourceLabel>],
    out_prefix: &Path,
) -> Result<Projection> {
    let row_labels = embedding_labels(set, labels)?;
    let p = pca_2d(set.vectors.view())?;
    let mut csv = String::from("x,y,label,trajectory,start\n");
    for (i, &(traj, start)) in set.origins.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{traj},{start}",
            p.coords[[i, 0]],
            p.coords[[i, 1]],
            label_name(row_labels[i])
        );
    }
    let (xs, ys) = (p.coords.column(0), p.coords.column(1));
    let f = Frame::new(
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ys.iter().copied().fold(f64::INFINITY, f64::min),
        ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let mut svg = f.open(
        "Segment embeddings, top-2 principal directions",
        "PC 1",
        "PC 2",
    );
    // Suboptimal first so the sparse expert points stay visible.
    for pass_expert in [false, true] {
        for (i, l) in row_labels.iter().enumerate() {
            if (*l == SourceLabel::Expert) != pass_expert {
                continue;
            }
            let color = if pass_expert {
                EXPERT_COLOR
            } else {
                SUBOPT_COLOR
            };
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{color}" fill-opacity="0.6"/>"#,
                f.px(p.coords[[i, 0]]),
                f.py(p.coords[[i, 1]])
            );
        }
    }
    legend(
        &mut svg,
        &[("expert", EXPERT_COLOR), ("suboptimal", SUBOPT_COLOR)],
    );
    svg.push_str("</svg>\n");
    fsutil::atomic_write(&with_ext(out_prefix, "svg"), svg.as_bytes())?;
    fsutil::atomic_write(&with_ext(out_prefix, "csv"), csv.as_bytes())?;
    Ok(p)
}

/// Line chart of `(x, y)` series.
pub fn line_chart_svg(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> String {
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let f = Frame::new(x0, x1, y0, y1);
    let mut svg = f.open(title, xlabel, ylabel);
    let mut entries = Vec::new();
    for (k, (name, s)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        entries.push((*name, color));
        if s.is_empty() {
            continue;
        }
        let mut d = String::new();
        for (i, &(x, y)) in s.iter().enumerate() {
            let _ = write!(
                d,
                "{}{:.2},{:.2} ",
                if i == 0 { "M" } else { "L" },
                f.px(x),
                f.py(y)
            );
        }
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            d.trim_end()
        );
    }
    legend(&mut svg, &entries);
    svg.push_str("</svg>\n");
    svg
}

/// Normalized score over training steps when evaluated, otherwise the losses.
pub fn export_training_curve(rows: &[LogRow], out_prefix: &Path) -> Result<()> {
    let pick = |f: fn(&LogRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter()
            .filter_map(|r| f(r).map(|v| (r.step as f64, v)))
            .collect()
    };
    let score = pick(|r| r.normalized_score);
    let svg = if score.is_empty() {
        line_chart_svg(
            "Training losses",
            "step",
            "loss",
            &[
                ("critic", pick(|r| r.critic_loss)),
                ("actor", pick(|r| r.actor_loss)),
                ("value", pick(|r| r.value_loss)),
            ],
        )
    } else {
        line_chart_svg(
            "Evaluation during training",
            "step",
            "normalized score",
            &[("score", score)],
        )
    };
    fsutil::atomic_write(&with_ext(out_prefix, "svg"), svg.as_bytes())?;
    fsutil::atomic_write(
        &with_ext(out_prefix, "csv"),
        crate::offline_rl::log_to_csv(rows).as_bytes(),
    )
}
