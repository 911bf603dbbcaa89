use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One point of a supervision sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub fraction: f64,
    pub method: String,
    pub fold: usize,
    pub seed: u64,
    pub recall: f64,
    pub precision: f64,
    pub dsc: f64,
    pub ap: f64,
}

impl SweepRecord {
    fn metric(&self, name: &str) -> f64 {
        match name {
            "recall" => self.recall,
            "precision" => self.precision,
            "dsc" => self.dsc,
            _ => self.ap,
        }
    }
}

const METRICS: [&str; 4] = ["recall", "precision", "dsc", "ap"];
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];
const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

/// Writes `sweep_<metric>.svg` line plots (x = fraction, y = metric averaged
/// over folds and seeds, one line per method). Returns the written paths.
pub fn emit_plots(series: &[SweepRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("no sweep records to plot".into()));
    }
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for metric in METRICS {
        let mut lines: BTreeMap<&str, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
        for r in series {
            let e = lines
                .entry(r.method.as_str())
                .or_default()
                .entry(r.fraction.to_bits())
                .or_insert((0.0, 0));
            e.0 += r.metric(metric);
            e.1 += 1;
        }
        let path = dir.join(format!("sweep_{metric}.svg"));
        fs::write(&path, render(metric, &lines))?;
        paths.push(path);
    }
    Ok(paths)
}

fn render(metric: &str, lines: &BTreeMap<&str, BTreeMap<u64, (f64, usize)>>) -> String {
    let x = |f: f64| PAD + f * (W - 2.0 * PAD);
    let y = |v: f64| H - PAD - v * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        l = PAD,
        t = PAD,
        b = H - PAD,
        r = W - PAD
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text><text x="{}" y="{}" text-anchor="middle">{:.0}%</text>"#,
            PAD - 4.0,
            y(v) + 4.0,
            x(v),
            H - PAD + 14.0,
            v * 100.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">labelled target data</text><text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{metric}</text>"#,
        W / 2.0,
        H - 10.0,
        H / 2.0,
        H / 2.0
    );
    for (i, (method, pts)) in lines.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|(&f, &(sum, n))| format!("{:.1},{:.1}", x(f64::from_bits(f)), y(sum / n as f64)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{method}</text>"#,
            PAD + 8.0,
            PAD + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}
