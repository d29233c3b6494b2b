//! Report files: CSV summaries, the full JSON bundle and small PNG line plots.
//!
//! Everything written here is a pure function of its inputs, so rerunning an
//! experiment with the same spec and seed rewrites identical bytes.

use crate::config::Formats;
use crate::error::{HarnessError, Result};
use ibrar_core::pipeline::{InfoPlaneLog, RobustSelection, RunReport, TendencyTable};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Fixed leading columns of every summary CSV; one `adv:<attack>` column per
/// attack follows.
pub const SUMMARY_COLUMNS: [&str; 6] = [
    "label",
    "seed",
    "epochs",
    "natural_accuracy",
    "masked_channels",
    "mask_threshold",
];
pub const EPOCH_COLUMNS: [&str; 6] = [
    "epoch",
    "lr",
    "mean_loss",
    "train_accuracy",
    "test_accuracy",
    "masked_channels",
];
pub const INFO_PLANE_COLUMNS: [&str; 4] = ["iteration", "layer", "hsic_x", "hsic_y"];
pub const LAYER_COLUMNS: [&str; 5] = ["layer", "name", "adv_accuracy", "test_accuracy", "selected"];

/// Everything one subcommand produced. Serialized as `report.json` and
/// accepted back by the `report` subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub runs: Vec<RunReport>,
    pub info_plane: Vec<InfoPlaneLog>,
    pub layers: Option<RobustSelection>,
    pub tendency: Option<TendencyTable>,
    pub class_names: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_text(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::Report(format!("csv: {e}"));
    w.write_record(&header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Report(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Attack names in first-seen order across runs.
fn attack_names(runs: &[RunReport]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in runs {
        for a in &r.adversarial {
            if !names.contains(&a.attack) {
                names.push(a.attack.clone());
            }
        }
    }
    names
}

pub fn summary_header(runs: &[RunReport]) -> Vec<String> {
    SUMMARY_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(attack_names(runs).into_iter().map(|n| format!("adv:{n}")))
        .collect()
}

/// One run per row.
pub fn summary_csv(runs: &[RunReport]) -> Result<String> {
    let attacks = attack_names(runs);
    let rows = runs
        .iter()
        .map(|r| {
            let mut row = vec![
                r.label.clone(),
                r.seed.to_string(),
                r.epochs.len().to_string(),
                opt(r.natural_accuracy),
                r.mask.as_ref().map_or(0, |m| m.removed.len()).to_string(),
                opt(r.mask.as_ref().map(|m| m.threshold)),
            ];
            row.extend(attacks.iter().map(|a| opt(r.adversarial_accuracy(a))));
            row
        })
        .collect();
    csv_text(summary_header(runs), rows)
}

pub fn epochs_csv(run: &RunReport) -> Result<String> {
    let rows = run
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.lr.to_string(),
                e.mean_loss.to_string(),
                e.train_accuracy.to_string(),
                opt(e.test_accuracy),
                e.masked_channels.to_string(),
            ]
        })
        .collect();
    csv_text(EPOCH_COLUMNS.iter().map(|s| s.to_string()).collect(), rows)
}

pub fn info_plane_csv(log: &InfoPlaneLog) -> Result<String> {
    let rows = log
        .records
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                r.layer.to_string(),
                r.hsic_x.to_string(),
                r.hsic_y.to_string(),
            ]
        })
        .collect();
    csv_text(INFO_PLANE_COLUMNS.iter().map(|s| s.to_string()).collect(), rows)
}

pub fn layers_csv(sel: &RobustSelection) -> Result<String> {
    let rows = sel
        .rows()
        .map(|r| {
            vec![
                r.layer.to_string(),
                r.name.clone(),
                r.adv_accuracy.to_string(),
                r.test_accuracy.to_string(),
                sel.selected.contains(&r.layer).to_string(),
            ]
        })
        .collect();
    csv_text(LAYER_COLUMNS.iter().map(|s| s.to_string()).collect(), rows)
}

pub fn to_json(bundle: &ReportBundle) -> Result<String> {
    serde_json::to_string_pretty(bundle).map_err(|e| HarnessError::Report(format!("json: {e}")))
}

pub fn read_bundle(path: &Path) -> Result<ReportBundle> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes the bundle's files into `dir` and returns their paths.
///
/// Single-run bundles get `epochs.csv`, `info_plane.csv` and the plots
/// directly; multi-run bundles suffix them with the run index.
pub fn emit_report(bundle: &ReportBundle, dir: &Path, formats: &Formats) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut written = Vec::new();
    let suffix = |i: usize| {
        if bundle.runs.len() > 1 {
            format!("_{i}")
        } else {
            String::new()
        }
    };
    if formats.csv {
        if !bundle.runs.is_empty() {
            write(dir, "summary.csv", summary_csv(&bundle.runs)?.as_bytes(), &mut written)?;
        }
        for (i, run) in bundle.runs.iter().enumerate() {
            if !run.epochs.is_empty() {
                write(
                    dir,
                    &format!("epochs{}.csv", suffix(i)),
                    epochs_csv(run)?.as_bytes(),
                    &mut written,
                )?;
            }
        }
        for (i, log) in bundle.info_plane.iter().enumerate() {
            if !log.records.is_empty() {
                write(
                    dir,
                    &format!("info_plane{}.csv", suffix(i)),
                    info_plane_csv(log)?.as_bytes(),
                    &mut written,
                )?;
            }
        }
        if let Some(sel) = &bundle.layers {
            write(dir, "layers.csv", layers_csv(sel)?.as_bytes(), &mut written)?;
        }
    }
    if let Some(t) = &bundle.tendency {
        let text = format!("# {}\n{}", t.attack, t.render(&bundle.class_names));
        write(dir, "tendency.txt", text.as_bytes(), &mut written)?;
    }
    if formats.json {
        write(dir, "report.json", to_json(bundle)?.as_bytes(), &mut written)?;
    }
    if formats.png {
        for (i, run) in bundle.runs.iter().enumerate() {
            let train: Vec<(f64, f64)> = run.epochs.iter().map(|e| (e.epoch as f64, e.train_accuracy)).collect();
            let test: Vec<(f64, f64)> = run
                .epochs
                .iter()
                .filter_map(|e| e.test_accuracy.map(|a| (e.epoch as f64, a)))
                .collect();
            if train.len() >= 2 {
                let png = plot_png(&[train, test])?;
                write(dir, &format!("accuracy{}.png", suffix(i)), &png, &mut written)?;
            }
        }
        for (i, log) in bundle.info_plane.iter().enumerate() {
            let mut layers: Vec<usize> = log.records.iter().map(|r| r.layer).collect();
            layers.sort_unstable();
            layers.dedup();
            let series: Vec<Vec<(f64, f64)>> = layers
                .iter()
                .map(|&l| log.layer(l).iter().map(|r| (r.hsic_x, r.hsic_y)).collect())
                .collect();
            if series.iter().any(|s| s.len() >= 2) {
                let png = plot_png(&series)?;
                write(dir, &format!("info_plane{}.png", suffix(i)), &png, &mut written)?;
            }
        }
    }
    Ok(written)
}

const WIDTH: usize = 480;
const HEIGHT: usize = 320;
const MARGIN: usize = 24;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            px: vec![255; WIDTH * HEIGHT * 3],
        }
    }

    fn dot(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            let i = (y as usize * WIDTH + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.dot(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// Line plot of each series on shared, auto-scaled axes.
pub fn plot_png(series: &[Vec<(f64, f64)>]) -> Result<Vec<u8>> {
    let pts = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (sx, sy) = (span(x0, x1), span(y0, y1));
    let map = |(x, y): (f64, f64)| {
        let w = (WIDTH - 2 * MARGIN) as f64;
        let h = (HEIGHT - 2 * MARGIN) as f64;
        (
            MARGIN as i64 + ((x - x0) / sx * w).round() as i64,
            (HEIGHT - MARGIN) as i64 - ((y - y0) / sy * h).round() as i64,
        )
    };
    let mut c = Canvas::new();
    let axis = [0, 0, 0];
    let origin = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    c.line(origin, ((WIDTH - MARGIN) as i64, origin.1), axis);
    c.line(origin, (origin.0, MARGIN as i64), axis);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let finite: Vec<(i64, i64)> = s
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(map)
            .collect();
        for w in finite.windows(2) {
            c.line(w[0], w[1], color);
        }
        for &(x, y) in &finite {
            for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                c.dot(x + dx, y + dy, color);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, WIDTH as u32, HEIGHT as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| HarnessError::Report(format!("png: {e}"));
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&c.px).map_err(err)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_valid_and_deterministic() {
        let s = vec![vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)], vec![(0.0, 0.0), (2.0, 4.0)]];
        let a = plot_png(&s).unwrap();
        assert_eq!(a, plot_png(&s).unwrap());
        assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
        let dec = png::Decoder::new(std::io::Cursor::new(a)).read_info().unwrap();
        assert_eq!((dec.info().width, dec.info().height), (WIDTH as u32, HEIGHT as u32));
    }

    #[test]
    fn degenerate_series_still_plot() {
        assert!(plot_png(&[vec![(1.0, 1.0), (1.0, 1.0)]]).is_ok());
        assert!(plot_png(&[vec![(f64::NAN, 1.0)]]).is_ok());
    }
}
