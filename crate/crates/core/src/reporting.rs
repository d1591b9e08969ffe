//! Attention heatmaps, training-curve figures and run reports.
//!
//! The channel attention has no spatial extent of its own. Heatmaps are the
//! attention-weighted mean of the feature maps it recalibrates, min-max
//! normalized and bilinearly upsampled to the image.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView1, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::experiments::{files, AblationTable, MonteCarloSummary};
use crate::ingest::Label;
use crate::model::{softmax, Model};
use crate::training::EpochHistory;
use crate::transforms::{preprocess_raw, resize_bilinear, RawImage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Colormap {
    #[default]
    Jet,
    Gray,
}

impl Colormap {
    /// RGB in `[0, 1]` for `t ∈ [0, 1]`.
    pub fn color(self, t: f64) -> [f64; 3] {
        let t = t.clamp(0.0, 1.0);
        match self {
            Colormap::Gray => [t; 3],
            Colormap::Jet => {
                let f = |x: f64| (1.5 - (4.0 * t - x).abs()).clamp(0.0, 1.0);
                [f(3.0), f(2.0), f(1.0)]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlayStyle {
    /// Weight of the heatmap colour in the blend.
    pub alpha: f64,
    pub colormap: Colormap,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle {
            alpha: 0.4,
            colormap: Colormap::Jet,
        }
    }
}

impl OverlayStyle {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("overlay alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

pub struct AttentionArtifact {
    pub channel_weights: Vec<f64>,
    /// `H×W` at the image's resolution, values in `[0, 1]`.
    pub heatmap: Array2<f64>,
    pub overlay: RgbImage,
    pub prediction: Label,
    pub score_all: f64,
}

/// Attention-weighted mean over channels of a `C×h×w` feature map.
pub fn spatial_map(features: ArrayView3<'_, f64>, weights: ArrayView1<'_, f64>) -> Array2<f64> {
    let total: f64 = weights.sum();
    let mut map = Array2::zeros((features.shape()[1], features.shape()[2]));
    for (plane, &w) in features.axis_iter(Axis(0)).zip(weights) {
        map.scaled_add(w, &plane);
    }
    if total > 0.0 {
        map /= total;
    }
    map
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all 0.5.
pub fn normalize_map(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return Array2::from_elem(map.raw_dim(), 0.5);
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

pub fn upsample(map: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let stacked = map.clone().insert_axis(Axis(0));
    resize_bilinear(&stacked, h, w).index_axis_move(Axis(0), 0)
}

pub fn blend(image: &RawImage, heatmap: &Array2<f64>, style: &OverlayStyle) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    let mut mixed = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let c = style.colormap.color(heatmap[[y, x]]);
            for ch in 0..3 {
                mixed[[ch, y, x]] = (1.0 - style.alpha) * image.0[[ch, y, x]] + style.alpha * c[ch];
            }
        }
    }
    RawImage(mixed).to_rgb8()
}

/// Heatmap of where the attended channels respond in `image`. Uses the
/// model in inference mode only.
pub fn attention_heatmap(model: &Model, image: &RawImage, style: &OverlayStyle) -> Result<AttentionArtifact> {
    style.validate()?;
    let size = model.config().input_size;
    let x = preprocess_raw(image, size).0.insert_axis(Axis(0));
    let (logits, trace) = model.infer_traced(&x)?;
    let trace = trace.ok_or_else(|| {
        Error::NoAttention("this model was built without the attention block (ablation variant)".into())
    })?;
    let features = trace.features.index_axis(Axis(0), 0);
    let weights = trace.weights.row(0);
    let coarse = spatial_map(features, weights);
    let heatmap = normalize_map(&upsample(&coarse, image.height(), image.width()));
    let probs = softmax(&logits);
    Ok(AttentionArtifact {
        channel_weights: weights.to_vec(),
        overlay: blend(image, &heatmap, style),
        prediction: if logits[[0, 1]] > logits[[0, 0]] {
            Label::All
        } else {
            Label::Hem
        },
        score_all: probs[[0, Label::All.index()]],
        heatmap,
    })
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

/// Writes `<stem>_overlay.png`, `<stem>_heatmap.png` and tables of the
/// heatmap values and channel weights. Returns the written paths.
pub fn save_artifact(
    artifact: &AttentionArtifact,
    dir: &Path,
    stem: &str,
    style: &OverlayStyle,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let overlay = dir.join(format!("{stem}_overlay.png"));
    save_png(&artifact.overlay, &overlay)?;

    let (h, w) = artifact.heatmap.dim();
    let colored = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = style.colormap.color(artifact.heatmap[[y as usize, x as usize]]);
        Rgb(c.map(|v| (v * 255.0).round() as u8))
    });
    let heat_png = dir.join(format!("{stem}_heatmap.png"));
    save_png(&colored, &heat_png)?;

    let heat_tsv = dir.join(format!("{stem}_heatmap.tsv"));
    let mut text = String::new();
    for row in artifact.heatmap.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&cells.join("\t"));
        text.push('\n');
    }
    fs::write(&heat_tsv, text).map_err(|e| Error::io(&heat_tsv, e))?;

    let weights_tsv = dir.join(format!("{stem}_weights.tsv"));
    let mut text = String::from("channel\tweight\n");
    for (c, v) in artifact.channel_weights.iter().enumerate() {
        writeln!(text, "{c}\t{v:?}").unwrap();
    }
    fs::write(&weights_tsv, text).map_err(|e| Error::io(&weights_tsv, e))?;
    Ok(vec![overlay, heat_png, heat_tsv, weights_tsv])
}

// ---- line charts ----

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const LEFT: u32 = 56;
const RIGHT: u32 = 16;
const TOP: u32 = 16;
const BOTTOM: u32 = 32;
const TRAIN_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
const VAL_COLOR: Rgb<u8> = Rgb([255, 127, 14]);
const MARKER_COLOR: Rgb<u8> = Rgb([214, 39, 40]);
const AXIS_COLOR: Rgb<u8> = Rgb([60, 60, 60]);
const GRID_COLOR: Rgb<u8> = Rgb([225, 225, 225]);

/// 3×5 glyphs for tick labels, one row of bits per line.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn text(img: &mut RgbImage, s: &str, x: i64, y: i64, scale: i64) {
    for (i, c) in s.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let ox = x + i as i64 * 4 * scale;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(img, ox + col * scale + dx, y + r as i64 * scale + dy, AXIS_COLOR);
                        }
                    }
                }
            }
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        for d in [(0, 0), (1, 0), (0, 1)] {
            put(img, x.round() as i64 + d.0, y.round() as i64 + d.1, color);
        }
    }
}

/// One figure: train and validation series over epochs with a best-epoch
/// marker.
pub struct Chart<'a> {
    pub epochs: &'a [usize],
    pub train: &'a [f64],
    pub validation: &'a [f64],
    pub best_epoch: Option<usize>,
}

impl Chart<'_> {
    fn y_range(&self) -> (f64, f64) {
        let all = self
            .train
            .iter()
            .chain(self.validation)
            .copied()
            .filter(|v| v.is_finite());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        let pad = ((hi - lo) * 0.05).max(1e-3);
        (lo - pad, hi + pad)
    }

    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let (x0, x1) = (LEFT as f64, (WIDTH - RIGHT) as f64);
        let (y0, y1) = (TOP as f64, (HEIGHT - BOTTOM) as f64);
        let first = *self.epochs.first().unwrap_or(&1) as f64;
        let last = *self.epochs.last().unwrap_or(&1) as f64;
        let span = (last - first).max(1.0);
        let px = |e: f64| x0 + (e - first) / span * (x1 - x0);
        let (lo, hi) = self.y_range();
        let py = |v: f64| y1 - (v - lo) / (hi - lo) * (y1 - y0);

        for k in 0..=4 {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            let y = py(v);
            line(&mut img, (x0, y), (x1, y), GRID_COLOR);
            text(&mut img, &format!("{v:.3}"), 4, y.round() as i64 - 5, 2);
        }
        let step = (self.epochs.len() / 10).max(1);
        for &e in self.epochs.iter().step_by(step) {
            let x = px(e as f64);
            line(&mut img, (x, y1), (x, y1 + 4.0), AXIS_COLOR);
            text(&mut img, &e.to_string(), x.round() as i64 - 3, y1 as i64 + 8, 2);
        }
        line(&mut img, (x0, y0), (x0, y1), AXIS_COLOR);
        line(&mut img, (x0, y1), (x1, y1), AXIS_COLOR);

        if let Some(b) = self.best_epoch {
            let x = px(b as f64);
            let mut y = y0;
            while y < y1 {
                line(&mut img, (x, y), (x, (y + 6.0).min(y1)), MARKER_COLOR);
                y += 12.0;
            }
        }
        for (series, color) in [(self.train, TRAIN_COLOR), (self.validation, VAL_COLOR)] {
            let pts: Vec<(f64, f64)> = self
                .epochs
                .iter()
                .zip(series)
                .filter(|(_, v)| v.is_finite())
                .map(|(&e, &v)| (px(e as f64), py(v)))
                .collect();
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], color);
            }
            for &(x, y) in &pts {
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        put(&mut img, x.round() as i64 + dx, y.round() as i64 + dy, color);
                    }
                }
            }
        }
        img
    }

    pub fn sidecar(&self) -> String {
        let mut s = String::from("epoch\ttrain\tvalidation\tbest\n");
        for (i, &e) in self.epochs.iter().enumerate() {
            let best = u8::from(self.best_epoch == Some(e));
            writeln!(s, "{e}\t{:?}\t{:?}\t{best}", self.train[i], self.validation[i]).unwrap();
        }
        s
    }
}

pub const HISTORY_FIGURES: [&str; 3] = ["loss", "accuracy", "f1"];

/// Writes `loss`, `accuracy` and `f1` figures with their sidecar tables.
pub fn plot_history(history: &EpochHistory, dir: &Path) -> Result<Vec<PathBuf>> {
    if history.epochs.is_empty() {
        return Err(Error::InvalidInput("empty training history".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let epochs: Vec<usize> = history.epochs.iter().map(|e| e.epoch).collect();
    let pick = |f: fn(&crate::training::EpochRecord) -> f64| history.epochs.iter().map(f).collect::<Vec<_>>();
    let series = [
        (pick(|e| e.train_loss), pick(|e| e.val_loss)),
        (pick(|e| e.train_accuracy), pick(|e| e.val_accuracy)),
        (pick(|e| e.train_f1), pick(|e| e.val_f1)),
    ];
    let mut written = Vec::new();
    for (name, (train, validation)) in HISTORY_FIGURES.iter().zip(&series) {
        let chart = Chart {
            epochs: &epochs,
            train,
            validation,
            best_epoch: history.best_epoch,
        };
        let png = dir.join(format!("{name}.png"));
        save_png(&chart.render(), &png)?;
        let tsv = dir.join(format!("{name}.tsv"));
        fs::write(&tsv, chart.sidecar()).map_err(|e| Error::io(&tsv, e))?;
        written.extend([png, tsv]);
    }
    Ok(written)
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn metrics_table(out: &mut String, title: &str, m: &MetricsReport) {
    writeln!(out, "## {title}\n").unwrap();
    writeln!(out, "| metric | weighted | macro |\n|---|---|---|").unwrap();
    writeln!(out, "| accuracy | {} | |", pct(m.accuracy)).unwrap();
    writeln!(
        out,
        "| precision | {} | {} |",
        pct(m.weighted.precision),
        pct(m.macro_avg.precision)
    )
    .unwrap();
    writeln!(
        out,
        "| recall | {} | {} |",
        pct(m.weighted.recall),
        pct(m.macro_avg.recall)
    )
    .unwrap();
    writeln!(out, "| F1 | {} | {} |", pct(m.weighted.f1), pct(m.macro_avg.f1)).unwrap();
    writeln!(
        out,
        "\nSensitivity {}, specificity {}, AUC {}, n = {}.\n",
        pct(m.sensitivity),
        pct(m.specificity),
        m.auc.map(pct).unwrap_or_else(|| "n/a".into()),
        m.n_samples
    )
    .unwrap();
    let c = &m.confusion.counts;
    writeln!(out, "| true \\ predicted | HEM | ALL |\n|---|---|---|").unwrap();
    writeln!(
        out,
        "| HEM | {} | {} |\n| ALL | {} | {} |\n",
        c[0][0], c[0][1], c[1][0], c[1][1]
    )
    .unwrap();
    for w in &m.warnings {
        writeln!(out, "> warning: {w}\n").unwrap();
    }
}

/// Markdown summary of whatever results a run directory holds.
pub fn render_report(run_dir: &Path) -> Result<String> {
    let mut out = format!("# Run report: {}\n\n", run_dir.display());
    let mut found = false;
    let history = run_dir.join(files::HISTORY_JSON);
    if history.exists() {
        let h = EpochHistory::read_json(&history)?;
        found = true;
        writeln!(
            out,
            "Trained {} epoch(s){}; selected epoch {}.\n",
            h.epochs.len(),
            if h.stopped_early { ", stopped early" } else { "" },
            h.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into())
        )
        .unwrap();
        for name in HISTORY_FIGURES {
            if run_dir.join("figures").join(format!("{name}.png")).exists() {
                writeln!(out, "![{name}](figures/{name}.png)").unwrap();
            }
        }
        out.push('\n');
    }
    for (file, title) in [(files::VAL_METRICS, "Validation"), (files::TEST_METRICS, "Test")] {
        let p = run_dir.join(file);
        if p.exists() {
            metrics_table(&mut out, title, &MetricsReport::read_json(&p)?);
            found = true;
        }
    }
    let summary = run_dir.join("summary.json");
    if summary.exists() {
        let s = MonteCarloSummary::read_json(&summary)?;
        found = true;
        writeln!(out, "## Repeated resplits\n").unwrap();
        let done = s.requested - s.failed.len();
        writeln!(out, "{done} of {} iteration(s) completed.", s.requested).unwrap();
        if s.has_failures {
            writeln!(out, "Failed iterations (excluded): {:?}.", s.failed).unwrap();
        }
        writeln!(out, "\n| metric | mean | std | 95% interval |\n|---|---|---|---|").unwrap();
        for (name, m) in &s.metrics {
            let std = m.std.map(pct).unwrap_or_else(|| "n/a".into());
            writeln!(
                out,
                "| {name} | {} | {std} | [{}, {}] |",
                pct(m.mean),
                pct(m.ci_low),
                pct(m.ci_high)
            )
            .unwrap();
        }
        out.push('\n');
    }
    let ablation = run_dir.join("ablation.json");
    if ablation.exists() {
        let text = fs::read_to_string(&ablation).map_err(|e| Error::io(&ablation, e))?;
        let t: AblationTable = serde_json::from_str(&text)?;
        found = true;
        writeln!(
            out,
            "## Ablation (validation F1)\n\n| configuration | F1 | delta |\n|---|---|---|"
        )
        .unwrap();
        for r in &t.rows {
            writeln!(out, "| {} | {} | {:+.2} pp |", r.name, pct(r.val_f1), 100.0 * r.delta).unwrap();
        }
        out.push('\n');
    }
    if !found {
        return Err(Error::InvalidInput(format!(
            "no results found in {}",
            run_dir.display()
        )));
    }
    Ok(out)
}
