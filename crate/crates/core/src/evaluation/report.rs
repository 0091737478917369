use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::Array3;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{IouPoint, RobustGap};
use crate::attacks::{AttackConfig, Direction};
use crate::config::{EvalConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::training::MetricsLog;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub label: String,
    pub attack: AttackConfig,
    pub test_robust_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub attack: String,
    #[serde(flatten)]
    pub gap: RobustGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouCurve {
    pub direction: Direction,
    pub points: Vec<IouPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEntry {
    pub source: String,
    pub attack: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint_digest: String,
    pub config_hash: String,
    #[serde(default)]
    pub objective: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub train_examples: usize,
    pub test_examples: usize,
    pub clean_acc: f64,
    pub train_clean_acc: f64,
    #[serde(default)]
    pub robust: Vec<AttackResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust_gap: Option<GapResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iou: Vec<IouCurve>,
    pub iou_bin_threshold: f32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transfer: Vec<TransferEntry>,
    pub eval_config: EvalConfig,
    #[serde(default)]
    pub experiment_config: Option<ExperimentConfig>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut accs = vec![self.clean_acc, self.train_clean_acc];
        accs.extend(self.robust.iter().map(|r| r.test_robust_acc));
        accs.extend(self.transfer.iter().map(|t| t.accuracy));
        if let Some(g) = &self.robust_gap {
            accs.extend([g.gap.train_robust_acc, g.gap.test_robust_acc]);
            if g.gap.gap != g.gap.train_robust_acc - g.gap.test_robust_acc {
                return Err(Error::contract("robust gap is not train minus test robust accuracy"));
            }
        }
        if let Some(v) = accs.into_iter().find(|&v| !in_unit(v)) {
            return Err(Error::contract(format!("accuracy {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Flat `name → value` view used by `compare`.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("clean_acc".into(), self.clean_acc);
        for r in &self.robust {
            m.insert(format!("robust_acc/{}", r.label), r.test_robust_acc);
        }
        if let Some(g) = &self.robust_gap {
            m.insert("robust_gap".into(), g.gap.gap);
            m.insert("train_robust_acc".into(), g.gap.train_robust_acc);
            m.insert("test_robust_acc".into(), g.gap.test_robust_acc);
        }
        for c in &self.iou {
            for p in &c.points {
                m.insert(format!("fg_iou/{}/{}", c.direction.name(), p.epsilon), p.fg_iou);
                m.insert(format!("bg_iou/{}/{}", c.direction.name(), p.epsilon), p.bg_iou);
            }
        }
        for t in &self.transfer {
            m.insert(format!("transfer/{}/{}", t.source, t.attack), t.accuracy);
        }
        m
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::contract(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn plot_error<E: std::error::Error>(path: &Path, e: E) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<()> {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let n = bars.len().max(1);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(60)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..n as f64, 0f64..1f64)?;
        let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                labels.get(i).cloned().unwrap_or_default()
            })
            .y_desc("accuracy")
            .draw()?;
        chart.draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, *v)], BLUE.mix(0.7).filled())
        }))?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

type Series = (String, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<()> {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    let x_max = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.0))
        .fold(0.0f64, f64::max)
        .max(1.0);
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..x_max, 0f64..1f64)?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let colour = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), colour.stroke_width(2)))?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], colour));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Writes `report.json`, CSV tables and SVG plots into `out_dir`.
/// Returns the paths written.
pub fn emit_report(report: &EvalReport, log: Option<&MetricsLog>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    report.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, contents: String| -> Result<PathBuf> {
        let p = out_dir.join(name);
        write_file(&p, contents)?;
        written.push(p.clone());
        Ok(p)
    };
    put(REPORT_FILE, serde_json::to_string_pretty(report)?)?;

    let mut rows = vec![vec!["clean".into(), "0".into(), "0".into(), "none".into(), report.clean_acc.to_string()]];
    rows.extend(report.robust.iter().map(|r| {
        vec![
            r.label.clone(),
            r.attack.epsilon.to_string(),
            r.attack.iterations.to_string(),
            serde_json::to_value(r.attack.loss).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            r.test_robust_acc.to_string(),
        ]
    }));
    put(
        "robust_accuracy.csv",
        csv_text(&["attack", "epsilon", "iterations", "loss", "test_acc"], rows)?,
    )?;
    if let Some(g) = &report.robust_gap {
        put(
            "robust_gap.csv",
            csv_text(
                &["attack", "train_robust_acc", "test_robust_acc", "gap"],
                [vec![
                    g.attack.clone(),
                    g.gap.train_robust_acc.to_string(),
                    g.gap.test_robust_acc.to_string(),
                    g.gap.gap.to_string(),
                ]],
            )?,
        )?;
    }
    if !report.iou.is_empty() {
        let rows = report.iou.iter().flat_map(|c| {
            c.points.iter().map(move |p| {
                vec![
                    c.direction.name().to_string(),
                    p.epsilon.to_string(),
                    p.fg_iou.to_string(),
                    p.bg_iou.to_string(),
                ]
            })
        });
        put("iou.csv", csv_text(&["direction", "epsilon", "fg_iou", "bg_iou"], rows)?)?;
    }
    if !report.transfer.is_empty() {
        let rows = report
            .transfer
            .iter()
            .map(|t| vec![t.source.clone(), t.attack.clone(), t.accuracy.to_string()]);
        put("transfer.csv", csv_text(&["source", "attack", "accuracy"], rows)?)?;
    }

    let mut bars = vec![("clean".to_string(), report.clean_acc)];
    bars.extend(report.robust.iter().map(|r| (r.label.clone(), r.test_robust_acc)));
    let p = out_dir.join("robust_accuracy.svg");
    bar_chart(&p, "Test accuracy by attack", &bars)?;
    written.push(p);

    if !report.iou.is_empty() {
        let series: Vec<Series> = report
            .iou
            .iter()
            .flat_map(|c| {
                let pts = |f: fn(&IouPoint) -> f64| c.points.iter().map(|p| (p.epsilon.in_255ths(), f(p))).collect();
                [
                    (format!("fg {}", c.direction.name()), pts(|p| p.fg_iou)),
                    (format!("bg {}", c.direction.name()), pts(|p| p.bg_iou)),
                ]
            })
            .collect();
        let p = out_dir.join("iou_vs_epsilon.svg");
        line_chart(&p, "Attention IoU", "epsilon (/255)", "IoU", &series)?;
        written.push(p);
    }
    if let Some(log) = log.filter(|l| !l.is_empty()) {
        let pick = |f: fn(&crate::training::EpochRecord) -> f64| -> Vec<(f64, f64)> {
            log.records().iter().map(|r| (r.epoch as f64, f(r))).collect()
        };
        let series = vec![
            ("train clean".to_string(), pick(|r| r.train_clean_acc)),
            ("test clean".to_string(), pick(|r| r.test_clean_acc)),
            ("train robust".to_string(), pick(|r| r.train_robust_acc)),
            ("test robust".to_string(), pick(|r| r.test_robust_acc)),
        ];
        let p = out_dir.join("learning_curves.svg");
        line_chart(&p, "Learning curves", "epoch", "accuracy", &series)?;
        written.push(p);
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let version = v.get("schema_version").and_then(|s| s.as_u64());
    if version != Some(REPORT_SCHEMA_VERSION as u64) {
        return Err(Error::config(
            path.display().to_string(),
            format!("report schema version {version:?}, expected {REPORT_SCHEMA_VERSION}"),
        ));
    }
    Ok(serde_json::from_value(v)?)
}

/// Writes one grayscale PNG per map (up to `limit`) plus the full array as
/// `attention_maps.npy`.
pub fn write_attention_pngs(maps: &Array3<f32>, out_dir: &Path, limit: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (i, m) in maps.outer_iter().take(limit).enumerate() {
        let (h, w) = m.dim();
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([(m[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let p = out_dir.join(format!("attention_{i:03}.png"));
        img.save(&p).map_err(|e| plot_error(&p, e))?;
        written.push(p);
    }
    let p = out_dir.join("attention_maps.npy");
    ndarray_npy::write_npy(&p, maps).map_err(|e| plot_error(&p, e))?;
    written.push(p);
    Ok(written)
}

/// Cross-run table: every metric of every run, its delta against the first
/// run, and per-metric sign counts of paired (same-seed) differences
/// between the first two objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub runs: Vec<RunRow>,
    pub deltas: Vec<DeltaRow>,
    pub sign_counts: Vec<SignCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub name: String,
    pub objective: Option<String>,
    pub seed: Option<u64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub run: String,
    pub metric: String,
    pub value: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCount {
    pub metric: String,
    pub first: String,
    pub second: String,
    pub pairs: usize,
    /// Seeds where `first − second > 0`.
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
}

impl RunComparison {
    pub fn build(runs: Vec<RunRow>) -> Result<Self> {
        if runs.len() < 2 {
            return Err(Error::config("run_dirs", "compare needs at least two runs"));
        }
        let base = runs[0].metrics.clone();
        let mut deltas = Vec::new();
        for r in &runs {
            for (k, &v) in &r.metrics {
                if let Some(&b) = base.get(k) {
                    deltas.push(DeltaRow {
                        run: r.name.clone(),
                        metric: k.clone(),
                        value: v,
                        delta: v - b,
                    });
                }
            }
        }
        let mut objectives: Vec<String> = Vec::new();
        for o in runs.iter().filter_map(|r| r.objective.clone()) {
            if !objectives.contains(&o) {
                objectives.push(o);
            }
        }
        let mut sign_counts = Vec::new();
        if let [first, second, ..] = objectives.as_slice() {
            let by_seed = |obj: &str| -> BTreeMap<u64, &RunRow> {
                runs.iter()
                    .filter(|r| r.objective.as_deref() == Some(obj))
                    .filter_map(|r| r.seed.map(|s| (s, r)))
                    .collect()
            };
            let (a, b) = (by_seed(first), by_seed(second));
            for metric in base.keys() {
                let mut c = SignCount {
                    metric: metric.clone(),
                    first: first.clone(),
                    second: second.clone(),
                    pairs: 0,
                    positive: 0,
                    negative: 0,
                    ties: 0,
                };
                for (seed, ra) in &a {
                    let (Some(rb), Some(va)) = (b.get(seed), ra.metrics.get(metric)) else { continue };
                    let Some(vb) = rb.metrics.get(metric) else { continue };
                    c.pairs += 1;
                    match (va - vb).partial_cmp(&0.0) {
                        Some(std::cmp::Ordering::Greater) => c.positive += 1,
                        Some(std::cmp::Ordering::Less) => c.negative += 1,
                        _ => c.ties += 1,
                    }
                }
                if c.pairs > 0 {
                    sign_counts.push(c);
                }
            }
        }
        Ok(RunComparison {
            runs,
            deltas,
            sign_counts,
        })
    }

    pub fn emit(&self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut written = Vec::new();
        let p = out_dir.join("comparison.json");
        write_file(&p, serde_json::to_string_pretty(self)?)?;
        written.push(p);
        let p = out_dir.join("deltas.csv");
        let rows = self
            .deltas
            .iter()
            .map(|d| vec![d.run.clone(), d.metric.clone(), d.value.to_string(), d.delta.to_string()]);
        write_file(&p, csv_text(&["run", "metric", "value", "delta"], rows)?)?;
        written.push(p);
        if !self.sign_counts.is_empty() {
            let p = out_dir.join("sign_counts.csv");
            let rows = self.sign_counts.iter().map(|s| {
                vec![
                    s.metric.clone(),
                    s.first.clone(),
                    s.second.clone(),
                    s.pairs.to_string(),
                    s.positive.to_string(),
                    s.negative.to_string(),
                    s.ties.to_string(),
                ]
            });
            write_file(
                &p,
                csv_text(&["metric", "first", "second", "pairs", "positive", "negative", "ties"], rows)?,
            )?;
            written.push(p);
        }
        let overlay = |prefix: &str| -> Vec<(String, f64)> {
            self.runs
                .iter()
                .filter_map(|r| r.metrics.get(prefix).map(|&v| (r.name.clone(), v)))
                .collect()
        };
        for (metric, file, title) in [
            ("clean_acc", "clean_acc.svg", "Clean accuracy"),
            ("test_robust_acc", "robust_acc.svg", "Test robust accuracy"),
            ("train_robust_acc", "train_robust_acc.svg", "Train robust accuracy"),
        ] {
            let bars = overlay(metric);
            if !bars.is_empty() {
                let p = out_dir.join(file);
                bar_chart(&p, title, &bars)?;
                written.push(p);
            }
        }
        let gaps: Vec<(String, f64)> = overlay("robust_gap").into_iter().map(|(n, g)| (n, g.abs())).collect();
        if !gaps.is_empty() {
            let p = out_dir.join("robust_gap.svg");
            bar_chart(&p, "Robust gap (absolute)", &gaps)?;
            written.push(p);
        }
        let mut iou_bars = Vec::new();
        for r in &self.runs {
            for (k, &v) in &r.metrics {
                if k.starts_with("fg_iou/") || k.starts_with("bg_iou/") {
                    iou_bars.push((format!("{} {}", r.name, k), v));
                }
            }
        }
        if !iou_bars.is_empty() {
            let p = out_dir.join("iou.svg");
            bar_chart(&p, "Attention IoU", &iou_bars)?;
            written.push(p);
        }
        Ok(written)
    }
}
