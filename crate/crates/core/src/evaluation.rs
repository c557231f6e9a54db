//! PCK, layer-selection statistics, per-pair timing, and the soft-gating
//! comparison harness.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateVariant;
use crate::matching::{dense_match, transfer_keypoint, MatchDump};
use crate::pyramid::{load_pyramid, FeaturePyramid, PairAnnotation};
use crate::training::{forward, train, Gates, ModelParams, PairDataset, TrainConfig, TrainData};
use crate::util::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PckBasis {
    /// Threshold scales with the target image size.
    Img,
    /// Threshold scales with the target bounding box.
    Bbox,
}

impl std::str::FromStr for PckBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img" => Ok(PckBasis::Img),
            "bbox" => Ok(PckBasis::Bbox),
            other => Err(Error::InvalidArgument(format!("unknown PCK basis '{other}'"))),
        }
    }
}

/// `[x0, y0, x1, y1]` of the tightest box around the target keypoints.
pub fn tight_bbox(annotation: &PairAnnotation) -> Option<[f64; 4]> {
    let first = annotation.keypoints.first()?;
    let mut b = [first.trg[0], first.trg[1], first.trg[0], first.trg[1]];
    for kp in &annotation.keypoints {
        b[0] = b[0].min(kp.trg[0]);
        b[1] = b[1].min(kp.trg[1]);
        b[2] = b[2].max(kp.trg[0]);
        b[3] = b[3].max(kp.trg[1]);
    }
    Some(b)
}

/// Size `max(w, h)` that the PCK threshold is proportional to.
pub fn pck_reference_size(trg_size: (f64, f64), bbox: Option<[f64; 4]>, basis: PckBasis) -> Result<f64> {
    match basis {
        PckBasis::Img => Ok(trg_size.0.max(trg_size.1)),
        PckBasis::Bbox => {
            let b = bbox.ok_or_else(|| Error::InvalidArgument("bbox PCK needs a bounding box".into()))?;
            Ok((b[2] - b[0]).max(b[3] - b[1]))
        }
    }
}

/// Fraction of predictions within `alpha * reference` of the ground truth
/// (boundary inclusive).
pub fn pck(predictions: &[[f64; 2]], truth: &[[f64; 2]], alpha: f64, reference: f64) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "PCK needs matching non-empty lists, got {} and {}",
            predictions.len(),
            truth.len()
        )));
    }
    let threshold = alpha * reference;
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt() <= threshold)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Model output for one pair under deterministic gating.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    pub gates_on: Vec<bool>,
    pub selected: Vec<usize>,
    pub assignment: Vec<usize>,
    pub scores: Vec<f64>,
    pub predictions: Vec<[f64; 2]>,
}

pub fn predict_pair(
    params: &ModelParams,
    src: &FeaturePyramid,
    trg: &FeaturePyramid,
    keypoints: &[[f64; 2]],
) -> Result<PairPrediction> {
    let f = forward(params, src, trg, Gates::Eval)?;
    let assignment = dense_match(&f.correlation);
    let scores = assignment.iter().enumerate().map(|(i, &j)| f.correlation.row(i)[j]).collect();
    let predictions = keypoints
        .iter()
        .map(|p| transfer_keypoint(*p, &assignment, &f.src_grid, &f.trg_grid))
        .collect::<Result<_>>()?;
    Ok(PairPrediction {
        gates_on: f.layers.iter().map(|l| l.decision.on).collect(),
        selected: f.selected,
        assignment,
        scores,
        predictions,
    })
}

pub fn match_dump(params: &ModelParams, src: &FeaturePyramid, trg: &FeaturePyramid, annotation: &PairAnnotation) -> Result<MatchDump> {
    let kps: Vec<[f64; 2]> = annotation.keypoints.iter().map(|k| k.src).collect();
    let p = predict_pair(params, src, trg, &kps)?;
    Ok(MatchDump {
        src: annotation.src_id.clone(),
        trg: annotation.trg_id.clone(),
        selected_layers: p.selected,
        matches: p.assignment.iter().zip(&p.scores).enumerate().map(|(i, (&j, &s))| (i, j, s)).collect(),
        keypoints: kps.iter().zip(&p.predictions).map(|(a, b)| [a[0], a[1], b[0], b[1]]).collect(),
    })
}

/// Per-layer on-rates overall and per category, and the distribution of the
/// number of layers switched on per pair (index `n` counts pairs with `n`
/// layers on; `n = 0` means the base-layer fallback was used).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub frequency: Vec<f64>,
    pub per_category: BTreeMap<String, Vec<f64>>,
    pub count_histogram: Vec<usize>,
}

pub fn selection_stats(records: &[(String, Vec<bool>)]) -> SelectionStats {
    let layers = records.first().map_or(0, |r| r.1.len());
    let mut totals = vec![0usize; layers];
    let mut per_cat: BTreeMap<String, (Vec<usize>, usize)> = BTreeMap::new();
    let mut hist = vec![0usize; layers + 1];
    for (cat, on) in records {
        let entry = per_cat.entry(cat.clone()).or_insert_with(|| (vec![0; layers], 0));
        entry.1 += 1;
        let mut n = 0;
        for (l, &b) in on.iter().enumerate() {
            if b {
                totals[l] += 1;
                entry.0[l] += 1;
                n += 1;
            }
        }
        hist[n] += 1;
    }
    let rate = |counts: &[usize], n: usize| counts.iter().map(|c| *c as f64 / n.max(1) as f64).collect();
    SelectionStats {
        frequency: rate(&totals, records.len()),
        per_category: per_cat.into_iter().map(|(k, (c, n))| (k, rate(&c, n))).collect(),
        count_histogram: hist,
    }
}

/// `category,layer_0,...` rows of per-category on-rates, plus an `all` row.
pub fn selection_csv(stats: &SelectionStats) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["category".to_string()];
    header.extend((0..stats.frequency.len()).map(|l| format!("layer_{l}")));
    w.write_record(&header)?;
    let mut row = |name: &str, v: &[f64]| -> Result<()> {
        let mut rec = vec![name.to_string()];
        rec.extend(v.iter().map(f64::to_string));
        Ok(w.write_record(&rec)?)
    };
    for (cat, v) in &stats.per_category {
        row(cat, v)?;
    }
    row("all", &stats.frequency)?;
    let bytes = w.into_inner().map_err(|e| Error::RawIo(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub fn histogram_csv(stats: &SelectionStats) -> String {
    let mut s = String::from("layers_on,pairs\n");
    for (n, c) in stats.count_histogram.iter().enumerate() {
        s.push_str(&format!("{n},{c}\n"));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    pub basis: PckBasis,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 0.1, 0.15],
            basis: PckBasis::Img,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub basis: PckBasis,
    /// PCK per alpha, averaged over pairs.
    pub pck_per_alpha: BTreeMap<String, f64>,
    pub per_category_pck: BTreeMap<String, BTreeMap<String, f64>>,
    pub selection_frequency: Vec<f64>,
    pub per_category_selection: BTreeMap<String, Vec<f64>>,
    pub selected_count_histogram: Vec<usize>,
    pub mean_selected_layers: f64,
    pub mean_pair_ms: f64,
}

fn alpha_key(a: f64) -> String {
    format!("{a}")
}

struct PairOutcome {
    category: String,
    pck: Vec<f64>,
    gates_on: Vec<bool>,
    selected: usize,
    ms: f64,
}

/// Evaluates every pair with keypoints. Pairs run concurrently; the reported
/// time is the mean of per-pair wall-clock durations.
pub fn evaluate(params: &ModelParams, data: &PairDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.alphas.is_empty() || cfg.alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidArgument("PCK needs positive alphas".into()));
    }
    let pairs: Vec<&PairAnnotation> = data.pairs.iter().filter(|p| !p.keypoints.is_empty()).collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no annotated pairs to evaluate".into()));
    }
    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .map(|ann| {
            let start = Instant::now();
            let src = data.pyramid(&ann.src_id)?;
            let trg = data.pyramid(&ann.trg_id)?;
            let kps: Vec<[f64; 2]> = ann.keypoints.iter().map(|k| k.src).collect();
            let pred = predict_pair(params, src, trg, &kps)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let truth: Vec<[f64; 2]> = ann.keypoints.iter().map(|k| k.trg).collect();
            let bbox = ann.trg_bbox.or_else(|| tight_bbox(ann));
            let reference = pck_reference_size(trg.size(), bbox, cfg.basis)?;
            let pck = cfg
                .alphas
                .iter()
                .map(|a| pck(&pred.predictions, &truth, *a, reference))
                .collect::<Result<_>>()?;
            Ok(PairOutcome {
                category: ann.category.clone(),
                pck,
                selected: pred.gates_on.iter().filter(|b| **b).count(),
                gates_on: pred.gates_on,
                ms,
            })
        })
        .collect::<Result<_>>()?;

    let n = outcomes.len() as f64;
    let mut pck_per_alpha = BTreeMap::new();
    let mut per_cat: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (k, a) in cfg.alphas.iter().enumerate() {
        pck_per_alpha.insert(alpha_key(*a), outcomes.iter().map(|o| o.pck[k]).sum::<f64>() / n);
    }
    for o in &outcomes {
        let e = per_cat.entry(o.category.clone()).or_insert_with(|| (vec![0.0; cfg.alphas.len()], 0));
        e.1 += 1;
        for (s, v) in e.0.iter_mut().zip(&o.pck) {
            *s += v;
        }
    }
    let per_category_pck = per_cat
        .into_iter()
        .map(|(cat, (sums, count))| {
            let m = cfg
                .alphas
                .iter()
                .zip(sums)
                .map(|(a, s)| (alpha_key(*a), s / count as f64))
                .collect();
            (cat, m)
        })
        .collect();
    let records: Vec<(String, Vec<bool>)> = outcomes.iter().map(|o| (o.category.clone(), o.gates_on.clone())).collect();
    let stats = selection_stats(&records);
    Ok(EvalReport {
        pairs: outcomes.len(),
        basis: cfg.basis,
        pck_per_alpha,
        per_category_pck,
        selection_frequency: stats.frequency,
        per_category_selection: stats.per_category,
        selected_count_histogram: stats.count_histogram,
        mean_selected_layers: outcomes.iter().map(|o| o.selected as f64).sum::<f64>() / n,
        mean_pair_ms: outcomes.iter().map(|o| o.ms).sum::<f64>() / n,
    })
}

impl EvalReport {
    pub fn pck_at(&self, alpha: f64) -> Option<f64> {
        self.pck_per_alpha.get(&alpha_key(alpha)).copied()
    }

    pub fn selection_stats(&self) -> SelectionStats {
        SelectionStats {
            frequency: self.selection_frequency.clone(),
            per_category: self.per_category_selection.clone(),
            count_histogram: self.selected_count_histogram.clone(),
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Where timed pairs get their pyramids from.
#[derive(Clone, Copy, Debug)]
pub enum TimingSource<'a> {
    /// Pyramids already in memory.
    Preloaded(&'a PairDataset),
    /// Pyramids re-read from `<dir>/<id>.dhpf` for every pair.
    Disk { pairs: &'a [PairAnnotation], dir: &'a Path },
}

/// Mean wall-clock milliseconds per pair, from pyramid access to keypoint
/// prediction, measured sequentially after `warmup` untimed pairs.
pub fn time_pairs(params: &ModelParams, source: TimingSource, warmup: usize) -> Result<f64> {
    let pairs: &[PairAnnotation] = match source {
        TimingSource::Preloaded(d) => &d.pairs,
        TimingSource::Disk { pairs, .. } => pairs,
    };
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to time".into()));
    }
    let run = |ann: &PairAnnotation| -> Result<f64> {
        let start = Instant::now();
        let kps: Vec<[f64; 2]> = ann.keypoints.iter().map(|k| k.src).collect();
        match source {
            TimingSource::Preloaded(d) => {
                predict_pair(params, d.pyramid(&ann.src_id)?, d.pyramid(&ann.trg_id)?, &kps)?;
            }
            TimingSource::Disk { dir, .. } => {
                let s = load_pyramid(dir.join(format!("{}.dhpf", ann.src_id)))?;
                let t = load_pyramid(dir.join(format!("{}.dhpf", ann.trg_id)))?;
                predict_pair(params, &s, &t, &kps)?;
            }
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for ann in pairs.iter().cycle().take(warmup) {
        run(ann)?;
    }
    let mut total = 0.0;
    for ann in pairs {
        total += run(ann)?;
    }
    Ok(total / pairs.len() as f64)
}

/// One row of the soft-gating comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: GateVariant,
    pub pck: BTreeMap<String, f64>,
    pub mean_selected_layers: f64,
    pub mean_gate_value: f64,
    pub final_loss: f64,
    pub mean_pair_ms: f64,
}

/// Trains one model per variant from the same initial seed and data, then
/// evaluates each on `test`.
pub fn compare_variants(
    variants: &[GateVariant],
    base: &ModelParams,
    train_data: TrainData,
    train_cfg: &TrainConfig,
    test: &PairDataset,
    eval_cfg: &EvalConfig,
) -> Result<Vec<VariantRow>> {
    variants
        .iter()
        .map(|&variant| {
            let mut params = base.clone();
            params.config.variant = variant;
            let out = train(params, train_data, train_cfg)?;
            let report = evaluate(&out.params, test, eval_cfg)?;
            let tail = out.metrics.len().saturating_sub(50);
            let tail_rows = &out.metrics[tail..];
            let final_loss = tail_rows.iter().map(|r| r.total_loss).sum::<f64>() / tail_rows.len().max(1) as f64;
            let mean_gate_value = tail_rows
                .iter()
                .map(|r| r.layer_freq.iter().sum::<f64>() / r.layer_freq.len().max(1) as f64)
                .sum::<f64>()
                / tail_rows.len().max(1) as f64;
            Ok(VariantRow {
                variant,
                pck: report.pck_per_alpha.clone(),
                mean_selected_layers: report.mean_selected_layers,
                mean_gate_value,
                final_loss,
                mean_pair_ms: report.mean_pair_ms,
            })
        })
        .collect()
}

pub fn variant_table(rows: &[VariantRow]) -> String {
    let alphas: Vec<String> = rows.first().map(|r| r.pck.keys().cloned().collect()).unwrap_or_default();
    let mut s = format!("{:<12}", "variant");
    for a in &alphas {
        s.push_str(&format!(" {:>10}", format!("PCK@{a}")));
    }
    s.push_str(&format!(" {:>9} {:>9} {:>10} {:>8}\n", "layers_on", "gate_mean", "final_loss", "ms/pair"));
    for r in rows {
        s.push_str(&format!("{:<12}", r.variant.name()));
        for a in &alphas {
            s.push_str(&format!(" {:>10.4}", r.pck.get(a).copied().unwrap_or(f64::NAN)));
        }
        s.push_str(&format!(
            " {:>9.2} {:>9.3} {:>10.4} {:>8.3}\n",
            r.mean_selected_layers, r.mean_gate_value, r.final_loss, r.mean_pair_ms
        ));
    }
    s
}
