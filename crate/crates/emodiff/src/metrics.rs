//! Evaluation metrics over blendshape sequences and dataset-level report
//! assembly.
//!
//! Three headline numbers, each averaged over sequences for a dataset score:
//! FBE is the per-frame L2 error over all 51 coefficients, averaged over
//! frames. EBE is the per-frame L2 error over the 5 brow coefficients, maxed
//! over frames. FDD compares per-coefficient temporal standard deviations
//! (population form) over the upper-face region. Raw values are stored
//! unscaled; display scaling (×10⁻², ×10⁻⁴) happens only at print time.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seqcore::io::load_sequence;
use crate::seqcore::names::FacePartition;
use crate::seqcore::BlendshapeSequence;

fn check_same_shape(pred: &BlendshapeSequence, gt: &BlendshapeSequence) -> Result<()> {
    if pred.frames.dim() != gt.frames.dim() {
        return Err(Error::Shape(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.frames.dim(),
            gt.frames.dim()
        )));
    }
    Ok(())
}

fn select_f64(seq: &BlendshapeSequence, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((seq.frames.nrows(), idx.len()), |(r, c)| {
        seq.frames[(r, idx[c])] as f64
    })
}

/// Mean over frames of the per-frame L2 error between two equally shaped
/// coefficient matrices.
pub fn fbe_frames(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "frame matrices differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let l = pred.nrows() as f64;
    let total: f64 = pred
        .rows()
        .into_iter()
        .zip(gt.rows())
        .map(|(p, g)| {
            p.iter()
                .zip(g.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / l)
}

/// Facial blendshape error over the full 51-coefficient frames.
pub fn fbe(pred: &BlendshapeSequence, gt: &BlendshapeSequence) -> Result<f64> {
    check_same_shape(pred, gt)?;
    fbe_frames(&pred.frames_f64(), &gt.frames_f64())
}

/// FBE restricted to the mouth-region coefficients.
pub fn fbe_mouth(
    pred: &BlendshapeSequence,
    gt: &BlendshapeSequence,
    part: &FacePartition,
) -> Result<f64> {
    check_same_shape(pred, gt)?;
    part.validate()?;
    fbe_frames(&select_f64(pred, &part.mouth_idx), &select_f64(gt, &part.mouth_idx))
}

/// Emotional blendshape error: the largest per-frame L2 error over the brow
/// coefficients.
pub fn ebe(
    pred: &BlendshapeSequence,
    gt: &BlendshapeSequence,
    part: &FacePartition,
) -> Result<f64> {
    check_same_shape(pred, gt)?;
    part.validate()?;
    let p = select_f64(pred, &part.brow_idx);
    let g = select_f64(gt, &part.brow_idx);
    let max = p
        .rows()
        .into_iter()
        .zip(g.rows())
        .map(|(pr, gr)| {
            pr.iter()
                .zip(gr.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    Ok(max)
}

/// Population standard deviation of one column over frames.
fn column_std(m: &Array2<f64>, col: usize) -> f64 {
    let n = m.nrows() as f64;
    let mean = m.column(col).sum() / n;
    let var = m
        .column(col)
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Facial dynamics deviation: mean absolute difference of per-coefficient
/// temporal standard deviations over the upper-face region.
pub fn fdd(
    pred: &BlendshapeSequence,
    gt: &BlendshapeSequence,
    part: &FacePartition,
) -> Result<f64> {
    check_same_shape(pred, gt)?;
    part.validate()?;
    if pred.frames.nrows() < 2 {
        return Err(Error::Shape(
            "dynamics deviation needs at least 2 frames".into(),
        ));
    }
    let p = select_f64(pred, &part.upper_idx);
    let g = select_f64(gt, &part.upper_idx);
    let k = part.upper_idx.len() as f64;
    let total: f64 = (0..part.upper_idx.len())
        .map(|c| (column_std(&p, c) - column_std(&g, c)).abs())
        .sum();
    Ok(total / k)
}

/// All four numbers for one prediction/ground-truth pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMetrics {
    pub id: String,
    pub fbe: f64,
    pub ebe: f64,
    pub fdd: f64,
    pub fbe_mouth: f64,
}

pub fn sequence_metrics(
    pred: &BlendshapeSequence,
    gt: &BlendshapeSequence,
    part: &FacePartition,
) -> Result<SequenceMetrics> {
    Ok(SequenceMetrics {
        id: gt.id.clone(),
        fbe: fbe(pred, gt)?,
        ebe: ebe(pred, gt, part)?,
        fdd: fdd(pred, gt, part)?,
        fbe_mouth: fbe_mouth(pred, gt, part)?,
    })
}

/// Dataset-level evaluation: per-sequence rows in id order plus their means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SequenceMetrics>,
    pub fbe: f64,
    pub ebe: f64,
    pub fdd: f64,
    pub fbe_mouth: f64,
}

impl EvalReport {
    pub fn from_rows(mut rows: Vec<SequenceMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("no sequence pairs to evaluate".into()));
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len() as f64;
        let mean = |f: fn(&SequenceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            fbe: mean(|r| r.fbe),
            ebe: mean(|r| r.ebe),
            fdd: mean(|r| r.fdd),
            fbe_mouth: mean(|r| r.fbe_mouth),
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Tab-separated text: header, one row per sequence, a mean footer.
    pub fn to_text(&self) -> String {
        let mut out = String::from("id\tfbe\tebe\tfdd\tfbe_mouth\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\n",
                r.id, r.fbe, r.ebe, r.fdd, r.fbe_mouth
            ));
        }
        out.push_str(&format!(
            "mean\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\n",
            self.fbe, self.ebe, self.fdd, self.fbe_mouth
        ));
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Display-scaled summary line (FBE and EBE in units of 1e-2, FDD in
    /// units of 1e-4).
    pub fn summary_line(&self) -> String {
        format!(
            "sequences {}  FBE(x1e-2) {:.4}  EBE(x1e-2) {:.4}  FDD(x1e-4) {:.4}  mouth-FBE(x1e-2) {:.4}",
            self.rows.len(),
            self.fbe * 1e2,
            self.ebe * 1e2,
            self.fdd * 1e4,
            self.fbe_mouth * 1e2
        )
    }

    /// Minimal standalone SVG line plot of the per-sequence metric values.
    pub fn to_svg(&self) -> String {
        let w = 640.0;
        let h = 240.0;
        let pad = 30.0;
        let n = self.rows.len().max(2) as f64;
        let series: [(&str, &str, Vec<f64>); 3] = [
            ("fbe", "#d33", self.rows.iter().map(|r| r.fbe).collect()),
            ("ebe", "#36c", self.rows.iter().map(|r| r.ebe).collect()),
            ("fdd", "#393", self.rows.iter().map(|r| r.fdd).collect()),
        ];
        let ymax = series
            .iter()
            .flat_map(|(_, _, v)| v.iter().copied())
            .fold(1e-9, f64::max);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        svg.push_str(&format!(
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
        ));
        for (li, (name, color, values)) in series.iter().enumerate() {
            let pts: Vec<String> = values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let x = pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
                    let y = h - pad - (h - 2.0 * pad) * (v / ymax);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>\n",
                pad + 60.0 * li as f64,
                14.0
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Evaluate every `.edbs` file in `pred_dir` against the file with the same
/// name in `gt_dir`. Ids present on only one side abort with the full list.
pub fn evaluate_dataset(
    pred_dir: &Path,
    gt_dir: &Path,
    part: &FacePartition,
) -> Result<EvalReport> {
    let list = |dir: &Path| -> Result<BTreeMap<String, std::path::PathBuf>> {
        let mut map = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("edbs") {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                map.insert(stem, path);
            }
        }
        Ok(map)
    };
    let preds = list(pred_dir)?;
    let gts = list(gt_dir)?;
    let missing: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPair(missing));
    }
    let part = part.clone();
    let rows: Result<Vec<SequenceMetrics>> = preds
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(id, ppath)| {
            let pred = load_sequence(ppath)?;
            let gt = load_sequence(&gts[*id])?;
            sequence_metrics(&pred, &gt, &part)
        })
        .collect();
    EvalReport::from_rows(rows?)
}
