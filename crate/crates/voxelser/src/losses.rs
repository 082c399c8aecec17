//! Training objective — voxel cross-entropy plus semantic and geometric
//! scene-class affinity terms — with IoU metrics and a toy SGD trainer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{self, Model};
use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::num::{Buf, Tape, Var};

/// Mean negative log-likelihood over all voxels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} vs {} labels", labels.len()),
        ));
    }
    let (v, k) = (shape[0], shape[1]);
    let mut onehot = Buf::zeros(&[v, k]);
    for (r, &l) in labels.iter().enumerate() {
        if usize::from(l) >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: (k - 1) as u16 });
        }
        onehot.data_mut()[r * k + usize::from(l)] = 1.0;
    }
    // Stable log-sum-exp with a constant per-row max shift: loss =
    // mean(lse_r - logit_{r,label}). Taking log of the softmax directly turns
    // underflowed probabilities into -inf and the one-hot masking into NaN.
    let mut row_max = Buf::zeros(&[v, k]);
    for r in 0..v {
        let row = &tape.value(logits).data()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row_max.data_mut()[r * k..(r + 1) * k].fill(m);
    }
    let max_sum: f64 = (0..v).map(|r| row_max.data()[r * k]).sum();
    let maxes = tape.constant(row_max);
    let shifted = tape.sub(logits, maxes)?;
    let e = tape.exp(shifted);
    let ones = tape.constant(Buf::filled(&[k, 1], 1.0));
    let row_sums = tape.matmul(e, ones)?;
    let log_sums = tape.log(row_sums);
    let lse_total = tape.sum(log_sums);
    let mask = tape.constant(onehot);
    let picked = tape.mul(logits, mask)?;
    let picked_total = tape.sum(picked);
    let diff = tape.sub(lse_total, picked_total)?;
    let diff = tape.add_scalar(diff, max_sum);
    Ok(tape.mul_scalar(diff, 1.0 / v as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalMode {
    /// Per semantic class (1..=N) present in the ground truth.
    Semantic,
    /// Binary empty-vs-occupied; expects two-column probs.
    Geometric,
}

/// Collapse `[v, n+1]` class probabilities to `[v, 2]` (empty, occupied).
pub fn collapse_to_geometric(tape: &mut Tape, probs: Var) -> Result<Var> {
    let cols = tape.value(probs).shape()[1];
    let p_empty = tape.slice_cols(probs, 0, 1)?;
    let rest = tape.slice_cols(probs, 1, cols)?;
    let mut p_occ = tape.constant(Buf::zeros(&[shape_rows(tape, rest), 1]));
    // Sum of the non-empty columns, column by column.
    for c in 0..cols - 1 {
        let col = tape.slice_cols(rest, c, c + 1)?;
        p_occ = tape.add(p_occ, col)?;
    }
    tape.concat_cols(&[p_empty, p_occ])
}

fn shape_rows(tape: &Tape, v: Var) -> usize {
    tape.value(v).shape()[0]
}

/// Scene-class affinity loss on soft class masses: per counted class,
/// `-(log precision + log recall + log specificity)`, averaged. A class is
/// counted iff present in the ground truth; the precision term is included iff
/// it has predicted mass and the specificity term iff the class does not cover
/// every voxel.
pub fn scal_loss(tape: &mut Tape, probs: Var, labels: &[u8], mode: ScalMode) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "scal_loss",
            format!("probs {shape:?} vs {} labels", labels.len()),
        ));
    }
    let (v, k) = (shape[0], shape[1]);
    let class_of = |label: u8| -> usize {
        match mode {
            ScalMode::Semantic => usize::from(label),
            ScalMode::Geometric => usize::from(label > 0),
        }
    };
    if mode == ScalMode::Geometric && k != 2 {
        return Err(Error::shape("scal_loss", format!("geometric mode needs 2 columns, got {k}")));
    }
    let classes: Vec<usize> = match mode {
        ScalMode::Semantic => (1..k).collect(),
        ScalMode::Geometric => vec![0, 1],
    };

    let mut acc: Option<Var> = None;
    let mut counted = 0usize;
    for c in classes {
        let truth: Vec<f64> = labels.iter().map(|&l| f64::from(class_of(l) == c)).collect();
        let n_true: f64 = truth.iter().sum();
        if n_true == 0.0 {
            continue; // class absent from the ground truth is skipped
        }
        counted += 1;
        let col2 = tape.slice_cols(probs, c, c + 1)?;
        let p = tape.reshape(col2, &[v])?;
        let mask = tape.constant(Buf::from_vec(&[v], truth.clone())?);
        let tp_terms = tape.mul(p, mask)?;
        let tp = tape.sum(tp_terms);
        let pred_mass = tape.sum(p);

        let mut class_loss: Option<Var> = None;
        let push = |tape: &mut Tape, slot: &mut Option<Var>, term: Var| {
            let neg = tape.neg(term);
            *slot = Some(match *slot {
                Some(prev) => tape.add(prev, neg).expect("scalars"),
                None => neg,
            });
        };

        if tape.value(pred_mass).item() > 0.0 {
            let precision = tape.div(tp, pred_mass)?;
            let term = tape.log(precision);
            push(tape, &mut class_loss, term);
        }
        let recall_num = tape.mul_scalar(tp, 1.0 / n_true);
        let term = tape.log(recall_num);
        push(tape, &mut class_loss, term);

        let n_neg = v as f64 - n_true;
        if n_neg > 0.0 {
            let inv: Vec<f64> = truth.iter().map(|&t| 1.0 - t).collect();
            let inv_mask = tape.constant(Buf::from_vec(&[v], inv)?);
            let one_minus_p = {
                let neg_p = tape.neg(p);
                tape.add_scalar(neg_p, 1.0)
            };
            let tn_terms = tape.mul(one_minus_p, inv_mask)?;
            let tn = tape.sum(tn_terms);
            let specificity = tape.mul_scalar(tn, 1.0 / n_neg);
            let term = tape.log(specificity);
            push(tape, &mut class_loss, term);
        }

        if let Some(cl) = class_loss {
            acc = Some(match acc {
                Some(prev) => tape.add(prev, cl)?,
                None => cl,
            });
        }
    }
    match acc {
        Some(total) if counted > 0 => Ok(tape.mul_scalar(total, 1.0 / counted as f64)),
        _ => Err(Error::Invalid("no class present in the ground truth".into())),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_scal_sem: f64,
    pub l_scal_geo: f64,
    pub l_total: f64,
}

/// Total objective: cross-entropy + semantic scal + geometric scal, equally
/// weighted.
pub fn total_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<(Var, LossReport)> {
    let ce = cross_entropy(tape, logits, labels)?;
    let probs = tape.softmax(logits);
    let sem = scal_loss(tape, probs, labels, ScalMode::Semantic)?;
    let geo_probs = collapse_to_geometric(tape, probs)?;
    let geo = scal_loss(tape, geo_probs, labels, ScalMode::Geometric)?;
    let partial = tape.add(ce, sem)?;
    let total = tape.add(partial, geo)?;
    let report = LossReport {
        l_ce: tape.value(ce).item(),
        l_scal_sem: tape.value(sem).item(),
        l_scal_geo: tape.value(geo).item(),
        l_total: tape.value(total).item(),
    };
    Ok((total, report))
}

// ---- metrics ----

#[derive(Debug, Clone)]
pub struct SscMetrics {
    /// Occupied-vs-empty IoU.
    pub sc_iou: f64,
    /// IoU per semantic class 1..=N; NaN where the class is absent from both
    /// prediction and ground truth.
    pub per_class_iou: Vec<f64>,
    /// Mean over the defined per-class IoUs.
    pub miou: f64,
    /// Fraction of voxels (all of them, empty included) labeled correctly.
    pub accuracy: f64,
}

pub fn metrics_from_predictions(pred: &[u8], labels: &[u8], num_classes: u16) -> Result<SscMetrics> {
    if pred.len() != labels.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} predictions vs {} labels", pred.len(), labels.len()),
        ));
    }
    let inter_occ = pred
        .iter()
        .zip(labels)
        .filter(|&(&p, &l)| p > 0 && l > 0)
        .count() as f64;
    let union_occ = pred
        .iter()
        .zip(labels)
        .filter(|&(&p, &l)| p > 0 || l > 0)
        .count() as f64;
    let sc_iou = if union_occ > 0.0 { inter_occ / union_occ } else { 1.0 };

    let mut per_class_iou = Vec::with_capacity(usize::from(num_classes));
    for c in 1..=num_classes {
        let c = c as u8;
        let inter = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let union = pred.iter().zip(labels).filter(|&(&p, &l)| p == c || l == c).count() as f64;
        per_class_iou.push(if union > 0.0 { inter / union } else { f64::NAN });
    }
    let defined: Vec<f64> = per_class_iou.iter().copied().filter(|v| !v.is_nan()).collect();
    let miou = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let correct = pred.iter().zip(labels).filter(|&(&p, &l)| p == l).count() as f64;
    Ok(SscMetrics { sc_iou, per_class_iou, miou, accuracy: correct / pred.len() as f64 })
}

/// Argmax class per voxel from a `[v, k]` logits buffer.
pub fn hard_predictions(logits: &Buf) -> Vec<u8> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i as u8)
                .unwrap_or(0)
        })
        .collect()
}

/// Deterministic evaluation (zero Gumbel noise) of a model on one scene.
pub fn evaluate(model: &Model, grid: &VoxelGrid) -> Result<SscMetrics> {
    let noise = block::eval_noise(&model.cfg);
    let pass = block::forward(model, grid, &noise, 0, false)?;
    let pred = hard_predictions(pass.tape.value(pass.logits));
    metrics_from_predictions(&pred, grid.labels(), model.cfg.num_classes)
}

// ---- toy trainer ----

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig { lr: 0.01, momentum: 0.9, steps: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub step: usize,
    pub report: LossReport,
    pub accuracy: f64,
    pub sc_iou: f64,
    pub miou: f64,
    pub tau: f64,
}

/// SGD with momentum on a single scene. Deterministic given the seed; one
/// trace row per step, computed from that step's (pre-update) forward.
pub fn train_toy(model: &mut Model, grid: &VoxelGrid, cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<(String, Buf)> = model
        .params
        .iter()
        .map(|(name, buf)| (name.to_string(), Buf::zeros(buf.shape())))
        .collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let noise = block::train_noise(&model.cfg, &mut rng);
        let mut pass = block::forward(model, grid, &noise, step as u32, true)?;
        let (loss, report) = total_loss(&mut pass.tape, pass.logits, grid.labels())?;
        let pred = hard_predictions(pass.tape.value(pass.logits));
        let metrics = metrics_from_predictions(&pred, grid.labels(), model.cfg.num_classes)?;
        pass.tape.backward(loss)?;
        for (name, vel) in velocity.iter_mut() {
            let g = pass.tape.grad(pass.param_vars[name.as_str()]);
            let p = model.params.get_mut(name).expect("param exists");
            for ((v, &gi), pi) in vel.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *v = cfg.momentum * *v + gi;
                *pi -= cfg.lr * *v;
            }
        }
        trace.push(TraceRow {
            step,
            report,
            accuracy: metrics.accuracy,
            sc_iou: metrics.sc_iou,
            miou: metrics.miou,
            tau: crate::asa::anneal(&model.cfg.schedule(), step as u32),
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::gradcheck::{gradcheck_fn, leaves_from_point, DEFAULT_STEP, DEFAULT_TOL};
    use rand::Rng;

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Buf::zeros(&[6, 4]));
        let labels = [0u8, 1, 2, 3, 0, 2];
        let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut tape = Tape::new();
        let labels = [1u8, 0, 2];
        let mut data = vec![0.0; 9];
        for (r, &l) in labels.iter().enumerate() {
            data[r * 3 + usize::from(l)] = 50.0;
        }
        let logits = tape.constant(Buf::from_vec(&[3, 3], data).unwrap());
        let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut tape = Tape::new();
        let logits = tape.constant(Buf::zeros(&[2, 3]));
        assert!(matches!(
            cross_entropy(&mut tape, logits, &[0, 3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let labels = [2u8, 0, 1, 2];
        let report = gradcheck_fn(
            |tape, p| {
                let leaves = leaves_from_point(tape, p, &[&[4, 3]])?;
                let loss = cross_entropy(tape, leaves[0], &labels)?;
                Ok((loss, leaves))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn perfect_hard_predictions_zero_scal() {
        let labels = [0u8, 1, 2, 1];
        // Near-delta rows at the true class.
        let eps = 1e-12;
        let mut data = Vec::new();
        for &l in &labels {
            for c in 0..3 {
                data.push(if usize::from(l) == c { 1.0 - 2.0 * eps } else { eps });
            }
        }
        let mut tape = Tape::new();
        let probs = tape.constant(Buf::from_vec(&[4, 3], data).unwrap());
        let sem = scal_loss(&mut tape, probs, &labels, ScalMode::Semantic).unwrap();
        assert!(tape.value(sem).item().abs() < 1e-9);
        let geo_probs = collapse_to_geometric(&mut tape, probs).unwrap();
        let geo = scal_loss(&mut tape, geo_probs, &labels, ScalMode::Geometric).unwrap();
        assert!(tape.value(geo).item().abs() < 1e-9);
    }

    #[test]
    fn geometric_all_predicted_occupied_costs_log_half_precision() {
        // 4 voxels, all predicted occupied with mass 1, half truly occupied.
        // Occupied class: precision = 2/4, recall = 1, specificity term
        // -log(TN / 2) = -log(0) guarded by the soft masses; use soft 1-eps.
        let labels = [1u8, 1, 0, 0];
        let e = 1e-9;
        let mut data = Vec::new();
        for _ in 0..4 {
            data.push(e);
            data.push(1.0 - e);
        }
        let mut tape = Tape::new();
        let probs = tape.constant(Buf::from_vec(&[4, 2], data).unwrap());
        let loss = scal_loss(&mut tape, probs, &labels, ScalMode::Geometric).unwrap();
        // Occupied class: -(log 0.5 + log 1 + log e) ; empty class:
        // -(log 0.5 + log e + log 1). Mean keeps the -log 0.5 precision term
        // visible; with e -> 0 both log-e terms blow up, so compare against
        // the closed form at this e.
        let occ = -( (2.0f64 / 4.0).ln() + 1.0f64.ln() + e.ln() );
        let emp = -( (2.0f64 * e / (4.0 * e)).ln() + e.ln() + ((2.0 * (1.0 - e)) / 2.0).ln() );
        let expect = (occ + emp) / 2.0;
        assert!(
            (tape.value(loss).item() - expect).abs() / expect.abs() < 1e-6,
            "{} vs {expect}",
            tape.value(loss).item()
        );
    }

    #[test]
    fn scal_gradcheck_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels = [1u8, 0, 2, 2, 1, 0];
        let point: Vec<f64> = (0..18).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let report = gradcheck_fn(
            |tape, p| {
                let leaves = leaves_from_point(tape, p, &[&[6, 3]])?;
                let probs = tape.softmax(leaves[0]);
                let loss = scal_loss(tape, probs, &labels, ScalMode::Semantic)?;
                Ok((loss, leaves))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed(), "semantic {report}");
        let report = gradcheck_fn(
            |tape, p| {
                let leaves = leaves_from_point(tape, p, &[&[6, 3]])?;
                let probs = tape.softmax(leaves[0]);
                let geo = collapse_to_geometric(tape, probs)?;
                let loss = scal_loss(tape, geo, &labels, ScalMode::Geometric)?;
                Ok((loss, leaves))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed(), "geometric {report}");
    }

    #[test]
    fn loss_report_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = [0u8, 1, 2, 1, 0, 2, 2, 1];
        let data: Vec<f64> = (0..24).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut tape = Tape::new();
        let logits = tape.constant(Buf::from_vec(&[8, 3], data).unwrap());
        let (_, report) = total_loss(&mut tape, logits, &labels).unwrap();
        assert_eq!(report.l_total, report.l_ce + report.l_scal_sem + report.l_scal_geo);
        assert!(report.l_ce >= 0.0 && report.l_scal_sem >= 0.0 && report.l_scal_geo >= 0.0);
    }

    #[test]
    fn metrics_perfect_and_all_empty() {
        let labels = [0u8, 1, 2, 2, 0, 1];
        let m = metrics_from_predictions(&labels, &labels, 2).unwrap();
        assert_eq!(m.sc_iou, 1.0);
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.accuracy, 1.0);
        let empty = [0u8; 6];
        let m = metrics_from_predictions(&empty, &labels, 2).unwrap();
        assert_eq!(m.sc_iou, 0.0);
        assert_eq!(m.miou, 0.0);
    }

    #[test]
    fn metrics_skip_absent_classes() {
        let labels = [1u8, 1, 0, 0];
        let pred = [1u8, 0, 0, 0];
        let m = metrics_from_predictions(&pred, &labels, 3).unwrap();
        assert_eq!(m.per_class_iou[0], 0.5);
        assert!(m.per_class_iou[1].is_nan() && m.per_class_iou[2].is_nan());
        assert_eq!(m.miou, 0.5);
    }
}
