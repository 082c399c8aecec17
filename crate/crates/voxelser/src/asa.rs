//! Adaptive Serialized Attention: grouped multi-head self-attention over
//! serialized voxel tokens, with the serialization shift chosen by a learnable
//! straight-through Gumbel-Softmax selector under temperature annealing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{self, GroupPartition, VoxelGrid};
use crate::num::{Buf, Tape, Var};
use crate::sfc::CurveKind;

/// K shift logits over candidate shifts `k * (P / K)`.
#[derive(Debug, Clone)]
pub struct ShiftSelector {
    pub logits: Buf,
    pub k: usize,
    pub patch_size: usize,
}

impl ShiftSelector {
    pub fn new(k: usize, patch_size: usize) -> Result<ShiftSelector> {
        if k < 1 {
            return Err(Error::Invalid("selector needs at least one candidate".into()));
        }
        if patch_size % k != 0 {
            return Err(Error::Invalid(format!(
                "patch size {patch_size} not divisible by {k} candidates"
            )));
        }
        Ok(ShiftSelector { logits: Buf::zeros(&[k]), k, patch_size })
    }

    pub fn candidate_shifts(&self) -> Vec<usize> {
        let step = self.patch_size / self.k;
        (0..self.k).map(|i| i * step).collect()
    }
}

/// Exponentially decayed temperature with a floor.
#[derive(Debug, Clone, Copy)]
pub struct AnnealSchedule {
    pub tau_init: f64,
    pub tau_min: f64,
    pub alpha: f64,
}

impl AnnealSchedule {
    pub fn new(tau_init: f64, tau_min: f64, alpha: f64) -> Result<AnnealSchedule> {
        if !(tau_min > 0.0 && tau_init >= tau_min) {
            return Err(Error::Invalid(format!(
                "need tau_init >= tau_min > 0, got {tau_init} and {tau_min}"
            )));
        }
        if alpha < 0.0 {
            return Err(Error::Invalid(format!("annealing rate must be >= 0, got {alpha}")));
        }
        Ok(AnnealSchedule { tau_init, tau_min, alpha })
    }
}

/// `tau_t = max(tau_min, tau_init * exp(-alpha * t))`
pub fn anneal(schedule: &AnnealSchedule, t: u32) -> f64 {
    (schedule.tau_init * (-schedule.alpha * f64::from(t)).exp()).max(schedule.tau_min)
}

const GUMBEL_CLAMP: f64 = 1e-12;

/// `-log(-log(u))` with u clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel(len: usize, rng: &mut impl Rng) -> Buf {
    Buf::from_vec(&[len], (0..len).map(|_| gumbel_from_uniform(rng.gen())).collect())
        .expect("shape matches data")
}

/// Forward-only selection: argmax of `(l + g) / tau` (tau > 0 never changes it).
pub fn select_index(logits: &[f64], noise: &[f64]) -> usize {
    logits
        .iter()
        .zip(noise)
        .enumerate()
        .max_by(|(_, (la, ga)), (_, (lb, gb))| (*la + *ga).total_cmp(&(*lb + *gb)))
        .map(|(i, _)| i)
        .expect("non-empty logits")
}

pub struct StSample {
    pub index: usize,
    /// One-hot forward value; gradient flows as through `y_soft`.
    pub y_st: Var,
    pub y_soft: Var,
}

/// Straight-through Gumbel-Softmax: `y_hard + y_soft - detach(y_soft)`.
pub fn st_gumbel_select(tape: &mut Tape, logits: Var, tau: f64, noise: &Buf) -> Result<StSample> {
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be > 0, got {tau}")));
    }
    let k = tape.value(logits).len();
    if noise.len() != k {
        return Err(Error::shape("st_gumbel_select", format!("{k} logits vs {} noise", noise.len())));
    }
    let g = tape.constant(noise.clone());
    let shifted = tape.add(logits, g)?;
    let scaled = tape.mul_scalar(shifted, 1.0 / tau);
    let y_soft = tape.softmax(scaled);
    let index = select_index(tape.value(logits).data(), noise.data());
    let mut hard = Buf::zeros(&[k]);
    hard.data_mut()[index] = 1.0;
    let y_hard = tape.constant(hard);
    let detached = tape.detach(y_soft);
    let diff = tape.sub(y_soft, detached)?;
    let y_st = tape.add(y_hard, diff)?;
    Ok(StSample { index, y_st, y_soft })
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub group_size: usize,
    pub curve: CurveKind,
}

impl AttentionConfig {
    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Tape handles for the shared projection matrices, each `[c, c]`.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Scaled dot-product multi-head attention within each group independently.
/// Output rows keep the input order; an optional `[n, c]` bias is added to the
/// token embeddings before the projections.
pub fn grouped_attention(
    tape: &mut Tape,
    tokens: Var,
    partition: &GroupPartition,
    cfg: &AttentionConfig,
    weights: &AttnVars,
    bias: Option<Var>,
) -> Result<Var> {
    let shape = tape.value(tokens).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.channels() {
        return Err(Error::shape(
            "grouped_attention",
            format!("tokens {shape:?} vs {} channels", cfg.channels()),
        ));
    }
    let n = shape[0];
    let covered: usize = partition.boundaries.iter().map(|&(s, e)| e - s).sum();
    if covered != n || partition.boundaries.last().map(|&(_, e)| e) != Some(n) {
        return Err(Error::shape("grouped_attention", format!("partition covers {covered} of {n} rows")));
    }
    let x = match bias {
        Some(b) => tape.add(tokens, b)?,
        None => tokens,
    };
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut group_outputs = Vec::with_capacity(partition.num_groups());
    for &(start, end) in &partition.boundaries {
        let xg = tape.slice_rows(x, start, end)?;
        let q = tape.matmul(xg, weights.wq)?;
        let k = tape.matmul(xg, weights.wk)?;
        let v = tape.matmul(xg, weights.wv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (c0, c1) = (h * cfg.head_dim, (h + 1) * cfg.head_dim);
            let qh = tape.slice_cols(q, c0, c1)?;
            let kh = tape.slice_cols(k, c0, c1)?;
            let vh = tape.slice_cols(v, c0, c1)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.mul_scalar(scores, scale);
            let attn = tape.softmax(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        group_outputs.push(tape.matmul(merged, weights.wo)?);
    }
    if group_outputs.len() == 1 {
        Ok(group_outputs[0])
    } else {
        tape.concat_rows(&group_outputs)
    }
}

/// How the discrete shift couples into the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsaMode {
    /// Reference: attention is evaluated for every candidate shift and the
    /// results combined with the straight-through weights, so the forward
    /// equals the argmax candidate exactly while every candidate contributes
    /// gradient to the logits.
    FullK,
    /// Only the argmax candidate is evaluated; the logits train against a
    /// detached per-candidate grouping-compactness proxy. Forward matches
    /// FullK exactly.
    ArgmaxOnly,
    /// Soft mixture of all candidates without the hard forward (the
    /// direct-shift-learning ablation; no Gumbel noise at evaluation).
    SoftMixture,
}

pub struct AsaOutcome {
    pub out: Var,
    pub chosen_shift: usize,
    pub chosen_index: usize,
    /// Auxiliary selector loss in [`AsaMode::ArgmaxOnly`].
    pub aux: Option<Var>,
}

pub struct AsaContext<'a> {
    /// Token-row indices sorted by curve key (the shift-0 serialization).
    pub sorted_rows: &'a [usize],
    pub logits: Var,
    pub candidate_shifts: &'a [usize],
    pub tau: f64,
    /// Gumbel noise of length K; all-zero at evaluation time.
    pub noise: &'a Buf,
    pub mode: AsaMode,
}

/// Serialization -> grouping -> grouped attention for every relevant candidate
/// shift, combined per the selected mode. Output rows are in token order.
pub fn asa_apply(
    tape: &mut Tape,
    tokens: Var,
    ctx: &AsaContext<'_>,
    cfg: &AttentionConfig,
    weights: &AttnVars,
    bias: Option<Var>,
) -> Result<AsaOutcome> {
    let n = tape.value(tokens).shape()[0];
    if ctx.sorted_rows.len() != n {
        return Err(Error::shape(
            "asa_apply",
            format!("{} serialized rows vs {n} tokens", ctx.sorted_rows.len()),
        ));
    }
    let x = match bias {
        Some(b) => tape.add(tokens, b)?,
        None => tokens,
    };
    let partition = grid::partition_len(n, cfg.group_size)?;

    let attend = |tape: &mut Tape, shift: usize| -> Result<Var> {
        let mut order = ctx.sorted_rows.to_vec();
        order.rotate_left(shift % n);
        let mut inverse = vec![0usize; n];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        let serialized = tape.gather_rows(x, &order)?;
        let att = grouped_attention(tape, serialized, &partition, cfg, weights, None)?;
        tape.gather_rows(att, &inverse)
    };

    match ctx.mode {
        AsaMode::FullK => {
            let st = st_gumbel_select(tape, ctx.logits, ctx.tau, ctx.noise)?;
            let outs: Vec<Var> = ctx
                .candidate_shifts
                .iter()
                .map(|&s| attend(tape, s))
                .collect::<Result<_>>()?;
            let out = tape.linear_combination(st.y_st, &outs)?;
            Ok(AsaOutcome {
                out,
                chosen_shift: ctx.candidate_shifts[st.index],
                chosen_index: st.index,
                aux: None,
            })
        }
        AsaMode::ArgmaxOnly => {
            let st = st_gumbel_select(tape, ctx.logits, ctx.tau, ctx.noise)?;
            let out = attend(tape, ctx.candidate_shifts[st.index])?;
            let proxies: Vec<f64> = ctx
                .candidate_shifts
                .iter()
                .map(|&s| grouping_compactness(tape.value(x), ctx.sorted_rows, s, &partition))
                .collect();
            let proxy_vars: Vec<Var> =
                proxies.into_iter().map(|p| tape.constant(Buf::scalar(p))).collect();
            let aux = tape.linear_combination(st.y_soft, &proxy_vars)?;
            Ok(AsaOutcome {
                out,
                chosen_shift: ctx.candidate_shifts[st.index],
                chosen_index: st.index,
                aux: Some(aux),
            })
        }
        AsaMode::SoftMixture => {
            let scaled = tape.mul_scalar(ctx.logits, 1.0 / ctx.tau);
            let y_soft = tape.softmax(scaled);
            let outs: Vec<Var> = ctx
                .candidate_shifts
                .iter()
                .map(|&s| attend(tape, s))
                .collect::<Result<_>>()?;
            let out = tape.linear_combination(y_soft, &outs)?;
            let soft = tape.value(y_soft).data();
            let index = soft
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            Ok(AsaOutcome {
                out,
                chosen_shift: ctx.candidate_shifts[index],
                chosen_index: index,
                aux: None,
            })
        }
    }
}

/// Serialized grouped attention at one fixed shift, no selector involved.
/// Output rows are in token order.
pub fn fixed_shift_attention(
    tape: &mut Tape,
    tokens: Var,
    sorted_rows: &[usize],
    shift: usize,
    cfg: &AttentionConfig,
    weights: &AttnVars,
    bias: Option<Var>,
) -> Result<Var> {
    let n = tape.value(tokens).shape()[0];
    if sorted_rows.len() != n {
        return Err(Error::shape(
            "fixed_shift_attention",
            format!("{} serialized rows vs {n} tokens", sorted_rows.len()),
        ));
    }
    let x = match bias {
        Some(b) => tape.add(tokens, b)?,
        None => tokens,
    };
    let partition = grid::partition_len(n, cfg.group_size)?;
    let mut order = sorted_rows.to_vec();
    order.rotate_left(shift % n);
    let mut inverse = vec![0usize; n];
    for (pos, &row) in order.iter().enumerate() {
        inverse[row] = pos;
    }
    let serialized = tape.gather_rows(x, &order)?;
    let att = grouped_attention(tape, serialized, &partition, cfg, weights, None)?;
    tape.gather_rows(att, &inverse)
}

/// Mean within-group squared deviation from the group mean under the given
/// shift; a cheap stand-in score for how coherently a shift groups tokens.
fn grouping_compactness(x: &Buf, sorted_rows: &[usize], shift: usize, partition: &GroupPartition) -> f64 {
    let n = sorted_rows.len();
    let c = x.shape()[1];
    let mut order = sorted_rows.to_vec();
    order.rotate_left(shift % n);
    let mut total = 0.0;
    for &(start, end) in &partition.boundaries {
        let rows = &order[start..end];
        let mut mean = vec![0.0; c];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(&x.data()[r * c..(r + 1) * c]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows.len() as f64;
        }
        for &r in rows {
            for (m, v) in mean.iter().zip(&x.data()[r * c..(r + 1) * c]) {
                let d = v - m;
                total += d * d;
            }
        }
    }
    total / n as f64
}

/// Row index (into the occupied list) of each occupied voxel in curve order.
pub fn sorted_occupied_rows(grid: &VoxelGrid, curve: CurveKind) -> Result<Vec<usize>> {
    let seq = grid::serialize(grid, curve, 0)?;
    Ok(seq
        .order
        .iter()
        .map(|lin| grid.occupied().binary_search(lin).expect("occupied voxel"))
        .collect())
}

/// Standalone ASA pass over a grid whose feature dim equals the model width.
/// Returns the output tokens (in occupied order) and the chosen shift.
pub fn asa_forward(
    grid: &VoxelGrid,
    selector: &ShiftSelector,
    schedule: &AnnealSchedule,
    t: u32,
    cfg: &AttentionConfig,
    weights: &AttnWeights,
    noise: &Buf,
    mode: AsaMode,
) -> Result<(Buf, usize)> {
    if grid.feature_dim() != cfg.channels() {
        return Err(Error::shape(
            "asa_forward",
            format!("feature dim {} vs {} channels", grid.feature_dim(), cfg.channels()),
        ));
    }
    let mut tape = Tape::new();
    let n = grid.num_occupied();
    let mut data = Vec::with_capacity(n * cfg.channels());
    for row in 0..n {
        data.extend_from_slice(grid.feature(row));
    }
    let tokens = tape.constant(Buf::from_vec(&[n, cfg.channels()], data)?);
    let logits = tape.leaf(selector.logits.clone(), true);
    let vars = AttnVars {
        wq: tape.leaf(weights.wq.clone(), true),
        wk: tape.leaf(weights.wk.clone(), true),
        wv: tape.leaf(weights.wv.clone(), true),
        wo: tape.leaf(weights.wo.clone(), true),
    };
    let sorted = sorted_occupied_rows(grid, cfg.curve)?;
    let shifts = selector.candidate_shifts();
    let ctx = AsaContext {
        sorted_rows: &sorted,
        logits,
        candidate_shifts: &shifts,
        tau: anneal(schedule, t),
        noise,
        mode,
    };
    let outcome = asa_apply(&mut tape, tokens, &ctx, cfg, &vars, None)?;
    Ok((tape.value(outcome.out).clone(), outcome.chosen_shift))
}

/// Owned projection matrices, each `[c, c]`.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub wq: Buf,
    pub wk: Buf,
    pub wv: Buf,
    pub wo: Buf,
}
