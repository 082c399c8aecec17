//! Named finite-difference gradient suites, shared by the CLI `gradcheck`
//! subcommand and the acceptance gate.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::asa::{self, AttentionConfig, AttnVars};
use crate::block::{self, Ablation, Model, ModelConfig};
use crate::crpe::CrpeMlpVars;
use crate::error::{Error, Result};
use crate::grid;
use crate::losses::{self, ScalMode};
use crate::num::gradcheck::{gradcheck_fn, leaves_from_point, GradcheckReport, DEFAULT_STEP, DEFAULT_TOL};
use crate::sfc::CurveKind;
use crate::synth::{self, SceneSpec};

pub const MODULES: &[&str] = &["numcore", "crpe", "asa", "block", "losses"];

/// Run the named module's gradcheck suite ("all" runs every module).
pub fn suite(module: &str) -> Result<Vec<(String, GradcheckReport)>> {
    match module {
        "numcore" => numcore_suite(),
        "crpe" => crpe_suite(),
        "asa" => asa_suite(),
        "block" => block_suite(),
        "losses" => losses_suite(),
        "all" => {
            let mut out = Vec::new();
            for m in MODULES {
                out.extend(suite(m)?);
            }
            Ok(out)
        }
        other => Err(Error::Invalid(format!(
            "unknown module {other:?}; expected one of {MODULES:?} or \"all\""
        ))),
    }
}

fn rand_point(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

fn numcore_suite() -> Result<Vec<(String, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut out = Vec::new();

    let point = rand_point(&mut rng, 12);
    out.push((
        "numcore/softmax".into(),
        gradcheck_fn(
            |tape, p| {
                let leaves = leaves_from_point(tape, p, &[&[3, 4]])?;
                let y = tape.softmax(leaves[0]);
                let sq = tape.mul(y, y)?;
                Ok((tape.sum(sq), leaves))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )?,
    ));

    let point = rand_point(&mut rng, 12);
    out.push((
        "numcore/layer_norm".into(),
        gradcheck_fn(
            |tape, p| {
                let leaves = leaves_from_point(tape, p, &[&[3, 4]])?;
                let y = tape.layer_norm(leaves[0], 1e-5)?;
                let e = tape.exp(y);
                Ok((tape.sum(e), leaves))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )?,
    ));

    // conv3d: 2 in / 2 out channels over a 3x3x3 volume, input + weight + bias.
    let point = rand_point(&mut rng, 2 * 27 + 2 * 2 * 27 + 2);
    out.push((
        "numcore/conv3d".into(),
        gradcheck_fn(
            |tape, p| {
                let leaves =
                    leaves_from_point(tape, p, &[&[2, 3, 3, 3], &[2, 2, 3, 3, 3], &[2]])?;
                let y = tape.conv3d(leaves[0], leaves[1], leaves[2])?;
                let sq = tape.mul(y, y)?;
                Ok((tape.sum(sq), leaves))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )?,
    ));

    Ok(out)
}

fn crpe_suite() -> Result<Vec<(String, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    // Bearing-delta rows are constants; the check covers the projection MLP.
    let deltas: Vec<crate::crpe::AngularDelta> = (0..5)
        .map(|_| crate::crpe::AngularDelta {
            yaw: rng.gen::<f64>() * 2.0 - 1.0,
            pitch: rng.gen::<f64>() * 2.0 - 1.0,
        })
        .collect();
    let point = rand_point(&mut rng, 2 * 4 + 4 + 4 * 3 + 3);
    let report = gradcheck_fn(
        |tape, p| {
            let leaves = leaves_from_point(tape, p, &[&[2, 4], &[4], &[4, 3], &[3]])?;
            let mlp = CrpeMlpVars { w1: leaves[0], b1: leaves[1], w2: leaves[2], b2: leaves[3] };
            let bias = crate::crpe::crpe_bias(tape, &deltas, &mlp)?;
            let sq = tape.mul(bias, bias)?;
            Ok((tape.sum(sq), leaves))
        },
        &point,
        DEFAULT_STEP,
        DEFAULT_TOL,
    )?;
    Ok(vec![("crpe/mlp".into(), report)])
}

fn asa_suite() -> Result<Vec<(String, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    // 7 tokens of width 4, two heads, ragged final group.
    let cfg = AttentionConfig { heads: 2, head_dim: 2, group_size: 3, curve: CurveKind::ZOrder };
    let n = 7;
    let c = 4;
    let point = rand_point(&mut rng, n * c + 4 * c * c);
    let report = gradcheck_fn(
        |tape, p| {
            let leaves =
                leaves_from_point(tape, p, &[&[n, c], &[c, c], &[c, c], &[c, c], &[c, c]])?;
            let weights =
                AttnVars { wq: leaves[1], wk: leaves[2], wv: leaves[3], wo: leaves[4] };
            let partition = grid::partition_len(n, cfg.group_size)?;
            let out = asa::grouped_attention(tape, leaves[0], &partition, &cfg, &weights, None)?;
            let sq = tape.mul(out, out)?;
            Ok((tape.sum(sq), leaves))
        },
        &point,
        DEFAULT_STEP,
        DEFAULT_TOL,
    )?;
    Ok(vec![("asa/grouped_attention".into(), report)])
}

fn toy_block_model() -> Result<(Model, crate::grid::VoxelGrid)> {
    let cfg = ModelConfig {
        channels: 4,
        heads: 2,
        group_size: 4,
        k_shifts: 2,
        n_blocks: 1,
        num_classes: 2,
        feature_dim_in: 2,
        ffn_expansion: 2,
        cmln_hidden: 4,
        crpe_hidden: 4,
        curve: CurveKind::ZOrder,
        tau_init: 1.0,
        tau_min: 0.5,
        alpha: 0.0,
        ablation: Ablation::default(),
    };
    let model = Model::init(cfg, 77)?;
    let spec = SceneSpec::parse("dims=4x4x4\nclasses=2\nseed=5\nbox=1,0,0,0,3,3,1\nslab=2,2,3,3\n")?;
    let grid = synth::generate(&spec)?;
    Ok((model, grid))
}

fn block_suite() -> Result<Vec<(String, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut out = Vec::new();

    // CMLN jointly through h and both modulation MLPs (context derived from h).
    let point = rand_point(&mut rng, 4 * 3 + 2 * (3 * 4 + 4 + 4 * 3 + 3));
    out.push((
        "block/cmln".into(),
        gradcheck_fn(
            |tape, p| {
                let shapes: &[&[usize]] =
                    &[&[4, 3], &[3, 4], &[4], &[4, 3], &[3], &[3, 4], &[4], &[4, 3], &[3]];
                let leaves = leaves_from_point(tape, p, shapes)?;
                let params = block::CmlnVars {
                    gamma: CrpeMlpVars { w1: leaves[1], b1: leaves[2], w2: leaves[3], b2: leaves[4] },
                    beta: CrpeMlpVars { w1: leaves[5], b1: leaves[6], w2: leaves[7], b2: leaves[8] },
                };
                let sums = tape.col_sums(leaves[0])?;
                let ctx = tape.mul_scalar(sums, 0.25);
                let y = block::cmln(tape, leaves[0], ctx, &params)?;
                let sq = tape.mul(y, y)?;
                Ok((tape.sum(sq), leaves))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )?,
    ));

    // Full block with frozen Gumbel noise, loss = total objective. The shift
    // selector logits are excluded: the straight-through forward is locally
    // constant in them, so finite differences see zero while the analytic
    // path (by design) does not.
    let (model, scene) = toy_block_model()?;
    let noise = vec![asa::sample_gumbel(model.cfg.k_shifts, &mut rng)];
    let names: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| !n.contains("selector"))
        .collect();
    let point: Vec<f64> = names
        .iter()
        .flat_map(|n| model.params.get(n).unwrap().data().iter().copied())
        .collect();
    let labels = scene.labels().to_vec();
    out.push((
        "block/full_frozen_noise".into(),
        gradcheck_fn(
            |tape, p| {
                let mut m = model.clone();
                let mut off = 0;
                for n in &names {
                    let buf = m.params.get_mut(n).unwrap();
                    let len = buf.len();
                    buf.data_mut().copy_from_slice(&p[off..off + len]);
                    off += len;
                }
                let parts = block::forward_on(tape, &m, &scene, &noise, 0, true)?;
                let (loss, _) = losses::total_loss(tape, parts.logits, &labels)?;
                let leaves = names.iter().map(|n| parts.param_vars[n.as_str()]).collect();
                Ok((loss, leaves))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )?,
    ));

    Ok(out)
}

fn losses_suite() -> Result<Vec<(String, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let labels = [1u8, 0, 2, 2, 1, 0];
    let mut out = Vec::new();

    let point = rand_point(&mut rng, 18);
    out.push((
        "losses/cross_entropy".into(),
        gradcheck_fn(
            |tape, p| {
                let leaves = leaves_from_point(tape, p, &[&[6, 3]])?;
                let loss = losses::cross_entropy(tape, leaves[0], &labels)?;
                Ok((loss, leaves))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )?,
    ));

    for (name, mode) in [("losses/scal_semantic", ScalMode::Semantic), ("losses/scal_geometric", ScalMode::Geometric)] {
        let point = rand_point(&mut rng, 18);
        out.push((
            name.into(),
            gradcheck_fn(
                |tape, p| {
                    let leaves = leaves_from_point(tape, p, &[&[6, 3]])?;
                    let probs = tape.softmax(leaves[0]);
                    let loss = match mode {
                        ScalMode::Semantic => losses::scal_loss(tape, probs, &labels, mode)?,
                        ScalMode::Geometric => {
                            let geo = losses::collapse_to_geometric(tape, probs)?;
                            losses::scal_loss(tape, geo, &labels, mode)?
                        }
                    };
                    Ok((loss, leaves))
                },
                &point,
                DEFAULT_STEP,
                DEFAULT_TOL,
            )?,
        ));
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        let reports = suite("all").unwrap();
        assert!(reports.len() >= 9);
        for (name, report) in &reports {
            assert!(report.passed(), "{name}: {report}");
        }
    }

    #[test]
    fn unknown_module_rejected() {
        assert!(suite("sfc").is_err());
    }
}
