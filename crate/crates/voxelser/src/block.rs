//! The full hybrid block: adaptive serialized attention + FFN with residuals,
//! convolution-modulated layer normalization, and a 3x3x3 conv refinement
//! stand-in; plus the encoder/decoder assembly and weight checkpointing.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::asa::{self, AsaContext, AsaMode, AttentionConfig, AttnVars, ShiftSelector};
use crate::crpe::{self, CenterMode, CrpeMlpVars as MlpVars};
use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::num::{Buf, Tape, Var, LAYER_NORM_EPS};
use crate::sfc::CurveKind;

/// Which pieces of the full block are active; the defaults enable everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// Learnable shift selection; off = fixed shift 0.
    pub adaptive_shift: bool,
    /// Center-relative positional bias.
    pub crpe: bool,
    /// Context-modulated layer norm; off = plain layer norm.
    pub cmln: bool,
    /// Reference point for the angular deltas.
    pub center: CenterMode,
    /// Relative (delta) angles; off = absolute bearings.
    pub relative_angles: bool,
    pub asa_mode: AsaMode,
}

impl Default for Ablation {
    fn default() -> Ablation {
        Ablation {
            adaptive_shift: true,
            crpe: true,
            cmln: true,
            center: CenterMode::OccupiedCentroid,
            relative_angles: true,
            asa_mode: AsaMode::FullK,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub group_size: usize,
    pub k_shifts: usize,
    pub n_blocks: usize,
    /// Semantic classes; labels run 0 (empty) to `num_classes`.
    pub num_classes: u16,
    /// Input feature width of the grids this model consumes.
    pub feature_dim_in: usize,
    pub ffn_expansion: usize,
    pub cmln_hidden: usize,
    pub crpe_hidden: usize,
    pub curve: CurveKind,
    pub tau_init: f64,
    pub tau_min: f64,
    pub alpha: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Invalid("need at least one block".into()));
        }
        if self.group_size == 0 || self.ffn_expansion == 0 || self.cmln_hidden == 0
            || self.crpe_hidden == 0 || self.feature_dim_in == 0
        {
            return Err(Error::Invalid("all widths must be positive".into()));
        }
        ShiftSelector::new(self.k_shifts, self.group_size)?;
        asa::AnnealSchedule::new(self.tau_init, self.tau_min, self.alpha)?;
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            head_dim: self.channels / self.heads,
            group_size: self.group_size,
            curve: self.curve,
        }
    }

    pub fn schedule(&self) -> asa::AnnealSchedule {
        asa::AnnealSchedule { tau_init: self.tau_init, tau_min: self.tau_min, alpha: self.alpha }
    }
}

// ---- parameter store & checkpoint ----

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Buf)>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, buf: Buf) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.entries.push((name.to_string(), buf));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Buf> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Buf> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Buf)> {
        self.entries.iter().map(|(n, b)| (n.as_str(), b))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Buf)> {
        self.entries.iter_mut().map(|(n, b)| (n.as_str(), &mut *b))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, b)| b.len()).sum()
    }

    pub fn write_vswt(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"VSWT")?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, buf) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(buf.shape().len() as u8).to_le_bytes())?;
            for &d in buf.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in buf.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_vswt(r: &mut impl Read) -> Result<ParamStore> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"VSWT" {
            return Err(Error::BadFormat("bad checkpoint magic".into()));
        }
        let version = read_u16(r)?;
        if version != 1 {
            return Err(Error::BadFormat(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::BadFormat("non-utf8 parameter name".into()))?;
            let ndim = {
                let mut b = [0u8; 1];
                r.read_exact(&mut b)?;
                b[0] as usize
            };
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(&name, Buf::from_vec(&shape, data)?)?;
        }
        Ok(store)
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

const META_NAME: &str = "__meta";

fn config_to_meta(cfg: &ModelConfig) -> Buf {
    let a = &cfg.ablation;
    let vals = vec![
        cfg.channels as f64,
        cfg.heads as f64,
        cfg.group_size as f64,
        cfg.k_shifts as f64,
        cfg.n_blocks as f64,
        f64::from(cfg.num_classes),
        cfg.feature_dim_in as f64,
        cfg.ffn_expansion as f64,
        cfg.cmln_hidden as f64,
        cfg.crpe_hidden as f64,
        match cfg.curve {
            CurveKind::ZOrder => 0.0,
            CurveKind::Hilbert => 1.0,
        },
        cfg.tau_init,
        cfg.tau_min,
        cfg.alpha,
        f64::from(u8::from(a.adaptive_shift)),
        f64::from(u8::from(a.crpe)),
        f64::from(u8::from(a.cmln)),
        match a.center {
            CenterMode::OccupiedCentroid => 0.0,
            CenterMode::GeometricCenter => 1.0,
        },
        f64::from(u8::from(a.relative_angles)),
        match a.asa_mode {
            AsaMode::FullK => 0.0,
            AsaMode::ArgmaxOnly => 1.0,
            AsaMode::SoftMixture => 2.0,
        },
    ];
    let n = vals.len();
    Buf::from_vec(&[n], vals).expect("meta shape")
}

fn config_from_meta(buf: &Buf) -> Result<ModelConfig> {
    let v = buf.data();
    if v.len() != 20 {
        return Err(Error::BadFormat(format!("meta record has {} fields", v.len())));
    }
    let cfg = ModelConfig {
        channels: v[0] as usize,
        heads: v[1] as usize,
        group_size: v[2] as usize,
        k_shifts: v[3] as usize,
        n_blocks: v[4] as usize,
        num_classes: v[5] as u16,
        feature_dim_in: v[6] as usize,
        ffn_expansion: v[7] as usize,
        cmln_hidden: v[8] as usize,
        crpe_hidden: v[9] as usize,
        curve: if v[10] == 0.0 { CurveKind::ZOrder } else { CurveKind::Hilbert },
        tau_init: v[11],
        tau_min: v[12],
        alpha: v[13],
        ablation: Ablation {
            adaptive_shift: v[14] != 0.0,
            crpe: v[15] != 0.0,
            cmln: v[16] != 0.0,
            center: if v[17] == 0.0 {
                CenterMode::OccupiedCentroid
            } else {
                CenterMode::GeometricCenter
            },
            relative_angles: v[18] != 0.0,
            asa_mode: match v[19] as u8 {
                0 => AsaMode::FullK,
                1 => AsaMode::ArgmaxOnly,
                _ => AsaMode::SoftMixture,
            },
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---- model ----

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn rand_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Buf {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    Buf::from_vec(shape, (0..len).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect())
        .expect("shape matches data")
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let e = cfg.ffn_expansion * c;
        let mut p = ParamStore::new();
        p.insert("embed.w", rand_init(&mut rng, &[cfg.feature_dim_in, c], cfg.feature_dim_in))?;
        p.insert("embed.b", Buf::zeros(&[c]))?;
        for i in 0..cfg.n_blocks {
            let pre = format!("block{i}");
            for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                p.insert(&format!("{pre}.{name}"), rand_init(&mut rng, &[c, c], c))?;
            }
            p.insert(&format!("{pre}.selector.logits"), Buf::zeros(&[cfg.k_shifts]))?;
            p.insert(&format!("{pre}.crpe.w1"), rand_init(&mut rng, &[2, cfg.crpe_hidden], 2))?;
            p.insert(&format!("{pre}.crpe.b1"), Buf::zeros(&[cfg.crpe_hidden]))?;
            p.insert(&format!("{pre}.crpe.w2"), rand_init(&mut rng, &[cfg.crpe_hidden, c], cfg.crpe_hidden))?;
            p.insert(&format!("{pre}.crpe.b2"), Buf::zeros(&[c]))?;
            p.insert(&format!("{pre}.ffn.w1"), rand_init(&mut rng, &[c, e], c))?;
            p.insert(&format!("{pre}.ffn.b1"), Buf::zeros(&[e]))?;
            p.insert(&format!("{pre}.ffn.w2"), rand_init(&mut rng, &[e, c], e))?;
            p.insert(&format!("{pre}.ffn.b2"), Buf::zeros(&[c]))?;
            for half in ["gamma", "beta"] {
                p.insert(&format!("{pre}.cmln.{half}.w1"), rand_init(&mut rng, &[c, cfg.cmln_hidden], c))?;
                p.insert(&format!("{pre}.cmln.{half}.b1"), Buf::zeros(&[cfg.cmln_hidden]))?;
                p.insert(&format!("{pre}.cmln.{half}.w2"), rand_init(&mut rng, &[cfg.cmln_hidden, c], cfg.cmln_hidden))?;
                // Gamma starts at 1 so the modulated norm begins as plain LN.
                let b2 = if half == "gamma" { Buf::filled(&[c], 1.0) } else { Buf::zeros(&[c]) };
                p.insert(&format!("{pre}.cmln.{half}.b2"), b2)?;
            }
            p.insert(&format!("{pre}.conv.w"), rand_init(&mut rng, &[c, c, 3, 3, 3], c * 27))?;
            p.insert(&format!("{pre}.conv.b"), Buf::zeros(&[c]))?;
        }
        p.insert("dec.conv1.w", rand_init(&mut rng, &[c, c, 3, 3, 3], c * 27))?;
        p.insert("dec.conv1.b", Buf::zeros(&[c]))?;
        p.insert("dec.conv2.w", rand_init(&mut rng, &[c, c, 3, 3, 3], c * 27))?;
        p.insert("dec.conv2.b", Buf::zeros(&[c]))?;
        let out = usize::from(cfg.num_classes) + 1;
        p.insert("dec.head.w", rand_init(&mut rng, &[c, out], c))?;
        p.insert("dec.head.b", Buf::zeros(&[out]))?;
        Ok(Model { cfg, params: p })
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        let mut store = ParamStore::new();
        store.insert(META_NAME, config_to_meta(&self.cfg))?;
        for (name, buf) in self.params.iter() {
            store.insert(name, buf.clone())?;
        }
        store.write_vswt(w)
    }

    pub fn load(r: &mut impl Read) -> Result<Model> {
        let store = ParamStore::read_vswt(r)?;
        let meta = store
            .get(META_NAME)
            .ok_or_else(|| Error::BadFormat("checkpoint missing model config record".into()))?;
        let cfg = config_from_meta(meta)?;
        let mut params = ParamStore::new();
        for (name, buf) in store.iter() {
            if name != META_NAME {
                params.insert(name, buf.clone())?;
            }
        }
        Ok(Model { cfg, params })
    }
}

// ---- forward pass ----

/// All tape state of one forward pass; gradients are read back per parameter
/// name after `tape.backward`.
pub struct ForwardPass {
    pub tape: Tape,
    /// Per-voxel class logits, `[volume, num_classes + 1]`.
    pub logits: Var,
    /// Occupied-token features after the last block, `[n, channels]`.
    pub tokens: Var,
    pub param_vars: HashMap<String, Var>,
    /// Chosen serialization shift per block.
    pub shifts: Vec<usize>,
}

/// Convolution-modulated layer norm: row layer-norm of `h`, scaled and shifted
/// per channel by MLPs of the pooled context vector.
pub struct CmlnVars {
    pub gamma: MlpVars,
    pub beta: MlpVars,
}

pub fn cmln(tape: &mut Tape, h: Var, ctx: Var, params: &CmlnVars) -> Result<Var> {
    let c = tape.value(h).shape().get(1).copied().unwrap_or(0);
    if tape.value(ctx).len() != c {
        return Err(Error::shape(
            "cmln",
            format!("context len {} vs {c} channels", tape.value(ctx).len()),
        ));
    }
    let ctx_row = tape.reshape(ctx, &[1, c])?;
    let gamma = tape.mlp_forward(ctx_row, params.gamma.w1, params.gamma.b1, params.gamma.w2, params.gamma.b2)?;
    let beta = tape.mlp_forward(ctx_row, params.beta.w1, params.beta.b1, params.beta.w2, params.beta.b2)?;
    let gamma = tape.reshape(gamma, &[c])?;
    let beta = tape.reshape(beta, &[c])?;
    let norm = tape.layer_norm(h, LAYER_NORM_EPS)?;
    let scaled = tape.mul_row(norm, gamma)?;
    tape.add_row(scaled, beta)
}

struct BlockVars {
    attn: AttnVars,
    selector_logits: Var,
    crpe: MlpVars,
    ffn: MlpVars,
    cmln: CmlnVars,
    conv_w: Var,
    conv_b: Var,
}

fn mlp_vars(vars: &HashMap<String, Var>, prefix: &str) -> MlpVars {
    MlpVars {
        w1: vars[&format!("{prefix}.w1")],
        b1: vars[&format!("{prefix}.b1")],
        w2: vars[&format!("{prefix}.w2")],
        b2: vars[&format!("{prefix}.b2")],
    }
}

fn block_vars(vars: &HashMap<String, Var>, i: usize) -> BlockVars {
    let pre = format!("block{i}");
    BlockVars {
        attn: AttnVars {
            wq: vars[&format!("{pre}.attn.wq")],
            wk: vars[&format!("{pre}.attn.wk")],
            wv: vars[&format!("{pre}.attn.wv")],
            wo: vars[&format!("{pre}.attn.wo")],
        },
        selector_logits: vars[&format!("{pre}.selector.logits")],
        crpe: mlp_vars(vars, &format!("{pre}.crpe")),
        ffn: mlp_vars(vars, &format!("{pre}.ffn")),
        cmln: CmlnVars {
            gamma: mlp_vars(vars, &format!("{pre}.cmln.gamma")),
            beta: mlp_vars(vars, &format!("{pre}.cmln.beta")),
        },
        conv_w: vars[&format!("{pre}.conv.w")],
        conv_b: vars[&format!("{pre}.conv.b")],
    }
}

/// Tape handles produced by one forward pass on an external tape.
pub struct ForwardParts {
    pub logits: Var,
    pub tokens: Var,
    pub param_vars: HashMap<String, Var>,
    pub shifts: Vec<usize>,
}

/// Run the full model on one grid. `noise` supplies the Gumbel draw per block
/// (length `n_blocks`, each of length K); pass zeros for evaluation. `t` is
/// the annealing epoch. `trainable` controls whether parameter leaves require
/// gradients.
pub fn forward(model: &Model, grid: &VoxelGrid, noise: &[Buf], t: u32, trainable: bool) -> Result<ForwardPass> {
    let mut tape = Tape::new();
    let parts = forward_on(&mut tape, model, grid, noise, t, trainable)?;
    Ok(ForwardPass {
        tape,
        logits: parts.logits,
        tokens: parts.tokens,
        param_vars: parts.param_vars,
        shifts: parts.shifts,
    })
}

/// As [`forward`], but building onto a caller-owned tape.
pub fn forward_on(
    tape: &mut Tape,
    model: &Model,
    grid: &VoxelGrid,
    noise: &[Buf],
    t: u32,
    trainable: bool,
) -> Result<ForwardParts> {
    let cfg = &model.cfg;
    cfg.validate()?;
    if grid.num_occupied() == 0 {
        return Err(Error::EmptyScene);
    }
    if grid.feature_dim() != cfg.feature_dim_in {
        return Err(Error::shape(
            "forward",
            format!("grid feature dim {} vs model input {}", grid.feature_dim(), cfg.feature_dim_in),
        ));
    }
    if noise.len() != cfg.n_blocks {
        return Err(Error::shape(
            "forward",
            format!("{} noise draws for {} blocks", noise.len(), cfg.n_blocks),
        ));
    }
    let mut param_vars = HashMap::new();
    for (name, buf) in model.params.iter() {
        param_vars.insert(name.to_string(), tape.leaf(buf.clone(), trainable));
    }

    let n = grid.num_occupied();
    let c = cfg.channels;
    let (dx, dy, dz) = grid.dims();
    let volume = grid.num_voxels();
    let attn_cfg = cfg.attention();
    let schedule = cfg.schedule();
    let sorted_rows = asa::sorted_occupied_rows(grid, cfg.curve)?;
    let candidate_shifts = ShiftSelector::new(cfg.k_shifts, cfg.group_size)?.candidate_shifts();

    // Positional deltas are fixed per grid; compute once, reuse per block.
    let center = crpe::center_for_mode(grid, cfg.ablation.center)?;
    let deltas = if cfg.ablation.relative_angles {
        crpe::angular_deltas(grid, &center)
    } else {
        crpe::absolute_bearings(grid, &center)
    };

    // Embed occupied features to model width.
    let mut feat = Vec::with_capacity(n * grid.feature_dim());
    for row in 0..n {
        feat.extend_from_slice(grid.feature(row));
    }
    let input = tape.constant(Buf::from_vec(&[n, grid.feature_dim()], feat)?);
    let projected = tape.matmul(input, param_vars["embed.w"])?;
    let mut h = tape.add_row(projected, param_vars["embed.b"])?;

    let mut shifts = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let bv = block_vars(&param_vars, i);

        // Attention with residual (pre-norm).
        let attn_in = tape.layer_norm(h, LAYER_NORM_EPS)?;
        let bias = if cfg.ablation.crpe {
            Some(crpe::crpe_bias(tape, &deltas, &bv.crpe)?)
        } else {
            None
        };
        let (attn_out, shift) = if cfg.ablation.adaptive_shift {
            let ctx = AsaContext {
                sorted_rows: &sorted_rows,
                logits: bv.selector_logits,
                candidate_shifts: &candidate_shifts,
                tau: asa::anneal(&schedule, t),
                noise: &noise[i],
                mode: cfg.ablation.asa_mode,
            };
            let outcome = asa::asa_apply(tape, attn_in, &ctx, &attn_cfg, &bv.attn, bias)?;
            (outcome.out, outcome.chosen_shift)
        } else {
            let out = asa::fixed_shift_attention(
                tape, attn_in, &sorted_rows, 0, &attn_cfg, &bv.attn, bias,
            )?;
            (out, 0)
        };
        h = tape.add(h, attn_out)?;

        // FFN with residual (pre-norm).
        let ffn_in = tape.layer_norm(h, LAYER_NORM_EPS)?;
        let ffn_out =
            tape.mlp_forward(ffn_in, bv.ffn.w1, bv.ffn.b1, bv.ffn.w2, bv.ffn.b2)?;
        h = tape.add(h, ffn_out)?;

        // Normalization: context-modulated or plain.
        h = if cfg.ablation.cmln {
            let sums = tape.col_sums(h)?;
            let ctx_vec = tape.mul_scalar(sums, 1.0 / n as f64);
            cmln(tape, h, ctx_vec, &bv.cmln)?
        } else {
            tape.layer_norm(h, LAYER_NORM_EPS)?
        };

        // Scatter to the dense volume and refine with a residual conv.
        let dense = tape.scatter_rows(h, grid.occupied(), volume)?;
        let dense_t = tape.transpose(dense)?;
        let vol = tape.reshape(dense_t, &[c, dz, dy, dx])?;
        let conv = tape.conv3d(vol, bv.conv_w, bv.conv_b)?;
        let refined = tape.relu(conv);
        let out_vol = tape.add(vol, refined)?;
        // Gather occupied tokens back for the next block.
        let flat = tape.reshape(out_vol, &[c, volume])?;
        let rows = tape.transpose(flat)?;
        h = tape.gather_rows(rows, grid.occupied())?;

        shifts.push(shift);
    }

    // Decode the dense volume of the last block to per-voxel logits.
    let dense = tape.scatter_rows(h, grid.occupied(), volume)?;
    let dense_t = tape.transpose(dense)?;
    let vol = tape.reshape(dense_t, &[c, dz, dy, dx])?;
    let c1 = tape.conv3d(vol, param_vars["dec.conv1.w"], param_vars["dec.conv1.b"])?;
    let c1 = tape.relu(c1);
    let c2 = tape.conv3d(c1, param_vars["dec.conv2.w"], param_vars["dec.conv2.b"])?;
    let c2 = tape.relu(c2);
    let flat = tape.reshape(c2, &[c, volume])?;
    let rows = tape.transpose(flat)?;
    let head = tape.matmul(rows, param_vars["dec.head.w"])?;
    let logits = tape.add_row(head, param_vars["dec.head.b"])?;

    Ok(ForwardParts { logits, tokens: h, param_vars, shifts })
}

/// Zero Gumbel noise for deterministic evaluation.
pub fn eval_noise(cfg: &ModelConfig) -> Vec<Buf> {
    vec![Buf::zeros(&[cfg.k_shifts]); cfg.n_blocks]
}

/// Fresh per-block Gumbel draws for a training step.
pub fn train_noise(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<Buf> {
    (0..cfg.n_blocks).map(|_| asa::sample_gumbel(cfg.k_shifts, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use crate::synth::{self, SceneSpec};

    pub(crate) fn toy_config(classes: u16) -> ModelConfig {
        ModelConfig {
            channels: 8,
            heads: 2,
            group_size: 8,
            k_shifts: 4,
            n_blocks: 2,
            num_classes: classes,
            feature_dim_in: classes as usize,
            ffn_expansion: 2,
            cmln_hidden: 8,
            crpe_hidden: 8,
            curve: CurveKind::ZOrder,
            tau_init: 1.0,
            tau_min: 0.5,
            alpha: 0.01,
            ablation: Ablation::default(),
        }
    }

    fn toy_scene() -> VoxelGrid {
        let spec = SceneSpec::parse(
            "dims=6x6x6\nclasses=2\nseed=7\nbox=1,0,0,0,2,2,2\nslab=2,2,4,5\n",
        )
        .unwrap();
        synth::generate(&spec).unwrap()
    }

    #[test]
    fn param_store_roundtrip() {
        let mut store = ParamStore::new();
        store.insert("a", Buf::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 0.5, 9.0]).unwrap()).unwrap();
        store.insert("b.w", Buf::scalar(-7.25)).unwrap();
        assert!(store.insert("a", Buf::scalar(0.0)).is_err());
        let mut bytes = Vec::new();
        store.write_vswt(&mut bytes).unwrap();
        let back = ParamStore::read_vswt(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.get("a").unwrap(), store.get("a").unwrap());
        assert_eq!(back.get("b.w").unwrap(), store.get("b.w").unwrap());
        assert!(ParamStore::read_vswt(&mut &bytes[1..]).is_err());
    }

    #[test]
    fn model_checkpoint_roundtrip_preserves_config() {
        let cfg = toy_config(3);
        let model = Model::init(cfg, 11).unwrap();
        let mut bytes = Vec::new();
        model.save(&mut bytes).unwrap();
        let back = Model::load(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.cfg.channels, cfg.channels);
        assert_eq!(back.cfg.num_classes, cfg.num_classes);
        assert_eq!(back.cfg.curve, cfg.curve);
        assert_eq!(back.cfg.ablation, cfg.ablation);
        assert_eq!(back.params.len(), model.params.len());
        for (name, buf) in model.params.iter() {
            assert_eq!(back.params.get(name).unwrap(), buf, "{name}");
        }
    }

    #[test]
    fn cmln_degenerate_cases() {
        // Zero hidden weights: gamma = its output bias, beta likewise. With
        // gamma bias 1 and beta bias 0 the op is plain layer norm; with gamma
        // bias 0 every output row equals beta regardless of h.
        let mut tape = Tape::new();
        let h = tape.leaf(
            Buf::from_vec(&[2, 3], vec![1.0, 2.0, 4.0, -1.0, 0.0, 3.0]).unwrap(),
            false,
        );
        let ctx = tape.constant(Buf::from_vec(&[3], vec![0.3, 0.6, 0.9]).unwrap());
        let zeros_mlp = |tape: &mut Tape, b2: Buf| MlpVars {
            w1: tape.leaf(Buf::zeros(&[3, 4]), false),
            b1: tape.leaf(Buf::zeros(&[4]), false),
            w2: tape.leaf(Buf::zeros(&[4, 3]), false),
            b2: tape.leaf(b2, false),
        };
        let gamma = zeros_mlp(&mut tape, Buf::filled(&[3], 1.0));
        let beta = zeros_mlp(&mut tape, Buf::zeros(&[3]));
        let out = cmln(&mut tape, h, ctx, &CmlnVars { gamma, beta }).unwrap();
        for r in 0..2 {
            let row = &tape.value(out).data()[r * 3..(r + 1) * 3];
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "eps-limit variance, got {var}");
        }

        let gamma = zeros_mlp(&mut tape, Buf::zeros(&[3]));
        let beta = zeros_mlp(&mut tape, Buf::from_vec(&[3], vec![0.1, -0.2, 0.7]).unwrap());
        let out = cmln(&mut tape, h, ctx, &CmlnVars { gamma, beta }).unwrap();
        for r in 0..2 {
            let row = &tape.value(out).data()[r * 3..(r + 1) * 3];
            assert_eq!(row, &[0.1, -0.2, 0.7]);
        }
    }

    #[test]
    fn cmln_is_context_sensitive() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut tape = Tape::new();
        let rand = |tape: &mut Tape, rng: &mut ChaCha8Rng, shape: &[usize]| {
            let len = shape.iter().product();
            let buf =
                Buf::from_vec(shape, (0..len).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
            tape.leaf(buf, false)
        };
        let h = rand(&mut tape, &mut rng, &[4, 3]);
        let params = CmlnVars {
            gamma: MlpVars {
                w1: rand(&mut tape, &mut rng, &[3, 5]),
                b1: rand(&mut tape, &mut rng, &[5]),
                w2: rand(&mut tape, &mut rng, &[5, 3]),
                b2: rand(&mut tape, &mut rng, &[3]),
            },
            beta: MlpVars {
                w1: rand(&mut tape, &mut rng, &[3, 5]),
                b1: rand(&mut tape, &mut rng, &[5]),
                w2: rand(&mut tape, &mut rng, &[5, 3]),
                b2: rand(&mut tape, &mut rng, &[3]),
            },
        };
        let ctx_a = tape.constant(Buf::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        let ctx_b = tape.constant(Buf::from_vec(&[3], vec![0.9, -0.4, 0.3]).unwrap());
        let out_a = cmln(&mut tape, h, ctx_a, &params).unwrap();
        let out_b = cmln(&mut tape, h, ctx_b, &params).unwrap();
        let d: f64 = tape
            .value(out_a)
            .data()
            .iter()
            .zip(tape.value(out_b).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(d > 1e-6, "context change must move the output");
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let grid = toy_scene();
        let cfg = toy_config(2);
        let model = Model::init(cfg, 3).unwrap();
        let noise = eval_noise(&cfg);
        let a = forward(&model, &grid, &noise, 0, false).unwrap();
        let b = forward(&model, &grid, &noise, 0, false).unwrap();
        let volume = grid.num_voxels();
        assert_eq!(a.tape.value(a.logits).shape(), &[volume, 3]);
        assert_eq!(a.tape.value(a.logits).data(), b.tape.value(b.logits).data());
        assert_eq!(a.shifts, b.shifts);
        assert_eq!(a.shifts.len(), 2);
    }

    #[test]
    fn forward_softmax_rows_sum_to_one() {
        let grid = toy_scene();
        let model = Model::init(toy_config(2), 3).unwrap();
        let mut pass = forward(&model, &grid, &eval_noise(&model.cfg), 0, false).unwrap();
        let probs = pass.tape.softmax(pass.logits);
        for r in 0..grid.num_voxels() {
            let row = &pass.tape.value(probs).data()[r * 3..(r + 1) * 3];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_attn_ffn_conv_reduce_to_cmln_of_input_pathway() {
        // Wiring check: with Wo, the FFN output layer and the conv all zero,
        // the residuals collapse and one block's occupied tokens equal
        // CMLN(embed(x)).
        let grid = toy_scene();
        let mut cfg = toy_config(2);
        cfg.n_blocks = 1;
        let mut model = Model::init(cfg, 3).unwrap();
        for name in ["block0.attn.wo", "block0.ffn.w2", "block0.ffn.b2", "block0.conv.w", "block0.conv.b"] {
            let buf = model.params.get_mut(name).unwrap();
            *buf = Buf::zeros(buf.shape());
        }
        let pass = forward(&model, &grid, &eval_noise(&model.cfg), 0, false).unwrap();
        let got = pass.tape.value(pass.tokens).clone();

        // Reference: embed + CMLN only, straight off the stored parameters.
        let mut tape = Tape::new();
        let n = grid.num_occupied();
        let mut feat = Vec::new();
        for row in 0..n {
            feat.extend_from_slice(grid.feature(row));
        }
        let input = tape.constant(Buf::from_vec(&[n, 2], feat).unwrap());
        let cst = |tape: &mut Tape, name: &str| {
            let buf = model.params.get(name).unwrap().clone();
            tape.constant(buf)
        };
        let w = cst(&mut tape, "embed.w");
        let b = cst(&mut tape, "embed.b");
        let proj = tape.matmul(input, w).unwrap();
        let h = tape.add_row(proj, b).unwrap();
        let params = CmlnVars {
            gamma: MlpVars {
                w1: cst(&mut tape, "block0.cmln.gamma.w1"),
                b1: cst(&mut tape, "block0.cmln.gamma.b1"),
                w2: cst(&mut tape, "block0.cmln.gamma.w2"),
                b2: cst(&mut tape, "block0.cmln.gamma.b2"),
            },
            beta: MlpVars {
                w1: cst(&mut tape, "block0.cmln.beta.w1"),
                b1: cst(&mut tape, "block0.cmln.beta.b1"),
                w2: cst(&mut tape, "block0.cmln.beta.w2"),
                b2: cst(&mut tape, "block0.cmln.beta.b2"),
            },
        };
        let sums = tape.col_sums(h).unwrap();
        let ctx = tape.mul_scalar(sums, 1.0 / n as f64);
        let expected = cmln(&mut tape, h, ctx, &params).unwrap();
        assert_eq!(got.shape(), tape.value(expected).shape());
        for (a, b) in got.data().iter().zip(tape.value(expected).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ablation_variants_all_run() {
        let grid = toy_scene();
        let base = toy_config(2);
        let variants = [
            Ablation { adaptive_shift: false, crpe: false, cmln: false, ..Ablation::default() },
            Ablation { crpe: false, cmln: false, ..Ablation::default() },
            Ablation { cmln: false, ..Ablation::default() },
            Ablation::default(),
            Ablation { center: CenterMode::GeometricCenter, ..Ablation::default() },
            Ablation { relative_angles: false, ..Ablation::default() },
            Ablation { asa_mode: AsaMode::SoftMixture, ..Ablation::default() },
        ];
        for ab in variants {
            let mut cfg = base;
            cfg.ablation = ab;
            let model = Model::init(cfg, 5).unwrap();
            let pass = forward(&model, &grid, &eval_noise(&cfg), 0, false).unwrap();
            assert!(pass.tape.value(pass.logits).data().iter().all(|v| v.is_finite()));
        }
    }
}
