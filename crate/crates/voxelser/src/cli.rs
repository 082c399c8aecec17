//! Command-line surface: dump, synth, crpe, bench, gradcheck, train-toy,
//! eval, ablate. Machine-readable output on stdout, diagnostics on stderr.
//! Exit codes: 0 success, 1 validation failure, 2 I/O error.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::asa::AsaMode;
use crate::bench;
use crate::block::{Ablation, Model, ModelConfig};
use crate::checks;
use crate::crpe::{self, CenterMode};
use crate::error::{Error, Result};
use crate::grid::{self, SerializeScope, VoxelGrid};
use crate::losses::{self, TrainConfig};
use crate::sfc::CurveKind;
use crate::synth::{self, SceneSpec};

#[derive(Parser)]
#[command(name = "voxelser", version, about = "Serialized voxel attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveArg {
    Zorder,
    Hilbert,
}

impl From<CurveArg> for CurveKind {
    fn from(c: CurveArg) -> CurveKind {
        match c {
            CurveArg::Zorder => CurveKind::ZOrder,
            CurveArg::Hilbert => CurveKind::Hilbert,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Grouped,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Occupied,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Print the serialized order and group table of a scene file.
    Dump {
        scene: PathBuf,
        #[arg(long, value_enum, default_value = "zorder")]
        curve: CurveArg,
        #[arg(long, default_value_t = 0)]
        shift: usize,
        #[arg(long, default_value_t = 8)]
        group: usize,
        #[arg(long, value_enum, default_value = "occupied")]
        scope: ScopeArg,
    },
    /// Generate a synthetic scene from a key=value spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit per-voxel angular deltas as CSV.
    Crpe {
        #[arg(long)]
        dump: PathBuf,
    },
    /// Measure attention cost and latency.
    Bench {
        #[arg(long, value_enum)]
        attention: AttentionArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        g: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run finite-difference gradient suites.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Overfit a model on one scene with SGD and write trace + checkpoint.
    TrainToy {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Trace CSV path; stdout when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a scene.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Train every ablation configuration and emit a comparison CSV.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Tunables read from a plain `key=value` file.
#[derive(Debug, Clone, Copy)]
pub struct CliConfig {
    pub curve: CurveKind,
    pub group_size: usize,
    pub k_shifts: usize,
    pub heads: usize,
    pub channels: usize,
    pub n_blocks: usize,
    pub tau_init: f64,
    pub tau_min: f64,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for CliConfig {
    fn default() -> CliConfig {
        CliConfig {
            curve: CurveKind::ZOrder,
            group_size: 8,
            k_shifts: 4,
            heads: 2,
            channels: 8,
            n_blocks: 2,
            tau_init: 1.0,
            tau_min: 0.5,
            alpha: 0.01,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<CliConfig> {
        let mut cfg = CliConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::BadFormat(format!("line {}: {what}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let value = value.trim();
            match key.trim() {
                "curve" => cfg.curve = value.parse()?,
                "group_size" => cfg.group_size = value.parse().map_err(|_| bad("bad group_size"))?,
                "k_shifts" => cfg.k_shifts = value.parse().map_err(|_| bad("bad k_shifts"))?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad("bad heads"))?,
                "channels" => cfg.channels = value.parse().map_err(|_| bad("bad channels"))?,
                "n_blocks" => cfg.n_blocks = value.parse().map_err(|_| bad("bad n_blocks"))?,
                "tau_init" => cfg.tau_init = value.parse().map_err(|_| bad("bad tau_init"))?,
                "tau_min" => cfg.tau_min = value.parse().map_err(|_| bad("bad tau_min"))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("bad alpha"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("bad lr"))?,
                "momentum" => cfg.momentum = value.parse().map_err(|_| bad("bad momentum"))?,
                other => return Err(Error::BadFormat(format!("unknown config key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self, grid: &VoxelGrid, ablation: Ablation) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            heads: self.heads,
            group_size: self.group_size,
            k_shifts: self.k_shifts,
            n_blocks: self.n_blocks,
            num_classes: grid.num_classes(),
            feature_dim_in: grid.feature_dim(),
            ffn_expansion: 2,
            cmln_hidden: self.channels,
            crpe_hidden: crpe::DEFAULT_CRPE_HIDDEN,
            curve: self.curve,
            tau_init: self.tau_init,
            tau_min: self.tau_min,
            alpha: self.alpha,
            ablation,
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<CliConfig> {
    match path {
        Some(p) => CliConfig::parse(&fs::read_to_string(p)?),
        None => Ok(CliConfig::default()),
    }
}

/// Parse and run; returns the process exit code. Output goes to `out`,
/// diagnostics to stderr.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here with a success disposition.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { Ok(eprintln!("{e}")) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::BadFormat(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Dump { scene, curve, shift, group, scope } => {
            let grid = VoxelGrid::read_vser(&scene)?;
            let kind: CurveKind = curve.into();
            let scope = match scope {
                ScopeArg::Occupied => SerializeScope::Occupied,
                ScopeArg::All => SerializeScope::All,
            };
            let seq = grid::serialize_scoped(&grid, kind, shift, scope)?;
            let part = grid::partition(&seq, group)?;
            writeln!(
                out,
                "n={} curve={} shift={shift} group_size={group} groups={}",
                seq.len(),
                kind.name(),
                part.num_groups()
            )?;
            writeln!(out, "group,pos,lin,x,y,z,key,label")?;
            let bits = grid.bits_per_axis();
            for (gi, &(s, e)) in part.boundaries.iter().enumerate() {
                for pos in s..e {
                    let lin = seq.order[pos];
                    let (x, y, z) = grid.coord_of(lin);
                    let key = crate::sfc::encode(kind, bits, (x, y, z))?;
                    writeln!(
                        out,
                        "{gi},{pos},{lin},{x},{y},{z},{key},{}",
                        grid.labels()[lin]
                    )?;
                }
            }
            Ok(0)
        }
        Command::Synth { spec, out: out_path } => {
            let spec = SceneSpec::parse(&fs::read_to_string(&spec)?)?;
            let grid = synth::generate(&spec)?;
            grid.write_vser(&out_path)?;
            writeln!(
                out,
                "dims={}x{}x{} classes={} occupied={}",
                grid.dims().0,
                grid.dims().1,
                grid.dims().2,
                grid.num_classes(),
                grid.num_occupied()
            )?;
            Ok(0)
        }
        Command::Crpe { dump } => {
            let grid = VoxelGrid::read_vser(&dump)?;
            let center = crpe::scene_center(&grid)?;
            let deltas = crpe::angular_deltas(&grid, &center);
            writeln!(out, "x,y,z,delta_yaw,delta_pitch")?;
            for (&lin, d) in grid.occupied().iter().zip(&deltas) {
                let (x, y, z) = grid.coord_of(lin);
                writeln!(out, "{x},{y},{z},{:.12},{:.12}", d.yaw, d.pitch)?;
            }
            Ok(0)
        }
        Command::Bench { attention, n, g, seed } => {
            if n == 0 || g == 0 {
                return Err(Error::Invalid("n and g must be positive".into()));
            }
            let r = match attention {
                AttentionArg::Grouped => bench::bench_grouped(n, g, seed)?,
                AttentionArg::Full => bench::bench_full(n, g, seed)?,
            };
            writeln!(out, "n,g,token_pairs,wall_ns")?;
            writeln!(out, "{},{},{},{}", r.n, r.g, r.token_pairs, r.wall_ns)?;
            Ok(0)
        }
        Command::Gradcheck { module } => {
            let reports = checks::suite(&module)?;
            let mut all_pass = true;
            for (name, report) in &reports {
                writeln!(out, "{name}: {report}")?;
                all_pass &= report.passed();
            }
            writeln!(out, "{}", if all_pass { "pass" } else { "fail" })?;
            Ok(if all_pass { 0 } else { 1 })
        }
        Command::TrainToy { scene, steps, seed, config, out: ckpt, trace } => {
            let grid = VoxelGrid::read_vser(&scene)?;
            let cfg = load_config(&config)?;
            let mut model = Model::init(cfg.model_config(&grid, Ablation::default()), seed)?;
            let tc = TrainConfig { lr: cfg.lr, momentum: cfg.momentum, steps, seed };
            let rows = losses::train_toy(&mut model, &grid, &tc)?;
            let mut csv = String::from(TRACE_HEADER);
            for r in &rows {
                csv.push_str(&trace_row(r));
            }
            match &trace {
                Some(p) => fs::write(p, &csv)?,
                None => out.write_all(csv.as_bytes())?,
            }
            let mut f = fs::File::create(&ckpt)?;
            model.save(&mut f)?;
            Ok(0)
        }
        Command::Eval { scene, weights } => {
            let grid = VoxelGrid::read_vser(&scene)?;
            let mut f = fs::File::open(&weights)?;
            let model = Model::load(&mut f)?;
            let m = losses::evaluate(&model, &grid)?;
            writeln!(out, "accuracy={:.6}", m.accuracy)?;
            writeln!(out, "sc_iou={:.6}", m.sc_iou)?;
            writeln!(out, "miou={:.6}", m.miou)?;
            for (i, iou) in m.per_class_iou.iter().enumerate() {
                writeln!(out, "class_{}_iou={:.6}", i + 1, iou)?;
            }
            Ok(0)
        }
        Command::Ablate { scene, steps, seed, config } => {
            let grid = VoxelGrid::read_vser(&scene)?;
            let cfg = load_config(&config)?;
            writeln!(out, "config,steps,l_total,accuracy,sc_iou,miou")?;
            for (name, ablation) in ablation_table() {
                let mut model = Model::init(cfg.model_config(&grid, ablation), seed)?;
                let tc = TrainConfig { lr: cfg.lr, momentum: cfg.momentum, steps, seed };
                let rows = losses::train_toy(&mut model, &grid, &tc)?;
                let m = losses::evaluate(&model, &grid)?;
                let last_loss = rows.last().map(|r| r.report.l_total).unwrap_or(f64::NAN);
                writeln!(
                    out,
                    "{name},{steps},{last_loss:.6},{:.6},{:.6},{:.6}",
                    m.accuracy, m.sc_iou, m.miou
                )?;
            }
            Ok(0)
        }
    }
}

pub const TRACE_HEADER: &str = "step,l_ce,l_scal_sem,l_scal_geo,l_total,accuracy,sc_iou,miou,tau\n";

fn trace_row(r: &losses::TraceRow) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        r.step,
        r.report.l_ce,
        r.report.l_scal_sem,
        r.report.l_scal_geo,
        r.report.l_total,
        r.accuracy,
        r.sc_iou,
        r.miou,
        r.tau
    )
}

/// The ablation grid: incremental components, then the positional-encoding
/// variants, then the direct-soft-shift variant.
pub fn ablation_table() -> Vec<(&'static str, Ablation)> {
    let off = Ablation {
        adaptive_shift: false,
        crpe: false,
        cmln: false,
        ..Ablation::default()
    };
    vec![
        ("baseline", off),
        ("asa", Ablation { adaptive_shift: true, ..off }),
        ("asa_crpe", Ablation { adaptive_shift: true, crpe: true, ..off }),
        ("full", Ablation::default()),
        ("wo_pvm", Ablation { center: CenterMode::GeometricCenter, ..Ablation::default() }),
        ("wo_ryp", Ablation { relative_angles: false, ..Ablation::default() }),
        ("vanilla_shift", Ablation { asa_mode: AsaMode::SoftMixture, ..Ablation::default() }),
    ]
}
