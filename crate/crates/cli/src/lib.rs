//! Subcommands of the `afpn` binary.
//!
//! Each command returns its standard output as a string plus a pass flag so
//! that `main` only maps results to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use afpn_core::analysis::{compare, cost_report, count_params};
use afpn_core::gradcheck::{gradcheck, GradcheckOptions};
use afpn_core::necks::{build, train_toy, FeaturePyramid, NeckConfig};
use afpn_core::{Error, FusionKind, NeckModel, Real};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG_PARSE: i32 = 2;
pub const EXIT_ARCHITECTURE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "afpn", version, about = "Build, inspect and exercise AFPN feature pyramid necks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-node layer table with parameter and FLOP counts.
    Describe(DescribeArgs),
    /// Run the neck on a C-level pyramid and write P-level tensors.
    Forward(ForwardArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Adaptive, sum and concat fusion side by side.
    Ablate(AblateArgs),
    /// Cost table across several neck configs.
    Compare(CompareArgs),
    /// Fit the neck to a fixed random target and write the loss curve.
    TrainToy(TrainArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SeedArg {
    /// Run seed; defaults to AFPN_SEED, then the config's seed.
    #[arg(long, env = "AFPN_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DescribeArgs {
    pub config: PathBuf,
    /// Image size for the table; defaults to the config's resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, default_value = "afpn-out/describe")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ForwardArgs {
    pub config: PathBuf,
    /// Directory holding C{l}.tsr files.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    pub input: Option<PathBuf>,
    /// Draw a standard-normal input pyramid at the config's resolution.
    #[arg(long)]
    pub random: bool,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value = "afpn-out/forward")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    pub config: PathBuf,
    /// Shrink the config to gradient-check scale first.
    #[arg(long)]
    pub micro: bool,
    #[arg(long, default_value_t = 200)]
    pub coordinates: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Test hook: perturb the analytic gradient of this parameter.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    pub config: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Unnormalized sum fusion diverges above roughly 3e-3.
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value = "afpn-out/ablate")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(required = true)]
    pub configs: Vec<PathBuf>,
    #[arg(long, default_value_t = 640)]
    pub resolution: usize,
    #[arg(long, default_value = "afpn-out/compare")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub config: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value = "afpn-out/train-toy")]
    pub out: PathBuf,
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ConfigParse(_) | Error::Usage(_) => EXIT_CONFIG_PARSE,
            Error::Config(_) | Error::Shape(_) | Error::Format(_) => EXIT_ARCHITECTURE,
            Error::Numeric { .. } => EXIT_NUMERIC,
            Error::Io(_) => EXIT_CHECK_FAILED,
        };
        CliError { code, message: e.to_string() }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError { code: EXIT_CHECK_FAILED, message: format!("{}: {e}", path.display()) }
}

#[derive(Debug)]
pub struct Output {
    pub text: String,
    /// False when a check ran to completion but did not hold (exit 1).
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: Option<u64>,
    pub out_dir: String,
    pub version: String,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    fn write(&self) -> Result<(), CliError> {
        let path = Path::new(&self.out_dir).join(Self::FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

struct Run {
    command: &'static str,
    config: String,
    seed: Option<u64>,
    out: PathBuf,
    artifacts: Vec<String>,
}

impl Run {
    fn new(command: &'static str, config: &Path, seed: Option<u64>, out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        Ok(Run { command, config: config.display().to_string(), seed, out: out.to_path_buf(), artifacts: Vec::new() })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seed: self.seed,
            out_dir: self.out.display().to_string(),
            version: VERSION.to_string(),
            artifacts: self.artifacts,
        }
        .write()
    }
}

/// Loads a config and applies the run seed: flag or AFPN_SEED, else the config's own.
fn load(path: &Path, seed: Option<u64>) -> Result<NeckConfig, CliError> {
    let mut cfg = NeckConfig::load(path)?;
    cfg.validate()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<Output, CliError> {
    match cli.command {
        Command::Describe(a) => cmd_describe(&a),
        Command::Forward(a) => cmd_forward(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::TrainToy(a) => cmd_train_toy(&a),
    }
}

pub fn cmd_describe(args: &DescribeArgs) -> Result<Output, CliError> {
    let cfg = load(&args.config, None)?;
    let res = args.resolution.unwrap_or(cfg.resolution);
    let model: NeckModel<f32> = build(&cfg)?;
    let report = cost_report(&model, res)?;
    let mut text = String::new();
    if model.stage_count() > 0 {
        text.push_str(&format!("fusion stages: {}\n", model.stage_count()));
        for site in model.topology() {
            let sources: Vec<String> = site.sources.iter().map(|(l, k)| format!("C{l}:{k}")).collect();
            text.push_str(&format!(
                "  stage {} -> level {} arity {} {} [{}]\n",
                site.stage,
                site.target,
                site.arity,
                site.fusion,
                sources.join(" ")
            ));
        }
    }
    if cfg.has_p6() {
        text.push_str("P6 head: 3x3 stride-2 conv + 3x3 conv on P5\n");
    }
    text.push_str(&report.to_text());
    let mut run = Run::new("describe", &args.config, Some(cfg.seed), &args.out)?;
    run.write("cost_report.json", &report.to_json())?;
    run.write("cost_report.txt", &report.to_text())?;
    run.finish()?;
    Ok(Output { text, passed: true })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: String,
    pub shape: [usize; 4],
    pub stride: Option<usize>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn cmd_forward(args: &ForwardArgs) -> Result<Output, CliError> {
    let cfg = load(&args.config, args.seed.seed)?;
    let model: NeckModel<f32> = build(&cfg)?;
    let input = match &args.input {
        Some(dir) => FeaturePyramid::<f32>::load(dir, "C", &cfg.input_levels())?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            FeaturePyramid::random_input(&cfg, cfg.resolution, 1, &mut rng)?
        }
    };
    let base = input.get(cfg.input_levels()[0]).map(|t| t.shape().h << cfg.input_levels()[0]);
    let output = model.forward(&input)?;

    let mut run = Run::new("forward", &args.config, Some(cfg.seed), &args.out)?;
    output.save(&args.out, "P")?;
    run.artifacts.extend(output.levels().iter().map(|l| format!("P{l}.tsr")));

    let summary: Vec<LevelSummary> = output
        .iter()
        .map(|(l, t)| {
            let s = t.shape();
            LevelSummary {
                level: format!("P{l}"),
                shape: [s.n, s.c, s.h, s.w],
                stride: base.map(|b| b / s.h),
                min: t.min().as_f64(),
                max: t.max().as_f64(),
                mean: t.mean().as_f64(),
            }
        })
        .collect();
    let mut text = String::new();
    for s in &summary {
        text.push_str(&format!(
            "{:<3} {}x{}x{}x{}  stride {:>3}  min {:>10.4}  max {:>10.4}  mean {:>10.4}\n",
            s.level,
            s.shape[0],
            s.shape[1],
            s.shape[2],
            s.shape[3],
            s.stride.map_or("?".into(), |v| v.to_string()),
            s.min,
            s.max,
            s.mean
        ));
    }
    run.write("summary.json", &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    run.finish()?;
    Ok(Output { text, passed: true })
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Output, CliError> {
    let mut cfg = load(&args.config, args.seed.seed)?;
    if args.micro {
        cfg = cfg.to_micro();
    }
    let opts = GradcheckOptions {
        coordinates: args.coordinates,
        seed: cfg.seed,
        corrupt: args.corrupt.clone(),
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&cfg, &opts)?;
    if let Some(out) = &args.out {
        let mut run = Run::new("gradcheck", &args.config, Some(cfg.seed), out)?;
        run.write("gradcheck.json", &serde_json::to_string_pretty(&report).expect("report serializes"))?;
        run.finish()?;
    }
    Ok(Output { text: report.to_text(), passed: report.passed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fusion: FusionKind,
    pub params: u64,
    pub fusion_params: u64,
    pub flops: u64,
    /// Output level and `(n, c, h, w)` at the config's resolution.
    pub output_shapes: Vec<(u8, [usize; 4])>,
    /// `None` when toy training hit a non-finite value.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub resolution: usize,
    pub train_steps: usize,
    pub train_lr: f64,
    /// Toy training runs on this micro-scale copy of the config.
    pub train_config: NeckConfig,
    pub rows: Vec<AblationRow>,
    pub shapes_match: bool,
    pub params_ordered: bool,
}

pub fn ablation(cfg: &NeckConfig, steps: usize, lr: f64) -> Result<Ablation, CliError> {
    if !cfg.variant.is_afpn() {
        return Err(Error::Config(format!("ablate needs an AFPN config, got {}", cfg.variant)).into());
    }
    let train_cfg = if cfg.is_micro() { cfg.clone() } else { cfg.to_micro() };
    let mut rows = Vec::new();
    for kind in FusionKind::ALL {
        let model: NeckModel<f32> = build(&cfg.with_fusion(kind))?;
        let report = cost_report(&model, cfg.resolution)?;
        let output_shapes =
            model.output_shapes(cfg.resolution)?.into_iter().map(|(l, s)| (l, [s.n, s.c, s.h, s.w])).collect();
        let mut toy: NeckModel<f32> = build(&train_cfg.with_fusion(kind))?;
        let curve = match train_toy(&mut toy, steps, lr, cfg.seed) {
            Ok(c) => Some(c),
            Err(Error::Numeric { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        rows.push(AblationRow {
            fusion: kind,
            params: count_params(&model),
            fusion_params: model.fusion_param_count() as u64,
            flops: report.totals.flops,
            output_shapes,
            initial_loss: curve.as_ref().map(|c| c[0]),
            final_loss: curve.as_ref().and_then(|c| c.last().copied()),
        });
    }
    let shapes_match = rows.windows(2).all(|w| w[0].output_shapes == w[1].output_shapes);
    let by = |k: FusionKind| rows.iter().find(|r| r.fusion == k).expect("all kinds").fusion_params;
    let params_ordered = by(FusionKind::Sum) < by(FusionKind::Adaptive) && by(FusionKind::Sum) < by(FusionKind::Concat);
    Ok(Ablation {
        resolution: cfg.resolution,
        train_steps: steps,
        train_lr: lr,
        train_config: train_cfg,
        rows,
        shapes_match,
        params_ordered,
    })
}

impl Ablation {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "fusion ablation at {0}x{0}; toy training {1} steps, lr {2}\n",
            self.resolution, self.train_steps, self.train_lr
        );
        s.push_str(&format!(
            "{:<9} {:>12} {:>14} {:>16} {:>12} {:>12}\n",
            "fusion", "params", "fusion_params", "flops", "loss_start", "loss_end"
        ));
        let loss = |v: Option<f64>| v.map_or("diverged".to_string(), |v| format!("{v:.5}"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<9} {:>12} {:>14} {:>16} {:>12} {:>12}\n",
                r.fusion.name(),
                r.params,
                r.fusion_params,
                r.flops,
                loss(r.initial_loss),
                loss(r.final_loss)
            ));
        }
        s.push_str(&format!("output shapes identical: {}\n", if self.shapes_match { "yes" } else { "NO" }));
        s.push_str(&format!(
            "fusion params ordered (sum < adaptive, sum < concat): {}\n",
            if self.params_ordered { "yes" } else { "NO" }
        ));
        s
    }
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Output, CliError> {
    let cfg = load(&args.config, args.seed.seed)?;
    let ab = ablation(&cfg, args.steps, args.lr)?;
    let mut run = Run::new("ablate", &args.config, Some(cfg.seed), &args.out)?;
    run.write("ablation.json", &serde_json::to_string_pretty(&ab).expect("ablation serializes"))?;
    run.finish()?;
    Ok(Output { text: ab.to_text(), passed: ab.shapes_match && ab.params_ordered })
}

pub fn cmd_compare(args: &CompareArgs) -> Result<Output, CliError> {
    let mut models: Vec<(String, NeckModel<f32>)> = Vec::new();
    for path in &args.configs {
        let cfg = load(path, None)?;
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        models.push((label, build(&cfg)?));
    }
    let refs: Vec<(String, &NeckModel<f32>)> = models.iter().map(|(l, m)| (l.clone(), m)).collect();
    let cmp = compare(&refs, args.resolution)?;
    let config_list = args.configs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
    let mut run = Run::new("compare", Path::new(&config_list), None, &args.out)?;
    run.write("comparison.json", &cmp.to_json())?;
    run.finish()?;
    Ok(Output { text: cmp.to_text(), passed: cmp.afpn_below_fpn != Some(false) })
}

/// `step,loss` lines with a header; losses printed in shortest round-trip form.
pub fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{i},{l:?}\n"));
    }
    s
}

pub fn cmd_train_toy(args: &TrainArgs) -> Result<Output, CliError> {
    let cfg = load(&args.config, args.seed.seed)?;
    let mut model: NeckModel<f32> = build(&cfg)?;
    let curve = train_toy(&mut model, args.steps, args.lr, cfg.seed)?;
    let mut run = Run::new("train-toy", &args.config, Some(cfg.seed), &args.out)?;
    run.write("loss.csv", &loss_csv(&curve))?;
    run.finish()?;
    let (first, last) = (curve[0], *curve.last().expect("steps >= 1"));
    let text = format!(
        "initial loss {first:.6}\nfinal loss {last:.6}\nratio {:.4}\nwrote {}\n",
        last / first,
        args.out.join("loss.csv").display()
    );
    Ok(Output { text, passed: true })
}
