//! Command-line interface.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use pixguide::classifier::{estimate_map, ClassifierBank, ClassifierConfig};
use pixguide::dataset::{
    encode_png_colored, read_image, read_labels, write_dataset, write_image, write_labels,
    SplitSpec,
};
use pixguide::edit::{interpolate_latents, GuidanceParams, ParamPolicy, SamplerOptions, Selection};
use pixguide::evaluation::{crossed_cases, sensitivity_sweep, sweep_csv, sweep_svg, trace_csv};
use pixguide::metrics::EVAL_SEED;
use pixguide::scene::{benchmark_edits, BenchmarkEdit, SceneSpec};
use pixguide::train::TrainConfig;
use pixguide::unet::DiffusionModel;
use pixguide::{Error, Result};

use crate::config::{Config, PolicyName};
use crate::ops::{
    prepare_edit, run_edit, run_eval, train_classifiers_on, train_ddpm_on, write_edit_dir,
    ClassifierRequest, DdpmRequest, EditInputs, EvalRequest,
};

#[derive(Parser, Debug)]
#[command(
    name = "pixguide",
    version,
    about = "Segmentation-guided diffusion editing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Model and classifier training.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Estimate the segmentation map of an image.
    Estimate(EstimateArgs),
    /// Guided edit of an image towards an edited segmentation map.
    Edit(EditArgs),
    /// Interpolate two images in the DDIM latent space.
    Interpolate(InterpolateArgs),
    /// Benchmark or parameter-sensitivity evaluation.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    /// Generate train/annotated/test splits of synthetic scenes.
    Gen(DatasetArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub annotated: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
}

#[derive(Subcommand, Debug)]
pub enum TrainCmd {
    /// Train the noise estimator.
    Ddpm(DdpmArgs),
    /// Train per-timestep pixel classifiers and the multi-step estimator.
    Classifiers(ClassifierArgs),
}

#[derive(Args, Debug)]
pub struct DdpmArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 4000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ClassifierArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "annotated")]
    pub split: String,
    #[arg(long, value_enum, default_value_t = PolicyArg::Toy)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 4)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Toy,
    Hires,
}

impl PolicyArg {
    fn policy(self) -> ParamPolicy {
        match self {
            PolicyArg::Toy => PolicyName::Toy.policy(),
            PolicyArg::Hires => PolicyName::Hires.policy(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Quantitative,
    Random,
}

#[derive(Args, Debug)]
pub struct Artifacts {
    #[arg(long, default_value = "model.ckpt")]
    pub model: PathBuf,
    #[arg(long, default_value = "bank.ckpt")]
    pub bank: PathBuf,
}

impl Artifacts {
    fn load(&self) -> Result<(DiffusionModel, ClassifierBank)> {
        Ok((
            DiffusionModel::load(&self.model)?,
            ClassifierBank::load(&self.bank)?,
        ))
    }
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub artifacts: Artifacts,
    #[arg(long)]
    pub image: PathBuf,
    /// Label PNG to write; a palette sidecar and a colour rendering go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = EVAL_SEED)]
    pub seed: u64,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("mode").required(true).args(["auto_params", "t0"])))]
pub struct EditArgs {
    #[command(flatten)]
    pub artifacts: Artifacts,
    #[arg(long)]
    pub image: PathBuf,
    /// Edited label PNG (palette sidecar in the same or a parent directory).
    #[arg(long)]
    pub map: PathBuf,
    /// Label PNG of the source image; estimated when omitted.
    #[arg(long)]
    pub source_map: Option<PathBuf>,
    /// Edit-related classes, comma separated; defaults to the changed classes.
    #[arg(long, value_delimiter = ',')]
    pub q_edit: Option<Vec<u8>>,
    /// Choose (t0, s) from the ROI size.
    #[arg(long, conflicts_with_all = ["t0", "scale"])]
    pub auto_params: bool,
    #[arg(long, value_enum, default_value_t = PolicyArg::Toy)]
    pub policy: PolicyArg,
    #[arg(long, requires = "scale")]
    pub t0: Option<usize>,
    #[arg(long, requires = "t0")]
    pub scale: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SelectionArg::Quantitative)]
    pub selection: SelectionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long, default_value = "model.ckpt")]
    pub model: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub t0: usize,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub artifacts: Artifacts,
    /// Number of benchmark images.
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    /// First scene index of the evaluation images.
    #[arg(long, default_value_t = 10_000)]
    pub start: u64,
    /// JSON list of edits; defaults to the built-in benchmark.
    #[arg(long)]
    pub edits: Option<String>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Toy)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run a (t0, s) sensitivity sweep over every edit instead of the benchmark.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_delimiter = ',', default_value = "250,500,750")]
    pub t0s: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "100,300,1000")]
    pub scales: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCmd::Gen(a)) => {
            let spec = SceneSpec {
                seed: a.seed,
                ..SceneSpec::with_size(a.size)
            };
            let split = |name: &str, start: u64, count: usize| SplitSpec {
                name: name.into(),
                start,
                count,
            };
            let splits = vec![
                split("train", 0, a.train),
                split("annotated", 5000, a.annotated),
                split("test", 10_000, a.test),
            ];
            let m = write_dataset(&a.out, &spec, &splits)?;
            for (s, e) in &m.splits {
                println!("{}: {} scenes", s.name, e.len());
            }
        }
        Command::Train(TrainCmd::Ddpm(a)) => {
            let req = DdpmRequest {
                split: a.split,
                timesteps: a.timesteps,
                unet: None,
                train: TrainConfig {
                    steps: a.steps,
                    batch: a.batch,
                    lr: a.lr,
                    seed: a.seed,
                    ..TrainConfig::default()
                },
            };
            let t = std::time::Instant::now();
            let model = train_ddpm_on(&a.data, &req, |step, loss| {
                if (step + 1) % 100 == 0 {
                    log::info!(
                        "step {:>5}  loss {loss:.4}  {:.0}s",
                        step + 1,
                        t.elapsed().as_secs_f64()
                    );
                }
            })?;
            model.save(&a.out)?;
            println!("wrote {}", a.out.display());
        }
        Command::Train(TrainCmd::Classifiers(a)) => {
            let model = DiffusionModel::load(&a.model)?;
            let req = ClassifierRequest {
                split: a.split,
                policy: a.policy.policy(),
                config: ClassifierConfig {
                    epochs: a.epochs,
                    seed: a.seed,
                    ..ClassifierConfig::default()
                },
                ..ClassifierRequest::default()
            };
            let bank = train_classifiers_on(&a.data, &model, &req)?;
            bank.save(&a.out)?;
            println!(
                "wrote {} ({} timesteps)",
                a.out.display(),
                bank.trained_ts().len()
            );
        }
        Command::Estimate(a) => {
            let (model, bank) = a.artifacts.load()?;
            let x = read_image(&a.image)?;
            let y = estimate_map(&model, &bank, &x, a.seed)?;
            write_labels(&a.out, &y)?;
            fs::write(a.out.with_extension("color.png"), encode_png_colored(&y)?)?;
            println!("wrote {}", a.out.display());
        }
        Command::Edit(a) => {
            let (model, bank) = a.artifacts.load()?;
            let params = match (a.auto_params, a.t0, a.scale) {
                (false, Some(t0), Some(s)) => Some(GuidanceParams {
                    t0,
                    s,
                    n_steps: a.steps,
                    batch: a.batch,
                    seed: a.seed,
                }),
                (true, _, _) => None,
                _ => {
                    return Err(Error::InvalidArgument(
                        "pass --auto-params or both --t0 and --scale".into(),
                    ))
                }
            };
            let inputs = EditInputs {
                image: read_image(&a.image)?,
                y_edited: read_labels(&a.map)?,
                source_map: a.source_map.as_deref().map(read_labels).transpose()?,
                q_edit: a.q_edit.map(|v| v.into_iter().collect::<BTreeSet<u8>>()),
                params,
                seed: a.seed,
            };
            let mut policy = a.policy.policy();
            policy.batch = a.batch;
            let prep = prepare_edit(&model, &bank, &policy, &inputs)?;
            let selection = match a.selection {
                SelectionArg::Quantitative => Selection::Quantitative,
                SelectionArg::Random => Selection::Random { seed: a.seed },
            };
            let r = run_edit(
                &model,
                &bank,
                &inputs.image,
                &prep,
                &SamplerOptions::default(),
                selection,
                &(),
            )?;
            let s = write_edit_dir(&a.out, &prep, &r)?;
            let m = s.candidates[s.chosen].metrics;
            println!(
                "t0={} s={} roi={}px  MAE(x1e3)={:.3} PSNR={:.2} accuracy={:.3}  -> {}",
                s.params.t0,
                s.params.s,
                s.roi_pixels,
                m.mae_outside,
                m.psnr_outside,
                m.accuracy_inside,
                a.out.display()
            );
        }
        Command::Interpolate(a) => {
            let model = DiffusionModel::load(&a.model)?;
            let frames = interpolate_latents(
                &read_image(&a.a)?,
                &read_image(&a.b)?,
                a.t0,
                a.n,
                a.steps,
                &model,
            )?;
            fs::create_dir_all(&a.out)?;
            for (i, f) in frames.iter().enumerate() {
                write_image(a.out.join(format!("frame_{i:02}.png")), f)?;
            }
            println!("wrote {} frames to {}", frames.len(), a.out.display());
        }
        Command::Eval(a) => {
            let edits: Vec<BenchmarkEdit> = match &a.edits {
                Some(j) => serde_json::from_str(j)?,
                None => benchmark_edits(),
            };
            if a.sweep {
                return run_sweep(&a, &edits);
            }
            let req = EvalRequest {
                n_images: a.n,
                edits,
                start: a.start,
                seed: a.seed,
                ..EvalRequest::default()
            };
            let report = if a.n == 0 {
                run_eval_without_artifacts(&req)?
            } else {
                let (model, bank) = a.artifacts.load()?;
                run_eval(&model, &bank, &a.policy.policy(), &req, |i, n| {
                    log::info!("case {i}/{n}")
                })?
            };
            println!("quantitative selection\n{}", report.quantitative.to_table());
            println!("random selection\n{}", report.random.to_table());
            if let Some(out) = &a.out {
                write_json(&out.join("metrics.json"), &report)?;
            }
        }
        Command::Serve(a) => {
            let mut cfg = Config::load(a.config.as_deref())?;
            if let Some(p) = a.port {
                cfg.port = p;
            }
            if let Some(r) = a.root {
                cfg.root = r;
            }
            if let Some(w) = a.workers {
                cfg.workers = w;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::serve(cfg))?;
        }
    }
    Ok(())
}

fn run_eval_without_artifacts(req: &EvalRequest) -> Result<crate::ops::EvalReport> {
    use pixguide::evaluation::summarize;
    Ok(crate::ops::EvalReport {
        quantitative: summarize(&[], Selection::Quantitative),
        random: summarize(
            &[],
            Selection::Random {
                seed: req.selection_seed,
            },
        ),
        cases: Vec::new(),
    })
}

fn run_sweep(a: &EvalArgs, edits: &[BenchmarkEdit]) -> Result<()> {
    let (model, bank) = a.artifacts.load()?;
    let cases = crossed_cases(&SceneSpec::default(), a.start, a.n, edits)?;
    let rows = sensitivity_sweep(&model, &bank, &cases, &a.t0s, &a.scales, 50, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("sweep"));
    fs::create_dir_all(&out)?;
    fs::write(out.join("sweep.csv"), sweep_csv(&rows)?)?;
    fs::write(out.join("trace.csv"), trace_csv(&rows)?)?;
    fs::write(out.join("sweep.svg"), sweep_svg(&rows, |r| r.edit.clone()))?;
    write_json(&out.join("metrics.json"), &rows)?;
    println!("wrote {} runs to {}", rows.len(), out.display());
    Ok(())
}
