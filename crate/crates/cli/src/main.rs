use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ghostforge::analysis;
use ghostforge::arch::{self, ArchSpec, Layer, Model, ZooOptions};
use ghostforge::checkpoint::Checkpoint;
use ghostforge::cost::{self, count_costs};
use ghostforge::gghost::{stage_reduction_ratios, CheapOp};
use ghostforge::tensor::Tensor;
use ghostforge::train::{self, Dataset, TrainConfig};
use ghostforge::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ghostforge",
    version,
    about = "Ghost-module networks: build, convert, count, train, analyse"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a zoo architecture as JSON.
    Build {
        #[command(flatten)]
        zoo: ZooArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert an architecture with C-Ghost modules or G-Ghost stages.
    Convert {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        conv: ConvertArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count parameters, FLOPs (MACs) and activations per node.
    Cost {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        csv: bool,
    },
    /// Closed-form speed-up and compression of a ghost module.
    Ratios {
        #[arg(long)]
        c: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        s: usize,
        /// Output maps; defaults to c.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Per-stage G-Ghost reduction ratios, closed form against counted.
    StageRatios {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value = "conv1x1")]
        cheap: CheapOp,
        #[arg(long)]
        mix: bool,
    },
    /// Train on the seeded synthetic dataset.
    Train {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 5e-4)]
        wd: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long)]
        out_ckpt: Option<PathBuf>,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the seeded synthetic dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Wall-clock inference timing.
    Bench {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        /// Also time the G-Ghost conversion at this λ.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Fit depthwise cheap maps between two PGM feature maps.
    AnalyzePairs {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
        d: Vec<usize>,
    },
    /// Best-matching channels between the first and last block of a stage.
    Similarity {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every channel of a node's output as PGM.
    DumpFeatures {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        node: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    #[value(name = "c_ghost")]
    CGhost,
    #[value(name = "g_ghost")]
    GGhost,
}

#[derive(Args)]
struct ZooArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(arch::ZOO))]
    arch: String,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// Input shape CxHxW (square, 3 channels) for zoo networks.
    #[arg(long, value_parser = parse_shape)]
    input: Option<[usize; 3]>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(arch::ZOO), conflicts_with = "spec_file", required_unless_present = "spec_file")]
    arch: Option<String>,
    #[arg(long)]
    spec_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long, value_parser = parse_shape)]
    input: Option<[usize; 3]>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long, default_value_t = 2)]
    s: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value = "conv1x1")]
    cheap: CheapOp,
    #[arg(long)]
    mix: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value_t = 10)]
    num_classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    /// Trained weights; otherwise a fresh seeded model is built.
    #[arg(long, conflicts_with_all = ["arch", "spec_file"])]
    ckpt: Option<PathBuf>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(arch::ZOO), conflicts_with = "spec_file")]
    arch: Option<String>,
    #[arg(long)]
    spec_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long, value_parser = parse_shape)]
    input: Option<[usize; 3]>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse().map_err(|_| format!("`{s}` is not CxHxW")))
        .collect::<std::result::Result<_, _>>()?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(format!("`{s}` is not CxHxW with non-zero sizes")),
    }
}

fn zoo_arch(
    name: &str,
    width: f64,
    input: Option<[usize; 3]>,
    classes: Option<usize>,
) -> Result<ArchSpec> {
    let side = match input {
        Some([3, h, w]) if h == w => Some(h),
        Some(s) => {
            return Err(Error::config(format!(
                "zoo networks take square 3-channel inputs, got {}x{}x{}",
                s[0], s[1], s[2]
            )))
        }
        None => None,
    };
    arch::build_named_with(
        name,
        &ZooOptions {
            width,
            input: side,
            classes,
        },
    )
}

impl SourceArgs {
    fn load(&self) -> Result<ArchSpec> {
        match (&self.arch, &self.spec_file) {
            (Some(name), _) => zoo_arch(name, self.width, self.input, self.classes),
            (None, Some(path)) => {
                let mut a = ArchSpec::load(path)?;
                if let Some(shape) = self.input {
                    a.input_shape = shape;
                }
                Ok(a)
            }
            (None, None) => Err(Error::config("pass --arch or --spec-file")),
        }
    }
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        if let Some(path) = &self.ckpt {
            return Checkpoint::load(path)?.to_model();
        }
        let arch = match (&self.arch, &self.spec_file) {
            (Some(name), _) => zoo_arch(name, self.width, self.input, None)?,
            (None, Some(path)) => ArchSpec::load(path)?,
            (None, None) => return Err(Error::config("pass --ckpt, --arch or --spec-file")),
        };
        Model::new(arch, self.seed)
    }
}

impl DataArgs {
    fn dataset(&self, shape: [usize; 3]) -> Result<Dataset> {
        train::synth_dataset(self.num_classes, self.per_class, shape, self.data_seed)
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

fn bench_one(arch: &ArchSpec, batch: usize, repeat: usize) -> Result<(f64, f64)> {
    let model = Model::new(arch.clone(), 0)?;
    let x = Tensor::full(arch.input(batch), 0.5);
    model.program.forward(&x, &model.store, false)?;
    let mut times = Vec::with_capacity(repeat);
    for _ in 0..repeat.max(1) {
        let t = Instant::now();
        model.program.forward(&x, &model.store, false)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(mean_std(&times))
}

fn stage_ratios(arch: &ArchSpec, lambda: f64, cheap: CheapOp, mix: bool) -> Result<String> {
    let vanilla = count_costs(arch, None)?;
    let converted_arch = arch::g_ghostify(arch, lambda, cheap, mix)?;
    let converted = count_costs(&converted_arch, None)?;
    let mut out = String::from(
        "# FLOPs counted as multiply-accumulates (MACs)\nstage,blocks,closed_form_flops,counted_flops,closed_form_params,counted_params\n",
    );
    for run in arch::detect_stages(arch)?
        .into_iter()
        .filter(|r| r.len() >= 2)
    {
        let last = &arch.nodes[*run.last().expect("non-empty")].name;
        let Some(row) = converted.row(last).filter(|r| r.kind == "gghost_stage") else {
            continue;
        };
        let node = converted_arch.node(last).expect("row comes from a node");
        let Layer::GGhostStage(cfg) = &node.layer else {
            continue;
        };
        let (flops, params): (Vec<f64>, Vec<f64>) = run
            .iter()
            .map(|&i| {
                let r = &vanilla.rows[i];
                (r.flops as f64, r.params as f64)
            })
            .unzip();
        let cheap_spatial = (row.out_shape.h * row.out_shape.w) as f64;
        let cheap_params = cheap
            .kernel()
            .map_or(0.0, |k| (cfg.channels() * cfg.ghost_width() * k * k) as f64);
        let (cf, cp) = stage_reduction_ratios(
            &flops,
            &params,
            lambda,
            cheap_params * cheap_spatial,
            cheap_params,
        )?;
        out.push_str(&format!(
            "{last},{},{cf:.4},{:.4},{cp:.4},{:.4}\n",
            run.len(),
            flops.iter().sum::<f64>() / row.flops as f64,
            params.iter().sum::<f64>() / row.params as f64
        ));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build { zoo, out } => {
            let a = zoo_arch(&zoo.arch, zoo.width, zoo.input, zoo.classes)?;
            emit(&(a.to_json()? + "\n"), out.as_deref())
        }
        Command::Convert { source, conv, out } => {
            let a = source.load()?;
            let converted = match conv.mode {
                Mode::CGhost => arch::c_ghostify(&a, conv.s, conv.d)?,
                Mode::GGhost => arch::g_ghostify(&a, conv.lambda, conv.cheap, conv.mix)?,
            };
            emit(&(converted.to_json()? + "\n"), out.as_deref())
        }
        Command::Cost { source, csv } => {
            let report = count_costs(&source.load()?, None)?;
            if csv {
                print!(
                    "# FLOPs counted as multiply-accumulates (MACs)\n{}",
                    report.to_csv()
                );
            } else {
                print!("{}", report.to_table());
            }
            Ok(())
        }
        Command::Ratios { c, k, d, s, n } => {
            let n = n.unwrap_or(c);
            println!("r_s={:.4}", cost::speedup_ratio_rs(c, k, d, s)?);
            println!("r_c={:.4}", cost::compression_ratio_rc(c, k, d, s, n)?);
            Ok(())
        }
        Command::StageRatios {
            source,
            lambda,
            cheap,
            mix,
        } => {
            print!("{}", stage_ratios(&source.load()?, lambda, cheap, mix)?);
            Ok(())
        }
        Command::Train {
            source,
            data,
            steps,
            seed,
            lr,
            momentum,
            wd,
            batch,
            out_ckpt,
            loss_csv,
        } => {
            let a = source.load()?;
            let ds = data.dataset(a.input_shape)?;
            let cfg = TrainConfig {
                lr,
                momentum,
                weight_decay: wd,
                batch_size: batch,
                steps,
                seed,
            };
            let outcome = train::train(&a, &ds, &cfg)?;
            if let Some(path) = &loss_csv {
                emit(&train::loss_csv(&outcome.losses), Some(path))?;
            }
            if let Some(path) = &out_ckpt {
                outcome.checkpoint.save(path)?;
            }
            if let Some(last) = outcome.losses.last() {
                println!("final_loss={last:.6}");
            }
            println!(
                "train_accuracy={:.4}",
                train::evaluate(&outcome.checkpoint, &ds)?
            );
            Ok(())
        }
        Command::Eval { ckpt, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            let shape = ck
                .arch
                .as_ref()
                .map(|a| a.input_shape)
                .ok_or_else(|| Error::config("checkpoint has no arch line"))?;
            println!(
                "accuracy={:.4}",
                train::evaluate(&ck, &data.dataset(shape)?)?
            );
            Ok(())
        }
        Command::Bench {
            source,
            batch,
            repeat,
            lambda,
        } => {
            let a = source.load()?;
            println!("arch,batch,repeat,mean_ms,std_ms");
            let (m, s) = bench_one(&a, batch, repeat)?;
            println!("{},{batch},{repeat},{m:.3},{s:.3}", a.name);
            if let Some(l) = lambda {
                let g = arch::g_ghostify(&a, l, CheapOp::Conv1x1, true)?;
                let (m, s) = bench_one(&g, batch, repeat)?;
                println!("{},{batch},{repeat},{m:.3},{s:.3}", g.name);
            }
            Ok(())
        }
        Command::AnalyzePairs { src, dst, d } => {
            let (a, b) = (analysis::read_pgm(&src)?, analysis::read_pgm(&dst)?);
            println!("d,mse,regularized");
            for k in d {
                let fit = analysis::fit_cheap_map(&a, &b, k)?;
                println!("{k},{:.6e},{}", fit.mse, fit.regularized);
            }
            Ok(())
        }
        Command::Similarity {
            model,
            stage,
            batch,
            data_seed,
            out,
        } => {
            let m = model.load()?;
            let x = probe_batch(&m, batch, data_seed)?;
            let rows = analysis::stage_similarity_report(&m, &x, stage)?;
            emit(&analysis::similarity_csv(&rows), out.as_deref())
        }
        Command::DumpFeatures {
            model,
            node,
            out,
            data_seed,
        } => {
            let m = model.load()?;
            let x = probe_batch(&m, 1, data_seed)?;
            for path in analysis::dump_feature_maps(&m, &x, &node, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

/// A batch drawn from the synthetic distribution at the model's input shape.
fn probe_batch(model: &Model, batch: usize, seed: u64) -> Result<Tensor> {
    let ds = train::synth_dataset(2, batch.max(1).div_ceil(2), model.arch.input_shape, seed)?;
    let idx: Vec<usize> = (0..batch.max(1)).collect();
    Ok(ds.batch(&idx).0)
}

fn init_threads() {
    let threads = std::env::var("GHOSTFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    // Only fails if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        assert_eq!(parse_shape("3x32x32").unwrap(), [3, 32, 32]);
        assert!(parse_shape("3x32").is_err());
        assert!(parse_shape("0x1x1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
