use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bhkit_core::cost::{analyze, profile};
use bhkit_core::eval::{
    default_intervals, evaluate, parse_intervals, parse_results, CocoDataset, CocoResult,
};
use bhkit_core::rebalance::{
    compare, evaluate_candidate, rebalance, RebalanceError, RebalanceProblem,
};
use bhkit_core::tiler::{merge_tile_results, plan_tiles, tile_dataset, TileManifest};
use bhkit_core::{builtin, parse_arch, serialize_arch, ArchSpec, TensorShape};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_CODES: &str = "\
Exit status:
  0  success
  2  usage error (bad flags or values)
  3  validation error (invalid architecture, annotations or parameters)
  4  rebalance search found no candidate within the tolerance
  5  I/O error (missing input, unwritable output)";

/// Backbone cost analysis, bottom-heavy rebalancing, size-stratified
/// detection evaluation and image tiling.
#[derive(Parser)]
#[command(name = "bhkit", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameters and MACs per stage and in total.
    Analyze(CostArgs),
    /// Share of MACs per stage, stride ladder and receptive fields.
    Profile(CostArgs),
    /// Search stage repeats for a bottom-heavy variant at equal MACs.
    Rebalance(RebalanceArgs),
    /// Stage shares, params and GFLOPs of two architectures side by side.
    Compare(CompareArgs),
    /// Size-stratified mAP of COCO-style detections.
    Eval(EvalArgs),
    /// Overlapping tile plans, annotation splitting and result merging.
    #[command(subcommand)]
    Tile(TileCommand),
    /// Print an architecture as a canonical TOML config.
    Config(ConfigArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Args)]
struct Output {
    /// Report format.
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// Builtin name or config path (".toml" may be omitted).
    #[arg(long, value_name = "PATH|NAME")]
    arch: String,
    /// Input tensor as CxHxW.
    #[arg(long, value_name = "CxHxW", default_value = "3x640x512")]
    shape: TensorShape,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct RebalanceArgs {
    #[arg(long, value_name = "PATH|NAME")]
    arch: String,
    #[arg(long, value_name = "CxHxW", default_value = "3x640x512")]
    shape: TensorShape,
    /// Allowed relative MAC difference from the base.
    #[arg(long, value_name = "F", default_value_t = 0.02)]
    tolerance: f64,
    /// Inclusive repeat range applied to every stage.
    #[arg(long, value_name = "LO:HI", default_value = "1:16", value_parser = parse_bounds)]
    bounds: (u32, u32),
    /// Number of early stages; derived from the third halving when omitted.
    #[arg(long, value_name = "N")]
    pivot: Option<usize>,
    /// Also score this repeat vector, e.g. 7,6,2,1.
    #[arg(long, value_name = "R,R,..", value_delimiter = ',')]
    reference: Option<Vec<u32>>,
    /// List every feasible candidate (CSV and JSON).
    #[arg(long)]
    all_feasible: bool,
    /// Write the winning architecture as a TOML config.
    #[arg(long, value_name = "PATH")]
    config_out: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct CompareArgs {
    /// Base and variant, in that order.
    #[arg(long, value_name = "PATH|NAME", num_args = 2, required = true)]
    arch: Vec<String>,
    #[arg(long, value_name = "CxHxW", default_value = "3x640x512")]
    shape: TensorShape,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct EvalArgs {
    /// COCO-style ground truth.
    #[arg(long, value_name = "PATH")]
    gt: PathBuf,
    /// COCO-style detection results.
    #[arg(long, value_name = "PATH")]
    pred: PathBuf,
    /// IoU threshold for a match.
    #[arg(long, value_name = "F", default_value_t = 0.5)]
    iou: f64,
    /// Size intervals as name:lo:hi,... (hi may be inf).
    #[arg(long, value_name = "SPEC")]
    intervals: Option<String>,
    #[command(flatten)]
    output: Output,
}

#[derive(Subcommand)]
enum TileCommand {
    /// Print the tile plan of one image as JSON.
    Plan {
        #[arg(long, value_name = "WxH", value_parser = parse_size)]
        image: (u32, u32),
        #[command(flatten)]
        tiling: Tiling,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Split COCO ground truth into per-tile files plus manifest.json.
    Split {
        #[arg(long, value_name = "PATH")]
        gt: PathBuf,
        #[command(flatten)]
        tiling: Tiling,
        /// Keep a clipped box when it retains at least this fraction of its area.
        #[arg(long, value_name = "F", default_value_t = 0.5)]
        retention: f64,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Map detections on tile images back to source images and apply NMS.
    Merge {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        #[arg(long, value_name = "F", default_value_t = 0.5)]
        nms: f64,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Tiling {
    #[arg(long, value_name = "WxH", default_value = "640x512", value_parser = parse_size)]
    tile: (u32, u32),
    #[arg(long, value_name = "N", default_value_t = 30)]
    overlap: u32,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_name = "PATH|NAME")]
    arch: String,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn parse_bounds(s: &str) -> Result<(u32, u32), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo: u32 = lo.trim().parse().map_err(|e| format!("{lo}: {e}"))?;
    let hi: u32 = hi.trim().parse().map_err(|e| format!("{hi}: {e}"))?;
    if lo == 0 || lo > hi {
        return Err(format!("need 1 <= LO <= HI, got {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or("expected WxH")?;
    let w: u32 = w.parse().map_err(|e| format!("{w}: {e}"))?;
    let h: u32 = h.parse().map_err(|e| format!("{h}: {e}"))?;
    if w == 0 || h == 0 {
        return Err("dimensions must be at least 1".into());
    }
    Ok((w, h))
}

enum Failure {
    Validation(String),
    Infeasible(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 3,
            Failure::Infeasible(_) => 4,
            Failure::Io(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Infeasible(m) | Failure::Io(m) => m,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// A builtin name wins; otherwise the path as given, then with ".toml" appended.
fn load_arch(spec: &str) -> Result<ArchSpec, Failure> {
    if let Ok(arch) = builtin(spec) {
        return Ok(arch);
    }
    let path = PathBuf::from(spec);
    let with_ext = PathBuf::from(format!("{spec}.toml"));
    let path = if path.is_file() {
        path
    } else if with_ext.is_file() {
        with_ext
    } else {
        return Err(Failure::Io(format!(
            "`{spec}` is neither a builtin nor a readable config file"
        )));
    };
    parse_arch(&read(&path)?).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn run_cost(args: &CostArgs, profile_only: bool) -> Result<(), Failure> {
    let arch = load_arch(&args.arch)?;
    let text = if profile_only {
        let p = profile(&arch, args.shape).map_err(invalid)?;
        match args.output.format {
            Format::Table => p.to_table(),
            Format::Json => p.to_json() + "\n",
            Format::Csv => p.to_csv(),
        }
    } else {
        let r = analyze(&arch, args.shape).map_err(invalid)?;
        match args.output.format {
            Format::Table => r.to_table(),
            Format::Json => r.to_json() + "\n",
            Format::Csv => r.to_csv(),
        }
    };
    emit(&text, args.output.out.as_deref())
}

fn run_rebalance(args: &RebalanceArgs) -> Result<(), Failure> {
    let base = load_arch(&args.arch)?;
    let mut problem = RebalanceProblem::new(base, args.shape)
        .with_bounds(args.bounds.0, args.bounds.1)
        .with_tolerance(args.tolerance);
    problem.pivot = args.pivot;
    problem.collect_feasible = args.all_feasible;
    let result = rebalance(&problem).map_err(|e| match e {
        RebalanceError::Infeasible { .. } => Failure::Infeasible(e.to_string()),
        e => invalid(e),
    })?;
    let reference = match &args.reference {
        Some(r) => Some(evaluate_candidate(&problem, r).map_err(invalid)?),
        None => None,
    };
    let text = match args.output.format {
        Format::Table => {
            let mut t = result.to_table();
            if let Some(c) = &reference {
                let repeats: Vec<String> = c.repeats.iter().map(u32::to_string).collect();
                t += &format!(
                    "{:<22} {}: early share {:.4}, parity error {:.4}%, params {:.2}M{}\n",
                    "reference",
                    repeats.join(","),
                    c.early_share,
                    c.parity_error * 100.0,
                    c.params as f64 / 1e6,
                    if c.repeats == result.repeats {
                        " (winner)"
                    } else {
                        ""
                    }
                );
            }
            t
        }
        Format::Json => {
            let mut v = serde_json::to_value(&result).map_err(invalid)?;
            if let Some(c) = &reference {
                v["reference"] = serde_json::to_value(c).map_err(invalid)?;
            }
            serde_json::to_string_pretty(&v).map_err(invalid)? + "\n"
        }
        Format::Csv => result.to_csv(),
    };
    if let Some(path) = &args.config_out {
        write(path, &serialize_arch(&result.bh_arch).map_err(invalid)?)?;
    }
    emit(&text, args.output.out.as_deref())
}

fn run_compare(args: &CompareArgs) -> Result<(), Failure> {
    let base = load_arch(&args.arch[0])?;
    let variant = load_arch(&args.arch[1])?;
    let c = compare(&base, &variant, args.shape).map_err(invalid)?;
    let text = match args.output.format {
        Format::Table => c.to_table(),
        Format::Json => c.to_json() + "\n",
        Format::Csv => c.to_csv(),
    };
    emit(&text, args.output.out.as_deref())
}

fn run_eval(args: &EvalArgs) -> Result<(), Failure> {
    let gt = CocoDataset::from_json(&read(&args.gt)?)
        .map_err(|e| invalid(format!("{}: {e}", args.gt.display())))?;
    let preds = parse_results(&read(&args.pred)?)
        .map_err(|e| invalid(format!("{}: {e}", args.pred.display())))?;
    let intervals = match &args.intervals {
        Some(spec) => parse_intervals(spec).map_err(invalid)?,
        None => default_intervals(),
    };
    let result = evaluate(&preds, &gt.ground_truth(), &intervals, args.iou).map_err(invalid)?;
    let text = match args.output.format {
        Format::Table => result.to_table(),
        Format::Json => result.to_json() + "\n",
        Format::Csv => result.to_csv(),
    };
    emit(&text, args.output.out.as_deref())
}

fn run_tile(cmd: &TileCommand) -> Result<(), Failure> {
    match cmd {
        TileCommand::Plan { image, tiling, out } => {
            let plan = plan_tiles(
                image.0,
                image.1,
                tiling.tile.0,
                tiling.tile.1,
                tiling.overlap,
            )
            .map_err(invalid)?;
            emit(&(plan.to_json() + "\n"), out.as_deref())
        }
        TileCommand::Split {
            gt,
            tiling,
            retention,
            out,
        } => {
            let dataset = CocoDataset::from_json(&read(gt)?)
                .map_err(|e| invalid(format!("{}: {e}", gt.display())))?;
            let tiled = tile_dataset(
                &dataset,
                tiling.tile.0,
                tiling.tile.1,
                tiling.overlap,
                *retention,
            )
            .map_err(invalid)?;
            fs::create_dir_all(out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
            for (name, coco) in &tiled.files {
                write(&out.join(name), &(coco.to_json() + "\n"))?;
            }
            write(
                &out.join("manifest.json"),
                &(tiled.manifest.to_json() + "\n"),
            )?;
            println!(
                "{} tiles from {} images written to {}",
                tiled.files.len(),
                tiled.manifest.plans.len(),
                out.display()
            );
            Ok(())
        }
        TileCommand::Merge {
            manifest,
            pred,
            nms,
            out,
        } => {
            let m = TileManifest::from_json(&read(manifest)?)
                .map_err(|e| invalid(format!("{}: {e}", manifest.display())))?;
            let preds = parse_results(&read(pred)?)
                .map_err(|e| invalid(format!("{}: {e}", pred.display())))?;
            let merged = merge_tile_results(&m, &preds, *nms).map_err(invalid)?;
            let results: Vec<CocoResult> = merged.iter().map(CocoResult::from).collect();
            let text = serde_json::to_string_pretty(&results).map_err(invalid)? + "\n";
            emit(&text, out.as_deref())
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Analyze(args) => run_cost(args, false),
        Command::Profile(args) => run_cost(args, true),
        Command::Rebalance(args) => run_rebalance(args),
        Command::Compare(args) => run_compare(args),
        Command::Eval(args) => run_eval(args),
        Command::Tile(cmd) => run_tile(cmd),
        Command::Config(args) => {
            let arch = load_arch(&args.arch)?;
            emit(
                &serialize_arch(&arch).map_err(invalid)?,
                args.out.as_deref(),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
