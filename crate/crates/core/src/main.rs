use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::BigRational;

use pd4g::asset::{LayerId, MaskBank};
use pd4g::bitstream::{decode_prefix, encode, manifest};
use pd4g::config::RunConfig;
use pd4g::error::Error;
use pd4g::stream::{
    emit_abr_manifest, latency_table, parse_decimal, parse_sizes_csv, simulate, table6, to_f64,
    BandwidthTrace, StallPolicy, TABLE6_BANDWIDTHS_MBPS,
};
use pd4g::toyscene::{make_scene_with, train_masks};
use pd4g::verify::{report, run_all, run_criterion, VerifyOptions};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;
/// The trace ran out before every layer arrived.
const EXIT_INCOMPLETE: u8 = 4;

#[derive(Parser)]
#[command(name = "pd4g", version, about = "Layered dynamic-splat codec, mask trainer and streaming simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train masks on the configured toy scene.
    Train,
    /// Encode a trained mask bank into a .pd4g container.
    Encode {
        /// Mask bank JSON written by `train` (default: <out>/masks.json).
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Decode a (possibly truncated) container and report what it holds.
    Inspect { file: PathBuf },
    /// Stream a container over a bandwidth trace.
    Simulate {
        file: PathBuf,
        /// CSV of `duration_s,mbps` segments; `inf` is allowed as the last duration.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Stall::Freeze)]
        stall: Stall,
    },
    /// First-frame latency table for a list of payload sizes.
    LatencyTable {
        /// CSV of `method,s_first_mb` rows (default: the bundled reference sizes).
        #[arg(long)]
        sizes: Option<PathBuf>,
        /// Bandwidths in Mbps.
        #[arg(long, value_delimiter = ',', default_values_t = TABLE6_BANDWIDTHS_MBPS.map(String::from))]
        bandwidths: Vec<String>,
    },
    /// Run the acceptance suite.
    Verify {
        /// Only these criteria (repeatable).
        #[arg(long = "criterion")]
        criteria: Vec<u8>,
        #[arg(long, hide = true)]
        corrupt_entropy: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stall {
    Freeze,
    Silent,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::TrainingFailure { .. } | Error::Overflow { .. } | Error::Io(_) => EXIT_RUNTIME,
            _ => EXIT_VALIDATION,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_RUNTIME, message: format!("{}: {e}", path.display()) }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, data).map_err(|e| io_err(path, e))
}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn load(common: &Common) -> Result<Ctx, Failure> {
        let mut config = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            config.seed = s;
        }
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&config.out_dir));
        Ok(Ctx { config, out })
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        Ok(&self.out)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let ctx = Ctx::load(&cli.common)?;
    match cli.command {
        Command::Train => cmd_train(&ctx),
        Command::Encode { masks } => cmd_encode(&ctx, masks),
        Command::Inspect { file } => cmd_inspect(&file),
        Command::Simulate { file, trace, stall } => cmd_simulate(&ctx, &file, &trace, stall),
        Command::LatencyTable { sizes, bandwidths } => cmd_latency_table(&ctx, sizes, &bandwidths),
        Command::Verify { criteria, corrupt_entropy } => cmd_verify(&ctx, &criteria, corrupt_entropy),
    }
}

fn scene(config: &RunConfig) -> Result<pd4g::toyscene::ToyScene, Failure> {
    Ok(make_scene_with(
        config.scene_kind,
        config.anchor_count,
        config.timestep_count,
        config.seed,
        &config.scene_params(),
    )?)
}

fn cmd_train(ctx: &Ctx) -> Result<u8, Failure> {
    let c = &ctx.config;
    let scene = scene(c)?;
    let (bank, report) = train_masks(&scene, &c.loss_weights(), &c.rollout(), &c.train_settings(), c.seed)?;
    let out = ctx.out_dir()?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&out.join("train_report.json"), json + "\n")?;
    write(&out.join("loss.csv"), report.loss_csv())?;
    write(&out.join("masks.json"), serde_json::to_string(&bank).expect("masks serialize") + "\n")?;
    let [p0, p1, p2] = report.psnr_db;
    let [a0, a1, a2] = report.active_counts;
    println!("scene {} seed {}: {} steps", report.scene_kind, report.seed, report.steps);
    println!("psnr_db {p0:.3} {p1:.3} {p2:.3}");
    println!("active {a0} {a1} {a2} of {}", report.anchor_count);
    println!("rho_ema {:.4}", report.final_rho_ema);
    Ok(0)
}

fn load_bank(path: &Path) -> Result<MaskBank, Failure> {
    let text = read_text(path)?;
    let raw: MaskBank = serde_json::from_str(&text)
        .map_err(|e| Failure { code: EXIT_VALIDATION, message: format!("{}: {e}", path.display()) })?;
    Ok(MaskBank::new(LayerId::ALL.map(|l| raw.level(l).to_vec()), raw.threshold())?)
}

fn cmd_encode(ctx: &Ctx, masks: Option<PathBuf>) -> Result<u8, Failure> {
    let c = &ctx.config;
    let masks = masks.unwrap_or_else(|| ctx.out.join("masks.json"));
    let bank = load_bank(&masks)?;
    let scene = scene(c)?;
    if bank.len() != scene.anchors.len() {
        return Err(Error::Dimension(format!(
            "mask bank holds {} anchors, configured scene has {}",
            bank.len(),
            scene.anchors.len()
        ))
        .into());
    }
    let bytes = encode(&scene.anchors, &bank, &scene.deformations, &c.encode_config())?;
    let m = manifest(&bytes)?;
    let out = ctx.out_dir()?;
    write(&out.join(&c.base_url), &bytes)?;
    write(&out.join("manifest.json"), m.to_json() + "\n")?;
    write(&out.join("abr.json"), emit_abr_manifest(&m, &c.base_url) + "\n")?;
    println!("header {} B", m.header_bytes);
    for (k, (layer, raw)) in m.layer_bytes.iter().zip(&m.raw_bytes).enumerate() {
        println!("layer {k} {layer} B ({raw} B raw), cumulative {} B", m.cumulative_bytes[k]);
    }
    println!("total {} B", m.total_bytes());
    Ok(0)
}

fn cmd_inspect(file: &Path) -> Result<u8, Failure> {
    let bytes = read(file)?;
    let model = decode_prefix(&bytes)?;
    let h = &model.header;
    println!("max_level {}", model.max_level.value());
    println!("anchors {} of {}", model.anchor_ids.len(), h.anchor_count);
    println!("timesteps {}", h.timestep_count);
    println!("preset {}", h.preset);
    for (k, c) in h.chunks.iter().enumerate() {
        let status = if k <= model.max_level.index() { "decoded" } else { "missing" };
        println!("chunk {k} layer {} {} B ({} B raw) {status}", c.layer, c.compressed_len, c.raw_len);
    }
    Ok(0)
}

fn cmd_simulate(ctx: &Ctx, file: &Path, trace: &Path, stall: Stall) -> Result<u8, Failure> {
    let bytes = read(file)?;
    let m = manifest(&bytes)?;
    let trace = BandwidthTrace::from_csv(&read_text(trace)?)?;
    let policy = match stall {
        Stall::Freeze => StallPolicy::Freeze,
        Stall::Silent => StallPolicy::Silent,
    };
    let timeline = simulate(&m, &trace, policy)?;

    let million = BigRational::from_integer(1_000_000.into());
    let sizes: Vec<(String, BigRational)> = m
        .cumulative_bytes
        .iter()
        .enumerate()
        .map(|(k, b)| (format!("layers 0-{k}"), BigRational::from_integer((*b).into()) / &million))
        .collect();
    let bands = parse_bandwidths(&TABLE6_BANDWIDTHS_MBPS.map(String::from))?;
    let table = latency_table(&sizes, &bands)?;

    let out = ctx.out_dir()?;
    write(&out.join("timeline.json"), timeline.to_json() + "\n")?;
    write(&out.join("latency.csv"), table.to_csv())?;

    match &timeline.first_frame_time {
        Some(t) => println!("first frame {:.6} s", to_f64(t)),
        None => println!("first frame never"),
    }
    for (k, t) in timeline.completion_times().iter().enumerate() {
        println!("layer {k} complete at {:.6} s", to_f64(t));
    }
    if timeline.is_complete() {
        Ok(0)
    } else {
        let level = timeline.final_level.map_or("none".to_string(), |l| l.value().to_string());
        eprintln!("stream incomplete: final level {level} of {}", timeline.layer_count - 1);
        Ok(EXIT_INCOMPLETE)
    }
}

fn parse_bandwidths(list: &[String]) -> Result<Vec<BigRational>, Failure> {
    Ok(list.iter().map(|b| parse_decimal(b.trim())).collect::<pd4g::error::Result<_>>()?)
}

fn cmd_latency_table(ctx: &Ctx, sizes: Option<PathBuf>, bandwidths: &[String]) -> Result<u8, Failure> {
    let bands = parse_bandwidths(bandwidths)?;
    let table = match sizes {
        None if bands == table6().bandwidths_mbps => table6(),
        None => latency_table(&table6().rows.into_iter().map(|r| (r.label, r.size_mb)).collect::<Vec<_>>(), &bands)?,
        Some(p) => latency_table(&parse_sizes_csv(&read_text(&p)?)?, &bands)?,
    };
    let out = ctx.out_dir()?;
    write(&out.join("latency.csv"), table.to_csv())?;
    print!("{table}");
    Ok(0)
}

fn cmd_verify(ctx: &Ctx, criteria: &[u8], corrupt_entropy: bool) -> Result<u8, Failure> {
    ctx.config.validate()?;
    let opts = VerifyOptions { config: ctx.config.clone(), corrupt_entropy };
    let outcomes = if criteria.is_empty() {
        run_all(&opts)
    } else {
        criteria.iter().map(|id| run_criterion(*id, &opts)).collect()
    };
    let text = report(&outcomes);
    print!("{text}");
    let out = ctx.out_dir()?;
    write(&out.join("verify.json"), serde_json::to_string_pretty(&outcomes).expect("outcomes serialize") + "\n")?;
    if outcomes.iter().all(|o| o.passed) {
        Ok(0)
    } else {
        Ok(EXIT_ACCEPTANCE)
    }
}
