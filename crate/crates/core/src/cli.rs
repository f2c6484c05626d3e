//! Command-line front end. Every command resolves its settings from built-in
//! defaults, then an optional `key=value` file, then flags, and prints the
//! result before doing any work.
//!
//! Exit codes: 0 success, 2 usage or validation, 3 I/O, 4 corrupt data,
//! 5 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;

use crate::attention::{FlopRow, FLOP_CSV_HEADER};
use crate::data::{self, Dataset};
use crate::diagnostics::{self, Scope};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::params::ParameterStore;
use crate::retinex::{DegradationConfig, OrfMode};
use crate::train::{self, Schedule, TrainConfig, Trainer, LOG_CSV_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// Environment variable that requests deterministic kernels.
pub const DETERMINISTIC_ENV: &str = "RXF_DETERMINISTIC";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Shape(_) | Error::Config(_) | Error::Usage(_) => EXIT_USAGE,
        Error::Io(_) | Error::Format { .. } => EXIT_IO,
        Error::Corrupt { .. } => EXIT_CORRUPT,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}

#[derive(Parser, Debug)]
#[command(name = "retinexformer", version, about = "Low-light enhancement with an illumination-guided transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade clean PPM images (or procedural ones) into a paired dataset.
    SynthData(SynthArgs),
    /// Train on a paired dataset and write a weight file.
    Train(TrainArgs),
    /// Enhance one PPM file or every PPM in a directory.
    Enhance(EnhanceArgs),
    /// Score a dataset and write a per-image metric CSV.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Print attention cost formulas next to measured counts.
    Flops(FlopsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory of clean P6 images; procedural images are used when absent.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    sigma: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lmin: Option<f64>,
    #[arg(long)]
    perturbation: Option<f64>,
    /// Side of procedural clean images.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelFlags {
    #[arg(long)]
    base_channels: Option<usize>,
    /// Heads per scale, e.g. `1,2,4`.
    #[arg(long)]
    heads: Option<String>,
    /// IGABs per stage, e.g. `1,2,2`.
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    fixed_positional: Option<bool>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_weights: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Held-out dataset evaluated periodically.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// no_orf, divide_L, lightup_map or lightup_map_plus_flu.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    aux_lit_loss: Option<bool>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Input PPM file or directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output PPM file or directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// ops, layers, blocks or network; all scopes when omitted.
    #[arg(long)]
    scope: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// Grid point `HxW,C,k`; repeatable. A 12-point default grid is used when omitted.
    #[arg(long, num_args = 1..)]
    grid: Vec<String>,
}

/// Ordered key/value settings with their sources merged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: IndexMap<String, String>,
}

impl Settings {
    pub fn with_defaults(defaults: &[(&str, String)]) -> Self {
        Settings { values: defaults.iter().map(|(k, v)| (k.to_string(), v.clone())).collect() }
    }

    /// Applies a `key=value` text file. `#` starts a comment; unknown keys are rejected.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("config line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim().to_string())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: Option<&Path>) -> Result<()> {
        match path {
            Some(p) => self.apply_file_text(&fs::read_to_string(p)?),
            None => Ok(()),
        }
    }

    pub fn set(&mut self, key: &str, value: String) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::usage(format!("unknown setting `{key}`"))),
        }
    }

    fn flag<T: ToString>(&mut self, key: &str, value: &Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.values.get(key).ok_or_else(|| Error::usage(format!("unknown setting `{key}`")))?;
        raw.parse().map_err(|_| Error::usage(format!("invalid value `{raw}` for `{key}`")))
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

fn parse_triple(s: &str, key: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::usage(format!("`{key}` expects three comma-separated integers, got `{s}`")))?;
    parts
        .try_into()
        .map_err(|_| Error::usage(format!("`{key}` expects three comma-separated integers, got `{s}`")))
}

fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

fn announce(settings: &Settings) {
    eprint!("{}", settings.render());
    eprintln!("deterministic={}", deterministic() as u8);
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    Ok(files)
}

fn synth_data(args: SynthArgs) -> Result<()> {
    let d = DegradationConfig::default();
    let mut s = Settings::with_defaults(&[
        ("count", "10".into()),
        ("sigma", d.noise_sigma.to_string()),
        ("lmin", d.illumination_min.to_string()),
        ("perturbation", d.illumination_perturbation.to_string()),
        ("size", "64".into()),
        ("seed", "0".into()),
    ]);
    s.apply_file(args.config.as_deref())?;
    s.flag("count", &args.count)?;
    s.flag("sigma", &args.sigma)?;
    s.flag("lmin", &args.lmin)?;
    s.flag("perturbation", &args.perturbation)?;
    s.flag("size", &args.size)?;
    s.flag("seed", &args.seed)?;
    announce(&s);
    let cfg = DegradationConfig {
        noise_sigma: s.get("sigma")?,
        illumination_min: s.get("lmin")?,
        illumination_perturbation: s.get("perturbation")?,
        ..d
    };
    cfg.validate()?;
    let (count, seed, size): (usize, u64, usize) = (s.get("count")?, s.get("seed")?, s.get("size")?);
    if count == 0 {
        return Err(Error::usage("count must be positive"));
    }
    let cleans = match &args.clean_dir {
        Some(dir) => {
            let files = ppm_files(dir)?;
            if files.is_empty() {
                return Err(Error::usage(format!("no .ppm images in {}", dir.display())));
            }
            files.iter().map(data::load_image).collect::<Result<Vec<_>>>()?
        }
        None => {
            if size == 0 {
                return Err(Error::usage("size must be positive"));
            }
            Vec::new()
        }
    };
    let mut set = Dataset::default();
    for i in 0..count {
        let clean = if cleans.is_empty() {
            data::procedural_clean(size, size, data::derive_seed(seed, 2 * i as u64))
        } else {
            cleans[i % cleans.len()].clone()
        };
        let pair = data::synth_pair(&clean, &cfg, data::derive_seed(seed, 2 * i as u64 + 1))?;
        set.push(format!("{i:04}"), pair);
    }
    set.save(&args.out_dir)?;
    println!("wrote {count} pairs to {}", args.out_dir.display());
    Ok(())
}

fn model_defaults(m: &ModelConfig) -> Vec<(&'static str, String)> {
    let triple = |a: [usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
    vec![
        ("base_channels", m.base_channels.to_string()),
        ("heads", triple(m.heads)),
        ("blocks", triple(m.blocks)),
        ("crop_size", m.crop_size.to_string()),
        ("fixed_positional", m.fixed_positional.to_string()),
    ]
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let t = TrainConfig::default();
    let mut defaults = vec![
        ("steps", t.schedule.total_steps.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("lr_start", t.schedule.lr_start.to_string()),
        ("lr_end", t.schedule.lr_end.to_string()),
        ("seed", t.seed.to_string()),
        ("mode", t.mode.name().to_string()),
        ("augment", t.augment.to_string()),
        ("aux_lit_loss", t.aux_lit_loss.to_string()),
        ("eval_every", t.eval_every.to_string()),
        ("checkpoint_every", t.checkpoint_every.to_string()),
    ];
    defaults.extend(model_defaults(&t.model));
    let mut s = Settings::with_defaults(&defaults);
    s.apply_file(args.config.as_deref())?;
    s.flag("steps", &args.steps)?;
    s.flag("batch_size", &args.batch_size)?;
    s.flag("lr_start", &args.lr_start)?;
    s.flag("lr_end", &args.lr_end)?;
    s.flag("seed", &args.seed)?;
    s.flag("mode", &args.mode)?;
    s.flag("augment", &args.augment)?;
    s.flag("aux_lit_loss", &args.aux_lit_loss)?;
    s.flag("eval_every", &args.eval_every)?;
    s.flag("checkpoint_every", &args.checkpoint_every)?;
    s.flag("base_channels", &args.model.base_channels)?;
    s.flag("heads", &args.model.heads)?;
    s.flag("blocks", &args.model.blocks)?;
    s.flag("crop_size", &args.model.crop_size)?;
    s.flag("fixed_positional", &args.model.fixed_positional)?;
    announce(&s);

    let model = ModelConfig {
        base_channels: s.get("base_channels")?,
        heads: parse_triple(&s.get::<String>("heads")?, "heads")?,
        blocks: parse_triple(&s.get::<String>("blocks")?, "blocks")?,
        crop_size: s.get("crop_size")?,
        fixed_positional: s.get("fixed_positional")?,
    };
    let config = TrainConfig {
        model,
        mode: OrfMode::parse(&s.get::<String>("mode")?)?,
        schedule: Schedule::new(s.get("lr_start")?, s.get("lr_end")?, s.get("steps")?)?,
        batch_size: s.get("batch_size")?,
        seed: s.get("seed")?,
        augment: s.get("augment")?,
        aux_lit_loss: s.get("aux_lit_loss")?,
        eval_every: s.get("eval_every")?,
        checkpoint: Some(args.out_weights.clone()),
        checkpoint_every: s.get("checkpoint_every")?,
    };
    config.validate()?;
    let set = Dataset::load(&args.data)?;
    if set.is_empty() {
        return Err(Error::usage(format!("dataset {} is empty", args.data.display())));
    }
    let held_out = args.eval_data.as_ref().map(Dataset::load).transpose()?;
    let mut log = String::from(LOG_CSV_HEADER);
    log.push('\n');
    let mut trainer = Trainer::new(config)?;
    let result = trainer.run(&set.pairs, held_out.as_ref(), |row| {
        log.push_str(&row.to_csv());
        log.push('\n');
        if row.step % 100 == 0 || row.eval_psnr.is_some() {
            eprintln!("{}", row.to_csv());
        }
    });
    if let Some(path) = &args.log {
        fs::write(path, &log)?;
    }
    result?;
    println!("wrote {}", args.out_weights.display());
    Ok(())
}

fn load_model(weights: &Path) -> Result<(ParameterStore<f32>, ModelConfig)> {
    let store = ParameterStore::load(weights)?;
    let model = ModelConfig::from_store(&store)?;
    Ok((store, model))
}

fn mode_settings(config: Option<&Path>, mode: &Option<String>) -> Result<Settings> {
    let mut s = Settings::with_defaults(&[("mode", OrfMode::Full.name().to_string())]);
    s.apply_file(config)?;
    s.flag("mode", mode)?;
    Ok(s)
}

fn enhance_cmd(args: EnhanceArgs) -> Result<()> {
    let s = mode_settings(args.config.as_deref(), &args.mode)?;
    announce(&s);
    let mode = OrfMode::parse(&s.get::<String>("mode")?)?;
    let (store, model) = load_model(&args.weights)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if args.input.is_dir() {
        fs::create_dir_all(&args.out)?;
        ppm_files(&args.input)?
            .into_iter()
            .map(|p| {
                let out = args.out.join(p.file_name().expect("file path"));
                (p, out)
            })
            .collect()
    } else {
        vec![(args.input.clone(), args.out.clone())]
    };
    if jobs.is_empty() {
        return Err(Error::usage(format!("no .ppm images in {}", args.input.display())));
    }
    for (src, dst) in jobs {
        let image = data::load_image(&src)?;
        let out = train::enhance(&store, &model, mode, &image)?;
        data::save_image(&out.enhanced, &dst)?;
        println!("{} -> {}", src.display(), dst.display());
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let s = mode_settings(args.config.as_deref(), &args.mode)?;
    announce(&s);
    let mode = OrfMode::parse(&s.get::<String>("mode")?)?;
    let (store, model) = load_model(&args.weights)?;
    let set = Dataset::load(&args.data)?;
    if set.is_empty() {
        return Err(Error::usage(format!("dataset {} is empty", args.data.display())));
    }
    let rows = train::evaluate_pairs(&store, &model, mode, &set)?;
    fs::write(&args.report, train::metrics_csv(&rows))?;
    let m = train::summarize(&rows);
    println!(
        "input  PSNR {:.3} dB  SSIM {:.4}\noutput PSNR {:.3} dB  SSIM {:.4}",
        m.psnr_in, m.ssim_in, m.psnr_out, m.ssim_out
    );
    Ok(())
}

fn grad_check_cmd(args: GradCheckArgs) -> Result<bool> {
    let mut s = Settings::with_defaults(&[("scope", "all".into()), ("seed", "7".into())]);
    s.apply_file(args.config.as_deref())?;
    s.flag("scope", &args.scope)?;
    s.flag("seed", &args.seed)?;
    announce(&s);
    let scope: String = s.get("scope")?;
    let scopes = if scope == "all" { Scope::ALL.to_vec() } else { vec![Scope::parse(&scope)?] };
    let mut ok = true;
    println!("scope,target,max_rel_error,checked,threshold,status");
    for scope in scopes {
        for row in diagnostics::grad_check(scope, s.get("seed")?)? {
            ok &= row.passed();
            println!(
                "{},{},{:.3e},{},{:.0e},{}",
                scope.name(),
                row.target,
                row.max_rel_error,
                row.checked,
                scope.threshold(),
                if row.passed() { "pass" } else { "FAIL" }
            );
        }
    }
    Ok(ok)
}

/// Parses `HxW,C,k`.
pub fn parse_grid_point(s: &str) -> Result<(usize, usize, usize, usize)> {
    let bad = || Error::usage(format!("grid point `{s}` is not of the form HxW,C,k"));
    let mut parts = s.split(',');
    let (hw, c, k) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
    if parts.next().is_some() {
        return Err(bad());
    }
    let (h, w) = hw.split_once(['x', 'X']).ok_or_else(bad)?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
    let point = (num(h)?, num(w)?, num(c)?, num(k)?);
    if point.0 == 0 || point.1 == 0 || point.2 == 0 {
        return Err(bad());
    }
    Ok(point)
}

fn flops_cmd(args: FlopsArgs) -> Result<()> {
    let grid = if args.grid.is_empty() {
        diagnostics::default_flop_grid()
    } else {
        args.grid.iter().map(|g| parse_grid_point(g)).collect::<Result<_>>()?
    };
    let mut s = Settings::with_defaults(&[("grid", String::new())]);
    s.set("grid", grid.iter().map(|(h, w, c, k)| format!("{h}x{w},{c},{k}")).collect::<Vec<_>>().join(" "))?;
    announce(&s);
    println!("{FLOP_CSV_HEADER}");
    for (h, w, c, k) in grid {
        println!("{}", FlopRow::compute(h, w, c, k)?.to_csv());
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::SynthData(a) => synth_data(a).map(|_| EXIT_OK),
        Command::Train(a) => train_cmd(a).map(|_| EXIT_OK),
        Command::Enhance(a) => enhance_cmd(a).map(|_| EXIT_OK),
        Command::Eval(a) => eval_cmd(a).map(|_| EXIT_OK),
        Command::GradCheck(a) => grad_check_cmd(a).map(|ok| if ok { EXIT_OK } else { EXIT_NUMERIC }),
        Command::Flops(a) => flops_cmd(a).map(|_| EXIT_OK),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_precedence() {
        let mut s = Settings::with_defaults(&[("steps", "10".into()), ("seed", "0".into())]);
        s.apply_file_text("# comment\nsteps = 20\n\nseed=3 # trailing\n").unwrap();
        s.flag("steps", &Some(30)).unwrap();
        assert_eq!(s.get::<usize>("steps").unwrap(), 30);
        assert_eq!(s.get::<u64>("seed").unwrap(), 3);
        assert!(s.apply_file_text("bogus=1").is_err());
        assert!(s.apply_file_text("no equals sign").is_err());
        assert!(s.get::<usize>("seed").is_ok());
        s.set("seed", "x".into()).unwrap();
        assert!(matches!(s.get::<u64>("seed"), Err(Error::Usage(_))));
    }

    #[test]
    fn grid_points() {
        assert_eq!(parse_grid_point("16x16,8,2").unwrap(), (16, 16, 8, 2));
        assert!(parse_grid_point("16,8,2").is_err());
        assert!(parse_grid_point("16x16,8").is_err());
        assert!(parse_grid_point("0x16,8,2").is_err());
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(exit_code(&Error::usage("x")), 2);
        assert_eq!(exit_code(&Error::format(3, "x")), 3);
        assert_eq!(exit_code(&Error::corrupt("magic", "x")), 4);
        assert_eq!(exit_code(&Error::numeric("x")), 5);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["retinexformer", "flops", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["retinexformer", "--help"]), EXIT_OK);
    }
}
