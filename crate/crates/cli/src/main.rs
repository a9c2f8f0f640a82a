use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dprisk::accountant::{calibrate_sigma, epsilon_for, PrivacyParams};
use dprisk::config::{parse_eps_list, ExperimentConfig};
use dprisk::container::Container;
use dprisk::imprint::detect_imprint;
use dprisk::pipeline::{self, Budget, CellRecord, Prepared, Stages};
use dprisk::report::{curves_svg, emit_report, Format};
use dprisk::rero::{bounds_for, ReroParams};
use dprisk::trainer::Model;
use dprisk::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dprisk", version, about = "Privacy-risk profiles for differentially private training")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Comma-separated budgets, e.g. `1,8,32,1e9`.
    #[arg(long, global = true)]
    eps: Option<String>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// json, csv, svg or all.
    #[arg(long, global = true, default_value = "all")]
    format: String,
    /// Extra `key=value` overrides in configuration syntax.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Noise multiplier for each budget, and the ε it actually spends.
    Calibrate,
    /// Worst-case and relaxed reconstruction bounds.
    Bounds {
        /// Prior success probability; `1/n_train` by default.
        #[arg(long)]
        kappa: Option<f64>,
    },
    /// Train every (budget, seed) cell and store records and models.
    Train {
        #[arg(long)]
        budget: Option<String>,
    },
    /// Run the imprint attack for stored or fresh cells.
    Attack {
        /// A single budget, e.g. `8` or `nonprivate`.
        #[arg(long)]
        budget: Option<String>,
    },
    /// Assemble the risk profile from stored cell records.
    Report,
    /// Cumulative reconstruction-error curves only.
    Curves,
    /// Check a stored model for an imprint block.
    Detect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Train, attack and report in one go.
    Run,
    /// Write the generated dataset to a container file.
    Generate,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = std::result::Result<bool, Failure>;

/// `println!` that tolerates a closed stdout, e.g. when piped into `head`.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_PARTIAL),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_text(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seeds {
        cfg.seeds = s;
    }
    if let Some(e) = &c.eps {
        cfg.epsilons = parse_eps_list(e)?;
    }
    if let Some(d) = c.delta {
        cfg.delta = d;
    }
    if let Some(p) = c.parallel {
        cfg.parallel = p;
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("dprisk-out"))
}

fn execute(cli: Cli) -> Outcome {
    let format = Format::parse(&cli.common.format)
        .ok_or_else(|| Failure::Usage(format!("--format must be json, csv, svg or all, got {:?}", cli.common.format)))?;
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Calibrate => calibrate(&cfg),
        Command::Bounds { kappa } => bounds(&cfg, kappa),
        Command::Train { budget } => stage(&cfg, budget.as_deref(), Stages { train: true, attack: false }),
        Command::Attack { budget } => stage(&cfg, budget.as_deref(), Stages { train: false, attack: true }),
        Command::Report => report(&cfg, format),
        Command::Curves => curves(&cfg),
        Command::Detect { model } => detect(&model),
        Command::Run => {
            let ok = stage(&cfg, None, Stages::ALL)?;
            Ok(report(&cfg, format)? && ok)
        }
        Command::Generate => generate(&cfg),
    }
}

fn training_schedule(cfg: &ExperimentConfig, prep: &Prepared) -> (f64, u64) {
    let n = prep.n_train();
    let q = (cfg.train.batch_size as f64 / n as f64).min(1.0);
    (q, cfg.train.epochs as u64 * n.div_ceil(cfg.train.batch_size) as u64)
}

fn calibrate(cfg: &ExperimentConfig) -> Outcome {
    let prep = Prepared::new(cfg)?;
    let (q, steps) = training_schedule(cfg, &prep);
    out!("# q = {q}, steps = {steps}, delta = {}", cfg.delta);
    out!("epsilon,noise_multiplier,achieved_epsilon");
    let mut ok = true;
    for &eps in &cfg.epsilons {
        match calibrate_sigma(eps, cfg.delta, q, steps).and_then(|s| Ok((s, epsilon_for(s, q, steps, cfg.delta)?))) {
            Ok((sigma, spent)) => out!("{eps},{sigma},{}", spent.epsilon),
            Err(e) => {
                ok = false;
                eprintln!("epsilon {eps}: {e}");
            }
        }
    }
    Ok(ok)
}

fn bounds(cfg: &ExperimentConfig, kappa: Option<f64>) -> Outcome {
    let prep = Prepared::new(cfg)?;
    let (q, steps) = training_schedule(cfg, &prep);
    let kappa = kappa.unwrap_or_else(|| prep.kappa(cfg));
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Failure::Usage(format!("--kappa must lie in (0, 1], got {kappa}")));
    }
    out!("epsilon,noise_multiplier,worst_case,relaxed");
    for &eps in &cfg.epsilons {
        let sigma = calibrate_sigma(eps, cfg.delta, q, steps)?;
        let params = PrivacyParams {
            noise_multiplier: sigma,
            clip_norm: cfg.clip_norm,
            sampling_rate: q,
            steps,
            delta: cfg.delta,
        };
        let (w, r) = bounds_for(&ReroParams::new(params, kappa))?;
        out!("{eps},{sigma},{},{}", w.gamma, r.gamma);
    }
    Ok(true)
}

fn cells_dir(out: &Path) -> PathBuf {
    out.join("cells")
}

fn model_path(out: &Path, record: &CellRecord) -> PathBuf {
    out.join("models").join(record.file_name().replace(".json", ".dprk"))
}

fn load_cells(out: &Path) -> Result<Vec<CellRecord>, Failure> {
    let dir = cells_dir(out);
    let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(e) => return Err(Failure::Runtime(format!("{}: {e}", dir.display()))),
    };
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            CellRecord::from_json(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Runs one or both stages for the selected budgets and persists results.
fn stage(cfg: &ExperimentConfig, budget: Option<&str>, stages: Stages) -> Outcome {
    let out = out_dir(cfg);
    let prep = Prepared::new(cfg)?;
    let budgets = match budget {
        Some(b) => vec![Budget::parse(b)?],
        None => pipeline::budgets(cfg),
    };
    fs::create_dir_all(cells_dir(&out))?;
    fs::create_dir_all(out.join("models"))?;
    fs::create_dir_all(out.join("reconstructions"))?;
    let mut ok = true;
    for b in budgets {
        for seed in pipeline::seeds(cfg) {
            let mut record = CellRecord::new(b, seed);
            let path = cells_dir(&out).join(record.file_name());
            if path.exists() && !stages.train {
                record = CellRecord::from_json(&fs::read_to_string(&path)?)?;
                record.errors.retain(|e| !e.starts_with("attack:"));
            }
            let stored = if stages.train {
                None
            } else {
                let mp = model_path(&out, &record);
                if mp.exists() {
                    Some(Model::from_container(&Container::load(&mp)?)?)
                } else {
                    None
                }
            };
            let result = pipeline::run_cell(cfg, &prep, b, seed, stages, stored.as_ref());
            if stages.train {
                record = result.record;
            } else {
                record.attack = result.record.attack;
                record.errors.extend(result.record.errors);
            }
            if let Some(m) = &result.model {
                m.to_container()?.save(&model_path(&out, &record))?;
            }
            if let Some(c) = &result.campaign {
                let name = record.file_name().replace(".json", ".dprk");
                c.to_container()?.save(&out.join("reconstructions").join(name))?;
            }
            if !record.errors.is_empty() {
                ok = false;
                for e in &record.errors {
                    eprintln!("{} seed {seed}: {e}", b.id());
                }
            }
            fs::write(&path, record.to_json()?)?;
            if let Some(a) = &record.attack {
                let csv = dprisk::evalrecon::matches_to_csv(&a.matches);
                fs::write(out.join("reconstructions").join(record.file_name().replace(".json", ".csv")), csv)?;
            }
        }
    }
    Ok(ok)
}

fn report(cfg: &ExperimentConfig, format: Format) -> Outcome {
    let out = out_dir(cfg);
    let prep = Prepared::new(cfg)?;
    let cells = load_cells(&out)?;
    if cells.is_empty() {
        return Err(Failure::Runtime(format!("no cell records under {}", cells_dir(&out).display())));
    }
    let profile = pipeline::assemble(cfg, &prep, &cells)?;
    for p in emit_report(&profile, &out, format)? {
        out!("{}", p.display());
    }
    print_table(&profile);
    Ok(!profile.has_failures())
}

fn print_table(profile: &pipeline::RiskProfile) {
    eprintln!("{:>12} {:>10} {:>10} {:>10}  utility", "epsilon", "worst", "relaxed", "realistic");
    for r in &profile.rows {
        let util: Vec<String> = r
            .utility
            .iter()
            .map(|m| format!("{}={:.4}±{:.4}", m.name, m.mean, m.sd))
            .collect();
        eprintln!(
            "{:>12} {:>10.4} {:>10.4} {:>10.4}  {}{}",
            r.epsilon.render(),
            r.worst_case,
            r.relaxed,
            r.realistic,
            util.join(" "),
            if r.failed() { "  [failed]" } else { "" }
        );
    }
}

fn curves(cfg: &ExperimentConfig) -> Outcome {
    let out = out_dir(cfg);
    let prep = Prepared::new(cfg)?;
    let profile = pipeline::assemble(cfg, &prep, &load_cells(&out)?)?;
    for c in &profile.curves {
        let p = out.join(format!("curve_{}.csv", c.epsilon.id()));
        fs::write(&p, c.curve.to_csv())?;
        out!("{}", p.display());
    }
    let p = out.join("curves.svg");
    fs::write(&p, curves_svg(&profile.curves))?;
    out!("{}", p.display());
    Ok(true)
}

fn detect(path: &Path) -> Outcome {
    let model = Model::from_container(&Container::load(path)?)?;
    if detect_imprint(&model) {
        out!("imprint detected");
    } else {
        out!("clean");
    }
    Ok(true)
}

fn generate(cfg: &ExperimentConfig) -> Outcome {
    let out = out_dir(cfg);
    fs::create_dir_all(&out)?;
    let data = dprisk::datagen::generate(&cfg.dataset)?;
    let p = out.join("dataset.dprk");
    data.to_container()?.save(&p)?;
    out!("{}", p.display());
    Ok(true)
}
