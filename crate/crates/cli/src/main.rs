use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use epicorr::panel::save_panel;
use epicorr::pipeline::{run_from_matrices, run_pipeline, PipelineConfig, RunManifest};
use epicorr::synth::{synth_panel, total_incidence, SynthConfig};

#[derive(Parser, Debug)]
#[command(
    name = "epicorr",
    version,
    about = "Correlation-regime analysis of regional daily-count panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full pipeline from a config file.
    Analyze {
        /// Flat `key = value` config file.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic panel with planted correlation regimes.
    Synth {
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        seed: u64,
        /// Output CSV (dates as rows).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().n_regions)]
        regions: usize,
        #[arg(long, default_value_t = SynthConfig::default().n_days)]
        days: usize,
        /// Also write the daily column sums as `date,total` for the strip overlay.
        #[arg(long)]
        incidence: Option<PathBuf>,
    },
    /// Rerun clustering, symbolic dynamics and spectra from a saved `matrices.json`.
    Spectra {
        #[arg(long = "from")]
        from: PathBuf,
        /// Reuse a saved `clustering.json` instead of reclustering.
        #[arg(long)]
        clustering: Option<PathBuf>,
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// One flag per config key; a flag wins over the file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    skip_columns: Option<String>,
    #[arg(long)]
    drop_regions: Option<String>,
    #[arg(long)]
    clip_negative_to_zero: Option<String>,
    /// Comma-separated `low:center:high` triples, or `default`.
    #[arg(long)]
    bands: Option<String>,
    /// `hard_zero` or `cosine_taper[:fraction]`.
    #[arg(long)]
    filter_mode: Option<String>,
    #[arg(long)]
    returns_guard: Option<String>,
    #[arg(long)]
    absolute_returns: Option<String>,
    /// `error` or `neutralize`.
    #[arg(long)]
    zero_variance: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    overlap: Option<String>,
    #[arg(short, long)]
    k: Option<String>,
    #[arg(long)]
    n_restarts: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    max_iter: Option<String>,
    /// Inclusive range such as `2-8`, or `none`.
    #[arg(long)]
    k_scan: Option<String>,
    #[arg(long)]
    bins_empirical: Option<String>,
    #[arg(long)]
    bins_wishart: Option<String>,
    /// Per-cluster list such as `17,8,8,5`.
    #[arg(long)]
    bins_mp: Option<String>,
    #[arg(long)]
    wishart_samples: Option<String>,
    #[arg(long)]
    mp_q: Option<String>,
    #[arg(short, long)]
    output_dir: Option<String>,
    #[arg(long)]
    incidence: Option<String>,
    #[arg(long)]
    figures: Option<String>,
    /// Generic `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let named = [
            ("input", &self.input),
            ("layout", &self.layout),
            ("skip_columns", &self.skip_columns),
            ("drop_regions", &self.drop_regions),
            ("clip_negative_to_zero", &self.clip_negative_to_zero),
            ("bands", &self.bands),
            ("filter_mode", &self.filter_mode),
            ("returns_guard", &self.returns_guard),
            ("absolute_returns", &self.absolute_returns),
            ("zero_variance", &self.zero_variance),
            ("window", &self.window),
            ("overlap", &self.overlap),
            ("k", &self.k),
            ("n_restarts", &self.n_restarts),
            ("seed", &self.seed),
            ("tol", &self.tol),
            ("max_iter", &self.max_iter),
            ("k_scan", &self.k_scan),
            ("bins_empirical", &self.bins_empirical),
            ("bins_wishart", &self.bins_wishart),
            ("bins_mp", &self.bins_mp),
            ("wishart_samples", &self.wishart_samples),
            ("mp_q", &self.mp_q),
            ("output_dir", &self.output_dir),
            ("incidence", &self.incidence),
            ("figures", &self.figures),
        ];
        named
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    fn apply(&self, config: &mut PipelineConfig) -> Result<()> {
        for (key, value) in self.pairs() {
            config.set(key, value)?;
        }
        for item in &self.set {
            let Some((key, value)) = item.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{item}`");
            };
            config.set(key.trim(), value)?;
        }
        Ok(())
    }
}

fn build_config(path: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut config = match path {
        Some(p) => PipelineConfig::from_file(p)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut config)?;
    Ok(config)
}

fn report(manifest: &RunManifest, out: &Path) {
    for (stage, elapsed) in &manifest.timings {
        log::info!("{stage:<11} {:>9.3} s", elapsed.as_secs_f64());
    }
    let s = &manifest.summary;
    println!(
        "{} epochs, k = {}, inertia = {:.6}, {} spectra; manifest at {}",
        s.n_epochs,
        s.k,
        s.inertia,
        s.n_spectra,
        out.join(epicorr::pipeline::MANIFEST_FILE).display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze { config, overrides } => {
            let config = build_config(config.as_deref(), &overrides)?;
            let manifest = run_pipeline(&config)?;
            report(&manifest, &config.output_dir);
        }
        Command::Synth {
            seed,
            out,
            regions,
            days,
            incidence,
        } => {
            let panel = synth_panel(&SynthConfig {
                seed,
                n_regions: regions,
                n_days: days,
                ..SynthConfig::default()
            })?;
            save_panel(&panel, &out)?;
            if let Some(path) = incidence {
                let mut wtr = create_file(&path)?;
                writeln!(wtr, "date,total")?;
                for (date, v) in panel.dates().iter().zip(total_incidence(&panel)) {
                    writeln!(wtr, "{date},{v}")?;
                }
                wtr.flush()?;
            }
            println!(
                "wrote {} regions × {} days to {}",
                panel.n_regions(),
                panel.n_days(),
                out.display()
            );
        }
        Command::Spectra {
            from,
            clustering,
            config,
            overrides,
        } => {
            let config = build_config(config.as_deref(), &overrides)?;
            let manifest = run_from_matrices(&config, &from, clustering.as_deref())?;
            report(&manifest, &config.output_dir);
        }
    }
    Ok(())
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
