//! End-to-end orchestration: ingest → filter → returns → epochs →
//! clustering → symbolic dynamics → spectra, with every stage writing its
//! artifacts under one output directory and a JSON manifest at the end.
//!
//! Configuration is a flat `key = value` text file; see
//! [`PipelineConfig::KEYS`] for the recognised keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    kmeans_multi, scan_k, write_symbolic_csv, ClusteringReport, KDiagnostics, DEFAULT_K,
    DEFAULT_MAX_ITER, DEFAULT_RESTARTS, DEFAULT_TOL,
};
use crate::error::{Error, Result};
use crate::figures;
use crate::matrix::write_labeled_csv;
use crate::panel::{load_panel, write_panel, Layout, LoadOptions, TimeSeriesPanel};
use crate::returns::{
    compute_returns, correlation_series, plan_epochs, CorrelationMatrix, EpochPlan, ReturnsPanel,
    ZeroVariancePolicy, DEFAULT_OVERLAP, DEFAULT_RETURNS_GUARD, DEFAULT_WINDOW,
};
use crate::rmt::{
    cluster_spectra, ClusterSpectrum, Histogram, MpParams, SpectraBins, WishartSettings,
    DEFAULT_WISHART_SAMPLES,
};
use crate::spectral::{
    default_covid_bands, filter_panel, power_spectrum, FilterMode, SpectralFilterSpec, StopBand,
};

/// Bumped whenever a stage changes the bytes it writes.
const STAGE_VERSIONS: [(&str, u32); 8] = [
    ("ingest", 1),
    ("filter", 1),
    ("returns", 1),
    ("epochs", 1),
    ("clustering", 1),
    ("symbolic", 1),
    ("spectra", 1),
    ("figures", 1),
];

pub const PARTIAL_MARKER: &str = ".partial";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub layout: Layout,
    pub skip_columns: Vec<String>,
    pub drop_regions: Vec<String>,
    pub clip_negative_to_zero: bool,
    /// `None` selects the built-in weekly bands.
    pub bands: Option<Vec<StopBand>>,
    pub filter_mode: FilterMode,
    pub returns_guard: f64,
    pub absolute_returns: bool,
    pub zero_variance: ZeroVariancePolicy,
    pub window: usize,
    pub overlap: usize,
    pub k: usize,
    pub n_restarts: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    /// Inclusive range of k values for the silhouette/inertia scan.
    pub k_scan: Option<(usize, usize)>,
    pub bins: SpectraBins,
    pub wishart_samples: usize,
    /// Overrides `Q = window / n_regions`.
    pub mp_q: Option<f64>,
    pub output_dir: PathBuf,
    /// Optional daily series drawn over the symbolic-dynamics strip.
    pub incidence: Option<PathBuf>,
    pub figures: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            layout: Layout::default(),
            skip_columns: Vec::new(),
            drop_regions: Vec::new(),
            clip_negative_to_zero: false,
            bands: None,
            filter_mode: FilterMode::HardZero,
            returns_guard: DEFAULT_RETURNS_GUARD,
            absolute_returns: false,
            zero_variance: ZeroVariancePolicy::Error,
            window: DEFAULT_WINDOW,
            overlap: DEFAULT_OVERLAP,
            k: DEFAULT_K,
            n_restarts: DEFAULT_RESTARTS,
            seed: 0,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            k_scan: None,
            bins: SpectraBins::default(),
            wishart_samples: DEFAULT_WISHART_SAMPLES,
            mp_q: None,
            output_dir: PathBuf::from("out"),
            incidence: None,
            figures: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} = `{value}`: expected true or false"
        ))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn is_unset(value: &str) -> bool {
    matches!(value, "" | "none" | "default" | "auto")
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl PipelineConfig {
    /// Every recognised key, in the order they are echoed.
    pub const KEYS: [&'static str; 26] = [
        "input",
        "layout",
        "skip_columns",
        "drop_regions",
        "clip_negative_to_zero",
        "bands",
        "filter_mode",
        "returns_guard",
        "absolute_returns",
        "zero_variance",
        "window",
        "overlap",
        "k",
        "n_restarts",
        "seed",
        "tol",
        "max_iter",
        "k_scan",
        "bins_empirical",
        "bins_wishart",
        "bins_mp",
        "wishart_samples",
        "mp_q",
        "output_dir",
        "incidence",
        "figures",
    ];

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "input" => self.input = PathBuf::from(value),
            "layout" => self.layout = parse_value(key, value)?,
            "skip_columns" => self.skip_columns = parse_list(value),
            "drop_regions" => self.drop_regions = parse_list(value),
            "clip_negative_to_zero" => self.clip_negative_to_zero = parse_bool(key, value)?,
            "bands" => {
                self.bands = if is_unset(value) {
                    None
                } else {
                    Some(
                        parse_list(value)
                            .iter()
                            .map(|b| b.parse())
                            .collect::<Result<Vec<StopBand>>>()?,
                    )
                }
            }
            "filter_mode" => self.filter_mode = parse_value(key, value)?,
            "returns_guard" => self.returns_guard = parse_value(key, value)?,
            "absolute_returns" => self.absolute_returns = parse_bool(key, value)?,
            "zero_variance" => self.zero_variance = parse_value(key, value)?,
            "window" => self.window = parse_value(key, value)?,
            "overlap" => self.overlap = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "n_restarts" => self.n_restarts = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "tol" => self.tol = parse_value(key, value)?,
            "max_iter" => self.max_iter = parse_value(key, value)?,
            "k_scan" => {
                self.k_scan = if is_unset(value) {
                    None
                } else {
                    let (lo, hi) = value.split_once('-').ok_or_else(|| {
                        Error::Config(format!("k_scan = `{value}`: expected `lo-hi`"))
                    })?;
                    Some((parse_value(key, lo.trim())?, parse_value(key, hi.trim())?))
                }
            }
            "bins_empirical" => self.bins.empirical = parse_value(key, value)?,
            "bins_wishart" => self.bins.wishart = parse_value(key, value)?,
            "bins_mp" => {
                self.bins.mp = parse_list(value)
                    .iter()
                    .map(|v| parse_value(key, v))
                    .collect::<Result<_>>()?
            }
            "wishart_samples" => self.wishart_samples = parse_value(key, value)?,
            "mp_q" => {
                self.mp_q = if is_unset(value) {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "incidence" => {
                self.incidence = if is_unset(value) {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "figures" => self.figures = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical `key → value` text of every setting; feeding it back through
    /// [`PipelineConfig::set`] reproduces the config.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let path = |p: &Path| p.display().to_string();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".to_owned());
        let entries = [
            ("input", path(&self.input)),
            ("layout", self.layout.to_string()),
            ("skip_columns", self.skip_columns.join(",")),
            ("drop_regions", self.drop_regions.join(",")),
            (
                "clip_negative_to_zero",
                self.clip_negative_to_zero.to_string(),
            ),
            (
                "bands",
                self.bands
                    .as_ref()
                    .map_or_else(|| "default".to_owned(), |b| join(b)),
            ),
            ("filter_mode", self.filter_mode.to_string()),
            ("returns_guard", self.returns_guard.to_string()),
            ("absolute_returns", self.absolute_returns.to_string()),
            ("zero_variance", self.zero_variance.to_string()),
            ("window", self.window.to_string()),
            ("overlap", self.overlap.to_string()),
            ("k", self.k.to_string()),
            ("n_restarts", self.n_restarts.to_string()),
            ("seed", self.seed.to_string()),
            ("tol", self.tol.to_string()),
            ("max_iter", self.max_iter.to_string()),
            ("k_scan", opt(self.k_scan.map(|(a, b)| format!("{a}-{b}")))),
            ("bins_empirical", self.bins.empirical.to_string()),
            ("bins_wishart", self.bins.wishart.to_string()),
            ("bins_mp", join(&self.bins.mp)),
            ("wishart_samples", self.wishart_samples.to_string()),
            ("mp_q", opt(self.mp_q.map(|q| q.to_string()))),
            ("output_dir", path(&self.output_dir)),
            ("incidence", opt(self.incidence.as_deref().map(path))),
            ("figures", self.figures.to_string()),
        ];
        entries
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect()
    }

    pub fn filter_spec(&self) -> Result<SpectralFilterSpec> {
        match &self.bands {
            None => default_covid_bands().with_mode(self.filter_mode),
            Some(bands) => SpectralFilterSpec::new(bands.clone(), self.filter_mode),
        }
    }

    /// Checks that do not need the data. Data-dependent constraints (e.g. the
    /// window fitting the series) are reported by the stage that hits them.
    pub fn validate(&self) -> Result<()> {
        if self.input.as_os_str().is_empty() {
            return Err(Error::Config("`input` is required".into()));
        }
        if !(self.returns_guard > 0.0 && self.returns_guard.is_finite()) {
            return Err(Error::Config(format!(
                "returns_guard must be positive, got {}",
                self.returns_guard
            )));
        }
        if self.k == 0 || self.n_restarts == 0 || self.max_iter == 0 {
            return Err(Error::Config(
                "k, n_restarts and max_iter must be at least 1".into(),
            ));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!(
                "tol must be non-negative, got {}",
                self.tol
            )));
        }
        if let Some((lo, hi)) = self.k_scan {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!(
                    "k_scan {lo}-{hi} is not a valid range"
                )));
            }
        }
        if self.bins.empirical == 0 || self.bins.wishart == 0 || self.bins.mp.contains(&0) {
            return Err(Error::Config("bin counts must be at least 1".into()));
        }
        if self.wishart_samples == 0 {
            return Err(Error::Config("wishart_samples must be at least 1".into()));
        }
        if let Some(q) = self.mp_q {
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::Config(format!("mp_q must be positive, got {q}")));
            }
        }
        self.filter_spec()?;
        Ok(())
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            layout: self.layout,
            skip_columns: self.skip_columns.clone(),
            drop_regions: self.drop_regions.clone(),
            clip_negative_to_zero: self.clip_negative_to_zero,
        }
    }

    fn mp_params(&self, n_regions: usize) -> Result<MpParams> {
        match self.mp_q {
            Some(q) => MpParams::new(q, 1.0),
            None => MpParams::from_geometry(self.window, n_regions),
        }
    }
}

/// Seed for a named stage, derived from the root seed so that stages draw
/// from unrelated streams.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    // FNV-1a of the stage name, then a SplitMix64 finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub version: u32,
    /// Paths relative to the output directory, in write order.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_regions: usize,
    pub n_days: usize,
    pub n_returns: usize,
    pub n_epochs: usize,
    pub k: usize,
    pub inertia: f64,
    pub restart_index_of_best: usize,
    pub n_spectra: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub config: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub summary: RunSummary,
    /// Wall-clock time per stage. Kept out of `manifest.json` so that
    /// identical configs give identical bytes.
    #[serde(skip)]
    pub timings: Vec<(String, Duration)>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

struct Recorder {
    root: PathBuf,
    stages: Vec<StageRecord>,
    timings: Vec<(String, Duration)>,
}

impl Recorder {
    fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            stages: Vec::new(),
            timings: Vec::new(),
        }
    }

    fn record(&mut self, stage: &str) -> &mut StageRecord {
        if let Some(i) = self.stages.iter().position(|s| s.stage == stage) {
            return &mut self.stages[i];
        }
        let version = STAGE_VERSIONS
            .iter()
            .find(|(name, _)| *name == stage)
            .map_or(0, |(_, v)| *v);
        self.stages.push(StageRecord {
            stage: stage.to_owned(),
            version,
            outputs: Vec::new(),
        });
        self.stages.last_mut().expect("just pushed")
    }

    fn write(
        &mut self,
        stage: &str,
        rel: &str,
        write: impl FnOnce(&mut dyn Write) -> Result<()>,
    ) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        write(&mut out)?;
        out.flush().map_err(|e| Error::io(&path, e))?;
        self.record(stage).outputs.push(rel.to_owned());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, stage: &str, rel: &str, value: &T) -> Result<()> {
        self.write(stage, rel, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n").map_err(|e| Error::io(rel, e))
        })
    }

    /// Figures are best effort: a failed write is logged, not propagated.
    fn figure(&mut self, rel: &str, svg: &str) {
        let result = self.write("figures", rel, |w| {
            w.write_all(svg.as_bytes()).map_err(|e| Error::io(rel, e))
        });
        if let Err(e) = result {
            log::warn!("could not write figure {rel}: {e}");
        }
    }

    fn timed<T>(
        &mut self,
        stage: &'static str,
        run: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {stage}");
        let out = run(self).map_err(|e| match e {
            tagged @ Error::Stage { .. } => tagged,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })?;
        self.timings.push((stage.to_owned(), start.elapsed()));
        Ok(out)
    }
}

fn write_series_csv(
    w: &mut dyn Write,
    x_name: &str,
    x: &[String],
    names: &[String],
    columns: &[Vec<f64>],
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    let mut header = vec![x_name.to_owned()];
    header.extend(names.iter().cloned());
    wtr.write_record(&header)?;
    for (t, label) in x.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(columns.iter().map(|c| c[t].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

fn write_histograms_csv(w: &mut dyn Write, spectrum: &ClusterSpectrum) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    wtr.write_record(["series", "bin_low", "bin_high", "density"])?;
    let all: [(&str, &Histogram); 3] = [
        ("empirical", &spectrum.empirical),
        ("wishart", &spectrum.wishart_histogram),
        ("marchenko_pastur", &spectrum.mp_histogram),
    ];
    for (name, h) in all {
        for (e, d) in h.edges.windows(2).zip(&h.densities) {
            wtr.write_record([
                name.to_owned(),
                e[0].to_string(),
                e[1].to_string(),
                d.to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Reads a daily series from a CSV with a header row, taking the last column
/// of each record.
pub fn load_incidence(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let cell = record.iter().next_back().unwrap_or("");
        let v: f64 = cell.parse().map_err(|_| Error::Parse {
            row: i + 2,
            column: "incidence".into(),
            message: format!("`{cell}` is not a number"),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn load_matrices(path: impl AsRef<Path>) -> Result<Vec<CorrelationMatrix>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_clustering(path: impl AsRef<Path>) -> Result<ClusteringReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn stage_ingest(rec: &mut Recorder, config: &PipelineConfig) -> Result<TimeSeriesPanel> {
    let panel = load_panel(&config.input, &config.load_options())?;
    log::info!(
        "loaded {} regions × {} days",
        panel.n_regions(),
        panel.n_days()
    );
    rec.write("ingest", "01_ingest/panel.csv", |w| write_panel(&panel, w))?;
    Ok(panel)
}

fn stage_filter(
    rec: &mut Recorder,
    config: &PipelineConfig,
    panel: &TimeSeriesPanel,
) -> Result<TimeSeriesPanel> {
    let spec = config.filter_spec()?;
    let filtered = filter_panel(panel, &spec)?;
    rec.write("filter", "02_filter/filtered.csv", |w| {
        write_panel(&filtered, w)
    })?;

    let raw_spectra = panel
        .values()
        .iter()
        .map(|s| power_spectrum(s))
        .collect::<Result<Vec<_>>>()?;
    let filtered_spectra = filtered
        .values()
        .iter()
        .map(|s| power_spectrum(s))
        .collect::<Result<Vec<_>>>()?;
    let freq: Vec<String> = raw_spectra[0]
        .frequencies
        .iter()
        .map(|f| f.to_string())
        .collect();
    for (name, spectra) in [("raw", &raw_spectra), ("filtered", &filtered_spectra)] {
        let columns: Vec<Vec<f64>> = spectra.iter().map(|s| s.power.clone()).collect();
        rec.write("filter", &format!("02_filter/power_{name}.csv"), |w| {
            write_series_csv(w, "frequency", &freq, panel.regions(), &columns)
        })?;
    }

    if config.figures {
        for (i, region) in panel.regions().iter().enumerate() {
            let svg = figures::filter_effect(
                region,
                panel.series(i),
                filtered.series(i),
                &raw_spectra[i].frequencies,
                &raw_spectra[i].power,
                &filtered_spectra[i].power,
            );
            rec.figure(&format!("figures/fig1_filter_{:02}.svg", i + 1), &svg);
        }
    }
    Ok(filtered)
}

fn stage_returns(
    rec: &mut Recorder,
    config: &PipelineConfig,
    filtered: &TimeSeriesPanel,
) -> Result<ReturnsPanel> {
    let mut returns = compute_returns(filtered, config.returns_guard)?;
    if config.absolute_returns {
        returns = returns.absolute();
    }
    let as_panel = returns.to_panel()?;
    rec.write("returns", "03_returns/returns.csv", |w| {
        write_panel(&as_panel, w)
    })?;

    if config.figures {
        let shown = returns.n_regions().min(4);
        let series: Vec<figures::Series<'_>> = (0..shown)
            .map(|i| figures::Series {
                name: &returns.regions()[i],
                color: figures::palette(i),
                points: returns
                    .series(i)
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| (t as f64, v))
                    .collect(),
                dashed: false,
            })
            .collect();
        let svg = figures::line_chart("Daily returns", "day", "return", &series);
        rec.figure("figures/fig2_returns.svg", &svg);
    }
    Ok(returns)
}

fn stage_epochs(
    rec: &mut Recorder,
    config: &PipelineConfig,
    returns: &ReturnsPanel,
) -> Result<(EpochPlan, Vec<CorrelationMatrix>)> {
    let plan = plan_epochs(returns.len(), config.window, config.overlap)?;
    let matrices = correlation_series(returns, &plan, config.zero_variance)?;
    log::info!(
        "{} epochs of {} days, stride {}",
        plan.epoch_count(),
        plan.window,
        plan.stride
    );
    rec.write_json("epochs", "04_epochs/plan.json", &plan)?;
    rec.write_json("epochs", "04_epochs/matrices.json", &matrices)?;
    for m in &matrices {
        rec.write(
            "epochs",
            &format!("04_epochs/epoch_{:03}.csv", m.epoch_index),
            |w| write_labeled_csv(&m.entries, returns.regions(), w),
        )?;
    }
    if config.figures {
        for m in &matrices {
            let title = format!(
                "Epoch {} ({} days)",
                m.epoch_index,
                plan.stride_label(m.epoch_index)
            );
            let svg = figures::heatmap(&title, &m.entries, returns.regions());
            rec.figure(
                &format!("figures/fig3_epoch_{:03}.svg", m.epoch_index),
                &svg,
            );
        }
    }
    Ok((plan, matrices))
}

/// Region labels for matrices whose names were not kept (e.g. a bare
/// `matrices.json`).
fn index_labels(n: usize) -> Vec<String> {
    (1..=n).map(|i| i.to_string()).collect()
}

fn stage_clustering(
    rec: &mut Recorder,
    config: &PipelineConfig,
    plan: &EpochPlan,
    matrices: &[DMatrix<f64>],
    labels: &[String],
) -> Result<ClusteringReport> {
    let seed = stage_seed(config.seed, "clustering");
    let result = kmeans_multi(
        matrices,
        config.k,
        config.n_restarts,
        seed,
        config.tol,
        config.max_iter,
    )?;
    if !result.converged {
        log::warn!(
            "best k-means run stopped at max_iter = {} without converging",
            config.max_iter
        );
    }
    let report = ClusteringReport::new(&result, plan)?;
    rec.write_json("clustering", "05_clustering/clustering.json", &report)?;
    if let Some((lo, hi)) = config.k_scan {
        let diagnostics: KDiagnostics = scan_k(
            matrices,
            lo..=hi,
            config.n_restarts,
            seed,
            config.tol,
            config.max_iter,
        )?;
        if let Some(best) = diagnostics.best_k_by_silhouette() {
            log::info!("mean silhouette peaks at k = {best}");
        }
        rec.write_json("clustering", "05_clustering/k_scan.json", &diagnostics)?;
    }
    if config.figures {
        for c in &report.centroids {
            let svg = figures::heatmap(
                &format!("Centroid of cluster {}", c.cluster_id + 1),
                &c.entries,
                labels,
            );
            rec.figure(
                &format!("figures/fig4_centroid_{}.svg", c.cluster_id + 1),
                &svg,
            );
        }
    }
    Ok(report)
}

fn stage_symbolic(
    rec: &mut Recorder,
    config: &PipelineConfig,
    plan: &EpochPlan,
    report: &ClusteringReport,
) -> Result<()> {
    rec.write("symbolic", "06_symbolic/symbolic_dynamics.csv", |w| {
        write_symbolic_csv(&report.per_epoch, plan, report.k, w)
    })?;
    if config.figures {
        let incidence = match &config.incidence {
            Some(path) => Some(load_incidence(path)?),
            None => None,
        };
        let svg = figures::symbolic_strip(
            "Cluster label per epoch",
            &report.per_epoch,
            report.k,
            plan.window,
            incidence.as_deref(),
        );
        rec.figure("figures/fig5_symbolic.svg", &svg);
    }
    Ok(())
}

fn stage_spectra(
    rec: &mut Recorder,
    config: &PipelineConfig,
    matrices: &[DMatrix<f64>],
    report: &ClusteringReport,
) -> Result<Vec<ClusterSpectrum>> {
    let n = matrices.first().map_or(0, |m| m.nrows());
    let mp = config.mp_params(n)?;
    let wishart = WishartSettings {
        t: config.window,
        n_samples: config.wishart_samples,
        seed: stage_seed(config.seed, "spectra"),
    };
    let spectra = cluster_spectra(
        matrices,
        &report.labels,
        report.k,
        &config.bins,
        &mp,
        &wishart,
    )?;
    rec.write_json("spectra", "07_spectra/spectra.json", &spectra)?;
    for s in &spectra {
        let c = s.cluster_id + 1;
        rec.write(
            "spectra",
            &format!("07_spectra/cluster_{c}_eigenvalues.csv"),
            |w| {
                let mut wtr = csv::WriterBuilder::new()
                    .terminator(csv::Terminator::Any(b'\n'))
                    .from_writer(w);
                wtr.write_record(["eigenvalue"])?;
                for v in &s.eigenvalues {
                    wtr.write_record([v.to_string()])?;
                }
                wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
                Ok(())
            },
        )?;
        rec.write(
            "spectra",
            &format!("07_spectra/cluster_{c}_histograms.csv"),
            |w| write_histograms_csv(w, s),
        )?;
    }
    if config.figures {
        for s in &spectra {
            rec.figure(
                &format!("figures/fig6_spectrum_{}.svg", s.cluster_id + 1),
                &figures::spectrum_overlay(s),
            );
        }
    }
    Ok(spectra)
}

fn stage_seeds(config: &PipelineConfig) -> BTreeMap<String, u64> {
    ["clustering", "spectra"]
        .into_iter()
        .map(|s| (s.to_owned(), stage_seed(config.seed, s)))
        .collect()
}

fn finish(rec: Recorder, config: &PipelineConfig, summary: RunSummary) -> Result<RunManifest> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        seed: config.seed,
        stage_seeds: stage_seeds(config),
        config: config.echo(),
        stages: rec.stages,
        summary,
        timings: rec.timings,
    };
    let path = config.output_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Runs `body` with the partial-output marker in place; it is removed only
/// when the run succeeds.
fn guarded(
    config: &PipelineConfig,
    body: impl FnOnce() -> Result<RunManifest>,
) -> Result<RunManifest> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(PARTIAL_MARKER);
    fs::write(&marker, "run in progress\n").map_err(|e| Error::io(&marker, e))?;
    match body() {
        Ok(manifest) => {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            Ok(manifest)
        }
        Err(e) => {
            if let Err(io) = fs::write(&marker, format!("{e}\n")) {
                log::warn!("could not update {}: {io}", marker.display());
            }
            Err(e)
        }
    }
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest> {
    guarded(config, || {
        let mut rec = Recorder::new(&config.output_dir);
        let panel = rec.timed("ingest", |r| stage_ingest(r, config))?;
        let filtered = rec.timed("filter", |r| stage_filter(r, config, &panel))?;
        let returns = rec.timed("returns", |r| stage_returns(r, config, &filtered))?;
        let (plan, matrices) = rec.timed("epochs", |r| stage_epochs(r, config, &returns))?;
        let entries: Vec<DMatrix<f64>> = matrices.into_iter().map(|m| m.entries).collect();
        let report = rec.timed("clustering", |r| {
            stage_clustering(r, config, &plan, &entries, returns.regions())
        })?;
        rec.timed("symbolic", |r| stage_symbolic(r, config, &plan, &report))?;
        let spectra = rec.timed("spectra", |r| stage_spectra(r, config, &entries, &report))?;

        let summary = RunSummary {
            n_regions: panel.n_regions(),
            n_days: panel.n_days(),
            n_returns: returns.len(),
            n_epochs: plan.epoch_count(),
            k: report.k,
            inertia: report.inertia,
            restart_index_of_best: report.restart_index_of_best,
            n_spectra: spectra.len(),
        };
        finish(rec, config, summary)
    })
}

/// Reruns the downstream stages from a saved `matrices.json`: clustering
/// (unless a saved `clustering.json` is given), symbolic dynamics and spectra.
/// The epoch plan is rebuilt from the stored start days and the configured
/// window and overlap.
pub fn run_from_matrices(
    config: &PipelineConfig,
    matrices_path: &Path,
    clustering_path: Option<&Path>,
) -> Result<RunManifest> {
    let mut config = config.clone();
    if config.input.as_os_str().is_empty() {
        config.input = matrices_path.to_path_buf();
    }
    let config = &config;
    guarded(config, || {
        let mut rec = Recorder::new(&config.output_dir);
        let (plan, entries) = rec.timed("epochs", |_| {
            let matrices = load_matrices(matrices_path)?;
            if matrices.is_empty() {
                return Err(Error::Plan(format!(
                    "{} holds no matrices",
                    matrices_path.display()
                )));
            }
            let plan = EpochPlan {
                window: config.window,
                overlap: config.overlap,
                stride: config.window.saturating_sub(config.overlap),
                starts: matrices.iter().map(|m| m.epoch_start_day).collect(),
            };
            Ok((
                plan,
                matrices.into_iter().map(|m| m.entries).collect::<Vec<_>>(),
            ))
        })?;
        let labels = index_labels(entries[0].nrows());
        let report = match clustering_path {
            Some(path) => rec.timed("clustering", |_| {
                let report = load_clustering(path)?;
                if report.labels.len() != entries.len() {
                    return Err(Error::Shape(format!(
                        "{} labels for {} matrices",
                        report.labels.len(),
                        entries.len()
                    )));
                }
                Ok(report)
            })?,
            None => rec.timed("clustering", |r| {
                stage_clustering(r, config, &plan, &entries, &labels)
            })?,
        };
        rec.timed("symbolic", |r| stage_symbolic(r, config, &plan, &report))?;
        let spectra = rec.timed("spectra", |r| stage_spectra(r, config, &entries, &report))?;
        let summary = RunSummary {
            n_regions: entries[0].nrows(),
            n_days: 0,
            n_returns: 0,
            n_epochs: plan.epoch_count(),
            k: report.k,
            inertia: report.inertia,
            restart_index_of_best: report.restart_index_of_best,
            n_spectra: spectra.len(),
        };
        finish(rec, config, summary)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_echo_round_trip() {
        let text = "\
# comment
input = data/panel.csv
layout = regions_as_rows
skip_columns = population, code
bands = 0.13:0.14:0.15, 0.27:0.28:0.29
filter_mode = cosine_taper:0.2
k = 5
k_scan = 2-8
bins_mp = 10,6
mp_q = 1.5
incidence = inc.csv   # trailing comment
figures = false
";
        let config = PipelineConfig::parse(text).unwrap();
        assert_eq!(config.layout, Layout::RegionsAsRows);
        assert_eq!(config.skip_columns, vec!["population", "code"]);
        assert_eq!(config.bands.as_ref().unwrap().len(), 2);
        assert_eq!(config.k_scan, Some((2, 8)));
        assert_eq!(config.bins.mp, vec![10, 6]);
        assert_eq!(config.incidence, Some(PathBuf::from("inc.csv")));
        assert!(!config.figures);

        let mut again = PipelineConfig::default();
        for (k, v) in config.echo() {
            again.set(&k, &v).unwrap();
        }
        assert_eq!(again, config);
    }

    #[test]
    fn every_key_is_settable_and_echoed() {
        let echo = PipelineConfig::default().echo();
        for key in PipelineConfig::KEYS {
            assert!(echo.contains_key(key), "{key} missing from echo");
        }
        assert_eq!(echo.len(), PipelineConfig::KEYS.len());
    }

    #[test]
    fn bad_lines_are_reported() {
        assert!(matches!(
            PipelineConfig::parse("k 4"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("colour = red"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("k = four"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("figures = maybe"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation() {
        assert!(PipelineConfig::default().validate().is_err());
        let mut c = PipelineConfig {
            input: "x.csv".into(),
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_ok());
        c.k_scan = Some((5, 2));
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(7, "clustering"), stage_seed(7, "spectra"));
        assert_ne!(stage_seed(7, "clustering"), stage_seed(8, "clustering"));
        assert_eq!(stage_seed(7, "spectra"), stage_seed(7, "spectra"));
    }
}
