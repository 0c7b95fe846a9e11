//! Benchmark harness: parameter sweeps, on-disk grid caches, result tables
//! and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{Direction, KalmanDetector, KalmanRule, MaConfig, MaDetector};
use crate::config::{Config, Method};
use crate::dp::{backward_solve, build_belief_grids, BeliefConfig, BeliefQuantization, PolicySolution};
use crate::error::{Error, Result};
use crate::io;
use crate::kernel::CostParams;
use crate::model::PdmpModel;
use crate::policy::{evaluate_strategy, Detector, NeverStop, QuantizedPolicy, Summary};
use crate::quantize::{quantize_state_chain, QuantConfig, StateQuantization};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub config: Config,
    /// Where grids are cached; `None` keeps them in memory only.
    pub cache_dir: Option<PathBuf>,
    /// Fail instead of training when a cached grid is missing.
    pub no_train: bool,
}

impl BenchConfig {
    pub fn new(config: Config) -> Self {
        Self { config, cache_dir: None, no_train: false }
    }

    fn sweep(&self) -> Result<Vec<CellParams>> {
        let b = &self.config.bench;
        if b.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if b.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        let base_gamma = match &self.config.costs.gamma {
            crate::config::GammaSpec::Uniform(g) => Some(*g),
            crate::config::GammaSpec::Matrix(_) => None,
        };
        if base_gamma.is_none() && !b.gamma.is_empty() {
            return Err(Error::Config("a γ sweep needs a scalar γ in [costs]".into()));
        }
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let mut cells = Vec::new();
        for &sigma2 in &or(&b.sigma2, self.config.model.sigma2) {
            for &alpha in &or(&b.alpha, self.config.costs.alpha) {
                for &beta in &or(&b.beta, self.config.costs.beta) {
                    for &gamma in &or(&b.gamma, base_gamma.unwrap_or(f64::NAN)) {
                        cells.push(CellParams { sigma2, alpha, beta, gamma });
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub sigma2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// NaN when `[costs]` gives a full matrix.
    pub gamma: f64,
}

impl CellParams {
    fn costs(&self, config: &Config, model: &PdmpModel) -> Result<CostParams> {
        let mut c = config.costs.clone();
        c.alpha = self.alpha;
        c.beta = self.beta;
        if !self.gamma.is_nan() {
            c.gamma = crate::config::GammaSpec::Uniform(self.gamma);
        }
        c.build(model)
    }
}

/// One line of a result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub sigma2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub runs: usize,
    pub mean_cost: f64,
    pub sd_cost: f64,
    pub ci95: f64,
    /// Mean `τδ − T` over stops at or after the jump.
    pub delta_t: Option<f64>,
    pub sd_delta_t: Option<f64>,
    /// Mean number of observations from the jump to the stop, inclusive.
    pub nb_obs: Option<f64>,
    pub nb_early: usize,
    pub no_stop: usize,
    pub degenerate: usize,
}

impl ResultRow {
    fn new(method: &Method, cell: &CellParams, s: &Summary) -> Self {
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        Self {
            method: method.to_string(),
            sigma2: cell.sigma2,
            alpha: cell.alpha,
            beta: cell.beta,
            gamma: cell.gamma,
            runs: s.runs,
            mean_cost: s.mean_cost,
            sd_cost: s.sd_cost,
            ci95: s.ci95,
            delta_t: opt(s.mean_delay),
            sd_delta_t: opt(s.sd_delay),
            nb_obs: opt(s.mean_obs_after_jump),
            nb_early: s.early,
            no_stop: s.no_stop,
            degenerate: s.degenerate,
        }
    }

    fn cell_key(&self) -> [u64; 4] {
        [self.sigma2.to_bits(), self.alpha.to_bits(), self.beta.to_bits(), self.gamma.to_bits()]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub seed: u64,
    pub commit: Option<String>,
    /// Wall-clock seconds per phase.
    pub durations: BTreeMap<String, f64>,
    /// Content hashes of the grids used, by role.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub meta: TableMeta,
}

// ---------------------------------------------------------------------------
// Artifact cache
// ---------------------------------------------------------------------------

fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable key");
    hex::encode(Sha256::digest(&bytes))
}

/// Key of the state grids: everything but the noise, which they ignore.
pub fn state_key(model: &PdmpModel, config: &QuantConfig) -> String {
    let mut m = serde_json::to_value(model).expect("serializable model");
    if let Some(obj) = m.as_object_mut() {
        obj.remove("noise");
    }
    content_hash(&("omega", m, config))
}

pub fn belief_key(model: &PdmpModel, state_key: &str, config: &BeliefConfig) -> String {
    content_hash(&("gamma", model, state_key, config))
}

struct Cache<'a> {
    dir: Option<&'a Path>,
    no_train: bool,
    missing: Vec<String>,
}

impl Cache<'_> {
    fn path(&self, key: &str, kind: &str) -> Option<PathBuf> {
        self.dir.map(|d| d.join(format!("{kind}-{}.bin", &key[..16])))
    }

    fn load<T>(&mut self, key: &str, kind: &str, decode: impl Fn(&[io::Section]) -> Result<T>, build: impl FnOnce() -> Result<T>, encode: impl Fn(&T) -> Result<Vec<io::Section>>) -> Result<Option<T>> {
        let path = self.path(key, kind);
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            return decode(&io::read_container(p)?).map(Some);
        }
        if self.no_train {
            self.missing.push(match &path {
                Some(p) => p.display().to_string(),
                None => format!("{kind} {key}"),
            });
            return Ok(None);
        }
        let value = build()?;
        if let Some(p) = path {
            std::fs::create_dir_all(p.parent().unwrap())?;
            io::write_container(&p, &encode(&value)?)?;
        }
        Ok(Some(value))
    }
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

struct NoiseLevel {
    model: PdmpModel,
    states: Option<std::sync::Arc<StateQuantization>>,
    beliefs: BTreeMap<usize, BeliefQuantization>,
}

fn make_detectors<'a>(method: &Method, level: &'a NoiseLevel, costs: &CostParams, solutions: &'a BTreeMap<usize, PolicySolution>) -> Result<Box<dyn Detector + 'a>> {
    let model = &level.model;
    Ok(match *method {
        Method::Quantized { belief_size } => Box::new(QuantizedPolicy::new(
            model,
            level.states.as_deref().expect("trained"),
            &level.beliefs[&belief_size],
            &solutions[&belief_size],
        )?),
        Method::MovingAverage { window, threshold } => {
            Box::new(MaDetector { model, config: MaConfig { window, threshold, direction: Direction::Above } })
        }
        Method::KalmanFixed { threshold } => Box::new(KalmanDetector { model, rule: KalmanRule::Fixed { threshold } }),
        Method::KalmanCalibrated => Box::new(KalmanDetector { model, rule: KalmanRule::Calibrated { costs: costs.clone() } }),
        Method::Never => Box::new(NeverStop),
    })
}

/// Runs every method on every cell of the sweep. Within a cell all methods
/// see the same simulated runs.
pub fn run_benchmark(bc: &BenchConfig) -> Result<ResultTable> {
    let config = &bc.config;
    let cells = bc.sweep()?;
    let methods = &config.bench.methods;
    let belief_sizes: Vec<usize> = {
        let mut v: Vec<usize> = methods.iter().filter_map(|m| if let Method::Quantized { belief_size } = m { Some(*belief_size) } else { None }).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut meta = TableMeta { seed: config.bench.seed, commit: git_commit(), ..Default::default() };
    let mut cache = Cache { dir: bc.cache_dir.as_deref(), no_train: bc.no_train, missing: Vec::new() };

    // Training: state grids once, belief grids per noise level and size.
    let started = Instant::now();
    let mut sigmas: Vec<f64> = cells.iter().map(|c| c.sigma2).collect();
    sigmas.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let mut levels: Vec<NoiseLevel> = Vec::new();
    let mut shared_states: Option<std::sync::Arc<StateQuantization>> = None;
    for &s2 in &sigmas {
        if levels.iter().any(|l| l.model.noise.sigma2.to_bits() == s2.to_bits()) {
            continue;
        }
        let model = config.model.build_with_noise(s2)?;
        let mut level = NoiseLevel { model, states: None, beliefs: BTreeMap::new() };
        if !belief_sizes.is_empty() {
            let skey = state_key(&level.model, &config.quantization);
            if shared_states.is_none() {
                shared_states = cache
                    .load(&skey, "omega", io::decode_state_quantization, || quantize_state_chain(&level.model, &config.quantization), |v| Ok(io::encode_state_quantization(v)))?
                    .map(std::sync::Arc::new);
                meta.artifacts.insert("omega".into(), skey.clone());
            }
            level.states = shared_states.clone();
            for &size in &belief_sizes {
                let bconf = BeliefConfig { size, ..config.belief.clone() };
                let bkey = belief_key(&level.model, &skey, &bconf);
                let states = level.states.clone();
                let model = &level.model;
                let built = cache.load(
                    &bkey,
                    "gamma",
                    io::decode_belief_quantization,
                    || build_belief_grids(model, states.as_deref().expect("state grids"), &bconf),
                    |v| Ok(io::encode_belief_quantization(v)),
                )?;
                if let Some(bq) = built {
                    level.beliefs.insert(size, bq);
                }
                meta.artifacts.insert(format!("gamma:sigma2={s2}:size={size}"), bkey);
            }
        }
        levels.push(level);
    }
    if !cache.missing.is_empty() {
        return Err(Error::MissingArtifact(cache.missing.join(", ")));
    }
    meta.durations.insert("train".into(), started.elapsed().as_secs_f64());

    let started = Instant::now();
    let per_cell: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|cell| {
            let level = levels.iter().find(|l| l.model.noise.sigma2.to_bits() == cell.sigma2.to_bits()).expect("level");
            let costs = cell.costs(config, &level.model)?;
            let solutions: BTreeMap<usize, PolicySolution> = level
                .beliefs
                .iter()
                .map(|(&k, bq)| Ok((k, backward_solve(bq, &level.states.as_ref().expect("trained").grids, &costs)?)))
                .collect::<Result<_>>()?;
            let detectors = methods.iter().map(|m| make_detectors(m, level, &costs, &solutions)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&dyn Detector> = detectors.iter().map(|d| d.as_ref()).collect();
            let summaries = evaluate_strategy(&level.model, &refs, &costs, config.bench.runs, config.bench.seed)?;
            Ok(methods.iter().zip(&summaries).map(|(m, s)| ResultRow::new(m, cell, s)).collect())
        })
        .collect::<Result<_>>()?;
    meta.durations.insert("evaluate".into(), started.elapsed().as_secs_f64());
    Ok(ResultTable { rows: per_cell.into_iter().flatten().collect(), meta })
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Csv,
    Markdown,
}

pub fn format_table(table: &ResultTable, style: Style) -> Result<String> {
    match style {
        Style::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(CSV_HEADER)?;
            for r in &table.rows {
                w.serialize(r)?;
            }
            Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf-8"))
        }
        Style::Markdown => Ok(markdown(table)),
    }
}

const CSV_HEADER: [&str; 15] = [
    "method", "sigma2", "alpha", "beta", "gamma", "runs", "mean_cost", "sd_cost", "ci95", "delta_t", "sd_delta_t", "nb_obs", "nb_early", "no_stop", "degenerate",
];

pub fn parse_table_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn markdown(table: &ResultTable) -> String {
    let mut best: BTreeMap<[u64; 4], f64> = BTreeMap::new();
    for r in &table.rows {
        let e = best.entry(r.cell_key()).or_insert(f64::INFINITY);
        *e = e.min(r.mean_cost);
    }
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    let header = ["method", "σ²", "α", "β", "γ", "cost", "±95%", "sd", "ΔT", "sd ΔT", "Nb Obs", "Nb early"];
    let body: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let cost = format!("{:.2}", r.mean_cost);
            let cost = if r.mean_cost == best[&r.cell_key()] { format!("**{cost}**") } else { cost };
            vec![
                r.method.clone(),
                format!("{}", r.sigma2),
                format!("{}", r.alpha),
                format!("{}", r.beta),
                if r.gamma.is_nan() { "-".into() } else { format!("{}", r.gamma) },
                cost,
                format!("{:.2}", r.ci95),
                format!("{:.2}", r.sd_cost),
                opt(r.delta_t),
                opt(r.sd_delta_t),
                opt(r.nb_obs),
                r.nb_early.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|j| body.iter().map(|row| row[j].chars().count()).chain([header[j].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::from("|");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(s, " {c}{} |", " ".repeat(w - c.chars().count()));
        }
        s.push('\n');
        s
    };
    let mut out = line(&header.map(String::from));
    out += &line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for row in &body {
        out += &line(row);
    }
    out
}

/// Everything needed to reproduce a table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Config,
    pub cells: Vec<CellParams>,
    pub meta: TableMeta,
    /// SHA-256 of the canonical CSV.
    pub table_sha256: String,
}

/// Writes `results.csv`, `results.md` and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, bc: &BenchConfig, table: &ResultTable) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let csv = format_table(table, Style::Csv)?;
    std::fs::write(dir.join("results.csv"), &csv)?;
    std::fs::write(dir.join("results.md"), format_table(table, Style::Markdown)?)?;
    let manifest = Manifest { config: bc.config.clone(), cells: bc.sweep()?, meta: table.meta.clone(), table_sha256: hex::encode(Sha256::digest(csv.as_bytes())) };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(methods: &str, runs: usize) -> Config {
        Config::from_toml(&format!(
            r#"
[model]
example = "1a"
speeds = [0.1, 0.5, 1.0]
sigma2 = 0.5
delta = 0.5
horizon = 8

[costs]
alpha = 4.0
beta = 1.0
gamma = 1.5

[quantization]
size = 6
clvq_samples = 4000
lloyd_samples = 2000
lloyd_iterations = 10
transition_samples = 4000

[belief]
chains = 1000

[bench]
runs = {runs}
methods = [{methods}]
"#
        ))
        .unwrap()
    }

    #[test]
    fn single_run_single_row() {
        let t = run_benchmark(&BenchConfig::new(config("\"ma:3:2\"", 1))).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].runs, 1);
    }

    #[test]
    fn rows_cover_the_sweep_and_are_deterministic() {
        let mut c = config("\"ma:3:2\", \"kf:cal\", \"quantized:8\", \"never\"", 50);
        c.bench.alpha = vec![3.0, 6.0];
        c.bench.sigma2 = vec![0.1, 0.5];
        let bc = BenchConfig::new(c);
        let a = run_benchmark(&bc).unwrap();
        assert_eq!(a.rows.len(), 2 * 2 * 4);
        let b = run_benchmark(&bc).unwrap();
        assert_eq!(format_table(&a, Style::Csv).unwrap(), format_table(&b, Style::Csv).unwrap());
        let md = format_table(&a, Style::Markdown).unwrap();
        assert_eq!(md.lines().count(), 2 + a.rows.len());
        assert!(md.contains("**"));
    }

    #[test]
    fn cache_is_reused_and_no_train_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        let mut bc = BenchConfig::new(config("\"quantized:8\"", 20));
        bc.cache_dir = Some(dir.path().to_path_buf());
        bc.no_train = true;
        match run_benchmark(&bc) {
            Err(Error::MissingArtifact(list)) => assert!(list.contains("omega") && list.contains("gamma"), "{list}"),
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
        bc.no_train = false;
        let trained = run_benchmark(&bc).unwrap();
        bc.no_train = true;
        let cached = run_benchmark(&bc).unwrap();
        assert_eq!(trained.rows, cached.rows);
        let out = write_outputs(&dir.path().join("out"), &bc, &cached).unwrap();
        assert_eq!(out.table_sha256.len(), 64);
    }

    #[test]
    fn state_key_ignores_noise() {
        let c = config("\"never\"", 1);
        let a = c.model.build_with_noise(0.1).unwrap();
        let b = c.model.build_with_noise(1.0).unwrap();
        assert_eq!(state_key(&a, &c.quantization), state_key(&b, &c.quantization));
        let bc = BeliefConfig::default();
        assert_ne!(belief_key(&a, "k", &bc), belief_key(&b, "k", &bc));
    }

    #[test]
    fn empty_table_is_header_only() {
        let csv = format_table(&ResultTable::default(), Style::Csv).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(parse_table_csv(&csv).unwrap().is_empty());
    }

    fn arb_opt() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![Just(None), (-1e6f64..1e6).prop_map(Some)]
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec(
            ("[a-z:.0-9]{1,12}", -10f64..10.0, 0f64..10.0, any::<f64>().prop_filter("finite", |v| v.is_finite()), 1usize..5000, arb_opt(), arb_opt(), 0usize..1000),
            0..20,
        )) {
            let rows: Vec<ResultRow> = rows.into_iter().map(|(method, s2, a, cost, runs, dt, nb, early)| ResultRow {
                method, sigma2: s2, alpha: a, beta: 1.0, gamma: 1.5, runs, mean_cost: cost, sd_cost: cost.abs(), ci95: 0.1,
                delta_t: dt, sd_delta_t: dt, nb_obs: nb, nb_early: early, no_stop: 0, degenerate: 3,
            }).collect();
            let t = ResultTable { rows: rows.clone(), meta: TableMeta::default() };
            let csv = format_table(&t, Style::Csv).unwrap();
            prop_assert_eq!(parse_table_csv(&csv).unwrap(), rows);
        }
    }
}
