//! Experiment configs and the commands behind `gslsim`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gsl_core::functions::{default_table, FunctionRecord, SpecTable};
use gsl_core::metrics::{
    compare as compare_summaries, write_memory_csv, write_records_csv, ComparisonRow, RunSummary,
};
use gsl_core::policies::{PolicyConfig, PolicyName, PolicyOverrides};
use gsl_core::sim::{probe, run as run_sim, ClusterConfig, RunOptions, SimConfig, SimOutput};
use gsl_core::validation::{table5, warm_speedups, Table5Row};
use gsl_core::workload::{
    find_peak_throughput, flatten_minute_counts, write_trace, GeneratorKind, GeneratorSpec,
    PeakResult, PeakSearch,
};
use gsl_core::{SimDuration, SimError};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, flag or input file: exit 2.
    Config(String),
    /// The simulation itself failed: exit 1.
    Simulation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Simulation(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Simulation(m) => write!(f, "simulation failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Spec(_) | SimError::Workload(_) | SimError::Config(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Simulation(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Simulation(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, CliError>;

/// A policy in a config: a bare name or a preset with ablation overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyEntry {
    Name(PolicyName),
    Custom(CustomPolicy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomPolicy {
    pub policy: PolicyName,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub overrides: PolicyOverrides,
}

impl PolicyEntry {
    pub fn label(&self) -> String {
        match self {
            PolicyEntry::Name(n) => n.to_string(),
            PolicyEntry::Custom(c) => c.label.clone().unwrap_or_else(|| c.policy.to_string()),
        }
    }

    pub fn policy(&self) -> PolicyName {
        match self {
            PolicyEntry::Name(n) => *n,
            PolicyEntry::Custom(c) => c.policy,
        }
    }

    pub fn config(&self) -> PolicyConfig {
        match self {
            PolicyEntry::Name(n) => PolicyConfig::preset(*n),
            PolicyEntry::Custom(c) => PolicyConfig::preset(c.policy).with_overrides(&c.overrides),
        }
    }
}

fn default_policies() -> Vec<PolicyEntry> {
    vec![PolicyEntry::Name(PolicyName::Sage)]
}

fn default_sample_interval() -> Option<f64> {
    Some(100.0)
}

/// One experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub cluster: ClusterConfig,
    /// JSON function table; relative paths resolve against the config file.
    #[serde(default)]
    pub spec_file: Option<PathBuf>,
    /// Inline function table, used instead of the built-in one.
    #[serde(default)]
    pub functions: Option<Vec<FunctionRecord>>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyEntry>,
    pub workload: GeneratorSpec,
    #[serde(default)]
    pub seed: u64,
    /// Measurement window in seconds; defaults to the Poisson duration.
    #[serde(default)]
    pub period_s: Option<f64>,
    /// Memory timeline sampling; `null` disables periodic samples.
    #[serde(default = "default_sample_interval")]
    pub sample_interval_ms: Option<f64>,
    #[serde(default)]
    pub peak: Option<PeakSearch>,
    /// Length of each peak-search probe in seconds.
    #[serde(default)]
    pub probe_duration_s: Option<f64>,
}

pub const BUNDLED: &[(&str, &str)] = &[
    (
        "validate_table5",
        include_str!("../configs/validate_table5.json"),
    ),
    ("fig9_latency", include_str!("../configs/fig9_latency.json")),
    (
        "fig10_throughput",
        include_str!("../configs/fig10_throughput.json"),
    ),
    ("fig11_memory", include_str!("../configs/fig11_memory.json")),
    (
        "ablation_multistage",
        include_str!("../configs/ablation_multistage.json"),
    ),
    (
        "ablation_ro_sharing",
        include_str!("../configs/ablation_ro_sharing.json"),
    ),
    ("scale_4gpu", include_str!("../configs/scale_4gpu.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Sets `path` (dot separated, numeric parts index arrays) inside `root`.
/// `raw` is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override path `{path}`")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), new);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| {
                    CliError::Config(format!("override `{path}`: `{part}` is not an array index"))
                })?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    CliError::Config(format!(
                        "override `{path}`: index {idx} out of range ({len})"
                    ))
                })?;
                if last {
                    *slot = new;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::Config(format!(
                    "override `{path}`: `{part}` is inside a scalar"
                )))
            }
        };
    }
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(CliError::Config(format!("override `{s}` is not key=value"))),
    }
}

/// A config ready to run: the parsed file plus its resolved function table.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub specs: SpecTable,
}

/// Loads `source`, which is a bundled config name or a path, applies
/// overrides and validates.
pub fn load(source: &str, overrides: &[String]) -> Result<Experiment> {
    let (text, base_dir) = match bundled(source) {
        Some(t) => (t.to_string(), None),
        None => {
            let path = Path::new(source);
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            (text, path.parent().map(Path::to_path_buf))
        }
    };
    from_str(&text, base_dir.as_deref(), overrides)
}

pub fn from_str(text: &str, base_dir: Option<&Path>, overrides: &[String]) -> Result<Experiment> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        apply_override(&mut value, &k, &v)?;
    }
    let mut config: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(dir) = base_dir {
        if let Some(p) = config.spec_file.as_mut() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let GeneratorKind::Trace { path, .. } = &mut config.workload.generator {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
    }
    let specs = match (&config.spec_file, &config.functions) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "give either `spec_file` or `functions`, not both".into(),
            ))
        }
        (Some(p), None) => gsl_core::functions::load_spec_table(p).map_err(SimError::from)?,
        (None, Some(records)) => SpecTable::new(
            records
                .iter()
                .cloned()
                .map(FunctionRecord::into_spec)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(SimError::from)?,
        ),
        (None, None) => default_table(),
    };
    config.cluster.validate()?;
    config.workload.validate(&specs).map_err(SimError::from)?;
    if config.policies.is_empty() {
        return Err(CliError::Config("`policies` is empty".into()));
    }
    for (name, v) in [
        ("period_s", config.period_s),
        ("sample_interval_ms", config.sample_interval_ms),
        ("probe_duration_s", config.probe_duration_s),
    ] {
        if let Some(v) = v {
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::Config(format!("`{name}` must be positive")));
            }
        }
    }
    Ok(Experiment { config, specs })
}

impl Experiment {
    /// Keeps only the named policies, in the given order. A config entry for
    /// the same preset (with its label and overrides) is reused when present.
    pub fn select_policies(&mut self, names: &[PolicyName]) {
        let chosen = names
            .iter()
            .map(|&name| {
                self.config
                    .policies
                    .iter()
                    .find(|p| p.policy() == name)
                    .cloned()
                    .unwrap_or(PolicyEntry::Name(name))
            })
            .collect();
        self.config.policies = chosen;
    }

    pub fn sim_config(&self, policy: &PolicyEntry) -> SimConfig {
        let c = &self.config;
        SimConfig {
            specs: self.specs.clone(),
            cluster: c.cluster.clone(),
            policy: policy.config(),
            workload: c.workload.clone(),
            options: RunOptions {
                seed: c.seed,
                period: c.period_s.map(SimDuration::from_secs_f64),
                stop_at: None,
                sample_interval: c.sample_interval_ms.map(SimDuration::from_ms_f64),
                check_invariants: false,
            },
        }
    }
}

/// Writes a value as pretty JSON with a trailing newline.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes `summary.json`, `invocations.csv` and `memory.csv` into `dir`.
pub fn write_artifacts(dir: &Path, out: &SimOutput) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    let mut buf = Vec::new();
    write_records_csv(&mut buf, &out.records).map_err(|e| io_err(dir, e))?;
    let p = dir.join("invocations.csv");
    fs::write(&p, &buf).map_err(|e| io_err(&p, e))?;
    buf.clear();
    write_memory_csv(&mut buf, &out.timeline).map_err(|e| io_err(dir, e))?;
    let p = dir.join("memory.csv");
    fs::write(&p, &buf).map_err(|e| io_err(&p, e))
}

/// `throughput 12.345/s mean 101.2 ms p99 480.0 ms`
pub fn digest(s: &RunSummary) -> String {
    match s.latency {
        Some(l) => format!(
            "{}: throughput {:.3}/s mean {:.1} ms p99 {:.1} ms ({} of {} completed)",
            s.policy, s.throughput_per_s, l.mean_ms, l.p99_ms, s.completed, s.arrivals
        ),
        None => format!(
            "{}: throughput {:.3}/s, no completions ({} arrivals)",
            s.policy, s.throughput_per_s, s.arrivals
        ),
    }
}

/// Runs the first policy of the experiment.
pub fn run(exp: &Experiment, out: Option<&Path>) -> Result<SimOutput> {
    let entry = &exp.config.policies[0];
    let mut result = run_sim(exp.sim_config(entry))?;
    result.summary.policy = entry.label();
    if let Some(dir) = out {
        write_artifacts(dir, &result)?;
    }
    Ok(result)
}

/// File-system friendly form of a policy label.
pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs every policy on the same seed, one worker thread each. Summaries
/// come back in config order regardless of finishing order.
pub fn run_all(exp: &Experiment) -> Result<Vec<RunSummary>> {
    Ok(run_outputs(exp)?.into_iter().map(|o| o.summary).collect())
}

fn run_outputs(exp: &Experiment) -> Result<Vec<SimOutput>> {
    let labels: Vec<String> = exp.config.policies.iter().map(PolicyEntry::label).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].iter().any(|o| slug(o) == slug(l)) {
            return Err(CliError::Config(format!(
                "policy label `{l}` appears twice; give entries distinct labels"
            )));
        }
    }
    let outputs: Vec<std::result::Result<SimOutput, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = exp
            .config
            .policies
            .iter()
            .map(|p| {
                let cfg = exp.sim_config(p);
                s.spawn(move || run_sim(cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation worker panicked"))
            .collect()
    });
    outputs
        .into_iter()
        .zip(labels)
        .map(|(res, label)| {
            let mut o = res?;
            o.summary.policy = label;
            Ok(o)
        })
        .collect()
}

/// [`run_all`] plus ratios against the first policy. With `out`, each
/// policy's artifacts go to `<out>/<label>/` and the table to
/// `<out>/compare.json`.
pub fn compare(exp: &Experiment, out: Option<&Path>) -> Result<Vec<ComparisonRow>> {
    let outputs = run_outputs(exp)?;
    if let Some(dir) = out {
        for o in &outputs {
            write_artifacts(&dir.join(slug(&o.summary.policy)), o)?;
        }
    }
    let summaries: Vec<RunSummary> = outputs.into_iter().map(|o| o.summary).collect();
    let rows = compare_summaries(&summaries);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("compare.json"), &rows)?;
    }
    Ok(rows)
}

/// Peak search with the config's `peak` block (or a default bracket). Probes
/// last `probe_duration_s`, else the Poisson duration, else 120 s.
pub fn peak(exp: &Experiment, out: Option<&Path>) -> Result<PeakResult> {
    let search = exp.config.peak.unwrap_or(PeakSearch {
        min_rate: 0.5,
        max_rate: 200.0,
        resolution: 0.01,
        criteria: Default::default(),
    });
    if !(search.min_rate > 0.0 && search.max_rate > search.min_rate && search.resolution > 0.0) {
        return Err(CliError::Config(
            "peak search needs 0 < min_rate < max_rate and a positive resolution".into(),
        ));
    }
    let duration = exp
        .config
        .probe_duration_s
        .or(match exp.config.workload.generator {
            GeneratorKind::Poisson { duration_s, .. } => Some(duration_s),
            _ => None,
        })
        .unwrap_or(120.0);
    let base = exp.sim_config(&exp.config.policies[0]);
    let result = find_peak_throughput(&search, |rate| probe(&base, rate, duration))?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("peak.json"), &result)?;
        let mut buf = Vec::new();
        writeln!(
            buf,
            "step,rate_per_s,stable,in_system_early,in_system_end,p99_first_quartile_ms,p99_last_quartile_ms,completed"
        )
        .expect("write to memory");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        for (i, p) in result.trajectory.iter().enumerate() {
            let r = &p.report;
            writeln!(
                buf,
                "{i},{:.6},{},{},{},{},{},{}",
                p.rate,
                p.stable,
                r.in_system_early,
                r.in_system_end,
                opt(r.p99_first_quartile_ms),
                opt(r.p99_last_quartile_ms),
                r.completed
            )
            .expect("write to memory");
        }
        let p = dir.join("peak_trajectory.csv");
        fs::write(&p, buf).map_err(|e| io_err(&p, e))?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub rows: Vec<Table5Row>,
    pub mean_warm_speedup: Option<f64>,
    pub min_warm_speedup: Option<f64>,
    pub tolerance_ms: f64,
    pub pass: bool,
}

pub const VALIDATION_TOLERANCE_MS: f64 = 0.1;

/// The resnet50 per-stage latency scenario on the experiment's cluster and
/// function table.
pub fn validate(exp: &Experiment, out: Option<&Path>) -> Result<ValidationReport> {
    let rows = table5(&exp.specs, &exp.config.cluster)?;
    let speedups = warm_speedups(&rows);
    let pass = rows.iter().all(|r| r.error_ms() <= VALIDATION_TOLERANCE_MS);
    let report = ValidationReport {
        rows,
        mean_warm_speedup: speedups.map(|s| s.0),
        min_warm_speedup: speedups.map(|s| s.1),
        tolerance_ms: VALIDATION_TOLERANCE_MS,
        pass,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("validate.json"), &report)?;
    }
    Ok(report)
}

/// Converts a per-minute count table into a `timestamp_ms,function` trace.
/// Returns the number of rows written.
pub fn trace_flatten(input: &Path, output: &Path, id_column: Option<&str>) -> Result<usize> {
    let file =
        fs::File::open(input).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
    let rows =
        flatten_minute_counts(file, id_column).map_err(|e| CliError::Config(e.to_string()))?;
    let mut buf = Vec::new();
    write_trace(&mut buf, &rows).map_err(|e| io_err(output, e))?;
    fs::write(output, buf).map_err(|e| io_err(output, e))?;
    Ok(rows.len())
}
