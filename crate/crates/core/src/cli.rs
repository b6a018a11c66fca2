//! Command-line entry points: `fit`, `simulate` and `recommend`.
//!
//! Runs are driven by a TOML file with `version = 1`. Paths inside it are
//! resolved against the directory holding the file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    format_float, header_map, load_csv, load_stage_csv, read_raw, stage_column, warfarin_reward,
    Dataset, Direction, DoseScaler, LoadReport, MissingPolicy, RewardTransform, Schema, StageData,
    StageSchema,
};
use crate::dtr::{fit_dtr, recommend, DtrConfig, DtrDiagnostics, Policy, StageInput, StagePolicy};
use crate::error::{Error, Result};
use crate::sim::{run_study, Method, MethodReport, NoiseConvention, ScenarioSpec, StudyConfig};
use crate::tao::{DoseTree, Node, SplitRule};

pub const CONFIG_VERSION: u32 = 1;
pub const POLICY_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "dosetree",
    version,
    about = "Dose decision trees for treatment regimes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a policy from a CSV file.
    Fit(CommonArgs),
    /// Run a simulation study.
    Simulate(CommonArgs),
    /// Recommend doses from a fitted policy.
    Recommend(RecommendArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, 0 = all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct RecommendArgs {
    /// Run configuration with a [recommend] section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Policy file written by `fit`.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// History CSV, one row per subject.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Feed recommended doses forward instead of the observed ones.
    #[arg(long)]
    use_recommended: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub threads: usize,
    pub fit: Option<FitSection>,
    pub simulate: Option<SimulateSection>,
    pub recommend: Option<RecommendSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub data: PathBuf,
    /// 1 reads plain column names; more reads `<base>_t<t>` columns.
    #[serde(default = "one")]
    pub stages: usize,
    /// Covariate base names. For one stage, empty means all other columns.
    #[serde(default)]
    pub covariates: Vec<String>,
    pub dose: String,
    /// Outcome column, or the reward base name for several stages.
    pub outcome: String,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub missing: MissingPolicy,
    #[serde(default)]
    pub reward_transform: RewardTransform,
    #[serde(default)]
    pub dtr: DtrConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    /// Tree height; overrides `dtr.pipeline.tao.height`.
    pub height: Option<usize>,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub c0: Option<f64>,
    #[serde(default)]
    pub noise: NoiseConvention,
    #[serde(default)]
    pub dtr: DtrConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendSection {
    pub policy: PathBuf,
    pub input: PathBuf,
    #[serde(default)]
    pub use_recommended: bool,
}

fn one() -> usize {
    1
}
fn default_n() -> usize {
    500
}
fn default_p() -> usize {
    10
}
fn default_reps() -> usize {
    20
}
fn default_n_test() -> usize {
    1000
}
fn default_methods() -> Vec<Method> {
    vec![Method::GoDoTree, Method::Cart, Method::Random]
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Resolves relative paths against `base`.
    pub fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(o) = self.out.as_mut() {
            fix(o);
        }
        if let Some(f) = self.fit.as_mut() {
            fix(&mut f.data);
        }
        if let Some(r) = self.recommend.as_mut() {
            fix(&mut r.policy);
            fix(&mut r.input);
        }
        self
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

// ---------------------------------------------------------------------------
// Policy file

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub schema_version: u32,
    pub direction: Direction,
    /// Base name of the dose column in history files.
    pub dose_column: String,
    /// Base name of the reward column in history files.
    pub reward_column: String,
    pub stage_features: Vec<Vec<String>>,
    pub stages: Vec<StageFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFile {
    pub stage: usize,
    /// History vector column names in the order the tree reads them.
    pub history: Vec<String>,
    /// Observed dose range used for standardization.
    pub dose_range: [f64; 2],
    /// Preorder arena; node `i` has `id = i`, the root is 0.
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum NodeRecord {
    /// `feature <= threshold` goes left.
    Split {
        id: usize,
        feature: String,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        id: usize,
        /// Dose in original units.
        dose: f64,
        n_samples: usize,
    },
}

/// Tree in preorder with original-unit doses, plus old-to-new leaf ids.
fn export_tree(sp: &StagePolicy) -> (DoseTree, Vec<(usize, usize)>) {
    let compact = sp.tree.compacted();
    let ids = sp
        .tree
        .leaf_ids()
        .into_iter()
        .zip(compact.leaf_ids())
        .collect();
    let s = sp.scaler;
    (compact.map_doses(|d| s.unscale(d)), ids)
}

impl PolicyFile {
    pub fn from_policy(policy: &Policy, dose_column: &str, reward_column: &str) -> Self {
        let stages = policy
            .stages()
            .iter()
            .enumerate()
            .map(|(k, sp)| {
                let (tree, _) = export_tree(sp);
                let nodes = tree
                    .nodes()
                    .iter()
                    .enumerate()
                    .map(|(id, n)| match n {
                        Node::Split { rule, left, right } => NodeRecord::Split {
                            id,
                            feature: sp.feature_names[rule.feature].clone(),
                            threshold: rule.threshold,
                            left: *left,
                            right: *right,
                        },
                        Node::Leaf { dose, n_samples } => NodeRecord::Leaf {
                            id,
                            dose: *dose,
                            n_samples: *n_samples,
                        },
                    })
                    .collect();
                StageFile {
                    stage: k + 1,
                    history: sp.feature_names.clone(),
                    dose_range: [sp.scaler.a_min, sp.scaler.a_max],
                    nodes,
                }
            })
            .collect();
        Self {
            schema_version: POLICY_SCHEMA_VERSION,
            direction: policy.direction(),
            dose_column: dose_column.to_owned(),
            reward_column: reward_column.to_owned(),
            stage_features: policy.stage_features().to_vec(),
            stages,
        }
    }

    /// Rebuilds the policy. Leaf doses are stored in original units, so the
    /// loaded stages use the identity scaler.
    pub fn to_policy(&self) -> Result<Policy> {
        if self.schema_version != POLICY_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported policy schema version {} (expected {POLICY_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut stages = Vec::with_capacity(self.stages.len());
        for (k, sf) in self.stages.iter().enumerate() {
            if sf.stage != k + 1 {
                return Err(Error::Schema(format!(
                    "policy stage {} listed at position {}",
                    sf.stage,
                    k + 1
                )));
            }
            let lookup = header_map(&sf.history);
            let mut nodes = Vec::with_capacity(sf.nodes.len());
            for (i, rec) in sf.nodes.iter().enumerate() {
                let (id, node) = match rec {
                    NodeRecord::Split {
                        id,
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let f = *lookup.get(feature.as_str()).ok_or_else(|| {
                            Error::Schema(format!(
                                "stage {} split uses unknown column `{feature}`",
                                sf.stage
                            ))
                        })?;
                        let rule = SplitRule {
                            feature: f,
                            threshold: *threshold,
                        };
                        (
                            *id,
                            Node::Split {
                                rule,
                                left: *left,
                                right: *right,
                            },
                        )
                    }
                    NodeRecord::Leaf {
                        id,
                        dose,
                        n_samples,
                    } => (
                        *id,
                        Node::Leaf {
                            dose: *dose,
                            n_samples: *n_samples,
                        },
                    ),
                };
                if id != i {
                    return Err(Error::Schema(format!(
                        "stage {} node at position {i} has id {id}",
                        sf.stage
                    )));
                }
                nodes.push(node);
            }
            let tree = DoseTree::from_nodes(nodes)
                .map_err(|e| Error::Schema(format!("stage {} tree: {e}", sf.stage)))?;
            stages.push(StagePolicy::new(
                tree,
                DoseScaler::identity(),
                sf.history.clone(),
            )?);
        }
        Policy::new(stages, self.stage_features.clone(), self.direction)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("invalid policy file: {e}")))
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering of one stage; doses in original units.
pub fn stage_dot(sp: &StagePolicy, stage: usize) -> String {
    let (tree, _) = export_tree(sp);
    let mut s = String::new();
    let _ = writeln!(s, "digraph stage{stage} {{");
    let _ = writeln!(s, "  node [shape=box, fontname=\"Helvetica\"];");
    for (id, n) in tree.nodes().iter().enumerate() {
        match n {
            Node::Split { rule, left, right } => {
                let name = dot_escape(&sp.feature_names[rule.feature]);
                let _ = writeln!(
                    s,
                    "  n{id} [label=\"{name} <= {}\"];",
                    format_float(rule.threshold)
                );
                let _ = writeln!(s, "  n{id} -> n{left} [label=\"yes\"];");
                let _ = writeln!(s, "  n{id} -> n{right} [label=\"no\"];");
            }
            Node::Leaf { dose, n_samples } => {
                let _ = writeln!(
                    s,
                    "  n{id} [shape=ellipse, label=\"dose {:.4}\\nn = {n_samples}\"];",
                    dose
                );
            }
        }
    }
    s.push_str("}\n");
    s
}

// ---------------------------------------------------------------------------
// Output bookkeeping

#[derive(Debug, Clone, Serialize)]
struct ArtifactRecord {
    file: String,
    sha256: String,
    bytes: usize,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    tool_version: &'a str,
    config_sha256: Option<String>,
    seed: Option<u64>,
    artifacts: &'a [ArtifactRecord],
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Single writer for a run's output directory.
struct Artifacts {
    dir: PathBuf,
    written: Vec<ArtifactRecord>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.written.push(ArtifactRecord {
            file: name.to_owned(),
            sha256: sha256_hex(contents),
            bytes: contents.len(),
        });
        Ok(())
    }

    fn finish(self, command: &str, config_sha256: Option<String>, seed: Option<u64>) -> Result<()> {
        let m = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config_sha256,
            seed,
            artifacts: &self.written,
        };
        let text = to_json(&m)?;
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Serialization(e.to_string()))
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(header).map_err(ser)?;
    for r in rows {
        w.write_record(r).map_err(ser)?;
    }
    w.into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))
}

// ---------------------------------------------------------------------------
// Commands

struct Loaded {
    cfg: RunConfig,
    sha: String,
    dir: PathBuf,
}

fn load_config(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg = RunConfig::parse(&text)?.resolve_paths(&base);
    Ok(Loaded {
        cfg,
        sha: sha256_hex(&bytes),
        dir: base,
    })
}

fn out_dir(flag: Option<&PathBuf>, cfg: Option<&RunConfig>, base: &Path) -> PathBuf {
    flag.cloned()
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .unwrap_or_else(|| base.join("out"))
}

fn set_threads(n: usize) {
    if n > 0 {
        // Only the first call in a process can size the global pool.
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::debug!("thread pool already initialized");
        }
    }
}

fn seed_of(flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    flag.or(cfg.seed)
        .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
}

fn apply_transform(ds: &Dataset, t: RewardTransform) -> Result<Dataset> {
    match t {
        RewardTransform::None => Ok(ds.clone()),
        RewardTransform::WarfarinInr => {
            let y = ds
                .outcomes()
                .iter()
                .map(|&v| warfarin_reward(v))
                .collect::<Result<Vec<_>>>()?;
            ds.with_outcomes(y)
        }
    }
}

fn load_fit_data(f: &FitSection) -> Result<(StageData, LoadReport)> {
    if f.stages == 0 {
        return Err(Error::Config("fit.stages must be at least 1".into()));
    }
    let direction = match f.reward_transform {
        RewardTransform::None => f.direction,
        RewardTransform::WarfarinInr => {
            if f.direction != Direction::Maximize {
                log::warn!("warfarin reward is maximized; ignoring fit.direction");
            }
            Direction::Maximize
        }
    };
    let (stages, report) = if f.stages == 1 {
        let schema = Schema {
            covariates: f.covariates.clone(),
            dose: f.dose.clone(),
            outcome: f.outcome.clone(),
            direction,
            missing: f.missing,
        };
        let (ds, report) = load_csv(&f.data, &schema)?;
        (vec![ds], report)
    } else {
        let schema = StageSchema {
            stages: f.stages,
            covariates: f.covariates.clone(),
            dose: f.dose.clone(),
            reward: f.outcome.clone(),
            direction,
            missing: f.missing,
        };
        let (sd, report) = load_stage_csv(&f.data, &schema)?;
        (sd.stages().to_vec(), report)
    };
    let stages = stages
        .iter()
        .map(|s| apply_transform(s, f.reward_transform))
        .collect::<Result<Vec<_>>>()?;
    Ok((StageData::new(stages)?, report))
}

#[derive(Serialize)]
struct FitDiagnostics<'a> {
    rows: &'a LoadReport,
    reward_transform: RewardTransform,
    dtr: &'a DtrDiagnostics,
}

fn cmd_fit(args: &CommonArgs) -> Result<PathBuf> {
    let loaded = load_config(&args.config)?;
    let cfg = &loaded.cfg;
    let f = cfg
        .fit
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [fit] section".into()))?;
    let seed = seed_of(args.seed, cfg)?;
    require_file(&f.data)?;
    set_threads(args.threads.unwrap_or(cfg.threads));
    let out = out_dir(args.out.as_ref(), Some(cfg), &loaded.dir);

    let (sd, report) = load_fit_data(f)?;
    let mut dcfg = f.dtr.clone();
    dcfg.pipeline = dcfg.pipeline.with_seed(seed);
    let (policy, diag) = fit_dtr(&sd, &dcfg)?;

    // Leaf occupancy from the training histories.
    let mut stages = Vec::with_capacity(policy.n_stages());
    for (k, sp) in policy.stages().iter().enumerate() {
        let (h, _) = sd.build_history(k + 1)?;
        stages.push(StagePolicy::new(
            sp.tree.clone().with_leaf_counts(&h),
            sp.scaler,
            sp.feature_names.clone(),
        )?);
    }
    let policy = Policy::new(stages, policy.stage_features().to_vec(), policy.direction())?;

    let mut arts = Artifacts::new(out.clone())?;
    let pf = PolicyFile::from_policy(&policy, &f.dose, &f.outcome);
    arts.write("policy.json", pf.to_json()?.as_bytes())?;
    for (k, sp) in policy.stages().iter().enumerate() {
        let t = k + 1;
        arts.write(&format!("tree_stage{t}.dot"), stage_dot(sp, t).as_bytes())?;
        let report = &diag.stages[k];
        if report.leaf_curves.is_empty() {
            continue;
        }
        let (_, ids) = export_tree(sp);
        let header: Vec<String> = ["leaf", "n_samples", "dose", "value"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::new();
        for c in &report.leaf_curves {
            let leaf = ids
                .iter()
                .find(|(old, _)| *old == c.leaf)
                .map_or(c.leaf, |&(_, new)| new);
            for (d, v) in c.doses.iter().zip(&c.values) {
                rows.push(vec![
                    leaf.to_string(),
                    c.n_samples.to_string(),
                    format_float(*d),
                    format_float(*v),
                ]);
            }
        }
        arts.write(&format!("curves_stage{t}.csv"), &csv_bytes(&header, &rows)?)?;
    }
    let d = FitDiagnostics {
        rows: &report,
        reward_transform: f.reward_transform,
        dtr: &diag,
    };
    arts.write("diagnostics.json", to_json(&d)?.as_bytes())?;
    arts.finish("fit", Some(loaded.sha.clone()), Some(seed))?;
    Ok(out)
}

fn study_config(s: &SimulateSection, seed: u64) -> Result<StudyConfig> {
    let mut scenario = ScenarioSpec::new(s.scenario, s.n, s.p, seed)?;
    if let Some(c0) = s.c0 {
        scenario.c0 = c0;
    }
    scenario.noise = s.noise;
    scenario.validate()?;
    let mut dtr = s.dtr.clone();
    if let Some(h) = s.height {
        dtr.pipeline.tao.height = h;
    }
    if s.methods.is_empty() {
        return Err(Error::Config("simulate.methods is empty".into()));
    }
    Ok(StudyConfig {
        scenario,
        replications: s.replications,
        n_test: s.n_test,
        methods: s.methods.clone(),
        dtr,
    })
}

fn results_table(reports: &[MethodReport]) -> (Vec<String>, Vec<Vec<String>>) {
    let n_stages = reports.first().map_or(0, |r| r.report.rmse_mean.len());
    let mut header: Vec<String> = ["method", "replications", "regret_mean", "regret_sd"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for t in 1..=n_stages {
        header.push(format!("rmse_mean_t{t}"));
        header.push(format!("rmse_sd_t{t}"));
    }
    header.push("sd_defined".into());
    let rows = reports
        .iter()
        .map(|m| {
            let r = &m.report;
            let mut row = vec![
                m.method.label().to_string(),
                r.replications.to_string(),
                format_float(r.regret_mean),
                format_float(r.regret_sd),
            ];
            for t in 0..n_stages {
                row.push(format_float(r.rmse_mean[t]));
                row.push(format_float(r.rmse_sd[t]));
            }
            row.push(r.sd_defined.to_string());
            row
        })
        .collect();
    (header, rows)
}

/// Aligned plain-text table; SDs print in parentheses.
fn results_text(study: &StudyConfig, reports: &[MethodReport]) -> String {
    let sc = &study.scenario;
    let n_stages = reports.first().map_or(0, |r| r.report.rmse_mean.len());
    let mut header = vec!["method".to_string(), "regret".to_string()];
    for t in 1..=n_stages {
        header.push(if n_stages == 1 {
            "rmse".to_string()
        } else {
            format!("rmse t{t}")
        });
    }
    let sd_defined = reports.iter().all(|m| m.report.sd_defined);
    let mark = if sd_defined { "" } else { "*" };
    let cell = |m: f64, sd: f64, digits: usize| format!("{m:.digits$} ({sd:.digits$}){mark}");
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|m| {
            let r = &m.report;
            let mut row = vec![
                m.method.label().to_string(),
                cell(r.regret_mean, r.regret_sd, 3),
            ];
            for t in 0..n_stages {
                row.push(cell(r.rmse_mean[t], r.rmse_sd[t], 3));
            }
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|j| {
            rows.iter()
                .map(|r| r[j].len())
                .chain([header[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (j, c) in cells.iter().enumerate() {
            if j == 0 {
                let _ = write!(s, "{c:<w$}", w = widths[j]);
            } else {
                let _ = write!(s, "  {c:>w$}", w = widths[j]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut s = format!(
        "scenario {} (n = {}, p = {}, height {}, {} replications, n_test = {})\n",
        sc.id, sc.n, sc.p, study.dtr.pipeline.tao.height, study.replications, study.n_test
    );
    s.push_str(&line(&header));
    for r in &rows {
        s.push_str(&line(r));
    }
    if !sd_defined {
        s.push_str("* single replication: SD undefined, reported as 0\n");
    }
    s
}

fn cmd_simulate(args: &CommonArgs) -> Result<PathBuf> {
    let loaded = load_config(&args.config)?;
    let cfg = &loaded.cfg;
    let s = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [simulate] section".into()))?;
    let seed = seed_of(args.seed, cfg)?;
    set_threads(args.threads.unwrap_or(cfg.threads));
    let out = out_dir(args.out.as_ref(), Some(cfg), &loaded.dir);
    let study = study_config(s, seed)?;
    let reports = run_study(&study)?;

    let mut arts = Artifacts::new(out.clone())?;
    let (header, rows) = results_table(&reports);
    arts.write("results.csv", &csv_bytes(&header, &rows)?)?;
    arts.write("results.txt", results_text(&study, &reports).as_bytes())?;

    let n_stages = study.scenario.n_stages();
    let mut header: Vec<String> = vec!["method".into(), "replication".into(), "regret".into()];
    header.extend((1..=n_stages).map(|t| format!("rmse_t{t}")));
    let mut rows = Vec::new();
    for m in &reports {
        for (r, res) in m.replications.iter().enumerate() {
            let mut row = vec![
                m.method.label().to_string(),
                (r + 1).to_string(),
                format_float(res.regret),
            ];
            row.extend(res.rmse.iter().map(|v| format_float(*v)));
            rows.push(row);
        }
    }
    arts.write("replications.csv", &csv_bytes(&header, &rows)?)?;
    arts.finish("simulate", Some(loaded.sha.clone()), Some(seed))?;
    Ok(out)
}

/// Column for stage `t` of `base`; a one-stage policy also accepts the plain name.
fn find_column(
    cols: &std::collections::HashMap<&str, usize>,
    base: &str,
    t: usize,
    n_stages: usize,
) -> Option<usize> {
    cols.get(stage_column(base, t).as_str())
        .or_else(|| (n_stages == 1).then(|| cols.get(base)).flatten())
        .copied()
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let c = cell.trim();
    if c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    c.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| Error::Parse {
            row,
            column: column.to_owned(),
            message: format!("`{c}` is not a finite number"),
        })
}

/// Recommended doses for every row of a history CSV.
pub fn recommend_csv(
    pf: &PolicyFile,
    input: &Path,
    use_recommended: bool,
) -> Result<Vec<Vec<f64>>> {
    let policy = pf.to_policy()?;
    let n_stages = policy.n_stages();
    let (header, rows) = read_raw(input)?;
    if header.is_empty() && rows.is_empty() {
        return Ok(Vec::new());
    }
    let cols = header_map(&header);
    let missing = |name: String| Error::Schema(format!("missing column `{name}`"));
    struct StageCols {
        covariates: Vec<(usize, String)>,
        dose: Option<(usize, String)>,
        reward: Option<(usize, String)>,
    }
    let mut layout = Vec::with_capacity(n_stages);
    for t in 1..=n_stages {
        let mut covariates = Vec::new();
        for base in &policy.stage_features()[t - 1] {
            let j = find_column(&cols, base, t, n_stages)
                .ok_or_else(|| missing(stage_column(base, t)))?;
            covariates.push((j, header[j].clone()));
        }
        let (mut dose, mut reward) = (None, None);
        if t < n_stages {
            if !use_recommended {
                let j = find_column(&cols, &pf.dose_column, t, n_stages)
                    .ok_or_else(|| missing(stage_column(&pf.dose_column, t)))?;
                dose = Some((j, header[j].clone()));
            }
            let j = find_column(&cols, &pf.reward_column, t, n_stages)
                .ok_or_else(|| missing(stage_column(&pf.reward_column, t)))?;
            reward = Some((j, header[j].clone()));
        }
        layout.push(StageCols {
            covariates,
            dose,
            reward,
        });
    }
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let r = i + 1;
        let mut inputs = Vec::with_capacity(n_stages);
        for sc in &layout {
            let mut x = Vec::with_capacity(sc.covariates.len());
            for (j, name) in &sc.covariates {
                let v = parse_cell(&row[*j], r, name)?.ok_or_else(|| Error::Parse {
                    row: r,
                    column: name.clone(),
                    message: "missing value".into(),
                })?;
                x.push(v);
            }
            let opt = |c: &Option<(usize, String)>| -> Result<Option<f64>> {
                match c {
                    Some((j, name)) => parse_cell(&row[*j], r, name),
                    None => Ok(None),
                }
            };
            inputs.push(StageInput {
                covariates: x,
                dose: opt(&sc.dose)?,
                reward: opt(&sc.reward)?,
            });
        }
        let doses = recommend(&policy, &inputs, use_recommended).map_err(|e| match e {
            Error::InvalidData(m) => Error::InvalidData(format!("row {r}: {m}")),
            other => other,
        })?;
        out.push(doses);
    }
    Ok(out)
}

fn cmd_recommend(args: &RecommendArgs) -> Result<PathBuf> {
    let loaded = args.config.as_deref().map(load_config).transpose()?;
    let cfg = loaded.as_ref().map(|l| &l.cfg);
    let section = cfg.and_then(|c| c.recommend.as_ref());
    let policy_path = args
        .policy
        .clone()
        .or_else(|| section.map(|s| s.policy.clone()))
        .ok_or_else(|| Error::Config("no policy file given (--policy or [recommend])".into()))?;
    let input = args
        .input
        .clone()
        .or_else(|| section.map(|s| s.input.clone()))
        .ok_or_else(|| Error::Config("no input file given (--input or [recommend])".into()))?;
    let use_recommended = args.use_recommended || section.is_some_and(|s| s.use_recommended);
    if let Some(t) = args.threads.or(cfg.map(|c| c.threads)) {
        set_threads(t);
    }
    require_file(&policy_path)?;
    require_file(&input)?;
    let base = loaded
        .as_ref()
        .map_or_else(|| PathBuf::from("."), |l| l.dir.clone());
    let out = out_dir(args.out.as_ref(), cfg, &base);

    let text = fs::read_to_string(&policy_path).map_err(|e| Error::io(&policy_path, e))?;
    let pf = PolicyFile::from_json(&text)?;
    let doses = recommend_csv(&pf, &input, use_recommended)?;

    let n_stages = pf.stages.len();
    let mut header = vec!["row".to_string()];
    header.extend((1..=n_stages).map(|t| stage_column(&pf.dose_column, t)));
    let rows: Vec<Vec<String>> = doses
        .iter()
        .enumerate()
        .map(|(i, d)| {
            std::iter::once((i + 1).to_string())
                .chain(d.iter().map(|v| format_float(*v)))
                .collect()
        })
        .collect();
    let mut arts = Artifacts::new(out.clone())?;
    arts.write("recommendations.csv", &csv_bytes(&header, &rows)?)?;
    let seed = args.seed.or(cfg.and_then(|c| c.seed));
    arts.finish("recommend", loaded.map(|l| l.sha), seed)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Entry point

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_PIPELINE,
    }
}

#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    status: &'a str,
    command: &'a str,
    kind: &'a str,
    exit_code: i32,
    message: String,
}

fn report_error(command: &str, e: &Error, out: Option<&Path>) -> i32 {
    let code = exit_code(e);
    let rec = ErrorRecord {
        status: "error",
        command,
        kind: e.kind(),
        exit_code: code,
        message: e.to_string(),
    };
    let json = serde_json::to_string(&rec)
        .unwrap_or_else(|_| format!("{{\"status\":\"error\",\"exit_code\":{code}}}"));
    eprintln!("{json}");
    if let Some(dir) = out {
        if fs::create_dir_all(dir).is_ok() {
            let _ = fs::write(dir.join("error.json"), json + "\n");
        }
    }
    code
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (name, result, out) = match &cli.command {
        Command::Fit(a) => ("fit", cmd_fit(a), a.out.clone()),
        Command::Simulate(a) => ("simulate", cmd_simulate(a), a.out.clone()),
        Command::Recommend(a) => ("recommend", cmd_recommend(a), a.out.clone()),
    };
    match result {
        Ok(dir) => {
            log::info!("{name}: wrote {}", dir.display());
            EXIT_OK
        }
        Err(e) => report_error(name, &e, out.as_deref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effectcurve::Bandwidth;

    fn stump_policy() -> Policy {
        let tree = DoseTree::from_nodes(vec![
            Node::Split {
                rule: SplitRule {
                    feature: 1,
                    threshold: 0.25,
                },
                left: 1,
                right: 2,
            },
            Node::Leaf {
                dose: 0.2,
                n_samples: 7,
            },
            Node::Leaf {
                dose: 0.9,
                n_samples: 3,
            },
        ])
        .unwrap();
        let names = vec!["x1".to_string(), "x2".to_string()];
        let history = vec!["x1_t1".to_string(), "x2_t1".to_string()];
        let sp = StagePolicy::new(tree, DoseScaler::new(10.0, 60.0).unwrap(), history).unwrap();
        Policy::new(vec![sp], vec![names], Direction::Minimize).unwrap()
    }

    #[test]
    fn config_requires_version() {
        assert!(RunConfig::parse("seed = 1").is_err());
        assert!(RunConfig::parse("version = 2\nseed = 1").is_err());
        let c = RunConfig::parse("version = 1\nseed = 3").unwrap();
        assert_eq!(c.seed, Some(3));
        assert!(RunConfig::parse("version = 1\nbogus = 1").is_err());
    }

    #[test]
    fn fit_section_options() {
        let c = RunConfig::parse(
            "version = 1\nseed = 42\n[fit]\ndata = \"train.csv\"\ndose = \"dose\"\noutcome = \"y\"\n\
             direction = \"minimize\"\nmissing = \"error\"\n\
             [fit.dtr.pipeline.tao]\nheight = 2\nrestarts = 5\n\
             [fit.dtr.pipeline.outcome_model]\nkind = \"bart\"\nn_burn = 5000\n\
             [fit.dtr.pipeline.smoother]\nbandwidth = { fixed = 0.1 }\n",
        )
        .unwrap();
        let f = c.fit.unwrap();
        assert_eq!(f.direction, Direction::Minimize);
        assert_eq!(f.dtr.pipeline.smoother.bandwidth, Bandwidth::Fixed(0.1));
        assert_eq!(f.dtr.pipeline.tao.restarts, 5);
    }

    #[test]
    fn simulate_section_defaults() {
        let c = RunConfig::parse("version = 1\n[simulate]\nscenario = 2\nheight = 2\n").unwrap();
        let s = c.simulate.unwrap();
        assert_eq!((s.n, s.p, s.replications), (500, 10, 20));
        assert_eq!(s.methods.len(), 3);
        let study = study_config(&s, 5).unwrap();
        assert_eq!(study.dtr.pipeline.tao.height, 2);
        assert_eq!(study.scenario.seed, 5);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let c = RunConfig::parse(
            "version = 1\nout = \"o\"\n[fit]\ndata = \"d.csv\"\ndose = \"a\"\noutcome = \"y\"\n",
        )
        .unwrap()
        .resolve_paths(Path::new("/tmp/run"));
        assert_eq!(c.out.unwrap(), Path::new("/tmp/run/o"));
        assert_eq!(c.fit.unwrap().data, Path::new("/tmp/run/d.csv"));
    }

    #[test]
    fn policy_file_round_trip() {
        let p = stump_policy();
        let pf = PolicyFile::from_policy(&p, "a", "y");
        let back = PolicyFile::from_json(&pf.to_json().unwrap()).unwrap();
        assert_eq!(back, pf);
        let q = back.to_policy().unwrap();
        for x2 in [-1.0, 0.25, 0.2500001, 3.0] {
            let h = [0.0, x2];
            assert_eq!(p.stage_dose(1, &h).unwrap(), q.stage_dose(1, &h).unwrap());
        }
        match &pf.stages[0].nodes[1] {
            NodeRecord::Leaf {
                dose, n_samples, ..
            } => {
                assert_eq!(*dose, 20.0);
                assert_eq!(*n_samples, 7);
            }
            other => panic!("expected leaf, got {other:?}"),
        }
    }

    #[test]
    fn policy_file_rejects_unknown_feature() {
        let mut pf = PolicyFile::from_policy(&stump_policy(), "a", "y");
        if let NodeRecord::Split { feature, .. } = &mut pf.stages[0].nodes[0] {
            *feature = "zz".into();
        }
        let e = pf.to_policy().unwrap_err();
        assert!(e.to_string().contains("zz"));
        pf.schema_version = 9;
        assert!(pf.to_policy().is_err());
    }

    #[test]
    fn dot_lists_every_node_and_edge() {
        let dot = stage_dot(&stump_policy().stages()[0], 1);
        assert!(dot.starts_with("digraph stage1 {"));
        assert!(dot.trim_end().ends_with('}'));
        assert!(dot.contains("n0 [label=\"x2_t1 <= 0.25\"]"));
        assert_eq!(dot.matches("->").count(), 2);
        assert!(dot.contains("dose 20.0000"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Schema("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::DegenerateKernel), EXIT_PIPELINE);
        let staged = Error::Stage {
            stage: 2,
            source: Box::new(Error::DegenerateDose(1.0)),
        };
        assert_eq!(exit_code(&staged), EXIT_DATA);
    }

    #[test]
    fn text_table_flags_single_replication() {
        use crate::sim::EvalReport;
        let rep = EvalReport {
            replications: 1,
            regret_mean: 2.5,
            regret_sd: 0.0,
            rmse_mean: vec![0.15],
            rmse_sd: vec![0.0],
            sd_defined: false,
        };
        let reports = vec![MethodReport {
            method: Method::GoDoTree,
            report: rep,
            replications: Vec::new(),
        }];
        let s = SimulateSection {
            scenario: 2,
            n: 500,
            p: 10,
            height: Some(2),
            replications: 1,
            n_test: 100,
            methods: vec![Method::GoDoTree],
            c0: None,
            noise: NoiseConvention::Variance,
            dtr: DtrConfig::default(),
        };
        let text = results_text(&study_config(&s, 1).unwrap(), &reports);
        assert!(text.contains("2.500 (0.000)*"));
        assert!(text.contains("SD undefined"));
        let (header, rows) = results_table(&reports);
        assert_eq!(header.last().unwrap(), "sd_defined");
        assert_eq!(rows[0].last().unwrap(), "false");
    }
}
