//! End-to-end pipeline: run configuration, per-stage artifact directories and
//! the stage implementations behind the command-line tool.
//!
//! Every stage writes one directory under the output root. The directory is
//! assembled under `<name>.tmp` and renamed into place, and always contains
//! `stage.json` (format version, producing command, config hash, seed, file
//! list) and `config.json` (the effective configuration).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::alphabet::Peptide;
use crate::cmaes::{self, CmaesConfig, SurrogateObjective};
use crate::collector::{self, SamplingOptions};
use crate::data::{
    self, corpus_csv, labelled_csv, peptide_lines, read_corpus_csv, read_labelled_csv, read_peptide_lines,
};
use crate::error::{Error, Result};
use crate::eval::{self, RankReference};
use crate::gibbs::{self, Candidate, GibbsConfig};
use crate::gmm;
use crate::oracle::{BindingOracle, OracleConfig};
use crate::selfcheck;
use crate::stats;
use crate::surrogate::{self, SurrogateConfig, SurrogateModel};
use crate::util::write_atomic;
use crate::wae::{self, WaeConfig, WaeModel};

pub const FORMAT_VERSION: u32 = 1;
pub const STAGE_MANIFEST: &str = "stage.json";
pub const STAGE_CONFIG: &str = "config.json";
pub const OUT_DIR_ENV: &str = "LSATC_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub unlabelled: usize,
    pub labelled: usize,
    pub oracle: OracleConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            unlabelled: 20_000,
            labelled: 5_000,
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectorConfig {
    pub top_n: usize,
    pub clusters: usize,
    /// Unique valid peptides to harvest.
    pub count: usize,
    pub max_iterations: usize,
    pub batch: usize,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            top_n: collector::DEFAULT_TOP,
            clusters: collector::DEFAULT_CLUSTERS,
            count: 100,
            max_iterations: 100,
            batch: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub gmm_components: usize,
    pub gmm_max_iter: usize,
    pub gmm_batch: usize,
    pub gmm_max_batches: usize,
    pub random_count: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            gmm_components: gmm::DEFAULT_COMPONENTS,
            gmm_max_iter: gmm::DEFAULT_MAX_ITER,
            gmm_batch: 1000,
            gmm_max_batches: 100,
            random_count: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub top_n: usize,
    pub gibbs: GibbsConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            top_n: 40,
            gibbs: GibbsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub wae: WaeConfig,
    pub surrogate: SurrogateConfig,
    pub cmaes: CmaesConfig,
    pub collector: CollectorConfig,
    pub evaluation: EvaluationConfig,
    pub selection: SelectionConfig,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `path=value`
    /// overrides and finally the explicit seed.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = crate::util::read_to_string(p)?;
                let parsed: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    reason: e.to_string(),
                })?;
                serde_json::to_value(parsed)?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("after overrides: {e}")))?;
        if seed.is_some() {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.data.oracle.validate()?;
        self.wae.validate()?;
        self.surrogate.validate()?;
        self.cmaes.validate(self.wae.latent_dim)?;
        if self.data.unlabelled == 0 || self.data.labelled == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.collector.count == 0 || self.collector.clusters == 0 || self.collector.batch == 0 {
            return Err(Error::Config(
                "collector count, clusters and batch must be positive".into(),
            ));
        }
        if self.selection.top_n < self.selection.gibbs.clusters {
            return Err(Error::Config(
                "selection.top_n must be at least the number of gibbs clusters".into(),
            ));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Sets a dotted path inside a JSON document. The value is parsed as JSON and
/// falls back to a plain string. The path must already exist.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for key in path.split('.') {
        cur = cur
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config path {path:?}")))?;
    }
    *cur = value;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Data,
    Wae,
    Surrogate,
    Optimize,
    Collect,
    Sample,
    Evaluate,
    Select,
    GradCheck,
}

impl Stage {
    pub const PIPELINE: [Stage; 8] = [
        Stage::Data,
        Stage::Wae,
        Stage::Surrogate,
        Stage::Optimize,
        Stage::Collect,
        Stage::Sample,
        Stage::Evaluate,
        Stage::Select,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Wae => "wae",
            Stage::Surrogate => "surrogate",
            Stage::Optimize => "optimize",
            Stage::Collect => "collect",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
            Stage::Select => "select",
            Stage::GradCheck => "grad-check",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            Stage::Data => "gen-data",
            Stage::Wae => "train-wae",
            Stage::Surrogate => "train-surrogate",
            Stage::Optimize => "optimize",
            Stage::Collect => "collect",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
            Stage::Select => "select-final",
            Stage::GradCheck => "grad-check",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Data | Stage::GradCheck => &[],
            Stage::Wae | Stage::Surrogate => &[Stage::Data],
            Stage::Optimize => &[Stage::Wae, Stage::Surrogate],
            Stage::Collect => &[Stage::Optimize],
            Stage::Sample => &[Stage::Collect, Stage::Wae],
            Stage::Evaluate => &[Stage::Data, Stage::Wae, Stage::Sample],
            Stage::Select => &[Stage::Data, Stage::Sample],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<String>,
}

/// Everything a stage needs to run.
#[derive(Debug, Clone)]
pub struct Context {
    pub out_dir: PathBuf,
    pub config: RunConfig,
    pub seed: u64,
    pub config_hash: String,
    pub workers: usize,
    /// Accept upstream artifacts produced under a different configuration.
    pub force: bool,
}

impl Context {
    pub fn new(out_dir: PathBuf, config: RunConfig, workers: usize, force: bool) -> Result<Self> {
        let seed = config.seed()?;
        Ok(Context {
            out_dir,
            config_hash: config.hash(),
            config,
            seed,
            workers: workers.max(1),
            force,
        })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(stage.dir_name())
    }

    fn provenance(&self, stage: Stage) -> Value {
        json!({
            "format_version": FORMAT_VERSION,
            "command": stage.command(),
            "config_hash": self.config_hash,
            "seed": self.seed,
        })
    }

    /// Checks an upstream stage's manifest and returns its directory.
    pub fn require(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        let path = dir.join(STAGE_MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact { path });
        }
        let manifest = read_stage_manifest(&dir)?;
        if manifest.config_hash != self.config_hash && !self.force {
            return Err(Error::IncompatibleArtifact {
                path,
                reason: format!(
                    "produced under config hash {}, current config is {} (use --force to accept)",
                    manifest.config_hash, self.config_hash
                ),
            });
        }
        Ok(dir)
    }

    fn require_upstream(&self, stage: Stage) -> Result<()> {
        for &up in stage.upstream() {
            self.require(up)?;
        }
        Ok(())
    }

    /// Runs `write` against a staging directory, then publishes it as the
    /// stage's directory with its manifest and config.
    fn commit(&self, stage: Stage, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let dir = self.stage_dir(stage);
        let staging = crate::util::tmp_path(&dir);
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        write(&staging)?;
        write_atomic(&staging.join(STAGE_CONFIG), &serde_json::to_vec_pretty(&self.config)?)?;
        let mut files = list_files(&staging)?;
        files.push(STAGE_MANIFEST.to_string());
        files.sort();
        let manifest = StageManifest {
            format_version: FORMAT_VERSION,
            command: stage.command().to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            files,
        };
        write_atomic(&staging.join(STAGE_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::rename(&staging, &dir).map_err(|e| Error::io(&dir, e))
    }
}

pub fn read_stage_manifest(dir: &Path) -> Result<StageManifest> {
    let path = dir.join(STAGE_MANIFEST);
    let text = crate::util::read_to_string(&path)?;
    let manifest: StageManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::IncompatibleArtifact {
            path,
            reason: format!("format_version {} (expected {FORMAT_VERSION})", manifest.format_version),
        });
    }
    Ok(manifest)
}

/// Relative paths of all files below `root`, sorted.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("below root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = crate::util::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn gen_data(ctx: &Context) -> Result<Value> {
    let cfg = &ctx.config.data;
    log::info!(
        "generating {} unlabelled and {} labelled sequences",
        cfg.unlabelled,
        cfg.labelled
    );
    let unlabelled = data::generate_unlabelled(cfg.unlabelled, ctx.seed)?;
    let labelled = data::generate_labelled(cfg.labelled, ctx.seed, &cfg.oracle, ctx.workers)?;
    let classes = eval::assign_labels(&labelled.corpus)?;
    let class0 = classes.iter().filter(|&&c| c == 0).count();
    ctx.commit(Stage::Data, |dir| {
        write_atomic(&dir.join("unlabelled.txt"), peptide_lines(&unlabelled).as_bytes())?;
        write_atomic(&dir.join("labelled.csv"), labelled_csv(&labelled.records).as_bytes())?;
        write_atomic(&dir.join("corpus.csv"), corpus_csv(&labelled.corpus).as_bytes())?;
        write_json(&dir.join("stats.json"), &labelled.stats)
    })?;
    Ok(json!({
        "unlabelled": unlabelled.len(),
        "labelled": labelled.records.len(),
        "corpus": labelled.corpus.len(),
        "class0": class0,
    }))
}

pub fn train_wae(ctx: &Context) -> Result<Value> {
    ctx.require_upstream(Stage::Wae)?;
    let peptides = read_peptide_lines(&ctx.stage_dir(Stage::Data).join("unlabelled.txt"))?;
    let (model, report) = wae::train_model(&peptides, &ctx.config.wae, ctx.seed, |_| {})?;
    ctx.commit(Stage::Wae, |dir| {
        model.save(&dir.join("model"), ctx.provenance(Stage::Wae))?;
        write_json(&dir.join("report.json"), &report)
    })?;
    let last = report.last();
    Ok(json!({
        "variant": report.variant,
        "epochs": report.epochs.len(),
        "test_ce": last.test_ce,
        "sampling_mismatch": last.sampling_mismatch,
        "exact_fraction": last.exact_fraction,
    }))
}

pub fn train_surrogate(ctx: &Context) -> Result<Value> {
    ctx.require_upstream(Stage::Surrogate)?;
    let records = read_labelled_csv(&ctx.stage_dir(Stage::Data).join("labelled.csv"))?;
    let (model, report) = surrogate::train_surrogate(&records, &ctx.config.surrogate, ctx.seed)?;
    ctx.commit(Stage::Surrogate, |dir| {
        model.save(&dir.join("model"), ctx.provenance(Stage::Surrogate))?;
        write_json(&dir.join("report.json"), &report)
    })?;
    Ok(json!({
        "hydro_r2": report.hydro.r2,
        "binding_spearman": report.binding.spearman,
        "test_loss": report.epochs.last().map(|e| e.test_loss),
    }))
}

fn load_wae(ctx: &Context) -> Result<WaeModel> {
    WaeModel::load(&ctx.require(Stage::Wae)?.join("model"))
}

/// Mean sigma over the first and last tenth of a trajectory.
pub fn sigma_ends(records: &[cmaes::StepRecord]) -> (f64, f64) {
    let tenth = (records.len() / 10).max(1);
    let sig: Vec<f64> = records.iter().map(|r| r.sigma).collect();
    (stats::mean(&sig[..tenth]), stats::mean(&sig[sig.len() - tenth..]))
}

pub fn optimize(ctx: &Context) -> Result<Value> {
    ctx.require_upstream(Stage::Optimize)?;
    let wae = load_wae(ctx)?;
    let sur = SurrogateModel::load(&ctx.require(Stage::Surrogate)?.join("model"))?;
    let objective = SurrogateObjective {
        wae: &wae,
        surrogate: &sur,
        workers: ctx.workers,
    };
    let d = wae.shape().latent_dim;
    let traj = cmaes::run_optimization(&objective, d, &ctx.config.cmaes, ctx.seed, |r| {
        if r.iter % 50 == 0 {
            log::info!(
                "cmaes iter {}: loss_mean {:.4} best {:.4} validity {:.3} sigma {:.4} attempts {}",
                r.iter,
                r.loss_mean,
                r.loss_best,
                r.validity,
                r.sigma,
                r.attempts
            );
        }
    })?;
    let (first, last) = sigma_ends(&traj.records);
    let best = traj.records.iter().map(|r| r.loss_mean).fold(f64::INFINITY, f64::min);
    let summary = json!({
        "iterations": traj.records.len(),
        "best_loss_mean": best,
        "sigma_first_tenth": first,
        "sigma_last_tenth": last,
        "mean_validity": stats::mean(&traj.records.iter().map(|r| r.validity).collect::<Vec<_>>()),
    });
    ctx.commit(Stage::Optimize, |dir| {
        write_atomic(
            &dir.join("trajectory.jsonl"),
            cmaes::trajectory_jsonl(&traj.records)?.as_bytes(),
        )?;
        write_json(&dir.join("summary.json"), &summary)
    })?;
    Ok(summary)
}

pub fn collect(ctx: &Context) -> Result<Value> {
    ctx.require_upstream(Stage::Collect)?;
    let cfg = &ctx.config.collector;
    let traj = cmaes::read_trajectory(&ctx.stage_dir(Stage::Optimize).join("trajectory.jsonl"))?;
    let top = collector::select_top(&traj, cfg.top_n)?;
    let reps = collector::pick_representatives(&top, cfg.clusters, ctx.seed)?;
    ctx.commit(Stage::Collect, |dir| {
        collector::write_samplers(&dir.join("top.jsonl"), &top)?;
        collector::write_samplers(&dir.join("samplers.jsonl"), &reps)
    })?;
    Ok(json!({
        "top": top.len(),
        "representatives": reps.iter().map(|r| r.iter).collect::<Vec<_>>(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub collected: usize,
    pub iterations: usize,
    pub shortfall: bool,
    pub curve: collector::DepletionCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepletionReport {
    pub kmeans: StrategyOutcome,
    pub single_best: StrategyOutcome,
}

pub fn sample(ctx: &Context) -> Result<Value> {
    ctx.require_upstream(Stage::Sample)?;
    let cfg = &ctx.config.collector;
    let collect_dir = ctx.stage_dir(Stage::Collect);
    let reps = collector::read_samplers(&collect_dir.join("samplers.jsonl"))?;
    let top = collector::read_samplers(&collect_dir.join("top.jsonl"))?;
    let wae = load_wae(ctx)?;
    let options = SamplingOptions {
        max_iterations: cfg.max_iterations,
        batch: cfg.batch,
        workers: ctx.workers,
    };
    let harvest = collector::sample_peptides(&reps, cfg.count, &wae, &options, ctx.seed)?;
    if harvest.peptides.is_empty() {
        return Err(Error::Empty("valid peptides decoded from the collected samplers"));
    }
    let single = collector::sample_peptides(&top[..1], cfg.count, &wae, &options, ctx.seed)?;
    let outcome = |h: &collector::Harvest| StrategyOutcome {
        collected: h.peptides.len(),
        iterations: h.iterations,
        shortfall: h.shortfall,
        curve: h.curve.clone(),
    };
    let report = DepletionReport {
        kmeans: outcome(&harvest),
        single_best: outcome(&single),
    };
    ctx.commit(Stage::Sample, |dir| {
        write_atomic(&dir.join("peptides.txt"), peptide_lines(&harvest.peptides).as_bytes())?;
        write_json(&dir.join("depletion.json"), &report)
    })?;
    Ok(serde_json::to_value(&report)?)
}

fn scored_csv(sets: &[(&str, &[(data::RawRecord, eval::OverallScore)])]) -> String {
    let mut out = String::from("set,sequence,binding_raw,hydro_raw,binding_rank,hydro_rank,total\n");
    for (name, rows) in sets {
        for (r, s) in rows.iter() {
            out.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                r.sequence,
                crate::util::fmt_sig9(r.binding_raw),
                crate::util::fmt_sig9(r.hydro_raw),
                s.binding_rank,
                s.hydro_rank,
                s.total
            ));
        }
    }
    out
}

pub fn evaluate(ctx: &Context) -> Result<Value> {
    ctx.require_upstream(Stage::Evaluate)?;
    let cfg = &ctx.config.evaluation;
    let corpus = read_corpus_csv(&ctx.stage_dir(Stage::Data).join("corpus.csv"))?;
    let lsatc = read_peptide_lines(&ctx.stage_dir(Stage::Sample).join("peptides.txt"))?;
    let wae = load_wae(ctx)?;
    let classes = eval::assign_labels(&corpus)?;
    let class0: Vec<Peptide> = corpus
        .iter()
        .zip(&classes)
        .filter(|(_, &c)| c == 0)
        .map(|(r, _)| r.sequence)
        .collect();
    if class0.is_empty() {
        return Err(Error::Empty("class-0 corpus subset"));
    }
    let enc = wae.encode_peptides(&class0);
    let points: Vec<Vec<f64>> = (0..enc.rows()).map(|i| enc.row(i).to_vec()).collect();
    let fit = gmm::fit_gmm(&points, cfg.gmm_components, ctx.seed, cfg.gmm_max_iter)?;
    let gmm_sample = gmm::sample_gmm(
        &fit.model,
        ctx.config.collector.count,
        ctx.seed,
        &wae,
        cfg.gmm_batch,
        cfg.gmm_max_batches,
    )?;
    if gmm_sample.peptides.is_empty() {
        return Err(Error::Empty("valid peptides decoded from the gmm baseline"));
    }
    let random = eval::random_baseline(cfg.random_count, ctx.seed)?;
    let oracle = BindingOracle::new(&ctx.config.data.oracle)?;
    let reference = RankReference::new(&corpus)?;
    let score = |p: &[Peptide]| eval::score_peptides(p, &oracle, &reference, ctx.workers);
    let (s_lsatc, s_gmm, s_random) = (score(&lsatc), score(&gmm_sample.peptides), score(&random));
    let totals = |s: &[(data::RawRecord, eval::OverallScore)]| s.iter().map(|(_, o)| *o).collect::<Vec<_>>();
    let report = eval::compare_models(&[
        ("lsatc".to_string(), totals(&s_lsatc)),
        ("gmm".to_string(), totals(&s_gmm)),
        (eval::RANDOM_SET.to_string(), totals(&s_random)),
    ])?;
    ctx.commit(Stage::Evaluate, |dir| {
        write_json(&dir.join("report.json"), &report)?;
        write_atomic(&dir.join("report.txt"), report.text_table().as_bytes())?;
        write_json(
            &dir.join("gmm.json"),
            &json!({
                "class0": class0.len(),
                "fit": fit,
                "sampled": gmm_sample.peptides.len(),
                "draws": gmm_sample.draws,
                "shortfall": gmm_sample.shortfall,
            }),
        )?;
        write_atomic(
            &dir.join("scores.csv"),
            scored_csv(&[("lsatc", &s_lsatc), ("gmm", &s_gmm), ("random", &s_random)]).as_bytes(),
        )
    })?;
    Ok(serde_json::to_value(&report)?)
}

pub fn select_final(ctx: &Context) -> Result<Value> {
    ctx.require_upstream(Stage::Select)?;
    let cfg = &ctx.config.selection;
    let corpus = read_corpus_csv(&ctx.stage_dir(Stage::Data).join("corpus.csv"))?;
    let peptides = read_peptide_lines(&ctx.stage_dir(Stage::Sample).join("peptides.txt"))?;
    let oracle = BindingOracle::new(&ctx.config.data.oracle)?;
    let reference = RankReference::new(&corpus)?;
    let candidates: Vec<Candidate> = eval::score_peptides(&peptides, &oracle, &reference, ctx.workers)
        .into_iter()
        .map(|(r, s)| Candidate {
            peptide: r.sequence,
            score: s,
        })
        .collect();
    let selection = gibbs::select_final(&candidates, cfg.top_n, &cfg.gibbs, ctx.seed)?;
    ctx.commit(Stage::Select, |dir| {
        write_json(&dir.join("final.json"), &selection)?;
        write_atomic(&dir.join("final.txt"), selection.summary().as_bytes())
    })?;
    Ok(json!({
        "representatives": selection.representatives.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
    }))
}

pub fn grad_check(ctx: &Context) -> Result<Value> {
    let entries = selfcheck::grad_check_suite(ctx.seed)?;
    let passed = entries.iter().all(|e| e.passed);
    let worst = entries.iter().map(|e| e.max_error()).fold(0.0, f64::max);
    ctx.commit(Stage::GradCheck, |dir| write_json(&dir.join("report.json"), &entries))?;
    Ok(json!({
        "passed": passed,
        "max_rel_error": worst,
        "checks": entries.iter().map(|e| json!({"name": e.name, "max_rel_error": e.max_error(), "passed": e.passed})).collect::<Vec<_>>(),
    }))
}

pub fn run_stage(ctx: &Context, stage: Stage) -> Result<Value> {
    match stage {
        Stage::Data => gen_data(ctx),
        Stage::Wae => train_wae(ctx),
        Stage::Surrogate => train_surrogate(ctx),
        Stage::Optimize => optimize(ctx),
        Stage::Collect => collect(ctx),
        Stage::Sample => sample(ctx),
        Stage::Evaluate => evaluate(ctx),
        Stage::Select => select_final(ctx),
        Stage::GradCheck => grad_check(ctx),
    }
}

/// Runs every pipeline stage in order. Refuses to start over artifacts from
/// a different configuration unless forced.
pub fn run_all(ctx: &Context) -> Result<Value> {
    if !ctx.force {
        for stage in Stage::PIPELINE {
            let dir = ctx.stage_dir(stage);
            if dir.join(STAGE_MANIFEST).exists() {
                let m = read_stage_manifest(&dir)?;
                if m.config_hash != ctx.config_hash {
                    return Err(Error::IncompatibleArtifact {
                        path: dir,
                        reason: format!(
                            "existing artifacts use config hash {}, current is {} (use --force to replace)",
                            m.config_hash, ctx.config_hash
                        ),
                    });
                }
            }
        }
    }
    let mut summary = serde_json::Map::new();
    for stage in Stage::PIPELINE {
        log::info!("stage {}", stage.command());
        summary.insert(stage.command().to_string(), run_stage(ctx, stage)?);
    }
    Ok(Value::Object(summary))
}

/// Reads the comparison report written by `evaluate`.
pub fn read_report(ctx: &Context) -> Result<eval::ComparisonReport> {
    read_json(&ctx.stage_dir(Stage::Evaluate).join("report.json"))
}

/// Reads the depletion report written by `sample`.
pub fn read_depletion(ctx: &Context) -> Result<DepletionReport> {
    read_json(&ctx.stage_dir(Stage::Sample).join("depletion.json"))
}
