//! Stage orchestration: data → partition → plan → enforce → train → eval → reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dmcr_core::clustering::{cluster_with_replication, ClusterPlan, LabelSets};
use dmcr_core::data::{
    enforce_proportions, gen_synthetic_subspaces, load_idx, partition, split_per_class, Dataset, DuplicationLog, EnforceMode,
    PartitionMode, PartitionSpec, Shard, SyntheticSpec,
};
use dmcr_core::dsgd::{self, DsgdState};
use dmcr_core::encoder::{self, EncoderParams};
use dmcr_core::eval::{self, GeometryReport};
use dmcr_core::iid::{run_iid, NodeInit, TrainedState};
use dmcr_core::network::build_topology;
use dmcr_core::noniid::{run_noniid, NoniidConfig, NoniidState};
use dmcr_core::seed::{self, tag};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, DataConfig, ExperimentConfig, PartitionKind};
use crate::error::CliError;
use crate::report;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub cause: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub algorithm: String,
    pub status: String,
    pub failure: Option<Failure>,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub stages: Vec<StageTiming>,
    pub files: Vec<String>,
    /// Headline numbers: accuracy, final consensus, structure pass (0/1), ...
    pub summary: BTreeMap<String, f64>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Run directory bookkeeping shared by every verb.
pub struct Run {
    pub dir: PathBuf,
    pub quiet: bool,
    pub manifest: RunManifest,
}

impl Run {
    pub fn new(config: &ExperimentConfig, dir: &Path, quiet: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            quiet,
            manifest: RunManifest {
                config_hash: config.hash(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                algorithm: config.algorithm.name().to_string(),
                status: "running".into(),
                failure: None,
                started_at: now(),
                finished_at: 0.0,
                stages: Vec::new(),
                files: Vec::new(),
                summary: BTreeMap::new(),
            },
        })
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        if !self.quiet {
            eprintln!("[{name}] ...");
        }
        let start = Instant::now();
        match f(self) {
            Ok(v) => {
                let seconds = start.elapsed().as_secs_f64();
                if !self.quiet {
                    eprintln!("[{name}] done in {seconds:.2}s");
                }
                self.manifest.stages.push(StageTiming { name: name.into(), seconds });
                Ok(v)
            }
            Err(e) => {
                let cause = match &e {
                    CliError::Stage { source, .. } => source.to_string(),
                    other => other.to_string(),
                };
                self.manifest.failure = Some(Failure { stage: name.into(), cause });
                Err(match e {
                    CliError::Stage { source, .. } => CliError::Stage { stage: name.into(), source },
                    other => other,
                })
            }
        }
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), contents)?;
        if !self.manifest.files.iter().any(|f| f == name) {
            self.manifest.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest, CliError> {
        self.manifest.status = "ok".into();
        self.manifest.finished_at = now();
        let mut files = self.manifest.files.clone();
        files.push("manifest.json".into());
        self.manifest.files = files;
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(self.dir.join("manifest.json"), json)?;
        Ok(self.manifest)
    }

    /// Mark every emitted file `.partial` and leave a manifest naming the
    /// failed stage.
    pub fn abort(mut self, err: CliError) -> CliError {
        self.manifest.status = "failed".into();
        self.manifest.finished_at = now();
        let mut renamed = Vec::new();
        for f in &self.manifest.files {
            let partial = format!("{f}.partial");
            if std::fs::rename(self.dir.join(f), self.dir.join(&partial)).is_ok() {
                renamed.push(partial);
            }
        }
        renamed.push("manifest.json.partial".into());
        self.manifest.files = renamed;
        if self.manifest.failure.is_none() {
            self.manifest.failure = Some(Failure { stage: "unknown".into(), cause: err.to_string() });
        }
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let _ = std::fs::write(self.dir.join("manifest.json.partial"), json);
        err
    }
}

/// Everything before training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Shard>,
    pub duplication: DuplicationLog,
    pub plan: Option<ClusterPlan>,
    pub class_dims: Option<Vec<usize>>,
}

pub fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let stage = CliError::stage("data");
    match &config.data {
        DataConfig::Synthetic { classes, class_dim, train_per_class, test_per_class, ambient, noise } => {
            let spec = SyntheticSpec {
                num_classes: *classes,
                class_dim: *class_dim,
                per_class: train_per_class + test_per_class,
                ambient: *ambient,
                noise: *noise,
                seed: config.seed,
            };
            let all = gen_synthetic_subspaces(&spec).map_err(CliError::stage("data"))?;
            split_per_class(&all, *test_per_class).map_err(stage)
        }
        DataConfig::Idx { train_images, train_labels, test_images, test_labels, train_limit, test_limit } => {
            let train = load_idx(train_images, train_labels, *train_limit).map_err(CliError::stage("data"))?;
            let mut test = load_idx(test_images, test_labels, *test_limit).map_err(stage)?;
            test.num_classes = test.num_classes.max(train.num_classes);
            Ok((train, test))
        }
    }
}

pub fn make_plan(config: &ExperimentConfig, num_classes: usize) -> Result<ClusterPlan, CliError> {
    let lists = config.partition.labels.as_ref().ok_or_else(|| CliError::Validation {
        field: "partition.labels".into(),
        message: "a cluster plan needs label lists".into(),
    })?;
    let plan_arg = config.noniid.as_ref().and_then(|n| n.plan.clone()).unwrap_or_else(|| "auto".into());
    if plan_arg == "auto" {
        let sets = LabelSets::from_lists(lists, num_classes).map_err(CliError::stage("plan"))?;
        return cluster_with_replication(&sets).map_err(CliError::stage("plan"));
    }
    let text = std::fs::read_to_string(&plan_arg).map_err(|e| CliError::Config(format!("{plan_arg}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{plan_arg}: {e}")))
}

/// Data, partition, plan and proportion enforcement.
pub fn prepare(run: &mut Run, config: &ExperimentConfig) -> Result<Prepared, CliError> {
    let (train, test) = run.stage("data", |_| load_data(config))?;
    let shards = run.stage("partition", |_| {
        let mode = match config.partition.mode {
            PartitionKind::Iid => PartitionMode::Iid,
            PartitionKind::Labels => PartitionMode::ByLabels(config.partition.labels.clone().unwrap_or_default()),
        };
        partition(&train, &PartitionSpec { mode, n_nodes: config.partition.nodes, seed: config.seed }).map_err(CliError::stage("partition"))
    })?;
    let plan = match config.algorithm {
        Algorithm::Noniid => Some(run.stage("plan", |_| make_plan(config, train.num_classes))?),
        _ => None,
    };
    let (shards, duplication) = if config.partition.enforce {
        run.stage("enforce", |_| {
            let mode = match &plan {
                Some(p) => EnforceMode::Clusters(p),
                None => EnforceMode::Iid,
            };
            enforce_proportions(&shards, mode, config.seed).map_err(CliError::stage("enforce"))
        })?
    } else {
        (shards, DuplicationLog::new())
    };
    let class_dims = config.eval.class_dims.clone().or_else(|| match &config.data {
        DataConfig::Synthetic { classes, class_dim, .. } => Some(vec![*class_dim; *classes]),
        DataConfig::Idx { .. } => None,
    });
    Ok(Prepared { train, test, shards, duplication, plan, class_dims })
}

pub enum Trained {
    Iid(TrainedState),
    Noniid(NoniidState),
    Dsgd(DsgdState),
}

impl Trained {
    pub fn params(&self) -> &[EncoderParams] {
        match self {
            Trained::Iid(s) => &s.params,
            Trained::Noniid(s) => &s.run.params,
            Trained::Dsgd(s) => &s.params,
        }
    }

    pub fn final_consensus(&self) -> Option<f64> {
        match self {
            Trained::Iid(s) => s.consensus.last().copied(),
            Trained::Noniid(s) => s.run.consensus.last().copied(),
            Trained::Dsgd(s) => s.consensus.last().copied(),
        }
    }
}

fn arch(config: &ExperimentConfig, input: usize, num_classes: usize) -> Vec<usize> {
    let mut body = vec![input];
    body.extend(&config.model.hidden);
    body.push(config.model.dim);
    match config.algorithm {
        Algorithm::Dsgd => dsgd::classifier_arch(&body, num_classes),
        _ => body,
    }
}

fn nodes(config: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<NodeInit>, CliError> {
    let layers = arch(config, prepared.train.n_features(), prepared.train.num_classes);
    prepared
        .shards
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let index = if config.model.shared_init { 0 } else { i as u64 };
            let params = encoder::init_params(&layers, config.model.activation, seed::derive(config.seed, tag::ENCODER, index))
                .map_err(CliError::stage("train"))?;
            Ok(NodeInit { data: s.data.clone(), params })
        })
        .collect()
}

pub fn train(config: &ExperimentConfig, prepared: &Prepared) -> Result<Trained, CliError> {
    let inits = nodes(config, prepared)?;
    let typical = inits.iter().map(|n| n.data.len()).max().unwrap_or(1);
    let train = config.train.to_train_config(config.seed, typical);
    let stage = CliError::stage("train");
    Ok(match config.algorithm {
        Algorithm::Iid => {
            let topo = build_topology(inits.len(), config.topology.p, config.seed).map_err(CliError::stage("train"))?;
            Trained::Iid(run_iid(inits, &topo, &train).map_err(stage)?)
        }
        Algorithm::Dsgd => {
            let topo = build_topology(inits.len(), config.topology.p, config.seed).map_err(CliError::stage("train"))?;
            Trained::Dsgd(dsgd::run_dsgd(inits, &topo, &train).map_err(stage)?)
        }
        Algorithm::Noniid => {
            let section = config.noniid.clone().unwrap_or_default();
            let nc = NoniidConfig {
                train,
                substitution: section.substitution,
                weighting: section.weighting,
                assumption: section.assumption,
                order: section.order,
            };
            let plan = prepared.plan.as_ref().expect("noniid runs are planned");
            Trained::Noniid(run_noniid(inits, plan, &nc).map_err(stage)?)
        }
    })
}

pub struct Evaluation {
    pub geometry: GeometryReport,
    pub accuracy: f64,
    /// Cosine matrix of the heatmap subset (label-sorted) and its labels.
    pub cosine: Array2<f64>,
    pub cosine_labels: Vec<usize>,
}

fn features(algorithm: Algorithm, params: &EncoderParams, x: &Array2<f64>) -> dmcr_core::Result<Array2<f64>> {
    match algorithm {
        Algorithm::Dsgd => dsgd::embed(params, x.view()),
        _ => encoder::forward(params, x.view()),
    }
}

/// Per-node encodings averaged into one representation.
fn averaged(algorithm: Algorithm, params: &[EncoderParams], x: &Array2<f64>) -> dmcr_core::Result<Array2<f64>> {
    let mut sum: Option<Array2<f64>> = None;
    for p in params {
        let z = features(algorithm, p, x)?;
        sum = Some(match sum {
            Some(s) => s + z,
            None => z,
        });
    }
    Ok(sum.expect("at least one node") / params.len() as f64)
}

/// First `per_class` test samples of every class, label-sorted.
fn heatmap_columns(labels: &[usize], num_classes: usize, total: usize) -> Vec<usize> {
    let per = total.div_ceil(num_classes.max(1));
    let mut cols = Vec::new();
    for k in 0..num_classes {
        cols.extend(labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| i).take(per));
    }
    cols
}

pub fn evaluate(config: &ExperimentConfig, prepared: &Prepared, params: &[EncoderParams]) -> Result<Evaluation, CliError> {
    let stage = || CliError::stage("eval");
    let algo = config.algorithm;
    let z_nodes: Vec<Array2<f64>> = params
        .iter()
        .zip(&prepared.shards)
        .map(|(p, s)| features(algo, p, &s.data.inputs))
        .collect::<dmcr_core::Result<_>>()
        .map_err(stage())?;
    let labels: Vec<Vec<usize>> = prepared.shards.iter().map(|s| s.data.labels.clone()).collect();
    let shared: Vec<Array2<f64>> = params.iter().map(|p| features(algo, p, &prepared.test.inputs)).collect::<dmcr_core::Result<_>>().map_err(stage())?;
    let geometry = eval::geometry_report(&z_nodes, &labels, &shared, prepared.class_dims.as_deref(), &config.eval.tolerances()).map_err(stage())?;

    let z_train = averaged(algo, params, &prepared.train.inputs).map_err(stage())?;
    let z_test = averaged(algo, params, &prepared.test.inputs).map_err(stage())?;
    let model = eval::fit_subspace_model(z_train.view(), &prepared.train.labels, prepared.train.num_classes, config.eval.tau).map_err(stage())?;
    let accuracy = eval::accuracy(&eval::classify_all(&model, z_test.view()), &prepared.test.labels);

    let cols = heatmap_columns(&prepared.test.labels, prepared.test.num_classes, config.eval.subset);
    let sub = z_test.select(Axis(1), &cols);
    let cosine_labels: Vec<usize> = cols.iter().map(|&c| prepared.test.labels[c]).collect();
    let cosine = eval::cosine_similarity_matrix(sub.view(), &(0..cols.len()).collect::<Vec<_>>());
    Ok(Evaluation { geometry, accuracy, cosine, cosine_labels })
}

pub fn summarize(run: &mut Run, trained: Option<&Trained>, evaluation: &Evaluation) {
    let s = &mut run.manifest.summary;
    s.insert("accuracy".into(), evaluation.accuracy);
    s.insert("wccr".into(), evaluation.geometry.wccr);
    s.insert("iidr".into(), evaluation.geometry.iidr);
    s.insert("structure_pass".into(), if evaluation.geometry.structure.pass { 1.0 } else { 0.0 });
    if let Some(c) = trained.and_then(Trained::final_consensus) {
        s.insert("final_consensus".into(), c);
    }
    if let Some(t) = trained {
        s.insert("total_bytes".into(), report::byte_log(t).iter().map(|r| r.2).sum::<u64>() as f64);
    }
}

/// Full pipeline for one config into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, quiet: bool) -> Result<RunManifest, CliError> {
    let mut run = Run::new(config, out, quiet)?;
    match run_stages(&mut run, config) {
        Ok(()) => run.finish(),
        Err(e) => Err(run.abort(e)),
    }
}

fn run_stages(run: &mut Run, config: &ExperimentConfig) -> Result<(), CliError> {
    run.write("config.toml", config.to_toml())?;
    let prepared = prepare(run, config)?;
    if let Some(plan) = &prepared.plan {
        run.write("plan.json", serde_json::to_string_pretty(plan).expect("plan serializes"))?;
    }
    let trained = run.stage("train", |_| train(config, &prepared))?;
    run.write("params.json", serde_json::to_string(trained.params()).expect("params serialize"))?;
    let evaluation = run.stage("eval", |_| evaluate(config, &prepared, trained.params()))?;
    summarize(run, Some(&trained), &evaluation);
    run.stage("report", |run| report::emit(run, config, &prepared, Some(&trained), &evaluation))
}

/// Failed `--check` bounds, if any.
pub fn check(config: &ExperimentConfig, manifest: &RunManifest) -> Vec<String> {
    let mut failed = Vec::new();
    let get = |k: &str| manifest.summary.get(k).copied();
    if let Some(min) = config.eval.min_accuracy {
        match get("accuracy") {
            Some(a) if a >= min => {}
            a => failed.push(format!("accuracy {a:?} below {min}")),
        }
    }
    if let Some(max) = config.eval.max_consensus {
        match get("final_consensus") {
            Some(c) if c < max => {}
            c => failed.push(format!("final consensus {c:?} not below {max}")),
        }
    }
    if config.eval.require_structure && get("structure_pass") != Some(1.0) {
        failed.push("orthogonality / spectrum check failed".into());
    }
    failed
}
