use std::path::{Path, PathBuf};

use dmcr_core::encoder::Activation;
use dmcr_core::eval::StructureTolerances;
use dmcr_core::iid::{inner_steps_for_epochs, LrSchedule, TrainConfig};
use dmcr_core::noniid::AssumptionPolicy;
use dmcr_core::objective::CompressionWeighting;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Iid,
    Noniid,
    Dsgd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Iid => "iid",
            Algorithm::Noniid => "noniid",
            Algorithm::Dsgd => "dsgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        classes: usize,
        class_dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        ambient: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    #[default]
    Iid,
    Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionKind,
    pub nodes: usize,
    /// Label list per node (label mode only).
    pub labels: Option<Vec<Vec<usize>>>,
    /// Duplicate samples until the proportion assumption holds exactly.
    pub enforce: bool,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { mode: PartitionKind::Iid, nodes: 4, labels: None, enforce: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub p: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig { p: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub dim: usize,
    pub activation: Activation,
    /// Every node starts from the same weights.
    pub shared_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![128], dim: 128, activation: Activation::Elu, shared_init: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub rounds: usize,
    pub lr: f64,
    pub gamma: f64,
    pub rho: f64,
    pub eps_sq: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Optimizer steps per round; derived from `local_epochs` when absent.
    pub inner_steps: Option<usize>,
    pub local_epochs: usize,
    pub schedule: ScheduleKind,
    pub lr_floor: f64,
    pub grad_norm_every: usize,
    pub early_stop: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            rounds: t.rounds,
            lr: t.lr,
            gamma: t.gamma,
            rho: t.rho,
            eps_sq: t.eps_sq,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            inner_steps: None,
            local_epochs: 5,
            schedule: ScheduleKind::Constant,
            lr_floor: 0.0,
            grad_norm_every: t.grad_norm_every,
            early_stop: None,
        }
    }
}

impl TrainSection {
    /// Core trainer settings; `samples` is the typical local set size used to
    /// turn epochs into steps.
    pub fn to_train_config(&self, seed: u64, samples: usize) -> TrainConfig {
        TrainConfig {
            rho: self.rho,
            gamma: self.gamma,
            lr: self.lr,
            weight_decay: self.weight_decay,
            rounds: self.rounds,
            inner_steps: self.inner_steps.unwrap_or_else(|| inner_steps_for_epochs(self.local_epochs, samples, self.batch_size)),
            batch_size: self.batch_size,
            eps_sq: self.eps_sq,
            seed,
            grad_norm_every: self.grad_norm_every,
            early_stop: self.early_stop,
            schedule: match self.schedule {
                ScheduleKind::Constant => LrSchedule::Constant,
                ScheduleKind::Cosine => LrSchedule::Cosine { floor: self.lr_floor },
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoniidSection {
    /// `"auto"` to derive the plan from the label lists, else a plan JSON file.
    pub plan: Option<String>,
    pub substitution: bool,
    pub weighting: CompressionWeighting,
    pub assumption: AssumptionPolicy,
    pub order: Option<Vec<Vec<usize>>>,
}

impl Default for NoniidSection {
    fn default() -> Self {
        NoniidSection {
            plan: None,
            substitution: true,
            weighting: CompressionWeighting::GramOnly,
            assumption: AssumptionPolicy::Strict,
            order: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau: f64,
    pub orthogonality: f64,
    pub rank_tol: f64,
    pub spread: f64,
    /// Intrinsic class dimensions; synthetic data defaults to its `class_dim`.
    pub class_dims: Option<Vec<usize>>,
    /// Test samples in the cosine heatmap.
    pub subset: usize,
    /// `--check` bounds.
    pub min_accuracy: Option<f64>,
    pub max_consensus: Option<f64>,
    pub require_structure: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let t = StructureTolerances::default();
        EvalConfig {
            tau: 0.95,
            orthogonality: t.orthogonality,
            rank_tol: t.rank_tol,
            spread: t.spread,
            class_dims: None,
            subset: 120,
            min_accuracy: None,
            max_consensus: None,
            require_structure: false,
        }
    }
}

impl EvalConfig {
    pub fn tolerances(&self) -> StructureTolerances {
        StructureTolerances { orthogonality: self.orthogonality, rank_tol: self.rank_tol, spread: self.spread }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stochastic stage derives its stream from it.
    #[serde(default)]
    pub seed: u64,
    pub algorithm: Algorithm,
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub noniid: Option<NoniidSection>,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Run directory; not part of the config hash.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Validation { field: field.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::from_toml(text, &e))?;
        config.validate()?;
        Ok(config)
    }

    /// Read, parse and validate; relative data paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataConfig::Idx { train_images, train_labels, test_images, test_labels, .. } = &mut self.data {
            for p in [train_images, train_labels, test_images, test_labels] {
                fix(p);
            }
        }
        if let Some(NoniidSection { plan: Some(plan), .. }) = &mut self.noniid {
            if plan != "auto" && Path::new(plan).is_relative() {
                *plan = base.join(&*plan).to_string_lossy().into_owned();
            }
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.data {
            DataConfig::Synthetic { classes, .. } => Some(*classes),
            DataConfig::Idx { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let DataConfig::Synthetic { classes, class_dim, train_per_class, test_per_class, ambient, noise } = &self.data {
            if *classes == 0 || *class_dim == 0 || *train_per_class == 0 {
                return Err(invalid("data", "classes, class_dim and train_per_class must be positive"));
            }
            if classes * class_dim > *ambient {
                return Err(invalid("data.ambient", format!("{classes} classes of dimension {class_dim} do not fit in {ambient}")));
            }
            if *test_per_class == 0 {
                return Err(invalid("data.test_per_class", "need at least one test sample per class"));
            }
            if !(*noise >= 0.0) {
                return Err(invalid("data.noise", "must be non-negative"));
            }
        }
        let p = &self.partition;
        if p.nodes == 0 {
            return Err(invalid("partition.nodes", "need at least one node"));
        }
        match (p.mode, &p.labels) {
            (PartitionKind::Labels, None) => return Err(invalid("partition.labels", "label mode needs one label list per node")),
            (PartitionKind::Labels, Some(l)) if l.len() != p.nodes => {
                return Err(invalid("partition.labels", format!("{} lists for {} nodes", l.len(), p.nodes)))
            }
            (PartitionKind::Iid, Some(_)) => return Err(invalid("partition.labels", "only used with mode = \"labels\"")),
            _ => {}
        }
        if let (Some(k), Some(lists)) = (self.num_classes(), &p.labels) {
            if let Some(bad) = lists.iter().flatten().find(|&&l| l >= k) {
                return Err(invalid("partition.labels", format!("label {bad} outside 0..{k}")));
            }
        }
        if !(self.topology.p > 0.0 && self.topology.p <= 1.0) {
            return Err(invalid("topology.p", "must lie in (0, 1]"));
        }
        if self.model.dim == 0 || self.model.hidden.contains(&0) {
            return Err(invalid("model", "layer widths must be positive"));
        }
        let t = &self.train;
        if t.rounds == 0 || t.batch_size == 0 || t.inner_steps == Some(0) || (t.inner_steps.is_none() && t.local_epochs == 0) {
            return Err(invalid("train", "rounds, batch_size and local work must be positive"));
        }
        if let Err(e) = t.to_train_config(self.seed, 1).validate() {
            return Err(invalid("train", e.to_string()));
        }
        let e = &self.eval;
        if !(e.tau > 0.0 && e.tau <= 1.0) {
            return Err(invalid("eval.tau", "must lie in (0, 1]"));
        }
        match self.algorithm {
            Algorithm::Noniid => {
                let plan = self.noniid.as_ref().and_then(|n| n.plan.as_ref());
                if plan.is_none() {
                    return Err(invalid("noniid.plan", "noniid runs need a plan file or \"auto\""));
                }
                if p.mode != PartitionKind::Labels {
                    return Err(invalid("partition.mode", "noniid runs need label lists"));
                }
            }
            _ => {
                if self.noniid.is_some() {
                    return Err(invalid("noniid", format!("section only applies to algorithm = \"noniid\", not {:?}", self.algorithm.name())));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical (key-sorted) JSON of every semantic field.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.output = None;
        let value = serde_json::to_value(&semantic).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
algorithm = "iid"
[data]
source = "synthetic"
classes = 3
class_dim = 2
train_per_class = 20
test_per_class = 5
ambient = 12
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train.gamma, 1.0);
        assert_eq!(c.train.rho, 0.1);
        assert_eq!(c.train.eps_sq, 0.5);
        assert_eq!(c.eval.tau, 0.95);
        assert_eq!(c.partition.nodes, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[train]\nrho_step = 0.2\n");
        match ExperimentConfig::parse(&text) {
            Err(CliError::Parse { key, line, .. }) => {
                assert_eq!(key.as_deref(), Some("rho_step"));
                assert_eq!(line, Some(12));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noniid_needs_a_plan() {
        let text = MINIMAL.replace("\"iid\"", "\"noniid\"") + "[partition]\nmode = \"labels\"\nnodes = 2\nlabels = [[0, 1], [1, 2]]\n";
        match ExperimentConfig::parse(&text) {
            Err(CliError::Validation { field, .. }) => assert_eq!(field, "noniid.plan"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::parse(&(text + "[noniid]\nplan = \"auto\"\n")).is_ok());
    }

    #[test]
    fn hash_ignores_key_order_and_output() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let reordered = MINIMAL.replace("classes = 3\nclass_dim = 2", "class_dim = 2\nclasses = 3");
        let mut b = ExperimentConfig::parse(&reordered).unwrap();
        b.output = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::parse(&format!("{MINIMAL}\n[train]\nlr = 0.2\n")).unwrap();
        assert_ne!(a.hash(), c.hash());
        // Spelling out a default does not change the hash.
        let d = ExperimentConfig::parse(&format!("{MINIMAL}\n[train]\nlr = 0.1\n")).unwrap();
        assert_eq!(a.hash(), d.hash());
    }

    #[test]
    fn round_trips_through_toml() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::parse(&a.to_toml()).unwrap(), a);
    }
}
