use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmcr_cli::config::{Algorithm, ExperimentConfig, PartitionKind};
use dmcr_cli::pipeline::{self, Run, RunManifest};
use dmcr_cli::{presets, report, CliError};
use dmcr_core::data::to_cache_bytes;
use dmcr_core::encoder::EncoderParams;

#[derive(Parser)]
#[command(name = "dmcr", version, about = "Decentralized MCR² representation learning on a simulated network")]
struct Cli {
    /// Config file, or the name of a bundled preset.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Run directory (default: runs/<config name>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    quiet: bool,
    /// Exit with status 4 when the config's eval bounds are not met.
    #[arg(long, global = true)]
    check: bool,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate / load data, partition it and write the dataset caches.
    GenData,
    /// Compute the cluster plan for the configured label lists.
    ClusterPlan,
    TrainIid,
    TrainNoniid,
    TrainDsgd,
    /// Re-evaluate the parameters stored in a run directory.
    Eval,
    /// Summarize a finished run directory.
    Report,
    /// List bundled presets.
    Presets,
}

fn config_name(arg: &str) -> String {
    Path::new(arg).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string())
}

impl Cli {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = match (&self.config, &self.out) {
            (Some(arg), _) => presets::resolve(arg)?,
            (None, Some(out)) if out.join("config.toml").is_file() => ExperimentConfig::load(&out.join("config.toml"))?,
            _ => return Err(CliError::Config("--config is required".into())),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| config.output.clone())
            .unwrap_or_else(|| Path::new("runs").join(config_name(self.config.as_deref().unwrap_or("run"))))
    }

    fn finish(&self, config: &ExperimentConfig, manifest: &RunManifest) -> Result<(), CliError> {
        if !self.quiet {
            for (k, v) in &manifest.summary {
                println!("{k:>16}  {v:.6}");
            }
        }
        if self.check {
            let failed = pipeline::check(config, manifest);
            if !failed.is_empty() {
                return Err(CliError::CheckFailed(failed));
            }
        }
        Ok(())
    }
}

fn train(cli: &Cli, algorithm: Algorithm) -> Result<(), CliError> {
    let mut config = cli.load()?;
    config.algorithm = algorithm;
    config.validate()?;
    let out = cli.out_dir(&config);
    let manifest = pipeline::run_experiment(&config, &out, cli.quiet)?;
    if !cli.quiet {
        println!("run written to {}", out.display());
    }
    cli.finish(&config, &manifest)
}

fn gen_data(cli: &Cli) -> Result<(), CliError> {
    let config = cli.load()?;
    let out = cli.out_dir(&config);
    let mut run = Run::new(&config, &out, cli.quiet)?;
    let result = (|| {
        run.write("config.toml", config.to_toml())?;
        let prepared = pipeline::prepare(&mut run, &config)?;
        run.write("train.mc2d", to_cache_bytes(&prepared.train))?;
        run.write("test.mc2d", to_cache_bytes(&prepared.test))?;
        run.write("partition.csv", report::partition_csv(&prepared))?;
        if let Some(plan) = &prepared.plan {
            run.write("plan.json", serde_json::to_string_pretty(plan).expect("plan serializes"))?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => run.finish().map(|_| ()),
        Err(e) => Err(run.abort(e)),
    }
}

fn cluster_plan(cli: &Cli) -> Result<(), CliError> {
    let config = cli.load()?;
    if config.partition.mode != PartitionKind::Labels {
        return Err(CliError::Validation { field: "partition.mode".into(), message: "cluster planning needs label lists".into() });
    }
    let k = match config.num_classes() {
        Some(k) => k,
        None => pipeline::load_data(&config)?.0.num_classes,
    };
    let plan = pipeline::make_plan(&config, k)?;
    let out = cli.out_dir(&config);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("plan.json"), serde_json::to_string_pretty(&plan).expect("plan serializes"))?;
    if !cli.quiet {
        for (s, members) in plan.clusters.iter().enumerate() {
            println!("cluster {s}: agents {members:?}");
        }
        println!("replication: {:?}", plan.replication);
    }
    Ok(())
}

fn eval(cli: &Cli) -> Result<(), CliError> {
    let config = cli.load()?;
    let out = cli.out_dir(&config);
    let text = std::fs::read_to_string(out.join("params.json")).map_err(|e| CliError::Io(format!("{}: {e}", out.join("params.json").display())))?;
    let params: Vec<EncoderParams> = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("params.json: {e}")))?;
    let mut run = Run::new(&config, &out, cli.quiet)?;
    let result = (|| {
        let prepared = pipeline::prepare(&mut run, &config)?;
        let evaluation = run.stage("eval", |_| pipeline::evaluate(&config, &prepared, &params))?;
        pipeline::summarize(&mut run, None, &evaluation);
        run.stage("report", |run| report::emit(run, &config, &prepared, None, &evaluation))
    })();
    let manifest = match result {
        Ok(()) => run.finish()?,
        Err(e) => return Err(run.abort(e)),
    };
    cli.finish(&config, &manifest)
}

fn summary(cli: &Cli) -> Result<(), CliError> {
    let config = cli.load()?;
    let out = cli.out_dir(&config);
    let text = std::fs::read_to_string(out.join("manifest.json")).map_err(|e| CliError::Io(format!("{}: {e}", out.join("manifest.json").display())))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("manifest.json: {e}")))?;
    if !cli.quiet {
        println!("run         {}", out.display());
        println!("algorithm   {}", manifest.algorithm);
        println!("status      {}", manifest.status);
        println!("config hash {}", manifest.config_hash);
        for s in &manifest.stages {
            println!("  {:<10} {:>9.2}s", s.name, s.seconds);
        }
    }
    cli.finish(&config, &manifest)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.verb {
        Verb::GenData => gen_data(&cli),
        Verb::ClusterPlan => cluster_plan(&cli),
        Verb::TrainIid => train(&cli, Algorithm::Iid),
        Verb::TrainNoniid => train(&cli, Algorithm::Noniid),
        Verb::TrainDsgd => train(&cli, Algorithm::Dsgd),
        Verb::Eval => eval(&cli),
        Verb::Report => summary(&cli),
        Verb::Presets => {
            presets::names().for_each(|n| println!("{n}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
