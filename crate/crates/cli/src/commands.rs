use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use cotrain::config::{ExperimentSpec, SPLITS};
use cotrain::evaluation::{evaluate_model, load_eval_split, run_ablation, AblationData, PlotData};
use cotrain::scenes::{
    emit_dataset, load_images_only, load_training_split, manifest_hash, SceneConfig, ShiftParams,
    SplitRole,
};
use cotrain::trainer::{run_pipeline, write_log, PipelineInputs, RunPaths, Variant};
use cotrain::Error;
use serde::{Deserialize, Serialize};

use crate::plot::render_svg;
use crate::Common;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_FINGERPRINT: u8 = 5;
pub const EXIT_ARM_FAILED: u8 = 6;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    ArmsFailed(Vec<String>),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::ArmsFailed(arms) => write!(f, "ablation arms failed: {}", arms.join(", ")),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Config(_)) => EXIT_CONFIG,
            CliError::Core(Error::Missing(_)) => EXIT_MISSING,
            CliError::Core(Error::Divergence { .. }) => EXIT_DIVERGED,
            CliError::Core(Error::Fingerprint { .. }) => EXIT_FINGERPRINT,
            CliError::Core(_) => EXIT_FAILURE,
            CliError::ArmsFailed(_) => EXIT_ARM_FAILED,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::Config(msg.into()))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// What `--seed` sets for a command.
#[derive(Clone, Copy)]
enum SeedRole {
    Data,
    Train,
    Ablation,
}

fn load_spec(common: &Common, role: SeedRole) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
            let table: toml::Table = toml::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let doc = serde_json::to_value(table).map_err(|e| config_err(e.to_string()))?;
            ExperimentSpec::from_partial(doc)?
        }
        None => ExperimentSpec::default(),
    };
    for assignment in &common.set {
        spec.apply_assignment(assignment)?;
    }
    if let Some(seed) = common.seed {
        match role {
            SeedRole::Data => spec.data.seed = seed,
            SeedRole::Train => spec.train.seed = seed,
            SeedRole::Ablation => spec.seeds = vec![seed],
        }
    }
    if let Some(out) = &common.out {
        spec.out_dir = out.clone();
    }
    let variants = common
        .variant
        .iter()
        .map(|n| Variant::from_name(n))
        .collect::<cotrain::Result<Vec<_>>>()?;
    match role {
        SeedRole::Ablation if !variants.is_empty() => spec.ablation = variants,
        SeedRole::Ablation => {}
        _ if variants.len() > 1 => {
            return Err(config_err("only ablate accepts several --variant flags"))
        }
        _ => {
            if let Some(v) = variants.first() {
                spec.variant = v.flags();
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        config_err(format!(
            "output directory {} is not writable: {e}",
            dir.display()
        ))
    })?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| {
            config_err(format!(
                "output directory {} is not writable: {e}",
                dir.display()
            ))
        })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

const DATASET_FILE: &str = "dataset.json";

#[derive(Serialize, Deserialize)]
struct DatasetInfo {
    fingerprint: String,
    scene: SceneConfig,
    shift: ShiftParams,
    data: cotrain::config::DataConfig,
}

pub fn generate(common: &Common) -> Result<()> {
    let spec = load_spec(common, SeedRole::Data)?;
    let dir = spec.data_dir();
    let occupied = fs::read_dir(&dir)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied {
        if !common.force {
            return Err(config_err(format!(
                "{} already holds a dataset; pass --force to regenerate it",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    ensure_writable(&dir)?;
    for role in SPLITS {
        let n = spec.data.size(role);
        emit_dataset(
            &spec.split_dir(role),
            n,
            &spec.scene,
            &spec.shift,
            spec.data.split_seed(role),
            role,
        )?;
        log::info!("wrote {n} images to {}", spec.split_dir(role).display());
    }
    write_json(
        &dir.join(DATASET_FILE),
        &DatasetInfo {
            fingerprint: spec.dataset_fingerprint(),
            scene: spec.scene.clone(),
            shift: spec.shift.clone(),
            data: spec.data.clone(),
        },
    )?;
    println!(
        "dataset {} in {}",
        &spec.dataset_fingerprint()[..12],
        dir.display()
    );
    Ok(())
}

/// Checks that the generated dataset exists and matches the configuration.
fn check_dataset(spec: &ExperimentSpec) -> Result<()> {
    let path = spec.data_dir().join(DATASET_FILE);
    if !path.exists() {
        return Err(CliError::Core(Error::Missing(format!(
            "no dataset at {}; run `cotrain generate` first",
            spec.data_dir().display()
        ))));
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let info: DatasetInfo = serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })
    })?;
    let expected = spec.dataset_fingerprint();
    if info.fingerprint != expected {
        return Err(CliError::Core(Error::Fingerprint {
            expected,
            found: info.fingerprint,
        }));
    }
    Ok(())
}

fn data_id(spec: &ExperimentSpec) -> Result<String> {
    let src = manifest_hash(&spec.split_dir(SplitRole::SourceTrain))?;
    let tgt = manifest_hash(&spec.split_dir(SplitRole::TargetTrain))?;
    Ok(format!("{src}+{tgt}"))
}

pub fn train(common: &Common) -> Result<()> {
    let spec = load_spec(common, SeedRole::Train)?;
    check_dataset(&spec)?;
    let source = load_training_split(&spec.split_dir(SplitRole::SourceTrain))?;
    let target = load_images_only(&spec.split_dir(SplitRole::TargetTrain))?;
    let name = spec.variant_name().unwrap_or("custom");
    let dir = spec.run_dir(name, spec.train.seed);
    if common.force && dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    ensure_writable(&dir)?;
    let paths = RunPaths { dir };
    let outcome = run_pipeline(
        PipelineInputs {
            detector: spec.detector.clone(),
            train: spec.train.clone(),
            flags: spec.variant,
            source: &source,
            target: &target,
            data_id: data_id(&spec)?,
            pretrained: None,
        },
        Some(&paths),
    )?;
    println!(
        "trained {name} (seed {}) for {} iterations; checkpoint {}",
        spec.train.seed,
        outcome.log.len(),
        paths.final_checkpoint().display()
    );
    Ok(())
}

fn parse_split(name: &str) -> Result<SplitRole> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| {
        config_err(format!(
            "unknown split {name:?}; expected source_train, target_train or target_eval"
        ))
    })
}

pub fn eval(common: &Common, checkpoint: Option<PathBuf>, split: &str) -> Result<()> {
    let spec = load_spec(common, SeedRole::Train)?;
    let role = parse_split(split)?;
    let checkpoint = checkpoint.unwrap_or_else(|| {
        RunPaths {
            dir: spec.run_dir(spec.variant_name().unwrap_or("custom"), spec.train.seed),
        }
        .final_checkpoint()
    });
    if !checkpoint.exists() {
        return Err(CliError::Core(Error::Missing(format!(
            "no checkpoint at {}; run `cotrain train` first",
            checkpoint.display()
        ))));
    }
    check_dataset(&spec)?;
    let mut report = evaluate_model(&checkpoint, &spec.detector, &spec.split_dir(role))?;
    report.seed = spec.train.seed;
    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let out = checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(format!("{stem}_{}.report.json", role.dir_name()));
    write_json(&out, &report)?;
    println!(
        "mAP {:.2} | rpn recall@0.5 {:.3} | coverage zero-bin {:.3} | report {}",
        100.0 * report.map,
        report.rpn_recall_at_05,
        report.coverage.zero_fraction,
        out.display()
    );
    Ok(())
}

pub fn ablate(common: &Common) -> Result<()> {
    let spec = load_spec(common, SeedRole::Ablation)?;
    check_dataset(&spec)?;
    let source = load_training_split(&spec.split_dir(SplitRole::SourceTrain))?;
    let target = load_images_only(&spec.split_dir(SplitRole::TargetTrain))?;
    let (_, target_eval) = load_eval_split(&spec.split_dir(SplitRole::TargetEval))?;
    let oracle_train = if spec.oracle {
        Some(load_eval_split(&spec.split_dir(SplitRole::TargetTrain))?.1)
    } else {
        None
    };
    let dir = spec.ablation_dir();
    if common.force && dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let logs = dir.join("logs");
    ensure_writable(&logs)?;
    let data = AblationData {
        source: &source,
        target_train: &target,
        target_eval: &target_eval,
        oracle_train: oracle_train.as_ref(),
        data_id: data_id(&spec)?,
    };
    let table = run_ablation(
        &spec.ablation,
        &spec.seeds,
        &spec.detector,
        &spec.train,
        &data,
        |name, seed, log| {
            let path = logs.join(format!("{name}_seed{seed}.jsonl"));
            if let Err(e) = write_log(&path, log) {
                log::warn!("could not write {}: {e}", path.display());
            }
            log::info!("finished {name} seed {seed}");
        },
    );
    let rendered = table.render();
    write_text(&dir.join("table.txt"), &rendered)?;
    write_json(&dir.join("table.json"), &table)?;
    write_json(&dir.join("plot_data.json"), &table.plot_data())?;
    print!("{rendered}");
    let failed: Vec<String> = table
        .rows
        .iter()
        .filter(|r| r.failed())
        .map(|r| r.name.clone())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ArmsFailed(failed))
    }
}

pub fn plot(common: &Common, input: Option<PathBuf>) -> Result<()> {
    let spec = load_spec(common, SeedRole::Ablation)?;
    let input = input.unwrap_or_else(|| spec.ablation_dir().join("plot_data.json"));
    if !input.exists() {
        return Err(CliError::Core(Error::Missing(format!(
            "no plot data at {}; run `cotrain ablate` first",
            input.display()
        ))));
    }
    let text = fs::read_to_string(&input).map_err(|e| io_err(&input, e))?;
    let data: PlotData = serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::Format {
            path: input.clone(),
            detail: e.to_string(),
        })
    })?;
    let out = input.with_file_name("coverage.svg");
    write_text(&out, &render_svg(&data))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn show_config(common: &Common) -> Result<()> {
    let spec = load_spec(common, SeedRole::Train)?;
    let text = toml::to_string_pretty(&spec).map_err(|e| config_err(e.to_string()))?;
    print!("{text}");
    Ok(())
}
