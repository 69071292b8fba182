//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use argue_core::attribute::{load_pool, AttributePool, SampledAttributes};
use argue_core::config::parse_config;
use argue_core::encoder::{DualEncoder, Vocabulary};
use argue_core::synthbench::{generate_task, FewShotTask, TaskSpec};
use argue_core::train::{
    self, evaluate, harmonic_mean, history_csv, load_checkpoint_checked, prepare_attributes,
    save_checkpoint, sweep_csv, SplitAccuracy, SweepParam, SweepRow, TrainConfig,
};
use argue_core::Error;

use crate::manifest::ManifestBuilder;
use crate::TrainFlags;

pub const TASK_FILE: &str = "task.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const POOL_FILE: &str = "pool.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0} exists; pass --force to overwrite")]
    OutputExists(String),
    #[error("mode {0} needs an attribute pool: none in the task directory and no --pool given")]
    MissingPool(String),
    #[error("bad --values `{0}`")]
    BadValues(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::OutputExists(_) => "output_exists",
            CliError::MissingPool(_) => "missing_pool",
            CliError::BadValues(_) => "bad_values",
        }
    }
}

fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    let occupied = if path.is_dir() {
        std::fs::read_dir(path)?.next().is_some()
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(CliError::OutputExists(path.display().to_string()).into());
    }
    Ok(())
}

fn write(path: &Path, contents: &str, manifest: &mut ManifestBuilder) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// A generated task directory with its frozen encoders rebuilt from the
/// stored spec.
pub struct TaskDir {
    pub task: FewShotTask,
    pub vocab: Vocabulary,
    pub encoders: DualEncoder,
    pub pool: Option<AttributePool>,
    pub inputs: Vec<PathBuf>,
}

pub fn load_task_dir(dir: &Path, pool_override: Option<&Path>) -> Result<TaskDir> {
    let task_path = dir.join(TASK_FILE);
    let vocab_path = dir.join(VOCAB_FILE);
    let (task, stored_hash) = FewShotTask::load(&task_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let found = vocab.hash();
    if found != stored_hash {
        return Err(Error::VocabularyHashMismatch {
            expected: stored_hash,
            found,
        }
        .into());
    }
    let world = generate_task(&task.spec)?;
    let regenerated = world.vocab.hash();
    if regenerated != stored_hash {
        return Err(Error::VocabularyHashMismatch {
            expected: stored_hash,
            found: regenerated,
        }
        .into());
    }
    let mut inputs = vec![task_path, vocab_path];
    let pool_path = pool_override
        .map(Path::to_path_buf)
        .or_else(|| Some(dir.join(POOL_FILE)).filter(|p| p.exists()));
    let pool = match pool_path {
        Some(p) => {
            let pool = load_pool(&p)?;
            pool.check_coverage(&vocab)?;
            inputs.push(p);
            Some(pool)
        }
        None => None,
    };
    Ok(TaskDir {
        task,
        vocab,
        encoders: world.encoders,
        pool,
        inputs,
    })
}

pub fn gen(spec_file: Option<&Path>, seed: Option<u64>, out: &Path, force: bool) -> Result<()> {
    ensure_writable(out, force)?;
    let mut manifest = ManifestBuilder::new("gen");
    let mut spec = match spec_file {
        Some(p) => {
            manifest.input(p);
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<TaskSpec>(&text)
                .map_err(|e| Error::InvalidSpec(e.to_string()))?
        }
        None => TaskSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let world = generate_task(&spec)?;
    manifest.config(&spec)?;
    create_dir(out)?;
    let hash = world.vocab.hash();
    write(
        &out.join(TASK_FILE),
        &world.task.to_json(&hash),
        &mut manifest,
    )?;
    write(&out.join(VOCAB_FILE), &world.vocab.to_json(), &mut manifest)?;
    write(&out.join(POOL_FILE), &world.pool.to_json(), &mut manifest)?;
    manifest.finish(&out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} classes ({} base, {} new) to {}",
        world.task.num_classes(),
        world.task.base_classes.len(),
        world.task.new_classes.len(),
        out.display()
    );
    Ok(())
}

pub fn validate(
    pool_path: &Path,
    task: Option<&Path>,
    out: Option<&Path>,
    force: bool,
) -> Result<()> {
    let mut manifest = ManifestBuilder::new("validate");
    let pool = load_pool(pool_path)?;
    manifest.input(pool_path);
    if let Some(dir) = task {
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = Vocabulary::load(&vocab_path)?;
        pool.check_coverage(&vocab)?;
        manifest.input(&vocab_path);
    }
    let n_attr: usize = pool.classes.iter().map(|c| c.attributes.len()).sum();
    println!(
        "ok dataset={} classes={} attributes={}",
        pool.dataset,
        pool.classes.len(),
        n_attr
    );
    if let Some(dir) = out {
        ensure_writable(&dir.join(MANIFEST_FILE), force)?;
        create_dir(dir)?;
        manifest.finish(&dir.join(MANIFEST_FILE))?;
    }
    Ok(())
}

fn manifest_path_for(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

pub fn sample(
    task_dir: &Path,
    pool: Option<&Path>,
    clusters: usize,
    seed: u64,
    shots: usize,
    out: &Path,
    force: bool,
) -> Result<()> {
    ensure_writable(out, force)?;
    let td = load_task_dir(task_dir, pool)?;
    let pool = td
        .pool
        .as_ref()
        .ok_or_else(|| CliError::MissingPool("sample".into()))?;
    let config = TrainConfig {
        clusters,
        seed,
        shots,
        mode: train::Mode::Argue,
        ..TrainConfig::default()
    };
    config.validate()?;
    let mut manifest = ManifestBuilder::new("sample");
    manifest.config(&config)?;
    td.inputs.iter().for_each(|p| manifest.input(p));
    let selection = prepare_attributes(&config, &td.task, pool, &td.vocab, &td.encoders)?
        .expect("attribute modes always sample");
    write(out, &selection.to_json(), &mut manifest)?;
    manifest.finish(&manifest_path_for(out))?;
    let kept = selection.classes.iter().map(|c| c.selected.len());
    println!(
        "sampled {}..={} attributes per class for {} classes (requested {})",
        kept.clone().min().unwrap_or(0),
        kept.max().unwrap_or(0),
        selection.classes.len(),
        selection.clusters
    );
    Ok(())
}

fn resolve_config(flags: &TrainFlags, manifest: &mut ManifestBuilder) -> Result<TrainConfig> {
    let mut config = match &flags.config {
        Some(p) => {
            manifest.input(p);
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text, TrainConfig::default())?
        }
        None => TrainConfig::default(),
    };
    if let Some(m) = &flags.mode {
        config.mode = m.parse()?;
    }
    if let Some(n) = &flags.negative {
        config.negative = n.parse()?;
    }
    if let Some(v) = flags.seed {
        config.seed = v;
    }
    if let Some(v) = flags.gamma {
        config.gamma = v;
    }
    if let Some(v) = flags.beta {
        config.beta = v;
    }
    if let Some(v) = flags.clusters {
        config.clusters = v;
    }
    if let Some(v) = flags.shots {
        config.shots = v;
    }
    if let Some(v) = flags.epochs {
        config.epochs = v;
    }
    config.validate()?;
    manifest.config(&config)?;
    Ok(config)
}

pub fn train(
    task_dir: &Path,
    pool: Option<&Path>,
    attributes: Option<&Path>,
    flags: &TrainFlags,
    out: &Path,
    force: bool,
) -> Result<()> {
    ensure_writable(out, force)?;
    let mut manifest = ManifestBuilder::new("train");
    let config = resolve_config(flags, &mut manifest)?;
    let td = load_task_dir(task_dir, pool)?;
    td.inputs.iter().for_each(|p| manifest.input(p));
    let selection: Option<SampledAttributes> = if !config.uses_attributes() {
        None
    } else if let Some(path) = attributes {
        manifest.input(path);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::SchemaViolation(e.to_string()))?)
    } else {
        let pool = td
            .pool
            .as_ref()
            .ok_or_else(|| CliError::MissingPool(config.mode.name().into()))?;
        prepare_attributes(&config, &td.task, pool, &td.vocab, &td.encoders)?
    };
    let outcome = train::train(
        &config,
        &td.task,
        &td.vocab,
        &td.encoders,
        selection.as_ref(),
    )?;
    create_dir(out)?;
    let ckpt_path = out.join("checkpoint.json");
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    manifest.output(&ckpt_path);
    write(
        &out.join("history.csv"),
        &history_csv(&outcome.history),
        &mut manifest,
    )?;
    manifest.finish(&out.join(MANIFEST_FILE))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} steps, final loss {:.6}",
            outcome.checkpoint.steps, last.total
        );
    }
    Ok(())
}

fn report_csv(splits: &[SplitAccuracy]) -> String {
    let mut s = String::from("split,accuracy,correct,total\n");
    for a in splits {
        s.push_str(&format!(
            "{},{},{},{}\n",
            a.split, a.accuracy, a.correct, a.total
        ));
    }
    s
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn report_markdown(mode: &str, splits: &[SplitAccuracy]) -> Result<String> {
    let get = |n: &str| splits.iter().find(|s| s.split == n).map(|s| s.accuracy);
    let (base, new) = (get("base_test"), get("new_test"));
    let h = match (base, new) {
        (Some(b), Some(n)) => Some(harmonic_mean(b, n)?),
        _ => None,
    };
    let mut s = String::new();
    s.push_str("| Method | Base | New | H |\n|---|---|---|---|\n");
    s.push_str(&format!(
        "| {mode} | {} | {} | {} |\n\n",
        fmt_cell(base),
        fmt_cell(new),
        fmt_cell(h)
    ));
    s.push_str("| Split | Accuracy | Correct | Total |\n|---|---|---|---|\n");
    for a in splits {
        s.push_str(&format!(
            "| {} | {:.2} | {} | {} |\n",
            a.split, a.accuracy, a.correct, a.total
        ));
    }
    Ok(s)
}

pub fn eval(
    checkpoint: &Path,
    task_dir: &Path,
    splits: Option<&str>,
    out: &Path,
    force: bool,
) -> Result<()> {
    ensure_writable(out, force)?;
    let mut manifest = ManifestBuilder::new("eval");
    let td = load_task_dir(task_dir, None)?;
    td.inputs.iter().for_each(|p| manifest.input(p));
    let ckpt = load_checkpoint_checked(checkpoint, &td.vocab)?;
    manifest.input(checkpoint);
    let names: Vec<String> = match splits {
        Some(s) => s.split(',').map(|x| x.trim().to_string()).collect(),
        None => td.task.split_names(),
    };
    manifest.config(serde_json::json!({ "splits": names }))?;
    let results: Vec<SplitAccuracy> = names
        .iter()
        .map(|n| evaluate(&ckpt, &td.task, &td.vocab, &td.encoders, n))
        .collect::<argue_core::Result<_>>()?;
    create_dir(out)?;
    write(
        &out.join("report.csv"),
        &report_csv(&results),
        &mut manifest,
    )?;
    let md = report_markdown(ckpt.config.mode.name(), &results)?;
    write(&out.join("report.md"), &md, &mut manifest)?;
    manifest.finish(&out.join(MANIFEST_FILE))?;
    print!("{md}");
    Ok(())
}

/// `0,1,2` or inclusive `start:end:step`.
pub fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let bad = || CliError::BadValues(spec.to_string());
    if let Some((start, rest)) = spec.split_once(':') {
        let (end, step) = rest.split_once(':').ok_or_else(bad)?;
        let (start, end, step): (f64, f64, f64) = (
            start.trim().parse().map_err(|_| bad())?,
            end.trim().parse().map_err(|_| bad())?,
            step.trim().parse().map_err(|_| bad())?,
        );
        if !(step > 0.0) || end < start {
            return Err(bad().into());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| start + i as f64 * step).collect());
    }
    let values: Vec<f64> = spec
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| bad()))
        .collect::<std::result::Result<_, _>>()?;
    if values.is_empty() {
        return Err(bad().into());
    }
    Ok(values)
}

fn read_sweep_rows(path: &Path, param: SweepParam) -> Result<BTreeMap<u64, SweepRow>> {
    let mut rows = BTreeMap::new();
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    for rec in reader.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| anyhow::anyhow!("malformed row in {}", path.display()))
        };
        let row = SweepRow {
            param: param.name().to_string(),
            value: f(0)?,
            base: f(1)?,
            new: f(2)?,
            h: f(3)?,
            ood_mean: f(4)?,
        };
        rows.insert(row.value.to_bits(), row);
    }
    Ok(rows)
}

fn worker_threads() -> usize {
    std::env::var("ARGUE_LAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    task_dir: &Path,
    pool: Option<&Path>,
    flags: &TrainFlags,
    param: &str,
    values: &str,
    out: &Path,
    force: bool,
    skip_existing: bool,
) -> Result<()> {
    let param: SweepParam = param.parse()?;
    let values = parse_values(values)?;
    let existing = if skip_existing && out.exists() {
        read_sweep_rows(out, param)?
    } else {
        ensure_writable(out, force)?;
        BTreeMap::new()
    };
    let mut manifest = ManifestBuilder::new("sweep");
    let config = resolve_config(flags, &mut manifest)?;
    manifest.config(serde_json::json!({
        "train": config,
        "param": param.name(),
        "values": values,
    }))?;
    let td = load_task_dir(task_dir, pool)?;
    td.inputs.iter().for_each(|p| manifest.input(p));
    let pool = match td.pool.as_ref() {
        Some(p) => p.clone(),
        None if !config.uses_attributes() => AttributePool {
            version: argue_core::attribute::POOL_VERSION,
            dataset: String::new(),
            classes: Vec::new(),
        },
        None => return Err(CliError::MissingPool(config.mode.name().into()).into()),
    };
    let missing: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| !existing.contains_key(&v.to_bits()))
        .collect();
    let fresh = train::sweep(
        &config,
        param,
        &missing,
        &td.task,
        &pool,
        &td.vocab,
        &td.encoders,
        worker_threads(),
    )?;
    let mut by_value = existing;
    for row in fresh {
        by_value.insert(row.value.to_bits(), row);
    }
    let rows: Vec<SweepRow> = values
        .iter()
        .filter_map(|v| by_value.get(&v.to_bits()).cloned())
        .collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, &sweep_csv(&rows), &mut manifest)?;
    manifest.finish(&manifest_path_for(out))?;
    println!(
        "{} rows ({} run, {} reused) -> {}",
        rows.len(),
        missing.len(),
        values.len() - missing.len(),
        out.display()
    );
    Ok(())
}
