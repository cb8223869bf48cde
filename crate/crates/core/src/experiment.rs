//! On-disk layout of a training run: configuration, logs, checkpoints, decode
//! dumps and a manifest of artifact digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{records_bleu, RunDumps};
use crate::data::{read_dataset, Sample, TASK_FILE};
use crate::decoding::{decode_samples, read_records, write_records, DecodeMode, DecodeOptions};
use crate::error::{Error, Result};
use crate::model::MtpVariant;
use crate::training::{run_training, RunConfig, Trainer, CHECKPOINT_DIR, FINAL_CHECKPOINT, TRAIN_LOG};

pub const RUN_CONFIG: &str = "config.toml";
pub const EVAL_DIR: &str = "eval";
pub const MANIFEST: &str = "manifest.json";
pub const BLEU_TABLE: &str = "bleu.csv";

pub fn run_id(variant: MtpVariant, seed: u64) -> String {
    format!("{variant}_s{seed}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Provenance of one run directory. Paths are relative to the run directory
/// except `dataset`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub dataset: String,
    pub dataset_digest: String,
    pub checkpoints: Vec<String>,
    /// Relative path to sha256 of the file when it was written.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(run_dir.join(MANIFEST))?)?)
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(run_dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn record(&mut self, run_dir: &Path, rel: &str) -> Result<()> {
        self.artifacts.insert(rel.to_string(), file_digest(&run_dir.join(rel))?);
        Ok(())
    }

    /// Every recorded artifact still hashes to its recorded digest.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for (rel, digest) in &self.artifacts {
            let actual = file_digest(&run_dir.join(rel))?;
            if &actual != digest {
                return Err(Error::Data(format!("{rel} changed since the manifest was written")));
            }
        }
        Ok(())
    }
}

fn rel_checkpoints(run_dir: &Path) -> Result<Vec<String>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    let mut out = Vec::new();
    if dir.is_dir() {
        for e in fs::read_dir(&dir)? {
            let name = e?.file_name().to_string_lossy().into_owned();
            if name.ends_with(".ckpt") {
                out.push(format!("{CHECKPOINT_DIR}/{name}"));
            }
        }
    }
    out.sort();
    out.push(FINAL_CHECKPOINT.to_string());
    Ok(out)
}

/// Most recent periodic checkpoint, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let all = rel_checkpoints(run_dir)?;
    Ok(all
        .iter()
        .rfind(|r| r.starts_with(CHECKPOINT_DIR))
        .map(|r| run_dir.join(r)))
}

/// Trains `cfg` on the dataset in `data_dir` and writes the run directory.
/// With `resume` the newest periodic checkpoint is continued when present.
pub fn train_run(data_dir: &Path, run_dir: &Path, cfg: RunConfig, resume: bool) -> Result<()> {
    cfg.validate()?;
    let data = read_dataset(data_dir)?;
    check_model_fits(&cfg, &data.spec)?;
    fs::create_dir_all(run_dir)?;
    let text = cfg.to_toml();
    let mut trainer = match latest_checkpoint(run_dir)? {
        Some(ck) if resume => {
            let t = Trainer::load(&ck)?;
            if t.config() != &cfg {
                return Err(Error::config(format!(
                    "{} was written with a different configuration",
                    ck.display()
                )));
            }
            log::info!("resuming from {} at step {}", ck.display(), t.step());
            t
        }
        _ => Trainer::new(cfg.clone())?,
    };
    fs::write(run_dir.join(RUN_CONFIG), &text)?;
    run_training(&mut trainer, &data.train, run_dir)?;

    let mut m = RunManifest {
        run_id: run_id(cfg.variant(), cfg.train.seed),
        config_digest: sha256_hex(text.as_bytes()),
        dataset: data_dir.display().to_string(),
        dataset_digest: file_digest(&data_dir.join(TASK_FILE))?,
        checkpoints: rel_checkpoints(run_dir)?,
        artifacts: BTreeMap::new(),
    };
    for rel in [RUN_CONFIG, TRAIN_LOG]
        .into_iter()
        .map(String::from)
        .chain(m.checkpoints.clone())
    {
        m.record(run_dir, &rel)?;
    }
    m.write(run_dir)
}

fn check_model_fits(cfg: &RunConfig, spec: &crate::data::TaskSpec) -> Result<()> {
    let m = &cfg.model;
    if m.feat_dim != spec.feat_dim || m.unit_vocab != spec.unit_vocab() || m.text_vocab != spec.text_vocab() {
        return Err(Error::config(format!(
            "model expects feat_dim {} / unit_vocab {} / text_vocab {} but the task has {} / {} / {}",
            m.feat_dim,
            m.unit_vocab,
            m.text_vocab,
            spec.feat_dim,
            spec.unit_vocab(),
            spec.text_vocab()
        )));
    }
    Ok(())
}

pub fn read_run_config(run_dir: &Path) -> Result<RunConfig> {
    RunConfig::from_toml(&fs::read_to_string(run_dir.join(RUN_CONFIG))?)
}

pub fn dump_path(run_dir: &Path, mode: DecodeMode) -> PathBuf {
    run_dir.join(EVAL_DIR).join(format!("{}.jsonl", mode.name()))
}

/// Decodes a split with the final model in every mode, writing one dump per
/// mode and `eval/bleu.csv`. Returns `(mode, BLEU)` pairs.
pub fn eval_run(
    run_dir: &Path,
    data_dir: &Path,
    split: &str,
    modes: &[DecodeMode],
    opts: &DecodeOptions,
) -> Result<Vec<(String, f64)>> {
    let data = read_dataset(data_dir)?;
    let samples: &[Sample] = data
        .splits()
        .into_iter()
        .find(|s| s.0 == split)
        .map(|s| s.1)
        .ok_or_else(|| Error::config(format!("unknown split {split:?}")))?;
    let model = Trainer::load(&run_dir.join(FINAL_CHECKPOINT))?.into_model();
    fs::create_dir_all(run_dir.join(EVAL_DIR))?;
    let mut manifest = RunManifest::read(run_dir).unwrap_or_default();
    let mut scores = Vec::new();
    for &mode in modes {
        let recs = decode_samples(&model, samples, &data.spec, mode, opts)?;
        let path = dump_path(run_dir, mode);
        write_records(&path, &recs)?;
        manifest.record(run_dir, &format!("{EVAL_DIR}/{}.jsonl", mode.name()))?;
        scores.push((mode.name(), records_bleu(&recs)?));
    }
    let rel = format!("{EVAL_DIR}/{BLEU_TABLE}");
    let mut w = csv::Writer::from_path(run_dir.join(&rel))?;
    w.write_record(["mode", "bleu"])?;
    for (m, b) in &scores {
        w.write_record([m.clone(), format!("{b:.6}")])?;
    }
    w.flush()?;
    manifest.record(run_dir, &rel)?;
    manifest.write(run_dir)?;
    Ok(scores)
}

/// Directory of run `(variant, seed)` inside a matrix directory.
pub fn matrix_run_dir(matrix: &Path, variant: MtpVariant, seed: u64) -> PathBuf {
    matrix.join("runs").join(run_id(variant, seed))
}

/// Trained and evaluated with exactly `cfg`, and every recorded artifact
/// still hashes to its digest.
pub fn run_is_complete(run_dir: &Path, cfg: &RunConfig) -> bool {
    let check = || -> Result<bool> {
        let m = RunManifest::read(run_dir)?;
        m.verify(run_dir)?;
        Ok(read_run_config(run_dir)? == *cfg && m.artifacts.contains_key(&format!("{EVAL_DIR}/{BLEU_TABLE}")))
    };
    check().unwrap_or(false)
}

/// Last logged total loss in `train_log.csv`.
pub fn final_loss(run_dir: &Path) -> Result<Option<f64>> {
    let path = run_dir.join(TRAIN_LOG);
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(&path)?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "total")
        .ok_or_else(|| Error::Data(format!("{} has no total column", path.display())))?;
    let mut last = None;
    for rec in r.records() {
        let rec = rec?;
        last = rec.get(col).and_then(|v| v.parse().ok());
    }
    Ok(last)
}

/// Loads every decode dump in a run's eval directory, greedy first.
pub fn load_run(run_dir: &Path) -> Result<RunDumps> {
    let cfg = read_run_config(run_dir)?;
    let mut modes = Vec::new();
    if let Ok(entries) = fs::read_dir(run_dir.join(EVAL_DIR)) {
        for e in entries {
            let path = e?.path();
            if path.extension().is_some_and(|x| x == "jsonl") {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                if let Ok(mode) = DecodeMode::parse(stem) {
                    modes.push(mode);
                }
            }
        }
    }
    modes.sort();
    let mut dumps = Vec::new();
    for mode in modes {
        dumps.push((mode.name(), read_records(&dump_path(run_dir, mode))?));
    }
    if dumps.is_empty() {
        return Err(Error::Data(format!("{} has no decode dumps", run_dir.display())));
    }
    Ok(RunDumps {
        variant: cfg.variant().to_string(),
        seed: cfg.train.seed,
        unit_vocab: cfg.model.unit_vocab,
        dumps,
        final_loss: final_loss(run_dir)?,
    })
}
