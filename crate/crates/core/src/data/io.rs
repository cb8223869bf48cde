use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::task::{Dataset, Sample, TaskSpec};
use crate::error::{Error, Result};

pub const TASK_FILE: &str = "task.toml";

/// One JSON object per line.
pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and the task spec into `dir`.
pub fn write_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TASK_FILE), d.spec.to_toml())?;
    for (name, split) in d.splits() {
        write_samples(&dir.join(format!("{name}.jsonl")), split)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let spec = TaskSpec::from_toml(&fs::read_to_string(dir.join(TASK_FILE))?)?;
    Ok(Dataset {
        spec,
        train: read_samples(&dir.join("train.jsonl"))?,
        dev: read_samples(&dir.join("dev.jsonl"))?,
        test: read_samples(&dir.join("test.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn spec(n: usize) -> TaskSpec {
        TaskSpec {
            n_train: n,
            n_dev: 3,
            n_test: 3,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn small_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&spec(10)).unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let d = generate_dataset(&spec(2)).unwrap();
        write_samples(&p, &d.train).unwrap();
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str(r#"{"id":9,"src_tokens":[1],"src_feats":[[0.5]],"x_text":[1],"y_text":[2]}"#);
        text.push('\n');
        fs::write(&p, text).unwrap();
        match read_samples(&p) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("units"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn full_corpus_rewrite_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&spec(2000)).unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_samples(&a, &d.train).unwrap();
        let back = read_samples(&a).unwrap();
        assert_eq!(back, d.train);
        write_samples(&b, &back).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}
