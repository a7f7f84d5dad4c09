//! Dataset directories.
//!
//! A directory holds either `vocab/` plus `train.bin` (`val.bin`, `test.bin`
//! optional), or `train.csv` (`val.csv`, `test.csv` optional), or a single
//! `data.csv` that is split 0.8/0.1/0.1. Without a validation file a seeded
//! tenth of the training rows is held out.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::{build_vocab, encode, read_cache, split, EncodedDataset, Vocab, DEFAULT_LABEL_COLUMN, DEFAULT_SPLIT};
use crate::error::{Error, Result};

/// Fraction of the training rows held out when no validation file exists.
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct DataDir {
    pub vocab: Vocab,
    pub train: EncodedDataset,
    pub val: EncodedDataset,
    pub test: Option<EncodedDataset>,
}

fn context(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {}", path.display(), io))),
        other => other,
    }
}

fn cache(dir: &Path, name: &str, vocab: &Vocab) -> Result<Option<EncodedDataset>> {
    let path = dir.join(format!("{}.bin", name));
    if !path.exists() {
        return Ok(None);
    }
    let mut r = BufReader::new(File::open(&path).map_err(|e| context(&path, e.into()))?);
    Ok(Some(read_cache(&mut r, Some(vocab.schema_hash()))?.1))
}

fn csv(dir: &Path, name: &str, vocab: &Vocab) -> Result<Option<EncodedDataset>> {
    let path = dir.join(format!("{}.csv", name));
    if !path.exists() {
        return Ok(None);
    }
    encode(&path, vocab).map(Some).map_err(|e| context(&path, e))
}

fn vocab_from(path: &Path) -> Result<Vocab> {
    build_vocab(path, None, DEFAULT_LABEL_COLUMN, 1).map_err(|e| context(path, e))
}

impl DataDir {
    /// Loads every split; `seed` drives any split that has to be drawn.
    pub fn load(dir: &Path, seed: u64) -> Result<Self> {
        let (vocab, train, val, test) = if dir.join("train.bin").exists() && dir.join("vocab").is_dir() {
            let vocab = Vocab::load_dir(&dir.join("vocab"))?;
            let train = cache(dir, "train", &vocab)?.expect("checked above");
            let val = cache(dir, "val", &vocab)?;
            let test = cache(dir, "test", &vocab)?;
            (vocab, train, val, test)
        } else if dir.join("train.csv").exists() {
            let vocab = vocab_from(&dir.join("train.csv"))?;
            let train = csv(dir, "train", &vocab)?.expect("checked above");
            let val = csv(dir, "val", &vocab)?;
            let test = csv(dir, "test", &vocab)?;
            (vocab, train, val, test)
        } else if dir.join("data.csv").exists() {
            let vocab = vocab_from(&dir.join("data.csv"))?;
            let all = csv(dir, "data", &vocab)?.expect("checked above");
            let (tr, va, te) = split(&all, DEFAULT_SPLIT, seed)?;
            (vocab, tr, Some(va), Some(te))
        } else {
            return Err(Error::Config(format!(
                "{} holds no train.bin, train.csv or data.csv",
                dir.display()
            )));
        };
        let (train, val) = match val {
            Some(v) => (train, v),
            None => {
                let (tr, va, _) = split(&train, [1.0 - VAL_FRACTION, VAL_FRACTION, 0.0], seed)?;
                (tr, va)
            }
        };
        Ok(DataDir { vocab, train, val, test })
    }

    /// The evaluation rows of `dir` under an existing vocabulary: `test.bin`,
    /// `test.csv`, or the test part of `data.csv` split with `seed`.
    pub fn load_test(dir: &Path, vocab: &Vocab, seed: u64) -> Result<EncodedDataset> {
        if let Some(ds) = cache(dir, "test", vocab)? {
            return Ok(ds);
        }
        if let Some(ds) = csv(dir, "test", vocab)? {
            return Ok(ds);
        }
        if let Some(all) = csv(dir, "data", vocab)? {
            return Ok(split(&all, DEFAULT_SPLIT, seed)?.2);
        }
        Err(Error::Config(format!("{} holds no test.bin, test.csv or data.csv", dir.display())))
    }
}
