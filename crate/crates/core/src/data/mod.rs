//! Dataset schema, CSV ingestion, vocabularies, splits and the synthetic
//! spurious-correlation generator.

mod cache;
pub mod csv;
mod dir;
mod synth;
mod vocab;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cache::{read_cache, write_cache, CACHE_MAGIC};
pub use dir::{DataDir, VAL_FRACTION};
pub use synth::{gen_synthetic, synthetic_vocab, SynthConfig, CAUSAL_CARDINALITY, SPURIOUS_CARDINALITY};
pub use vocab::{
    read_field_vocab, write_field_vocab, FieldSchema, FieldSpec, Vocab, DEFAULT_LABEL_COLUMN, OOV,
};

use crate::error::{Error, Result};

/// Row-major `n × f` field indices plus binary labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDataset {
    num_fields: usize,
    indices: Vec<u32>,
    labels: Vec<u8>,
}

impl EncodedDataset {
    pub fn empty(num_fields: usize) -> Self {
        EncodedDataset {
            num_fields,
            indices: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn new(num_fields: usize, indices: Vec<u32>, labels: Vec<u8>) -> Result<Self> {
        if indices.len() != num_fields * labels.len() {
            return Err(Error::Shape(format!(
                "{} indices for {} rows of {} fields",
                indices.len(),
                labels.len(),
                num_fields
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Format("labels must be 0 or 1".into()));
        }
        Ok(EncodedDataset {
            num_fields,
            indices,
            labels,
        })
    }

    pub fn push(&mut self, row: &[u32], label: u8) {
        assert_eq!(row.len(), self.num_fields);
        assert!(label <= 1);
        self.indices.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.num_fields..(i + 1) * self.num_fields]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn subset(&self, rows: &[usize]) -> EncodedDataset {
        let mut out = EncodedDataset::empty(self.num_fields);
        out.indices.reserve(rows.len() * self.num_fields);
        for &r in rows {
            out.push(self.row(r), self.labels[r]);
        }
        out
    }

    /// Checks every index against the schema's vocabulary sizes.
    pub fn validate(&self, schema: &FieldSchema) -> Result<()> {
        if schema.num_fields() != self.num_fields {
            return Err(Error::Schema(format!(
                "dataset has {} fields, schema {}",
                self.num_fields,
                schema.num_fields()
            )));
        }
        for row in self.indices.chunks(self.num_fields.max(1)) {
            for (f, (&ix, spec)) in row.iter().zip(&schema.fields).enumerate() {
                if ix as usize >= spec.vocab_size {
                    return Err(Error::Lookup {
                        field: f,
                        index: ix,
                        vocab_size: spec.vocab_size,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn build_vocab(path: &Path, fields: Option<&[String]>, label_column: &str, min_freq: usize) -> Result<Vocab> {
    Vocab::build(BufReader::new(File::open(path)?), fields, label_column, min_freq)
}

pub fn encode(path: &Path, vocab: &Vocab) -> Result<EncodedDataset> {
    vocab.encode(BufReader::new(File::open(path)?))
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Seeded shuffle into train/val/test. Validation and test sizes round down;
/// the remainder goes to train.
pub fn split(
    ds: &EncodedDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(EncodedDataset, EncodedDataset, EncodedDataset)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {:?} must be in [0,1] and sum to 1", fractions)));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * fractions[1]).floor() as usize;
    let n_test = (n as f64 * fractions[2]).floor() as usize;
    let n_train = n - n_val - n_test;
    let (tr, rest) = order.split_at(n_train);
    let (va, te) = rest.split_at(n_val);
    Ok((ds.subset(tr), ds.subset(va), ds.subset(te)))
}
