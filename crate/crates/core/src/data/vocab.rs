use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::csv::{parse_label, CsvReader};
use super::EncodedDataset;
use crate::error::{Error, Result};

/// Reserved index for out-of-vocabulary tokens in every field.
pub const OOV: u32 = 0;

pub const DEFAULT_LABEL_COLUMN: &str = "label";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    /// Includes the OOV slot, so always ≥ 1.
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub fields: Vec<FieldSpec>,
    pub label_column: String,
}

impl FieldSchema {
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.vocab_size).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.fields.iter().enumerate() {
            if f.vocab_size == 0 {
                return Err(Error::Schema(format!("field {:?} has vocab size 0", f.name)));
            }
            if self.fields[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Schema(format!("duplicate field {:?}", f.name)));
            }
            if f.name == self.label_column {
                return Err(Error::Schema(format!("field {:?} is the label column", f.name)));
            }
        }
        Ok(())
    }
}

/// Per-field token dictionaries. Index 0 is OOV; known tokens take 1..V in
/// order of first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    schema: FieldSchema,
    tokens: Vec<Vec<String>>,
    lookup: Vec<HashMap<String, u32>>,
}

impl Vocab {
    pub(crate) fn from_tokens(names: Vec<String>, label_column: String, tokens: Vec<Vec<String>>) -> Result<Self> {
        let lookup = tokens
            .iter()
            .map(|ts| {
                let mut m = HashMap::with_capacity(ts.len());
                for (i, t) in ts.iter().enumerate() {
                    if m.insert(t.clone(), i as u32 + 1).is_some() {
                        return Err(Error::Format(format!("duplicate token {:?}", t)));
                    }
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let fields = names
            .into_iter()
            .zip(&tokens)
            .map(|(name, ts)| FieldSpec {
                name,
                vocab_size: ts.len() + 1,
            })
            .collect();
        let schema = FieldSchema {
            fields,
            label_column,
        };
        schema.validate()?;
        Ok(Vocab {
            schema,
            tokens,
            lookup,
        })
    }

    /// Single pass over a CSV: counts tokens per field and keeps those seen at
    /// least `min_freq` times. `fields` defaults to every non-label column.
    pub fn build<R: BufRead>(
        reader: R,
        fields: Option<&[String]>,
        label_column: &str,
        min_freq: usize,
    ) -> Result<Self> {
        let mut csv = CsvReader::new(reader)?;
        csv.column(label_column)?;
        let names: Vec<String> = match fields {
            Some(fs) => fs.to_vec(),
            None => csv.header().iter().filter(|h| *h != label_column).cloned().collect(),
        };
        let cols = names.iter().map(|n| csv.column(n)).collect::<Result<Vec<_>>>()?;
        let mut order: Vec<Vec<String>> = vec![Vec::new(); names.len()];
        let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); names.len()];
        while let Some((_, cells)) = csv.next_record()? {
            for (f, &c) in cols.iter().enumerate() {
                let tok = cells[c];
                match counts[f].get_mut(tok) {
                    Some(n) => *n += 1,
                    None => {
                        counts[f].insert(tok.to_owned(), 1);
                        order[f].push(tok.to_owned());
                    }
                }
            }
        }
        let tokens = order
            .into_iter()
            .zip(&counts)
            .map(|(ts, cnt)| ts.into_iter().filter(|t| cnt[t] >= min_freq.max(1)).collect())
            .collect();
        Vocab::from_tokens(names, label_column.to_owned(), tokens)
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn index(&self, field: usize, token: &str) -> u32 {
        self.lookup[field].get(token).copied().unwrap_or(OOV)
    }

    /// Inverse lookup; `None` for OOV or out-of-range indices.
    pub fn token(&self, field: usize, index: u32) -> Option<&str> {
        let i = (index as usize).checked_sub(1)?;
        self.tokens[field].get(i).map(String::as_str)
    }

    /// Encodes every row of a CSV whose header includes all schema fields and
    /// the label column. Unseen tokens map to [`OOV`].
    pub fn encode<R: BufRead>(&self, reader: R) -> Result<EncodedDataset> {
        let mut csv = CsvReader::new(reader)?;
        let label_col = csv.column(&self.schema.label_column)?;
        let cols = self
            .schema
            .fields
            .iter()
            .map(|f| csv.column(&f.name))
            .collect::<Result<Vec<_>>>()?;
        let mut ds = EncodedDataset::empty(cols.len());
        while let Some((line, cells)) = csv.next_record()? {
            let label = parse_label(cells[label_col], line)?;
            let row: Vec<u32> = cols.iter().enumerate().map(|(f, &c)| self.index(f, cells[c])).collect();
            ds.push(&row, label);
        }
        Ok(ds)
    }

    /// Stable 8-byte digest of field names, label column and every token.
    pub fn schema_hash(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update(self.schema.label_column.as_bytes());
        for (f, ts) in self.schema.fields.iter().zip(&self.tokens) {
            h.update([0xff]);
            h.update(f.name.as_bytes());
            h.update((ts.len() as u64).to_le_bytes());
            for t in ts {
                h.update([0x00]);
                h.update(t.as_bytes());
            }
        }
        let d = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&d[..8]);
        out
    }

    /// Writes `schema.json` plus one `field<i>.tsv` per field holding
    /// `token<TAB>index` lines.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, ts) in self.tokens.iter().enumerate() {
            let mut w = BufWriter::new(File::create(dir.join(format!("field{}.tsv", i)))?);
            write_field_vocab(&mut w, ts)?;
            w.flush()?;
        }
        let f = File::create(dir.join("schema.json"))?;
        serde_json::to_writer_pretty(f, &self.schema)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let schema: FieldSchema = serde_json::from_reader(BufReader::new(File::open(dir.join("schema.json"))?))?;
        let mut tokens = Vec::with_capacity(schema.fields.len());
        for (i, f) in schema.fields.iter().enumerate() {
            let ts = read_field_vocab(BufReader::new(File::open(dir.join(format!("field{}.tsv", i)))?))?;
            if ts.len() + 1 != f.vocab_size {
                return Err(Error::Format(format!(
                    "field {:?}: schema says {} entries, file has {}",
                    f.name,
                    f.vocab_size,
                    ts.len() + 1
                )));
            }
            tokens.push(ts);
        }
        let names = schema.fields.into_iter().map(|f| f.name).collect();
        Vocab::from_tokens(names, schema.label_column, tokens)
    }
}

pub fn write_field_vocab<W: Write>(w: &mut W, tokens: &[String]) -> Result<()> {
    for (i, t) in tokens.iter().enumerate() {
        if t.contains(['\t', '\n', '\r']) {
            return Err(Error::Format(format!("token {:?} contains a tab or newline", t)));
        }
        writeln!(w, "{}\t{}", t, i + 1)?;
    }
    Ok(())
}

/// Parses `token<TAB>index` lines. Indices must run 1, 2, ... in file order
/// and tokens must be unique.
pub fn read_field_vocab<R: Read>(r: R) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let bad = |msg: &str| Error::Parse {
            line: n + 1,
            msg: msg.to_owned(),
        };
        let (tok, idx) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab"))?;
        if tok.contains(['\t', '\r']) {
            return Err(bad("token contains a tab or carriage return"));
        }
        let idx: usize = idx.parse().map_err(|_| bad("index is not an integer"))?;
        if idx != out.len() + 1 {
            return Err(bad("indices must be consecutive from 1"));
        }
        if !seen.insert(tok.to_owned()) {
            return Err(bad("duplicate token"));
        }
        out.push(tok.to_owned());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(src: &str, min_freq: usize) -> Vocab {
        Vocab::build(src.as_bytes(), None, "label", min_freq).unwrap()
    }

    #[test]
    fn min_freq_threshold() {
        let v = vocab("t,label\na,1\na,0\nb,1\n", 2);
        assert_eq!(v.index(0, "a"), 1);
        assert_eq!(v.index(0, "b"), OOV);
        assert_eq!(v.schema().fields[0].vocab_size, 2);
    }

    #[test]
    fn first_appearance_order() {
        let v = vocab("t,label\na,1\nb,0\n", 1);
        assert_eq!(v.index(0, "a"), 1);
        assert_eq!(v.index(0, "b"), 2);
        assert_eq!(v.token(0, 2), Some("b"));
        assert_eq!(v.token(0, 0), None);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let r = Vocab::build("a,b\n1,2\n".as_bytes(), None, "label", 1);
        assert!(matches!(r, Err(Error::Schema(_))));
        let fields = vec!["zz".to_string()];
        let r = Vocab::build("a,label\n1,0\n".as_bytes(), Some(&fields), "label", 1);
        assert!(matches!(r, Err(Error::Schema(_))));
    }

    #[test]
    fn encode_unseen_and_empty() {
        let v = vocab("u,i,label\nx,y,1\n", 1);
        let ds = v.encode("i,u,label\nq,w,0\ny,x,1\n".as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.row(0), &[0, 0]);
        assert_eq!(ds.row(1), &[1, 1]);
        assert_eq!(ds.labels(), &[0, 1]);
        let empty = v.encode("u,i,label\n".as_bytes()).unwrap();
        assert!(empty.is_empty());
        assert!(matches!(v.encode("u,i,label\nx,y,3\n".as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn in_vocab_tokens_round_trip() {
        let v = vocab("u,i,label\nx,y,1\nz,y,0\nx,w,1\n", 1);
        for (f, toks) in [(0, ["x", "z"]), (1, ["y", "w"])] {
            for t in toks {
                assert_eq!(v.token(f, v.index(f, t)), Some(t));
            }
        }
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab("u,i,label\nx,y,1\nz,y,0\n", 1);
        v.save_dir(dir.path()).unwrap();
        let back = Vocab::load_dir(dir.path()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.schema_hash(), v.schema_hash());
        let text = std::fs::read_to_string(dir.path().join("field0.tsv")).unwrap();
        assert_eq!(text, "x\t1\nz\t2\n");
    }

    #[test]
    fn hash_depends_on_tokens() {
        let a = vocab("u,label\nx,1\n", 1);
        let b = vocab("u,label\ny,1\n", 1);
        assert_ne!(a.schema_hash(), b.schema_hash());
    }

    #[test]
    fn field_file_validation() {
        assert_eq!(read_field_vocab("a\t1\nb\t2\n".as_bytes()).unwrap(), ["a", "b"]);
        assert!(read_field_vocab("a\t2\n".as_bytes()).is_err());
        assert!(read_field_vocab("a\t1\na\t2\n".as_bytes()).is_err());
        assert!(read_field_vocab("a 1\n".as_bytes()).is_err());
        assert!(read_field_vocab("a\tb\t1\n".as_bytes()).is_err());
        assert!(read_field_vocab("a\rb\t1\r\n".as_bytes()).is_err());
        assert_eq!(read_field_vocab("a\t1\r\n".as_bytes()).unwrap(), ["a"]);
    }
}
