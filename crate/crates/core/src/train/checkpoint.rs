//! Binary model checkpoint.
//!
//! Layout (little-endian): magic `RSRT`, `u16` version, 8-byte schema hash,
//! `u32` length + UTF-8 JSON header (training config and field schema),
//! `u32` array count, then per array: `u32` length + UTF-8 name, `u32` rank,
//! `rank` × `u32` dims, and the values as IEEE-754 `f32`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::autodiff::Array;
use crate::data::FieldSchema;
use crate::error::{Error, Result};
use crate::streams::StreamKind;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSRT";
pub const CHECKPOINT_VERSION: u16 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    schema: FieldSchema,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schema_hash: [u8; 8],
    pub config: TrainConfig,
    pub schema: FieldSchema,
    /// Values already rounded to `f32`.
    pub arrays: Vec<(String, Array)>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{} does not fit in u32", v)))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&ck.schema_hash)?;
    let header = serde_json::to_vec(&Header {
        config: ck.config.clone(),
        schema: ck.schema.clone(),
    })?;
    put_u32(w, header.len())?;
    w.write_all(&header)?;
    put_u32(w, ck.arrays.len())?;
    for (name, arr) in &ck.arrays {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, arr.ndim())?;
        for &d in arr.shape() {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(arr.len() * 4);
        for &x in arr.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated in {}", what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
    }
    let mut schema_hash = [0u8; 8];
    schema_hash.copy_from_slice(c.take(8, "schema hash")?);
    let hlen = c.u32("header length")?;
    let header: Header = serde_json::from_slice(c.take(hlen, "header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {}", e)))?;
    let count = c.u32("array count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let nlen = c.u32("array name")?;
        let name = std::str::from_utf8(c.take(nlen, "array name")?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_owned();
        let rank = c.u32("array rank")?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("array {:?} has rank {}", name, rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("array shape")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("array {:?} is too large", name)))?;
        let payload = c.take(n, "array values")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("array {:?} holds non-finite values", name)));
        }
        arrays.push((name, Array::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        schema_hash,
        config: header.config,
        schema: header.schema,
        arrays,
    })
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let p = self.params();
        Checkpoint {
            schema_hash: self.schema_hash(),
            config: self.config().clone(),
            schema: self.schema().clone(),
            arrays: p
                .names()
                .iter()
                .cloned()
                .zip(p.values().iter().map(Array::to_f32_precision))
                .collect(),
        }
    }

    /// Rebuilds a model. When `expect_hash` is given, a checkpoint trained on
    /// a different vocabulary is refused.
    pub fn from_checkpoint(ck: &Checkpoint, expect_hash: Option<[u8; 8]>) -> Result<Model> {
        if let Some(h) = expect_hash {
            if h != ck.schema_hash {
                return Err(Error::Schema(
                    "checkpoint was trained on a different vocabulary (schema hash mismatch)".into(),
                ));
            }
        }
        check_budget(ck)?;
        let mut model = Model::new(&ck.config, &ck.schema, ck.schema_hash)?;
        model.params_mut().load_from(&ck.arrays)?;
        Ok(model)
    }
}

/// Rejects configs whose parameter arrays could not fit in the stored
/// values, before anything is allocated for them.
fn check_budget(ck: &Checkpoint) -> Result<()> {
    let total: usize = ck.arrays.iter().map(|(_, a)| a.len()).sum();
    let cfg = &ck.config;
    let fields = ck.schema.num_fields();
    let d = cfg.embedding_dim;
    let vocab: Option<usize> = ck.schema.fields.iter().try_fold(0usize, |a, f| a.checked_add(f.vocab_size));
    let mut sizes = vec![vocab.and_then(|v| v.checked_mul(d)), Some(cfg.output_width(fields))];
    for (kind, depth, hidden) in [
        (cfg.stream_deep, cfg.depth_deep, &cfg.mlp_deep_sizes),
        (cfg.stream_shallow, cfg.depth_shallow, &cfg.mlp_shallow_sizes),
    ] {
        if kind == StreamKind::Mlp {
            sizes.extend(hidden.iter().map(|&h| Some(h)));
        } else {
            sizes.push(depth.checked_mul(d).and_then(|x| x.checked_mul(d)));
        }
    }
    if sizes.iter().any(|s| s.is_none_or(|s| s > total)) {
        return Err(Error::Format("checkpoint arrays do not match its config".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::data::FieldSpec;

    fn small() -> Model {
        let schema = FieldSchema {
            fields: (0..3)
                .map(|i| FieldSpec {
                    name: format!("f{}", i),
                    vocab_size: 4 + i,
                })
                .collect(),
            label_column: "label".into(),
        };
        let cfg = TrainConfig {
            embedding_dim: 4,
            d_out: Some(6),
            chunks: Some(2),
            ..TrainConfig::default()
        };
        Model::new(&cfg, &schema, [9; 8]).unwrap()
    }

    fn logits(m: &Model, rows: &[u32]) -> Vec<f64> {
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let fw = m.forward(&mut g, &p, rows).unwrap();
        g.value(fw.logit).data().to_vec()
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let m = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.to_checkpoint()).unwrap();
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(ck, m.to_checkpoint());
        let back = Model::from_checkpoint(&ck, Some([9; 8])).unwrap();
        let mut rounded = m.clone();
        for v in rounded.params_mut().values_mut() {
            *v = v.to_f32_precision();
        }
        let rows = [0, 1, 2, 3, 4, 5];
        assert_eq!(logits(&back, &rows), logits(&rounded, &rows));
    }

    #[test]
    fn corrupt_inputs() {
        let m = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.to_checkpoint()).unwrap();
        for cut in [0, 3, 10, 20, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(read_checkpoint(&mut &buf[..cut]), Err(Error::Format(_))), "cut {}", cut);
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint(&mut extra.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn refuses_other_schema() {
        let m = small();
        let ck = m.to_checkpoint();
        assert!(matches!(Model::from_checkpoint(&ck, Some([1; 8])), Err(Error::Schema(_))));
        assert!(Model::from_checkpoint(&ck, None).is_ok());
    }

    #[test]
    fn refuses_oversized_config() {
        let mut ck = small().to_checkpoint();
        ck.schema.fields[0].vocab_size = 1 << 40;
        assert!(matches!(Model::from_checkpoint(&ck, None), Err(Error::Format(_))));
    }
}
