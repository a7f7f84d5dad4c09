//! Field embedding and the feature-interaction streams: the stacked
//! multi-scale retention stream and the MLP / self-attention baselines.
//!
//! Everything is batched: a field matrix is `[B, f, d]`, a stream output is
//! `[B, D_out]`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Var, GROUP_NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};

/// Decay factors `r_i = 1 - 2^-(i+4)` for blocks `i = 1..=m`.
pub fn decay_schedule(m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Config("stream depth must be at least 1".into()));
    }
    Ok((1..=m).map(|i| 1.0 - 0.5f64.powi(i as i32 + 4)).collect())
}

/// One lookup table for all fields; field `j`'s rows start at `offsets[j]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
    offsets: Vec<usize>,
    vocab_sizes: Vec<usize>,
    dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, vocab_sizes: &[usize], dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut offsets = Vec::with_capacity(vocab_sizes.len());
        let mut total = 0;
        for &v in vocab_sizes {
            offsets.push(total);
            total += v;
        }
        let table = store.add("embedding", uniform(&[total, dim], dim, rng));
        Embedding {
            table,
            offsets,
            vocab_sizes: vocab_sizes.to_vec(),
            dim,
        }
    }

    pub fn num_fields(&self) -> usize {
        self.offsets.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `indices` is row-major `[batch, f]`; returns `x_0: [batch, f, d]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, indices: &[u32]) -> Result<Var> {
        let f = self.num_fields();
        if f == 0 || indices.len() % f != 0 {
            return Err(Error::Shape(format!("{} indices for {} fields", indices.len(), f)));
        }
        let mut rows = Vec::with_capacity(indices.len());
        for row in indices.chunks(f) {
            for (j, &ix) in row.iter().enumerate() {
                if ix as usize >= self.vocab_sizes[j] {
                    return Err(Error::Lookup {
                        field: j,
                        index: ix,
                        vocab_size: self.vocab_sizes[j],
                    });
                }
                rows.push(self.offsets[j] + ix as usize);
            }
        }
        let flat = g.gather(p.var(self.table), &rows)?;
        g.reshape(flat, vec![indices.len() / f, f, self.dim])
    }
}

/// One recurrent step over blocks:
/// `S_i = r S_prev + K^T V`, `x_i = Q S_i` with `Q, K, V = x_prev W_{q,k,v}`.
pub fn retention_block(
    g: &mut Graph,
    x_prev: Var,
    s_prev: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    r: f64,
) -> Result<(Var, Var)> {
    let q = g.matmul(x_prev, w_q)?;
    let k = g.matmul(x_prev, w_k)?;
    let v = g.matmul(x_prev, w_v)?;
    let kt = g.transpose(k)?;
    let kv = g.matmul(kt, v)?;
    let decayed = g.scale(s_prev, r)?;
    let s = g.add(decayed, kv)?;
    let x = g.matmul(q, s)?;
    Ok((x, s))
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub r: f64,
}

/// Runs the blocks in order from a zero state, normalizes the concatenated
/// block outputs with one group per block, gates with `swish(x_0 P_Z)` and
/// projects every field with `P_U`. Returns `[B, f * P_U.cols]`.
pub fn run_stream(g: &mut Graph, x0: Var, blocks: &[BlockVars], p_z: Var, p_u: Var) -> Result<Var> {
    let sh = g.shape(x0).to_vec();
    if sh.len() != 3 {
        return Err(Error::Shape(format!("stream input must be [B, f, d], got {:?}", sh)));
    }
    if blocks.is_empty() {
        return Err(Error::Config("stream needs at least one block".into()));
    }
    let (b, f, d) = (sh[0], sh[1], sh[2]);
    let mut s = g.constant(Array::zeros(&[b, d, d]));
    let mut x = x0;
    let mut outs = Vec::with_capacity(blocks.len());
    for blk in blocks {
        let (xi, si) = retention_block(g, x, s, blk.w_q, blk.w_k, blk.w_v, blk.r)?;
        outs.push(xi);
        x = xi;
        s = si;
    }
    let cat = g.concat(&outs, 2)?;
    let t = g.group_norm(cat, blocks.len(), GROUP_NORM_EPS)?;
    let z = g.matmul(x0, p_z)?;
    let gate = g.swish(z)?;
    let gated = g.mul(gate, t)?;
    let proj = g.matmul(gated, p_u)?;
    let per_field = g.shape(proj)[2];
    g.reshape(proj, vec![b, f * per_field])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Msr,
    Mlp,
    Sa,
}

impl std::str::FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msr" => Ok(StreamKind::Msr),
            "mlp" => Ok(StreamKind::Mlp),
            "sa" => Ok(StreamKind::Sa),
            _ => Err(Error::Config(format!("unknown stream kind {:?}", s))),
        }
    }
}

/// Shape description of one stream.
#[derive(Clone, Debug, PartialEq)]
pub enum StreamSpec {
    Msr { depth: usize },
    Mlp { hidden: Vec<usize> },
    Sa { depth: usize, heads: usize },
}

#[derive(Clone, Debug)]
struct MsrBlock {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    r: f64,
}

#[derive(Clone, Debug)]
struct SaLayer {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

#[derive(Clone, Debug)]
enum Body {
    Msr { blocks: Vec<MsrBlock>, p_z: ParamId, p_u: ParamId },
    Mlp { layers: Vec<(ParamId, ParamId)> },
    Sa { layers: Vec<SaLayer>, heads: usize, p_u: ParamId },
}

#[derive(Clone, Debug)]
pub struct Stream {
    name: String,
    body: Body,
    fields: usize,
    dim: usize,
    d_out: usize,
}

impl Stream {
    /// Registers the stream's parameters under `name.` in `store`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &StreamSpec,
        fields: usize,
        dim: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if fields == 0 || dim == 0 || d_out == 0 {
            return Err(Error::Config("stream sizes must be positive".into()));
        }
        let per_field = || {
            if d_out % fields != 0 {
                Err(Error::Config(format!("D_out {} not divisible by {} fields", d_out, fields)))
            } else {
                Ok(d_out / fields)
            }
        };
        let mut sq = |store: &mut ParamStore, n: String| store.add(n, uniform(&[dim, dim], dim, rng));
        let body = match spec {
            StreamSpec::Msr { depth } => {
                let rs = decay_schedule(*depth)?;
                let po = per_field()?;
                let blocks = rs
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| MsrBlock {
                        w_q: sq(store, format!("{}.block{}.w_q", name, i)),
                        w_k: sq(store, format!("{}.block{}.w_k", name, i)),
                        w_v: sq(store, format!("{}.block{}.w_v", name, i)),
                        r,
                    })
                    .collect();
                let md = depth * dim;
                let p_z = store.add(format!("{}.p_z", name), uniform(&[dim, md], dim, rng));
                let p_u = store.add(format!("{}.p_u", name), uniform(&[md, po], md, rng));
                Body::Msr { blocks, p_z, p_u }
            }
            StreamSpec::Mlp { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::Config("MLP hidden sizes must be non-empty and positive".into()));
                }
                let mut sizes = vec![fields * dim];
                sizes.extend_from_slice(hidden);
                sizes.push(d_out);
                let layers = sizes
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        let wt = store.add(format!("{}.layer{}.w", name, i), uniform(&[w[0], w[1]], w[0], rng));
                        let b = store.add(format!("{}.layer{}.b", name, i), Array::zeros(&[w[1]]));
                        (wt, b)
                    })
                    .collect();
                Body::Mlp { layers }
            }
            StreamSpec::Sa { depth, heads } => {
                if *depth == 0 {
                    return Err(Error::Config("stream depth must be at least 1".into()));
                }
                if *heads == 0 || dim % heads != 0 {
                    return Err(Error::Config(format!("embedding dim {} not divisible by {} heads", dim, heads)));
                }
                let po = per_field()?;
                let layers = (0..*depth)
                    .map(|i| SaLayer {
                        w_q: sq(store, format!("{}.layer{}.w_q", name, i)),
                        w_k: sq(store, format!("{}.layer{}.w_k", name, i)),
                        w_v: sq(store, format!("{}.layer{}.w_v", name, i)),
                    })
                    .collect();
                let p_u = store.add(format!("{}.p_u", name), uniform(&[dim, po], dim, rng));
                Body::Sa {
                    layers,
                    heads: *heads,
                    p_u,
                }
            }
        };
        Ok(Stream {
            name: name.to_owned(),
            body,
            fields,
            dim,
            d_out,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.count(&format!("{}.", self.name))
    }

    /// `x0: [B, f, d]` → `[B, D_out]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x0: Var) -> Result<Var> {
        let sh = g.shape(x0).to_vec();
        if sh.len() != 3 || sh[1] != self.fields || sh[2] != self.dim {
            return Err(Error::Shape(format!(
                "stream {} expects [B, {}, {}], got {:?}",
                self.name, self.fields, self.dim, sh
            )));
        }
        let b = sh[0];
        match &self.body {
            Body::Msr { blocks, p_z, p_u } => {
                let bv: Vec<BlockVars> = blocks
                    .iter()
                    .map(|k| BlockVars {
                        w_q: p.var(k.w_q),
                        w_k: p.var(k.w_k),
                        w_v: p.var(k.w_v),
                        r: k.r,
                    })
                    .collect();
                run_stream(g, x0, &bv, p.var(*p_z), p.var(*p_u))
            }
            Body::Mlp { layers } => {
                let mut h = g.reshape(x0, vec![b, self.fields * self.dim])?;
                for (i, &(w, bias)) in layers.iter().enumerate() {
                    let z = g.matmul(h, p.var(w))?;
                    h = g.add(z, p.var(bias))?;
                    if i + 1 < layers.len() {
                        h = g.relu(h)?;
                    }
                }
                Ok(h)
            }
            Body::Sa { layers, heads, p_u } => {
                let mut x = x0;
                for l in layers {
                    x = self_attention(g, x, p.var(l.w_q), p.var(l.w_k), p.var(l.w_v), *heads)?;
                }
                let proj = g.matmul(x, p.var(*p_u))?;
                g.reshape(proj, vec![b, self.d_out])
            }
        }
    }
}

/// Multi-head softmax attention across the field axis of `x: [B, f, d]`.
pub fn self_attention(g: &mut Graph, x: Var, w_q: Var, w_k: Var, w_v: Var, heads: usize) -> Result<Var> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {} not divisible by {} heads", d, heads)));
    }
    let dh = d / heads;
    // the 1/sqrt(dh) score scale is folded into the query map, and heads
    // slice the small weights rather than the [B, f, d] activations
    let w_q = g.scale(w_q, 1.0 / (dh as f64).sqrt())?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let wq = g.slice(w_q, 1, cols.clone())?;
        let wk = g.slice(w_k, 1, cols.clone())?;
        let wv = g.slice(w_v, 1, cols)?;
        let qh = g.matmul(x, wq)?;
        let kh = g.matmul(x, wk)?;
        let vh = g.matmul(x, wv)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let attn = g.softmax(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 2)
    }
}
