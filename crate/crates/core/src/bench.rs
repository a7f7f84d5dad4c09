//! Forward-pass timing of a single interaction stream.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::streams::{Stream, StreamKind, StreamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub stream: StreamKind,
    pub fields: usize,
    pub dim: usize,
    pub batch: usize,
    pub reps: usize,
    /// Block count for MSR and layer count for attention.
    pub depth: usize,
    pub heads: usize,
    pub hidden: Vec<usize>,
    /// `None` rounds 400 up to a multiple of `fields`.
    pub d_out: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            stream: StreamKind::Msr,
            fields: 23,
            dim: 10,
            batch: 4096,
            reps: 5,
            depth: 3,
            heads: 2,
            hidden: vec![400, 400, 400],
            d_out: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub stream: StreamKind,
    pub fields: usize,
    pub dim: usize,
    pub batch: usize,
    pub d_out: usize,
    pub param_count: usize,
    /// Wall-clock seconds of each repetition.
    pub seconds: Vec<f64>,
    pub mean_seconds: f64,
    pub min_seconds: f64,
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps == 0 || cfg.batch == 0 {
        return Err(Error::Config("reps and batch must be positive".into()));
    }
    let d_out = cfg.d_out.unwrap_or_else(|| 400usize.div_ceil(cfg.fields.max(1)) * cfg.fields.max(1));
    let spec = match cfg.stream {
        StreamKind::Msr => StreamSpec::Msr { depth: cfg.depth },
        StreamKind::Mlp => StreamSpec::Mlp {
            hidden: cfg.hidden.clone(),
        },
        StreamKind::Sa => StreamSpec::Sa {
            depth: cfg.depth,
            heads: cfg.heads,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let stream = Stream::new(&mut store, "bench", &spec, cfg.fields, cfg.dim, d_out, &mut rng)?;
    let n = cfg.batch * cfg.fields * cfg.dim;
    let x = Array::new(
        vec![cfg.batch, cfg.fields, cfg.dim],
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
            .collect(),
    )?;
    let mut seconds = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let start = Instant::now();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x0 = g.constant(x.clone());
        let out = stream.forward(&mut g, &p, x0)?;
        std::hint::black_box(g.value(out));
        seconds.push(start.elapsed().as_secs_f64());
    }
    let mean_seconds = seconds.iter().sum::<f64>() / seconds.len() as f64;
    let min_seconds = seconds.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(BenchReport {
        stream: cfg.stream,
        fields: cfg.fields,
        dim: cfg.dim,
        batch: cfg.batch,
        d_out,
        param_count: stream.param_count(&store),
        seconds,
        mean_seconds,
        min_seconds,
    })
}
