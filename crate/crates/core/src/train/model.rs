use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Graph, Var};
use crate::data::{EncodedDataset, FieldSchema};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::predictor::Predictor;
use crate::streams::{Embedding, Stream};

use super::TrainConfig;

/// Embedding, deep and shallow streams and the chunked head.
#[derive(Clone, Debug)]
pub struct Model {
    config: TrainConfig,
    schema: FieldSchema,
    schema_hash: [u8; 8],
    store: ParamStore,
    embedding: Embedding,
    deep: Stream,
    shallow: Stream,
    head: Predictor,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub x0: Var,
    pub deep: Var,
    pub shallow: Var,
    pub logit: Var,
}

impl Model {
    pub fn new(config: &TrainConfig, schema: &FieldSchema, schema_hash: [u8; 8]) -> Result<Self> {
        schema.validate()?;
        let f = schema.num_fields();
        config.validate(f)?;
        let d_out = config.output_width(f);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.embedding_dim;
        let embedding = Embedding::new(&mut store, &schema.vocab_sizes(), d, &mut rng);
        let deep = Stream::new(&mut store, "deep", &config.deep_spec(), f, d, d_out, &mut rng)?;
        let shallow = Stream::new(&mut store, "shallow", &config.shallow_spec(), f, d, d_out, &mut rng)?;
        let head = Predictor::new(&mut store, d_out, config.chunk_count(), &mut rng)?;
        Ok(Model {
            config: config.clone(),
            schema: schema.clone(),
            schema_hash,
            store,
            embedding,
            deep,
            shallow,
            head,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn schema_hash(&self) -> [u8; 8] {
        self.schema_hash
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn d_out(&self) -> usize {
        self.deep.d_out()
    }

    /// Scalar parameter counts: embedding, deep, shallow, head.
    pub fn param_counts(&self) -> [usize; 4] {
        [
            self.store.count("embedding"),
            self.deep.param_count(&self.store),
            self.shallow.param_count(&self.store),
            self.store.count("head."),
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.store.bind(g)
    }

    /// `indices`: row-major `[B, f]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, indices: &[u32]) -> Result<Forward> {
        let x0 = self.embedding.forward(g, p, indices)?;
        let deep = self.deep.forward(g, p, x0)?;
        let shallow = self.shallow.forward(g, p, x0)?;
        let logit = self.head.logit(g, p, deep, shallow)?;
        Ok(Forward {
            x0,
            deep,
            shallow,
            logit,
        })
    }

    /// Click probabilities for every row, evaluated `batch` rows at a time.
    pub fn predict(&self, ds: &EncodedDataset, batch: usize) -> Result<Vec<f64>> {
        if ds.num_fields() != self.schema.num_fields() {
            return Err(Error::Schema(format!(
                "dataset has {} fields, model expects {}",
                ds.num_fields(),
                self.schema.num_fields()
            )));
        }
        let f = ds.num_fields();
        let mut out = Vec::with_capacity(ds.len());
        for rows in ds.indices().chunks(batch.max(1) * f) {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let fw = self.forward(&mut g, &p, rows)?;
            out.extend(g.value(fw.logit).data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())));
        }
        Ok(out)
    }

    /// Row-major `[n, 2 D_out]` concatenation of both stream outputs.
    pub fn features(&self, ds: &EncodedDataset, batch: usize) -> Result<Array> {
        let f = ds.num_fields();
        let m = 2 * self.d_out();
        let mut data = Vec::with_capacity(ds.len() * m);
        for rows in ds.indices().chunks(batch.max(1) * f) {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let fw = self.forward(&mut g, &p, rows)?;
            data.extend(concat_rows(g.value(fw.deep), g.value(fw.shallow)).into_data());
        }
        Array::new(vec![ds.len(), m], data)
    }
}

/// `[n, a]` and `[n, b]` → `[n, a + b]`.
pub(crate) fn concat_rows(a: &Array, b: &Array) -> Array {
    let (n, wa, wb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(n * (wa + wb));
    for r in 0..n {
        out.extend_from_slice(&a.data()[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b.data()[r * wb..(r + 1) * wb]);
    }
    Array::new(vec![n, wa + wb], out).expect("sized above")
}
