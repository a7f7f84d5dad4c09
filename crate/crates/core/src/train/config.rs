use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sce::SceConfig;
use crate::streams::{StreamKind, StreamSpec};

/// Dataset presets that fix the predictor's chunk count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Criteo,
    Avazu,
    Movielens,
    Frappe,
}

impl Preset {
    pub fn chunks(self) -> usize {
        match self {
            Preset::Criteo => 50,
            Preset::Avazu | Preset::Movielens => 10,
            Preset::Frappe => 1,
        }
    }
}

/// Flat training configuration; every field has a default so a config file
/// only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub embedding_dim: usize,
    pub stream_deep: StreamKind,
    pub stream_shallow: StreamKind,
    pub depth_deep: usize,
    pub depth_shallow: usize,
    pub mlp_deep_sizes: Vec<usize>,
    pub mlp_shallow_sizes: Vec<usize>,
    pub sa_heads: usize,
    /// Stream output width. `None` picks the smallest multiple of both the
    /// field count and the chunk count that is at least 400.
    pub d_out: Option<usize>,
    /// Predictor chunk count. `None` uses the preset's value, else 1.
    pub chunks: Option<usize>,
    pub preset: Option<Preset>,
    pub sce_enabled: bool,
    pub sce_balancing_epochs: usize,
    pub sce_steps: usize,
    pub sce_lr: f64,
    pub sce_max_pairs: usize,
    pub sce_gamma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

pub const DEFAULT_D_OUT: usize = 400;

impl Default for TrainConfig {
    fn default() -> Self {
        let sce = SceConfig::default();
        TrainConfig {
            batch_size: 4096,
            learning_rate: 0.001,
            embedding_dim: 10,
            stream_deep: StreamKind::Msr,
            stream_shallow: StreamKind::Msr,
            depth_deep: 3,
            depth_shallow: 1,
            mlp_deep_sizes: vec![400, 400, 400],
            mlp_shallow_sizes: vec![800],
            sa_heads: 2,
            d_out: None,
            chunks: None,
            preset: None,
            sce_enabled: true,
            sce_balancing_epochs: sce.balancing_epochs,
            sce_steps: sce.steps,
            sce_lr: sce.lr,
            sce_max_pairs: sce.max_pairs,
            sce_gamma: sce.gamma,
            max_epochs: 50,
            patience: 2,
            seed: 0,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {}", e)))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.unwrap_or_else(|| self.preset.map_or(1, Preset::chunks))
    }

    /// Resolved stream output width for `fields` fields.
    pub fn output_width(&self, fields: usize) -> usize {
        match self.d_out {
            Some(d) => d,
            None => {
                let k = self.chunk_count().max(1);
                let f = fields.max(1);
                let l = f / gcd(f, k) * k;
                DEFAULT_D_OUT.div_ceil(l) * l
            }
        }
    }

    pub fn sce(&self) -> SceConfig {
        SceConfig {
            balancing_epochs: self.sce_balancing_epochs,
            steps: self.sce_steps,
            lr: self.sce_lr,
            max_pairs: self.sce_max_pairs,
            gamma: self.sce_gamma,
            seed: self.seed,
        }
    }

    pub fn deep_spec(&self) -> StreamSpec {
        self.spec(self.stream_deep, self.depth_deep, &self.mlp_deep_sizes)
    }

    pub fn shallow_spec(&self) -> StreamSpec {
        self.spec(self.stream_shallow, self.depth_shallow, &self.mlp_shallow_sizes)
    }

    fn spec(&self, kind: StreamKind, depth: usize, sizes: &[usize]) -> StreamSpec {
        match kind {
            StreamKind::Msr => StreamSpec::Msr { depth },
            StreamKind::Mlp => StreamSpec::Mlp { hidden: sizes.to_vec() },
            StreamKind::Sa => StreamSpec::Sa {
                depth,
                heads: self.sa_heads,
            },
        }
    }

    /// Checks every invariant that does not depend on the data, plus the
    /// divisibility constraints for `fields` fields.
    pub fn validate(&self, fields: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.embedding_dim == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, embedding_dim, max_epochs and patience must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.depth_deep == 0 || self.depth_shallow == 0 {
            return bad("stream depths must be at least 1".into());
        }
        if fields == 0 {
            return bad("dataset has no feature fields".into());
        }
        let k = self.chunk_count();
        let d = self.output_width(fields);
        if k == 0 || d == 0 || d % k != 0 {
            return bad(format!("D_out {} must be a positive multiple of the chunk count {}", d, k));
        }
        let uses_field_projection = [self.stream_deep, self.stream_shallow]
            .iter()
            .any(|s| *s != StreamKind::Mlp);
        if uses_field_projection && d % fields != 0 {
            return bad(format!("D_out {} must be divisible by the {} fields", d, fields));
        }
        if [self.stream_deep, self.stream_shallow].contains(&StreamKind::Sa)
            && (self.sa_heads == 0 || self.embedding_dim % self.sa_heads != 0)
        {
            return bad(format!(
                "embedding_dim {} must be divisible by sa_heads {}",
                self.embedding_dim, self.sa_heads
            ));
        }
        for (kind, sizes) in [
            (self.stream_deep, &self.mlp_deep_sizes),
            (self.stream_shallow, &self.mlp_shallow_sizes),
        ] {
            if kind == StreamKind::Mlp && (sizes.is_empty() || sizes.contains(&0)) {
                return bad("MLP sizes must be non-empty and positive".into());
            }
        }
        if self.sce_enabled {
            self.sce().validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_files() {
        let c = TrainConfig::from_json(r#"{"batch_size": 64, "preset": "frappe"}"#).unwrap();
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.chunk_count(), 1);
        assert_eq!((c.depth_deep, c.depth_shallow), (3, 1));
        assert_eq!(c.learning_rate, 0.001);
        assert!(matches!(TrainConfig::from_json(r#"{"batchsize": 1}"#), Err(Error::Config(_))));
        let back = TrainConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn output_width_resolution() {
        let mut c = TrainConfig::default();
        assert_eq!(c.output_width(10), 400);
        assert_eq!(c.output_width(3), 402);
        assert_eq!(c.output_width(23), 414);
        c.preset = Some(Preset::Movielens);
        assert_eq!(c.output_width(3), 420);
        c.preset = Some(Preset::Criteo);
        assert_eq!(c.output_width(39), 1950);
        c.d_out = Some(400);
        assert!(c.validate(3).is_err());
        assert!(c.validate(10).is_ok());
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate(5).is_ok());
        c.stream_deep = StreamKind::Sa;
        c.sa_heads = 3;
        assert!(c.validate(5).is_err());
        c.sa_heads = 2;
        c.chunks = Some(7);
        assert!(c.validate(5).is_ok());
        c.d_out = Some(400);
        assert!(c.validate(5).is_err());
        let c = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate(5).is_err());
    }
}
