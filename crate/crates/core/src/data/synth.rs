//! Synthetic CTR data with a controllable spurious shortcut.
//!
//! Labels follow a fixed logistic rule over the causal fields only. Each
//! spurious field carries a bucketed copy of the causal click probability
//! with probability `rho`, and a uniformly random bucket otherwise, so the
//! shortcut is informative in proportion to `rho` while never adding
//! information beyond the causal fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EncodedDataset, Vocab, DEFAULT_LABEL_COLUMN};
use crate::error::{Error, Result};

/// Distinct tokens per causal field.
pub const CAUSAL_CARDINALITY: usize = 16;
/// Probability buckets carried by each spurious field.
pub const SPURIOUS_CARDINALITY: usize = 8;

const MAIN_EFFECT: f64 = 2.0;
const PAIR_EFFECT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_causal: usize,
    pub n_spurious: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 50_000,
            n_test: 10_000,
            n_causal: 3,
            n_spurious: 2,
            rho_train: 0.9,
            rho_test: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 || self.n_causal == 0 || self.n_spurious == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        for rho in [self.rho_train, self.rho_test] {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!("rho {} outside [0, 1]", rho)));
            }
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        self.n_causal + self.n_spurious
    }
}

struct Rule {
    main: Vec<Vec<f64>>,
    pair: Vec<Vec<f64>>,
    bucket_perm: Vec<Vec<u32>>,
}

impl Rule {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Rule {
        let scale = MAIN_EFFECT / (cfg.n_causal as f64).sqrt();
        let mut normal = |s: f64| -> f64 { let z: f64 = StandardNormal.sample(rng); s * z };
        let main = (0..cfg.n_causal)
            .map(|_| (0..CAUSAL_CARDINALITY).map(|_| normal(scale)).collect())
            .collect();
        let pair = (0..CAUSAL_CARDINALITY)
            .map(|_| (0..CAUSAL_CARDINALITY).map(|_| normal(PAIR_EFFECT)).collect())
            .collect();
        let bucket_perm = (0..cfg.n_spurious)
            .map(|_| {
                let mut p: Vec<u32> = (0..SPURIOUS_CARDINALITY as u32).collect();
                rand::seq::SliceRandom::shuffle(p.as_mut_slice(), rng);
                p
            })
            .collect();
        Rule {
            main,
            pair,
            bucket_perm,
        }
    }

    fn logit(&self, causal: &[usize]) -> f64 {
        let mut z: f64 = causal.iter().zip(&self.main).map(|(&v, t)| t[v]).sum();
        if causal.len() >= 2 {
            z += self.pair[causal[0]][causal[1]];
        }
        z
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn generate(cfg: &SynthConfig, rule: &Rule, n: usize, rho: f64, rng: &mut ChaCha8Rng) -> EncodedDataset {
    let mut ds = EncodedDataset::empty(cfg.num_fields());
    let mut causal = vec![0usize; cfg.n_causal];
    let mut row = vec![0u32; cfg.num_fields()];
    for _ in 0..n {
        for c in causal.iter_mut() {
            *c = rng.random_range(0..CAUSAL_CARDINALITY);
        }
        let p = sigmoid(rule.logit(&causal));
        let bucket = ((p * SPURIOUS_CARDINALITY as f64) as usize).min(SPURIOUS_CARDINALITY - 1);
        let label = u8::from(rng.random::<f64>() < p);
        for (j, &c) in causal.iter().enumerate() {
            row[j] = c as u32 + 1;
        }
        for (k, perm) in rule.bucket_perm.iter().enumerate() {
            let tok = if rng.random::<f64>() < rho {
                perm[bucket]
            } else {
                rng.random_range(0..SPURIOUS_CARDINALITY as u32)
            };
            row[cfg.n_causal + k] = tok + 1;
        }
        ds.push(&row, label);
    }
    ds
}

/// Generates `(train, test)` with indices already in the layout of
/// [`synthetic_vocab`].
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(EncodedDataset, EncodedDataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rule = Rule::draw(cfg, &mut rng);
    let train = generate(cfg, &rule, cfg.n_train, cfg.rho_train, &mut rng);
    let test = generate(cfg, &rule, cfg.n_test, cfg.rho_test, &mut rng);
    Ok((train, test))
}

/// Vocabulary matching [`gen_synthetic`]'s indices: causal fields `c<j>` with
/// tokens `c<j>_<v>`, spurious fields `s<k>` with tokens `s<k>_<b>`.
pub fn synthetic_vocab(cfg: &SynthConfig) -> Result<Vocab> {
    cfg.validate()?;
    let mut names = Vec::new();
    let mut tokens = Vec::new();
    for j in 0..cfg.n_causal {
        names.push(format!("c{}", j));
        tokens.push((0..CAUSAL_CARDINALITY).map(|v| format!("c{}_{}", j, v)).collect());
    }
    for k in 0..cfg.n_spurious {
        names.push(format!("s{}", k));
        tokens.push((0..SPURIOUS_CARDINALITY).map(|b| format!("s{}_{}", k, b)).collect());
    }
    Vocab::from_tokens(names, DEFAULT_LABEL_COLUMN.to_owned(), tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn cfg(rho_train: f64, rho_test: f64, n: usize) -> SynthConfig {
        SynthConfig {
            n_train: n,
            n_test: n,
            n_causal: 3,
            n_spurious: 2,
            rho_train,
            rho_test,
            seed: 11,
        }
    }

    #[test]
    fn reproducible() {
        let c = cfg(0.9, 0.1, 500);
        assert_eq!(gen_synthetic(&c).unwrap(), gen_synthetic(&c).unwrap());
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(gen_synthetic(&c).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn indices_fit_vocab() {
        let c = cfg(0.5, 0.5, 300);
        let (tr, te) = gen_synthetic(&c).unwrap();
        let v = synthetic_vocab(&c).unwrap();
        tr.validate(v.schema()).unwrap();
        te.validate(v.schema()).unwrap();
        assert_eq!(v.schema().num_fields(), 5);
    }

    #[test]
    fn rho_one_makes_spurious_a_function_of_causal() {
        let c = cfg(1.0, 1.0, 5000);
        let (tr, _) = gen_synthetic(&c).unwrap();
        let mut seen = std::collections::HashMap::new();
        for i in 0..tr.len() {
            let r = tr.row(i);
            let key = r[..3].to_vec();
            let val = r[3..].to_vec();
            assert_eq!(*seen.entry(key).or_insert_with(|| val.clone()), val);
        }
    }

    #[test]
    fn invalid_config() {
        assert!(gen_synthetic(&cfg(1.5, 0.0, 10)).is_err());
        let mut c = cfg(0.5, 0.5, 10);
        c.n_spurious = 0;
        assert!(gen_synthetic(&c).is_err());
    }

    fn chi_square_p(ds: &EncodedDataset, field: usize) -> f64 {
        let mut table = vec![[0f64; 2]; CAUSAL_CARDINALITY.max(SPURIOUS_CARDINALITY) + 1];
        for i in 0..ds.len() {
            table[ds.row(i)[field] as usize][ds.labels()[i] as usize] += 1.0;
        }
        let n = ds.len() as f64;
        let col = [0, 1].map(|l| table.iter().map(|r| r[l]).sum::<f64>());
        let mut stat = 0.0;
        let mut rows = 0;
        for r in &table {
            let rs = r[0] + r[1];
            if rs == 0.0 {
                continue;
            }
            rows += 1;
            for l in 0..2 {
                let e = rs * col[l] / n;
                stat += (r[l] - e).powi(2) / e;
            }
        }
        let dof = (rows - 1) as f64;
        1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
    }

    #[test]
    fn rho_zero_spurious_is_independent_of_label() {
        let (tr, _) = gen_synthetic(&cfg(0.0, 0.0, 10_000)).unwrap();
        for k in 3..5 {
            assert!(chi_square_p(&tr, k) > 0.01, "field {}", k);
        }
        // and the causal fields are not
        assert!(chi_square_p(&tr, 0) < 1e-6);
    }

    fn corr(ds: &EncodedDataset, field: usize, perm: &[u32]) -> f64 {
        // decode token back to its bucket rank so the correlation is ordinal
        let inv: Vec<f64> = {
            let mut inv = vec![0.0; perm.len()];
            for (b, &t) in perm.iter().enumerate() {
                inv[t as usize] = b as f64;
            }
            inv
        };
        let xs: Vec<f64> = (0..ds.len()).map(|i| inv[ds.row(i)[field] as usize - 1]).collect();
        let ys: Vec<f64> = ds.labels().iter().map(|&l| l as f64).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn shift_weakens_spurious_correlation_at_test_time() {
        let c = cfg(0.9, 0.1, 20_000);
        let (tr, te) = gen_synthetic(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let rule = Rule::draw(&c, &mut rng);
        for k in 0..2 {
            let a = corr(&tr, 3 + k, &rule.bucket_perm[k]);
            let b = corr(&te, 3 + k, &rule.bucket_perm[k]);
            assert!(a > b + 0.2, "train {} test {}", a, b);
        }
    }
}
