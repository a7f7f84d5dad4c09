//! Chunked bilinear head combining the deep and shallow stream outputs.
//!
//! Both `F_d` and `F_s` are cut into `k` contiguous chunks of length
//! `c = D_out / k`; chunk `j` contributes
//! `b_j + w_dj . F_dj + w_sj . F_sj + F_dj^T W_j F_sj` to the logit.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};

/// Contiguous equal-length slices of `f`.
pub fn chunk(f: &[f64], k: usize) -> Result<Vec<&[f64]>> {
    if k == 0 || f.len() % k != 0 {
        return Err(Error::Config(format!("{} values cannot be cut into {} chunks", f.len(), k)));
    }
    Ok(f.chunks(f.len() / k).collect())
}

/// One chunk's logit contribution. `w` is row-major `c × c`.
pub fn cp(fd: &[f64], fs: &[f64], b: f64, w_d: &[f64], w_s: &[f64], w: &[f64]) -> Result<f64> {
    let c = fd.len();
    if fs.len() != c || w_d.len() != c || w_s.len() != c || w.len() != c * c {
        return Err(Error::Shape(format!(
            "chunk lengths {} / {} with weights {} / {} / {}",
            c,
            fs.len(),
            w_d.len(),
            w_s.len(),
            w.len()
        )));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut bil = 0.0;
    for i in 0..c {
        bil += fd[i] * dot(&w[i * c..(i + 1) * c], fs);
    }
    Ok(b + dot(w_d, fd) + dot(w_s, fs) + bil)
}

#[derive(Clone, Debug)]
pub struct Predictor {
    k: usize,
    c: usize,
    b: ParamId,
    w_d: ParamId,
    w_s: ParamId,
    w: ParamId,
}

impl Predictor {
    pub fn new(store: &mut ParamStore, d_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 || d_out % k != 0 {
            return Err(Error::Config(format!("D_out {} not divisible by {} chunks", d_out, k)));
        }
        let c = d_out / k;
        Ok(Predictor {
            k,
            c,
            b: store.add("head.b", Array::zeros(&[k])),
            w_d: store.add("head.w_d", uniform(&[k, c], c, rng)),
            w_s: store.add("head.w_s", uniform(&[k, c], c, rng)),
            w: store.add("head.w", uniform(&[k, c, c], c * c, rng)),
        })
    }

    pub fn chunks(&self) -> usize {
        self.k
    }

    /// `F_d, F_s: [B, D_out]` → logits `[B]`.
    pub fn logit(&self, g: &mut Graph, p: &Bound, fd: Var, fs: Var) -> Result<Var> {
        let sh = g.shape(fd).to_vec();
        if sh.len() != 2 || sh[1] != self.k * self.c || g.shape(fs) != sh.as_slice() {
            return Err(Error::Shape(format!(
                "predictor expects two [B, {}] inputs, got {:?} and {:?}",
                self.k * self.c,
                sh,
                g.shape(fs)
            )));
        }
        let (bsz, k, c) = (sh[0], self.k, self.c);
        let fd3 = g.reshape(fd, vec![bsz, k, c])?;
        let fs3 = g.reshape(fs, vec![bsz, k, c])?;
        let ld = g.mul(fd3, p.var(self.w_d))?;
        let ld = g.sum(ld, 2)?;
        let ls = g.mul(fs3, p.var(self.w_s))?;
        let ls = g.sum(ls, 2)?;
        let fd4 = g.reshape(fd, vec![bsz, k, 1, c])?;
        let fw = g.matmul(fd4, p.var(self.w))?;
        let fw = g.reshape(fw, vec![bsz, k, c])?;
        let bil = g.mul(fw, fs3)?;
        let bil = g.sum(bil, 2)?;
        let t = g.add(ld, ls)?;
        let t = g.add(t, bil)?;
        let t = g.add(t, p.var(self.b))?;
        g.sum(t, 1)
    }

    /// Click probabilities `[B]`.
    pub fn predict(&self, g: &mut Graph, p: &Bound, fd: Var, fs: Var) -> Result<Var> {
        let z = self.logit(g, p, fd, fs)?;
        g.sigmoid(z)
    }

    /// Plain-float logit of one example, summing [`cp`] chunk by chunk.
    pub fn logit_reference(&self, store: &ParamStore, fd: &[f64], fs: &[f64]) -> Result<f64> {
        let (b, wd, ws, w) = (
            store.get(self.b).data(),
            store.get(self.w_d).data(),
            store.get(self.w_s).data(),
            store.get(self.w).data(),
        );
        let (cd, cs) = (chunk(fd, self.k)?, chunk(fs, self.k)?);
        let c = self.c;
        let mut z = 0.0;
        for j in 0..self.k {
            z += cp(
                cd[j],
                cs[j],
                b[j],
                &wd[j * c..(j + 1) * c],
                &ws[j * c..(j + 1) * c],
                &w[j * c * c..(j + 1) * c * c],
            )?;
        }
        Ok(z)
    }
}
