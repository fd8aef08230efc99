use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, log_sum_exp};
use crate::rng::LabRng;

/// Autoregressive token policy with a one-hidden-layer encoder.
///
/// ```text
/// pre_t    = P x + b + sum_{s<t} E_s[y_s]
/// logits_t = B_t tanh(pre_t) + c_t
/// latent   = tanh(P x + b + sum_{s<L} E_s[y_s])
/// ```
///
/// Every routine takes soft token weights `w_t` (one vector of length `V`
/// per position). One-hot weights recover the discrete policy; arbitrary
/// weights give the continuous relaxation used by the bound diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPolicy {
    dim: usize,
    vocab: usize,
    length: usize,
    params: Vec<f64>,
}

struct Layout {
    p: usize,
    b: usize,
    e: usize,
    out: usize,
    c: usize,
    end: usize,
}

struct Forward {
    hidden: Vec<Vec<f64>>,
    log_probs: Vec<Vec<f64>>,
}

impl TokenPolicy {
    pub fn param_count_for(dim: usize, vocab: usize, length: usize) -> usize {
        dim * dim + dim + 2 * length * vocab * dim + length * vocab
    }

    pub fn from_params(dim: usize, vocab: usize, length: usize, params: Vec<f64>) -> Result<Self> {
        if dim == 0 || vocab < 2 || length == 0 {
            return Err(LabError::Shape("token policy needs dim >= 1, vocab >= 2, length >= 1".into()));
        }
        if params.len() != Self::param_count_for(dim, vocab, length) {
            return Err(LabError::Shape(format!(
                "token policy expects {} parameters, got {}",
                Self::param_count_for(dim, vocab, length),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Numerical("token parameters must be finite".into()));
        }
        Ok(Self {
            dim,
            vocab,
            length,
            params,
        })
    }

    pub fn init(dim: usize, vocab: usize, length: usize, init_sd: f64, rng: &mut LabRng) -> Self {
        let n = Self::param_count_for(dim, vocab, length);
        let params = (0..n)
            .map(|_| init_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            dim,
            vocab,
            length,
            params,
        }
    }

    /// All-zero parameters: uniform logits at every position.
    pub fn uniform(dim: usize, vocab: usize, length: usize) -> Self {
        Self {
            dim,
            vocab,
            length,
            params: vec![0.0; Self::param_count_for(dim, vocab, length)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        Self::from_params(self.dim, self.vocab, self.length, params.to_vec())
    }

    fn layout(&self) -> Layout {
        let (d, v, l) = (self.dim, self.vocab, self.length);
        let p = 0;
        let b = p + d * d;
        let e = b + d;
        let out = e + l * v * d;
        let c = out + l * v * d;
        Layout {
            p,
            b,
            e,
            out,
            c,
            end: c + l * v,
        }
    }

    pub fn one_hot(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.len() != self.length || tokens.iter().any(|&t| t as usize >= self.vocab) {
            return Err(LabError::Shape(format!(
                "tokens {tokens:?} do not fit vocab {} x length {}",
                self.vocab, self.length
            )));
        }
        let mut w = vec![0.0; self.length * self.vocab];
        for (pos, &t) in tokens.iter().enumerate() {
            w[pos * self.vocab + t as usize] = 1.0;
        }
        Ok(w)
    }

    fn check_inputs(&self, x: &[f64], weights: &[f64]) -> Result<()> {
        if x.len() != self.dim || weights.len() != self.length * self.vocab {
            return Err(LabError::Shape(format!(
                "token policy expects {} prompt features and {} token weights, got {} and {}",
                self.dim,
                self.length * self.vocab,
                x.len(),
                weights.len()
            )));
        }
        Ok(())
    }

    fn prompt_pre(&self, x: &[f64]) -> Vec<f64> {
        let lay = self.layout();
        let d = self.dim;
        let mut pre = linalg::mat_vec(&self.params[lay.p..lay.b], d, d, x);
        linalg::add_scaled(&mut pre, 1.0, &self.params[lay.b..lay.e]);
        pre
    }

    fn add_embedding(&self, pre: &mut [f64], pos: usize, w: &[f64]) {
        let lay = self.layout();
        let d = self.dim;
        for (tok, &wt) in w.iter().enumerate() {
            if wt != 0.0 {
                let off = lay.e + (pos * self.vocab + tok) * d;
                linalg::add_scaled(pre, wt, &self.params[off..off + d]);
            }
        }
    }

    fn logits(&self, pos: usize, hidden: &[f64]) -> Vec<f64> {
        let lay = self.layout();
        let (d, v) = (self.dim, self.vocab);
        let off = lay.out + pos * v * d;
        let mut lg = linalg::mat_vec(&self.params[off..off + v * d], v, d, hidden);
        let coff = lay.c + pos * v;
        linalg::add_scaled(&mut lg, 1.0, &self.params[coff..coff + v]);
        lg
    }

    fn forward(&self, x: &[f64], weights: &[f64]) -> Forward {
        let v = self.vocab;
        let mut pre = self.prompt_pre(x);
        let mut hidden = Vec::with_capacity(self.length);
        let mut log_probs = Vec::with_capacity(self.length);
        for pos in 0..self.length {
            let h: Vec<f64> = pre.iter().map(|z| z.tanh()).collect();
            let lg = self.logits(pos, &h);
            let lse = log_sum_exp(&lg);
            log_probs.push(lg.iter().map(|l| l - lse).collect());
            hidden.push(h);
            self.add_embedding(&mut pre, pos, &weights[pos * v..(pos + 1) * v]);
        }
        Forward { hidden, log_probs }
    }

    /// `sum_t sum_v w_{t,v} log softmax(logits_t)_v`.
    pub fn soft_log_prob(&self, x: &[f64], weights: &[f64]) -> Result<f64> {
        self.check_inputs(x, weights)?;
        let f = self.forward(x, weights);
        let v = self.vocab;
        Ok((0..self.length)
            .map(|pos| linalg::dot(&weights[pos * v..(pos + 1) * v], &f.log_probs[pos]))
            .sum())
    }

    pub fn log_prob(&self, x: &[f64], tokens: &[u32]) -> Result<f64> {
        self.soft_log_prob(x, &self.one_hot(tokens)?)
    }

    /// Analytic gradient of `soft_log_prob` with respect to every parameter.
    pub fn soft_log_prob_grad(&self, x: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x, weights)?;
        let lay = self.layout();
        let (d, v, l) = (self.dim, self.vocab, self.length);
        let f = self.forward(x, weights);
        let mut g = vec![0.0; lay.end];
        // Gradient flowing into pre_t, accumulated from every later position.
        let mut dpre_later = vec![0.0; d];
        for pos in (0..l).rev() {
            let w = &weights[pos * v..(pos + 1) * v];
            let mass: f64 = w.iter().sum();
            let dlogits: Vec<f64> = f.log_probs[pos]
                .iter()
                .zip(w)
                .map(|(lp, wt)| wt - mass * lp.exp())
                .collect();
            let h = &f.hidden[pos];
            let out_off = lay.out + pos * v * d;
            let mut dh = vec![0.0; d];
            for tok in 0..v {
                let row = out_off + tok * d;
                for k in 0..d {
                    g[row + k] += dlogits[tok] * h[k];
                    dh[k] += dlogits[tok] * self.params[row + k];
                }
                g[lay.c + pos * v + tok] += dlogits[tok];
            }
            // pre_t receives this position's local gradient; earlier token
            // embeddings are reached through dpre_later.
            let dpre: Vec<f64> = (0..d).map(|k| dh[k] * (1.0 - h[k] * h[k])).collect();
            // Embedding of position `pos` feeds every pre_u with u > pos.
            for tok in 0..v {
                if w[tok] != 0.0 {
                    let off = lay.e + (pos * v + tok) * d;
                    for k in 0..d {
                        g[off + k] += w[tok] * dpre_later[k];
                    }
                }
            }
            linalg::add_scaled(&mut dpre_later, 1.0, &dpre);
        }
        // dpre_later now holds the sum over all positions of dL/dpre_t.
        for r in 0..d {
            for c in 0..d {
                g[lay.p + r * d + c] += dpre_later[r] * x[c];
            }
            g[lay.b + r] += dpre_later[r];
        }
        Ok(g)
    }

    pub fn log_prob_grad(&self, x: &[f64], tokens: &[u32]) -> Result<Vec<f64>> {
        self.soft_log_prob_grad(x, &self.one_hot(tokens)?)
    }

    /// Final encoder hidden state after all response tokens.
    pub fn latent(&self, x: &[f64], tokens: &[u32]) -> Result<Vec<f64>> {
        let w = self.one_hot(tokens)?;
        self.check_inputs(x, &w)?;
        let v = self.vocab;
        let mut pre = self.prompt_pre(x);
        for pos in 0..self.length {
            self.add_embedding(&mut pre, pos, &w[pos * v..(pos + 1) * v]);
        }
        Ok(pre.into_iter().map(|z| z.tanh()).collect())
    }

    pub fn sample(&self, x: &[f64], rng: &mut LabRng) -> Vec<u32> {
        let v = self.vocab;
        let mut pre = self.prompt_pre(x);
        let mut tokens = Vec::with_capacity(self.length);
        for pos in 0..self.length {
            let h: Vec<f64> = pre.iter().map(|z| z.tanh()).collect();
            let lg = self.logits(pos, &h);
            let lse = log_sum_exp(&lg);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = v - 1;
            for (i, l) in lg.iter().enumerate() {
                acc += (l - lse).exp();
                if u < acc {
                    tok = i;
                    break;
                }
            }
            tokens.push(tok as u32);
            let mut w = vec![0.0; v];
            w[tok] = 1.0;
            self.add_embedding(&mut pre, pos, &w);
        }
        tokens
    }

    /// Geometric-mean token probability `exp(log pi(y|x) / L)`, in `(0, 1]`.
    pub fn normalized_likelihood(&self, x: &[f64], tokens: &[u32]) -> Result<f64> {
        Ok((self.log_prob(x, tokens)? / self.length as f64).exp())
    }
}
