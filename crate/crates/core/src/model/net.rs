//! A compact conditional language model with hand-written backprop.
//!
//! ```text
//! m      = mean(E[prompt])                    prompt summary
//! h_0    = tanh(W_p m + b_p)
//! h_i    = tanh(W_x E[y_{i-1}] + W_h h_{i-1} + b_h)      y_0 = BOS
//! logits = W_o h_i + b_o + α · c              c[v] = share of v in the prompt
//! ```
//!
//! `α · c` is a learned copy bias toward prompt tokens. All parameters live
//! in one flat `f64` buffer so optimizers and finite-difference checks can
//! treat them uniformly.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS, EOS};
use crate::datasetgen::PromptExample;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelConfig {
    pub fn n_params(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    v: usize,
    d: usize,
    h: usize,
    emb: usize,
    w_p: usize,
    b_p: usize,
    w_x: usize,
    w_h: usize,
    b_h: usize,
    w_o: usize,
    b_o: usize,
    copy: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (v, d, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
        let emb = 0;
        let w_p = emb + v * d;
        let b_p = w_p + h * d;
        let w_x = b_p + h;
        let w_h = w_x + h * d;
        let b_h = w_h + h * h;
        let w_o = b_h + h;
        let b_o = w_o + v * h;
        let copy = b_o + v;
        Layout {
            v,
            d,
            h,
            emb,
            w_p,
            b_p,
            w_x,
            w_h,
            b_h,
            w_o,
            b_o,
            copy,
            total: copy + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout_total: usize,
    data: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters: a uniform next-token distribution everywhere.
    pub fn zeros(config: ModelConfig) -> Self {
        let n = config.n_params();
        ModelParams {
            config,
            layout_total: n,
            data: vec![0.0; n],
        }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let l = p.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, scale: f64, data: &mut [f64]| {
            for x in &mut data[range] {
                *x = rng.gen_range(-scale..scale);
            }
        };
        let sd = 1.0 / (l.d as f64).sqrt();
        let sh = 1.0 / (l.h as f64).sqrt();
        fill(l.emb..l.w_p, 0.5, &mut p.data);
        fill(l.w_p..l.b_p, sd, &mut p.data);
        fill(l.w_x..l.w_h, sd, &mut p.data);
        fill(l.w_h..l.b_h, sh, &mut p.data);
        fill(l.w_o..l.b_o, sh, &mut p.data);
        p
    }

    pub fn from_vec(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        let n = config.n_params();
        if data.len() != n {
            return Err(Error::Checkpoint(format!(
                "expected {n} parameters, found {}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(ModelParams {
            config,
            layout_total: n,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.layout_total
    }

    pub fn is_empty(&self) -> bool {
        self.layout_total == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Mutable view of the output bias; handy for building analytic fixtures.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.data[l.b_o..l.copy]
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let size = self.config.vocab_size;
        match ids.iter().find(|&&i| i >= size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }
}

/// Decoder state after reading a prompt.
#[derive(Debug, Clone)]
pub struct PromptState {
    summary: Vec<f64>,
    copy: Vec<(usize, f64)>,
    pub(crate) h0: Vec<f64>,
}

fn tanh_inplace(xs: &mut [f64]) {
    for x in xs {
        *x = x.tanh();
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

impl ModelParams {
    pub fn read_prompt(&self, prompt: &[usize]) -> PromptState {
        let l = self.layout();
        let p = &self.data;
        let mut summary = vec![0.0; l.d];
        if !prompt.is_empty() {
            for &t in prompt {
                let row = &p[l.emb + t * l.d..l.emb + (t + 1) * l.d];
                for (s, e) in summary.iter_mut().zip(row) {
                    *s += e;
                }
            }
            let inv = 1.0 / prompt.len() as f64;
            summary.iter_mut().for_each(|s| *s *= inv);
        }
        let mut h0 = p[l.b_p..l.b_p + l.h].to_vec();
        for (i, hi) in h0.iter_mut().enumerate() {
            let row = &p[l.w_p + i * l.d..l.w_p + (i + 1) * l.d];
            *hi += row.iter().zip(&summary).map(|(w, m)| w * m).sum::<f64>();
        }
        tanh_inplace(&mut h0);

        let mut ids = prompt.to_vec();
        ids.sort_unstable();
        let mut copy: Vec<(usize, f64)> = Vec::new();
        let w = if prompt.is_empty() {
            0.0
        } else {
            1.0 / prompt.len() as f64
        };
        for id in ids {
            match copy.last_mut() {
                Some((last, c)) if *last == id => *c += w,
                _ => copy.push((id, w)),
            }
        }
        PromptState { summary, copy, h0 }
    }

    /// One decoder step: new hidden state and next-token log-probabilities.
    pub fn step(&self, state: &PromptState, h_prev: &[f64], prev: usize) -> (Vec<f64>, Vec<f64>) {
        let l = self.layout();
        let p = &self.data;
        let x = &p[l.emb + prev * l.d..l.emb + (prev + 1) * l.d];
        let mut h = p[l.b_h..l.b_h + l.h].to_vec();
        for (i, hi) in h.iter_mut().enumerate() {
            let wx = &p[l.w_x + i * l.d..l.w_x + (i + 1) * l.d];
            let wh = &p[l.w_h + i * l.h..l.w_h + (i + 1) * l.h];
            *hi += wx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                + wh.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
        }
        tanh_inplace(&mut h);
        let mut logits = p[l.b_o..l.b_o + l.v].to_vec();
        for (v, lv) in logits.iter_mut().enumerate() {
            let row = &p[l.w_o + v * l.h..l.w_o + (v + 1) * l.h];
            *lv += row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        }
        let alpha = p[l.copy];
        for &(v, c) in &state.copy {
            logits[v] += alpha * c;
        }
        let lp = log_softmax(&logits);
        (h, lp)
    }
}

/// Teacher-forced activations of one `(prompt, response)` pair.
struct Trace {
    state: PromptState,
    /// h_0 ..= h_L
    hs: Vec<Vec<f64>>,
    /// Full log-distributions for steps 1..=L.
    logdist: Vec<Vec<f64>>,
}

fn forward(params: &ModelParams, prompt: &[usize], response: &[usize]) -> Trace {
    let state = params.read_prompt(prompt);
    let mut hs = Vec::with_capacity(response.len() + 1);
    hs.push(state.h0.clone());
    let mut logdist = Vec::with_capacity(response.len());
    let mut prev = BOS;
    for &y in response {
        let (h, lp) = params.step(&state, hs.last().unwrap(), prev);
        hs.push(h);
        logdist.push(lp);
        prev = y;
    }
    Trace { state, hs, logdist }
}

/// Accumulates `Σ_i dlogp[i] · ∂ log π(y_i | ·) / ∂θ` into `grad`.
fn backward(
    params: &ModelParams,
    prompt: &[usize],
    response: &[usize],
    trace: &Trace,
    dlogp: &[f64],
    grad: &mut [f64],
) {
    let l = params.layout();
    let p = &params.data;
    let mut dh_next = vec![0.0; l.h];
    let mut dlogits = vec![0.0; l.v];
    let mut dh = vec![0.0; l.h];
    let mut da = vec![0.0; l.h];

    for i in (1..=response.len()).rev() {
        let h_i = &trace.hs[i];
        let h_prev = &trace.hs[i - 1];
        let prev_tok = if i == 1 { BOS } else { response[i - 2] };
        let g = dlogp[i - 1];

        dh.copy_from_slice(&dh_next);
        if g != 0.0 {
            let logdist = &trace.logdist[i - 1];
            for (v, dl) in dlogits.iter_mut().enumerate() {
                *dl = -g * logdist[v].exp();
            }
            dlogits[response[i - 1]] += g;

            for v in 0..l.v {
                let dl = dlogits[v];
                if dl == 0.0 {
                    continue;
                }
                grad[l.b_o + v] += dl;
                let wrow = l.w_o + v * l.h;
                for j in 0..l.h {
                    grad[wrow + j] += dl * h_i[j];
                    dh[j] += p[wrow + j] * dl;
                }
            }
            for &(v, c) in &trace.state.copy {
                grad[l.copy] += dlogits[v] * c;
            }
        }

        for j in 0..l.h {
            da[j] = dh[j] * (1.0 - h_i[j] * h_i[j]);
        }
        let x_off = l.emb + prev_tok * l.d;
        dh_next.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..l.h {
            let a = da[j];
            if a == 0.0 {
                continue;
            }
            grad[l.b_h + j] += a;
            let wx = l.w_x + j * l.d;
            for k in 0..l.d {
                grad[wx + k] += a * p[x_off + k];
                grad[x_off + k] += p[wx + k] * a;
            }
            let wh = l.w_h + j * l.h;
            for k in 0..l.h {
                grad[wh + k] += a * h_prev[k];
                dh_next[k] += p[wh + k] * a;
            }
        }
    }

    let h0 = &trace.hs[0];
    let summary = &trace.state.summary;
    let mut dm = vec![0.0; l.d];
    for j in 0..l.h {
        let a = dh_next[j] * (1.0 - h0[j] * h0[j]);
        if a == 0.0 {
            continue;
        }
        grad[l.b_p + j] += a;
        let wp = l.w_p + j * l.d;
        for k in 0..l.d {
            grad[wp + k] += a * summary[k];
            dm[k] += p[wp + k] * a;
        }
    }
    if !prompt.is_empty() {
        let inv = 1.0 / prompt.len() as f64;
        for &t in prompt {
            let off = l.emb + t * l.d;
            for k in 0..l.d {
                grad[off + k] += dm[k] * inv;
            }
        }
    }
}

/// Per-position `log π(y_i | y_<i, x)` under teacher forcing.
pub fn log_prob(params: &ModelParams, prompt: &[usize], response: &[usize]) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::InvalidExample("empty response".into()));
    }
    params.check_ids(prompt)?;
    params.check_ids(response)?;
    let t = forward(params, prompt, response);
    Ok(response
        .iter()
        .zip(&t.logdist)
        .map(|(&y, lp)| lp[y])
        .collect())
}

/// Full next-token log-distributions at each response position.
pub fn log_distributions(
    params: &ModelParams,
    prompt: &[usize],
    response: &[usize],
) -> Result<Vec<Vec<f64>>> {
    params.check_ids(prompt)?;
    params.check_ids(response)?;
    Ok(forward(params, prompt, response).logdist)
}

/// Log-probabilities of `response` and the gradient of `Σ_i w_i log π(y_i)`
/// where `weights_of` maps the log-probabilities to the weights `w`.
pub fn logp_and_grad(
    params: &ModelParams,
    prompt: &[usize],
    response: &[usize],
    weights_of: impl FnOnce(&[f64]) -> Vec<f64>,
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::InvalidExample("empty response".into()));
    }
    params.check_ids(prompt)?;
    params.check_ids(response)?;
    let t = forward(params, prompt, response);
    let logp: Vec<f64> = response
        .iter()
        .zip(&t.logdist)
        .map(|(&y, lp)| lp[y])
        .collect();
    let w = weights_of(&logp);
    backward(params, prompt, response, &t, &w, grad);
    Ok(logp)
}

/// Prompt and EOS-terminated response ids with a loss mask over the
/// concatenated sequence (0 on prompt positions, 1 on response positions).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub mask: Vec<u8>,
}

impl EncodedExample {
    pub fn new(prompt: Vec<usize>, mut response: Vec<usize>) -> Self {
        if response.last() != Some(&EOS) {
            response.push(EOS);
        }
        let mut mask = vec![0u8; prompt.len()];
        mask.extend(std::iter::repeat_n(1u8, response.len()));
        EncodedExample {
            prompt,
            response,
            mask,
        }
    }

    fn response_mask(&self) -> Result<&[u8]> {
        if self.mask.len() != self.prompt.len() + self.response.len() {
            return Err(Error::InvalidExample(format!(
                "mask length {} != sequence length {}",
                self.mask.len(),
                self.prompt.len() + self.response.len()
            )));
        }
        let m = &self.mask[self.prompt.len()..];
        if m.iter().all(|&x| x == 0) {
            return Err(Error::InvalidExample("mask selects no position".into()));
        }
        Ok(m)
    }
}

/// Encodes a prompt example; prompts are truncated to the task's cap.
pub fn encode_example(vocab: &Vocabulary, ex: &PromptExample) -> EncodedExample {
    let mut prompt = vocab.encode(&ex.prompt);
    prompt.truncate(ex.task.prompt_cap());
    EncodedExample::new(prompt, vocab.encode(&ex.response))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftReduction {
    /// Mean over examples of the summed response NLL.
    #[default]
    SumTokens,
    /// Mean over examples of the per-token mean NLL.
    MeanTokens,
}

fn example_weights(mask: &[u8], reduction: SftReduction) -> Vec<f64> {
    let n_in = mask.iter().filter(|&&m| m != 0).count() as f64;
    let scale = match reduction {
        SftReduction::SumTokens => 1.0,
        SftReduction::MeanTokens => 1.0 / n_in,
    };
    mask.iter()
        .map(|&m| if m != 0 { scale } else { 0.0 })
        .collect()
}

/// Masked negative log-likelihood averaged over the batch.
pub fn sft_loss(
    params: &ModelParams,
    batch: &[EncodedExample],
    reduction: SftReduction,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per = batch
        .par_iter()
        .map(|ex| {
            let w = example_weights(ex.response_mask()?, reduction);
            let lp = log_prob(params, &ex.prompt, &ex.response)?;
            Ok(-lp.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per.iter().sum::<f64>() / batch.len() as f64)
}

pub fn sft_loss_grad(
    params: &ModelParams,
    batch: &[EncodedExample],
    reduction: SftReduction,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|ex| {
            let w = example_weights(ex.response_mask()?, reduction);
            let mut g = vec![0.0; params.len()];
            let neg: Vec<f64> = w.iter().map(|x| -x * scale).collect();
            let lp = logp_and_grad(params, &ex.prompt, &ex.response, |_| neg, &mut g)?;
            Ok((
                -lp.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>() * scale,
                g,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_in_order(params.len(), parts))
}

/// Sums `(loss, grad)` parts in input order.
pub(crate) fn reduce_in_order(n: usize, parts: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vocab::UNK;

    fn cfg(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            embed_dim: 3,
            hidden_dim: 4,
        }
    }

    #[test]
    fn uniform_model_log_probs() {
        let v = 9;
        let p = ModelParams::zeros(cfg(v));
        let lp = log_prob(&p, &[4, 5], &[6, 7, EOS]).unwrap();
        for x in lp {
            assert!((x + (v as f64).ln()).abs() < 1e-12);
        }
        assert_eq!(log_prob(&p, &[], &[EOS]).unwrap().len(), 1);
        assert!(matches!(
            log_prob(&p, &[99], &[EOS]),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn distributions_normalize() {
        let p = ModelParams::init(cfg(12), 3);
        let dists = log_distributions(&p, &[4, 5, 9, 4], &[6, 11, 7, EOS]).unwrap();
        for d in dists {
            let s: f64 = d.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(d.iter().all(|&x| x <= 0.0));
        }
    }

    #[test]
    fn uniform_sft_loss_is_l_ln_v() {
        let v = 7;
        let p = ModelParams::zeros(cfg(v));
        let ex = EncodedExample::new(vec![4, 5, 6], vec![4, 5]);
        assert_eq!(ex.response.len(), 3);
        let loss = sft_loss(&p, &[ex.clone(), ex], SftReduction::SumTokens).unwrap();
        assert!((loss - 3.0 * (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn near_certain_model_has_near_zero_loss() {
        // Vocabulary: 4 reserved + token 4. Response [4, EOS].
        let c = ModelConfig {
            vocab_size: 5,
            embed_dim: 2,
            hidden_dim: 2,
        };
        let mut p = ModelParams::zeros(c);
        let l = p.layout();
        let d = &mut p.data;
        // E[BOS] = (1, 0), E[4] = (0, 1); W_x = 20·I so h_1 ≈ (1, 0), h_2 ≈ (0, 1).
        d[l.emb + BOS * 2] = 1.0;
        d[l.emb + 4 * 2 + 1] = 1.0;
        d[l.w_x] = 20.0;
        d[l.w_x + 3] = 20.0;
        // Token 4 fires on h·(1,0), EOS on h·(0,1).
        d[l.w_o + 4 * 2] = 100.0;
        d[l.w_o + 4 * 2 + 1] = -100.0;
        d[l.w_o + EOS * 2] = -100.0;
        d[l.w_o + EOS * 2 + 1] = 100.0;
        let ex = EncodedExample::new(vec![UNK], vec![4]);
        let loss = sft_loss(&p, &[ex], SftReduction::SumTokens).unwrap();
        assert!(loss < 1e-30, "loss {loss}");
    }

    #[test]
    fn masked_loss_matches_explicit_sum() {
        let p = ModelParams::init(cfg(10), 8);
        let a = EncodedExample::new(vec![4, 5, 6, 7], vec![8, 9]);
        let b = EncodedExample::new(vec![9], vec![4, 4, 5]);
        let loss = sft_loss(&p, &[a.clone(), b.clone()], SftReduction::SumTokens).unwrap();
        let oracle: f64 = [&a, &b]
            .iter()
            .map(|ex| {
                let full: Vec<usize> = ex.prompt.iter().chain(&ex.response).copied().collect();
                let lp = log_prob(&p, &ex.prompt, &ex.response).unwrap();
                let mut s = 0.0;
                for (pos, &m) in ex.mask.iter().enumerate() {
                    if m == 1 {
                        assert!(pos >= ex.prompt.len());
                        s -= lp[pos - ex.prompt.len()];
                    }
                }
                assert_eq!(full.len(), ex.mask.len());
                s
            })
            .sum::<f64>()
            / 2.0;
        assert!((loss - oracle).abs() < 1e-12);

        // Changing a prompt token changes the loss only via conditioning.
        let a2 = EncodedExample::new(vec![4, 5, 6, 8], vec![8, 9]);
        let direct = -log_prob(&p, &a2.prompt, &a2.response)
            .unwrap()
            .iter()
            .sum::<f64>();
        let via = sft_loss(&p, &[a2], SftReduction::SumTokens).unwrap();
        assert!((direct - via).abs() < 1e-12);
    }

    #[test]
    fn bad_masks_rejected() {
        let p = ModelParams::zeros(cfg(6));
        let mut ex = EncodedExample::new(vec![4], vec![5]);
        ex.mask = vec![0, 0, 0];
        assert!(sft_loss(&p, &[ex], SftReduction::SumTokens).is_err());
        assert!(matches!(
            sft_loss(&p, &[], SftReduction::SumTokens),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn mean_tokens_reduction() {
        let v = 7;
        let p = ModelParams::zeros(cfg(v));
        let ex = EncodedExample::new(vec![4], vec![4, 5, 6]);
        let loss = sft_loss(&p, &[ex], SftReduction::MeanTokens).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let p = ModelParams::init(cfg(10), seed);
            let batch = vec![
                EncodedExample::new(vec![4, 5, 6], vec![7, 8]),
                EncodedExample::new(vec![9, 4], vec![5, 5, 6]),
            ];
            let (_, g) = sft_loss_grad(&p, &batch, SftReduction::SumTokens).unwrap();
            let h = 1e-4;
            let mut worst: f64 = 0.0;
            for (i, &gi) in g.iter().enumerate() {
                let mut a = p.clone();
                a.data[i] += h;
                let mut b = p.clone();
                b.data[i] -= h;
                let num = (sft_loss(&a, &batch, SftReduction::SumTokens).unwrap()
                    - sft_loss(&b, &batch, SftReduction::SumTokens).unwrap())
                    / (2.0 * h);
                worst = worst.max((num - gi).abs() / num.abs().max(gi.abs()).max(1e-3));
            }
            assert!(worst < 1e-4, "seed {seed}: {worst}");
        }
    }
}
