//! Preference alignment on feedback-ranked candidate lists.
//!
//! For a ranked list `y_1 ≻ … ≻ y_n` with rewards `r_1 > … > r_n` and policy
//! scores `s_i` (mean log-probability including EOS), the list-wise loss is
//!
//! ```text
//! L_PRO = Σ_{k<n} −log( exp(s_k / T_kk) / (exp(s_k / T_kk) + Σ_{i>k} exp(s_i / T_ik)) )
//! T_ik  = 1 / (r_k − r_i),   T_kk = min_{i>k} T_ik
//! ```
//!
//! and the training objective adds the NLL of the candidates themselves:
//! `L = L_SFT + λ · L_PRO`, averaged over samples.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::feedback::Objective;
use crate::model::{
    log_prob, logp_and_grad, reduce_in_order, run_training, EncodedExample, ModelParams,
    OptimConfig, TracePoint, Vocabulary, EOS,
};
use crate::{jsonl, Error, Result};

/// `exp(r1) / (exp(r1) + exp(r2))`, evaluated without overflow.
///
/// `bt_probability(a, b) + bt_probability(b, a) == 1.0` holds exactly.
pub fn bt_probability(r1: f64, r2: f64) -> f64 {
    if r1 >= r2 {
        1.0 / (1.0 + (r2 - r1).exp())
    } else {
        1.0 - bt_probability(r2, r1)
    }
}

/// Mean per-token log-probability of `candidate` (EOS-terminated) given
/// `prompt`.
pub fn policy_score(params: &ModelParams, prompt: &[usize], candidate: &[usize]) -> Result<f64> {
    let lp = log_prob(params, prompt, candidate)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

fn check_sorted(rewards: &[f64]) -> Result<()> {
    if rewards.iter().any(|r| !r.is_finite()) || rewards.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::UnsortedRewards(rewards.to_vec()));
    }
    Ok(())
}

/// Temperatures for 1-based rank `k`: `(T_kk, [T_ik for i in k+1..=n])`.
pub fn pro_temperatures(rewards: &[f64], k: usize) -> Result<(f64, Vec<f64>)> {
    check_sorted(rewards)?;
    if k == 0 || k >= rewards.len() {
        return Err(Error::InvalidExample(format!(
            "rank {k} has no lower-ranked candidates in a list of {}",
            rewards.len()
        )));
    }
    let rk = rewards[k - 1];
    let ts: Vec<f64> = rewards[k..].iter().map(|ri| 1.0 / (rk - ri)).collect();
    let tkk = ts.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((tkk, ts))
}

/// Makes a non-increasing reward list strictly decreasing: a reward that does
/// not fall below its (adjusted) predecessor becomes predecessor − `eps`.
/// Returns the adjusted list and the indices that were moved.
pub fn perturb_ties(rewards: &[f64], eps: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if rewards.iter().any(|r| !r.is_finite()) || rewards.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::UnsortedRewards(rewards.to_vec()));
    }
    let mut out = Vec::with_capacity(rewards.len());
    let mut moved = Vec::new();
    for (i, &r) in rewards.iter().enumerate() {
        match out.last() {
            Some(&prev) if r >= prev => {
                out.push(prev - eps);
                moved.push(i);
            }
            _ => out.push(r),
        }
    }
    Ok((out, moved))
}

/// What supplies the gaps inside the temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureSource {
    /// Offline feedback rewards.
    #[default]
    Reward,
    /// Detached policy scores, gaps floored at `tie_epsilon`.
    PolicyScore,
}

/// `gaps[k][j]` is `r_k − r_{k+1+j}` for the chosen source.
fn gap_table(
    scores: &[f64],
    rewards: &[f64],
    source: TemperatureSource,
    eps: f64,
) -> Vec<Vec<f64>> {
    let n = rewards.len();
    (0..n.saturating_sub(1))
        .map(|k| {
            (k + 1..n)
                .map(|i| match source {
                    TemperatureSource::Reward => rewards[k] - rewards[i],
                    TemperatureSource::PolicyScore => (scores[k] - scores[i]).max(eps),
                })
                .collect()
        })
        .collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// List-wise loss and its gradient with respect to the scores.
pub fn pro_loss_from_scores(
    scores: &[f64],
    rewards: &[f64],
    source: TemperatureSource,
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    if scores.len() != rewards.len() {
        return Err(Error::InvalidExample(
            "scores and rewards differ in length".into(),
        ));
    }
    check_sorted(rewards)?;
    let n = scores.len();
    let gaps = gap_table(scores, rewards, source, eps);
    let mut loss = 0.0;
    let mut ds = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let g = &gaps[k];
        let top_gap = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut logits = Vec::with_capacity(n - k);
        logits.push(scores[k] * top_gap);
        for (j, i) in (k + 1..n).enumerate() {
            logits.push(scores[i] * g[j]);
        }
        let lse = log_sum_exp(&logits);
        loss += lse - logits[0];
        let w0 = (logits[0] - lse).exp();
        ds[k] += (w0 - 1.0) * top_gap;
        for (j, i) in (k + 1..n).enumerate() {
            ds[i] += (logits[j + 1] - lse).exp() * g[j];
        }
    }
    Ok((loss, ds))
}

/// One query with its ranked, encoded candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSample {
    pub prompt: Vec<usize>,
    /// EOS-terminated ids, best first.
    pub candidates: Vec<Vec<usize>>,
    /// Strictly decreasing rewards used by the loss.
    pub rewards: Vec<f64>,
    /// Rewards as scored, before tie perturbation.
    pub raw_rewards: Vec<f64>,
    pub perturbed: Vec<usize>,
}

impl AlignmentSample {
    pub fn new(
        prompt: Vec<usize>,
        candidates: Vec<Vec<usize>>,
        raw_rewards: Vec<f64>,
        tie_epsilon: f64,
    ) -> Result<Self> {
        if candidates.is_empty() || candidates.len() != raw_rewards.len() {
            return Err(Error::InvalidExample(
                "need one reward per candidate and at least one candidate".into(),
            ));
        }
        let candidates = candidates
            .into_iter()
            .map(|mut c| {
                if c.last() != Some(&EOS) {
                    c.push(EOS);
                }
                c
            })
            .collect();
        let (rewards, perturbed) = perturb_ties(&raw_rewards, tie_epsilon)?;
        Ok(AlignmentSample {
            prompt,
            candidates,
            rewards,
            raw_rewards,
            perturbed,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub optim: OptimConfig,
    pub lambda: f64,
    pub tie_epsilon: f64,
    /// NLL over every candidate; `false` keeps only the top one.
    pub sft_all_candidates: bool,
    pub temperature: TemperatureSource,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            optim: OptimConfig {
                lr: 1e-3,
                epochs: 10,
                batch_size: 8,
                ..OptimConfig::default()
            },
            lambda: 1.0,
            tie_epsilon: 1e-6,
            sft_all_candidates: true,
            temperature: TemperatureSource::Reward,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(
                "lambda must be finite and non-negative".into(),
            ));
        }
        if !(self.tie_epsilon > 0.0 && self.tie_epsilon.is_finite()) {
            return Err(Error::Config("tie_epsilon must be positive".into()));
        }
        Ok(())
    }
}

pub fn policy_scores(params: &ModelParams, sample: &AlignmentSample) -> Result<Vec<f64>> {
    sample
        .candidates
        .iter()
        .map(|c| policy_score(params, &sample.prompt, c))
        .collect()
}

/// List-wise loss of one sample with reward temperatures.
pub fn pro_loss(params: &ModelParams, sample: &AlignmentSample) -> Result<f64> {
    pro_loss_with(params, sample, TemperatureSource::Reward, 1e-6)
}

pub fn pro_loss_with(
    params: &ModelParams,
    sample: &AlignmentSample,
    source: TemperatureSource,
    eps: f64,
) -> Result<f64> {
    let s = policy_scores(params, sample)?;
    Ok(pro_loss_from_scores(&s, &sample.rewards, source, eps)?.0)
}

fn sft_span(sample: &AlignmentSample, cfg: &AlignmentConfig) -> usize {
    if cfg.sft_all_candidates {
        sample.len()
    } else {
        1
    }
}

/// `L_SFT + λ · L_PRO` for one sample.
pub fn align_loss(
    params: &ModelParams,
    sample: &AlignmentSample,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    let lps: Vec<Vec<f64>> = sample
        .candidates
        .iter()
        .map(|c| log_prob(params, &sample.prompt, c))
        .collect::<Result<_>>()?;
    let sft: f64 = lps[..sft_span(sample, cfg)]
        .iter()
        .map(|lp| -lp.iter().sum::<f64>())
        .sum();
    let scores: Vec<f64> = lps
        .iter()
        .map(|lp| lp.iter().sum::<f64>() / lp.len() as f64)
        .collect();
    let (pro, _) =
        pro_loss_from_scores(&scores, &sample.rewards, cfg.temperature, cfg.tie_epsilon)?;
    Ok(sft + cfg.lambda * pro)
}

/// Loss and parameter gradient of one sample, both multiplied by `scale`.
fn align_loss_grad_one(
    params: &ModelParams,
    sample: &AlignmentSample,
    cfg: &AlignmentConfig,
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let lps: Vec<Vec<f64>> = sample
        .candidates
        .iter()
        .map(|c| log_prob(params, &sample.prompt, c))
        .collect::<Result<_>>()?;
    let span = sft_span(sample, cfg);
    let scores: Vec<f64> = lps
        .iter()
        .map(|lp| lp.iter().sum::<f64>() / lp.len() as f64)
        .collect();
    let (pro, ds) =
        pro_loss_from_scores(&scores, &sample.rewards, cfg.temperature, cfg.tie_epsilon)?;
    let sft: f64 = lps[..span].iter().map(|lp| -lp.iter().sum::<f64>()).sum();

    let mut grad = vec![0.0; params.len()];
    for (i, c) in sample.candidates.iter().enumerate() {
        let sft_w = if i < span { -1.0 } else { 0.0 };
        let w = (sft_w + cfg.lambda * ds[i] / c.len() as f64) * scale;
        if w == 0.0 {
            continue;
        }
        logp_and_grad(params, &sample.prompt, c, |lp| vec![w; lp.len()], &mut grad)?;
    }
    Ok(((sft + cfg.lambda * pro) * scale, grad))
}

/// Mean loss over `batch` and its gradient.
pub fn align_loss_grad(
    params: &ModelParams,
    batch: &[&AlignmentSample],
    cfg: &AlignmentConfig,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|s| align_loss_grad_one(params, s, cfg, scale))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_in_order(params.len(), parts))
}

pub fn train_align(
    params: ModelParams,
    samples: &[AlignmentSample],
    cfg: &AlignmentConfig,
) -> Result<(ModelParams, Vec<TracePoint>)> {
    cfg.validate()?;
    run_training(params, samples.len(), &cfg.optim, |p, idx| {
        let batch: Vec<&AlignmentSample> = idx.iter().map(|&i| &samples[i]).collect();
        align_loss_grad(p, &batch, cfg)
    })
}

/// Rank agreement between `scores` and `rewards` over pairs whose rewards
/// differ: (concordant − discordant) / #pairs. Score ties count as neither.
/// `None` when every reward ties.
pub fn kendall_tau(scores: &[f64], rewards: &[f64]) -> Option<f64> {
    let n = scores.len().min(rewards.len());
    let (mut c, mut d, mut pairs) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dr = rewards[i] - rewards[j];
            if dr == 0.0 {
                continue;
            }
            pairs += 1;
            let ds = scores[i] - scores[j];
            if ds * dr > 0.0 {
                c += 1;
            } else if ds * dr < 0.0 {
                d += 1;
            }
        }
    }
    (pairs > 0).then(|| (c - d) as f64 / pairs as f64)
}

/// Per-sample tau of policy scores against the unperturbed rewards.
pub fn list_taus(params: &ModelParams, samples: &[AlignmentSample]) -> Result<Vec<Option<f64>>> {
    samples
        .par_iter()
        .map(|s| Ok(kendall_tau(&policy_scores(params, s)?, &s.raw_rewards)))
        .collect()
}

/// One line of the alignment dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentRecord {
    pub query: String,
    /// Prompt text the candidates were generated from.
    pub prompt: String,
    /// `(rewrite, reward)`, best first.
    pub candidates: Vec<(String, f64)>,
    pub objective: Objective,
}

pub fn save_records(path: &Path, records: &[AlignmentRecord]) -> Result<()> {
    jsonl::write(path, records)
}

pub fn load_records(path: &Path) -> Result<Vec<AlignmentRecord>> {
    jsonl::read(path)
}

/// Encodes a record, keeping its best `contrast` candidates. Returns `None`
/// when fewer than two candidates remain, since a single candidate carries no
/// ranking signal.
pub fn encode_record(
    vocab: &Vocabulary,
    record: &AlignmentRecord,
    contrast: usize,
    prompt_cap: usize,
    tie_epsilon: f64,
) -> Result<Option<AlignmentSample>> {
    let kept: Vec<&(String, f64)> = record
        .candidates
        .iter()
        .filter(|(c, _)| !vocab.encode(c).is_empty())
        .take(contrast)
        .collect();
    if kept.len() < 2 {
        return Ok(None);
    }
    let mut prompt = vocab.encode(&record.prompt);
    prompt.truncate(prompt_cap);
    let cands = kept.iter().map(|(c, _)| vocab.encode(c)).collect();
    let rewards = kept.iter().map(|(_, r)| *r).collect();
    AlignmentSample::new(prompt, cands, rewards, tie_epsilon).map(Some)
}

/// Encoded candidates as plain SFT examples.
pub fn as_sft_examples(sample: &AlignmentSample) -> Vec<EncodedExample> {
    sample
        .candidates
        .iter()
        .map(|c| EncodedExample::new(sample.prompt.clone(), c.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sft_loss, ModelConfig, SftReduction};
    use proptest::prelude::*;

    fn uniform(v: usize) -> ModelParams {
        ModelParams::zeros(ModelConfig {
            vocab_size: v,
            embed_dim: 3,
            hidden_dim: 4,
        })
    }

    fn small(seed: u64) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                vocab_size: 10,
                embed_dim: 4,
                hidden_dim: 5,
            },
            seed,
        )
    }

    fn sample(rewards: Vec<f64>) -> AlignmentSample {
        let cands = (0..rewards.len())
            .map(|i| vec![4 + i % 6, 5 + (i * 3) % 5])
            .collect();
        AlignmentSample::new(vec![4, 6, 8], cands, rewards, 1e-6).unwrap()
    }

    #[test]
    fn bt_values() {
        assert_eq!(bt_probability(0.3, 0.3), 0.5);
        assert!((bt_probability(2f64.ln(), 0.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((bt_probability(1000.0, 0.0) - 1.0).abs() < 1e-12);
        assert!(bt_probability(0.0, 1000.0).is_finite());
    }

    #[test]
    fn temperatures() {
        let (tkk, ts) = pro_temperatures(&[2.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(ts, vec![1.0, 0.5]);
        assert_eq!(tkk, 0.5);
        let (tkk, ts) = pro_temperatures(&[0.9, 0.5, 0.4, 0.1], 2).unwrap();
        assert!((ts[0] - 10.0).abs() < 1e-9 && (ts[1] - 2.5).abs() < 1e-9);
        assert!((tkk - 2.5).abs() < 1e-9);
        let (tkk, ts) = pro_temperatures(&[0.7, 0.2], 1).unwrap();
        assert!((tkk - 2.0).abs() < 1e-12 && ts == vec![tkk]);
        assert!(matches!(
            pro_temperatures(&[0.1, 0.5], 1),
            Err(Error::UnsortedRewards(_))
        ));
    }

    #[test]
    fn ties_are_perturbed_in_order() {
        let (r, moved) = perturb_ties(&[1.0, 1.0, 1.0, 0.5], 1e-6).unwrap();
        assert_eq!(r[0], 1.0);
        assert_eq!(r[1], 1.0 - 1e-6);
        assert_eq!(r[2], 1.0 - 1e-6 - 1e-6);
        assert_eq!(r[3], 0.5);
        assert_eq!(moved, vec![1, 2]);
        assert!(perturb_ties(&[0.2, 0.3], 1e-6).is_err());
    }

    #[test]
    fn pro_zero_scores() {
        for (n, want) in [(1, 0.0), (2, 2f64.ln()), (3, 3f64.ln() + 2f64.ln())] {
            let r: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 * 0.3).collect();
            let (l, _) =
                pro_loss_from_scores(&vec![0.0; n], &r, TemperatureSource::Reward, 1e-6).unwrap();
            assert!((l - want).abs() < 1e-12, "n={n}: {l}");
        }
    }

    #[test]
    fn uniform_model_align_loss() {
        let v = 10;
        let p = uniform(v);
        let s = sample(vec![0.9, 0.4, 0.1]);
        let l_cands: usize = s.candidates.iter().map(Vec::len).sum();
        let cfg = AlignmentConfig::default();
        // Every policy score is −ln V; assemble the list loss term by term.
        let sc = -(v as f64).ln();
        let r = &s.rewards;
        let term = |k: usize| {
            let top = sc * (r[k] - r[2]);
            let rest: Vec<f64> = (k + 1..3).map(|i| sc * (r[k] - r[i])).collect();
            let z = top.exp() + rest.iter().map(|x| x.exp()).sum::<f64>();
            -(top.exp() / z).ln()
        };
        let want = l_cands as f64 * (v as f64).ln() + term(0) + term(1);
        assert!((align_loss(&p, &s, &cfg).unwrap() - want).abs() < 1e-9);
        for c in &s.candidates {
            assert!((policy_score(&p, &s.prompt, c).unwrap() + (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_zero_is_multi_candidate_sft() {
        let p = small(4);
        let s = sample(vec![0.8, 0.5, 0.2]);
        let cfg = AlignmentConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let sft = sft_loss(&p, &as_sft_examples(&s), SftReduction::SumTokens).unwrap() * 3.0;
        assert!((align_loss(&p, &s, &cfg).unwrap() - sft).abs() < 1e-9);
    }

    #[test]
    fn policy_score_is_mean_log_prob() {
        let p = small(5);
        let s = sample(vec![0.5, 0.1]);
        let lp = log_prob(&p, &s.prompt, &s.candidates[1]).unwrap();
        let mean = lp.iter().sum::<f64>() / lp.len() as f64;
        assert_eq!(policy_score(&p, &s.prompt, &s.candidates[1]).unwrap(), mean);
    }

    fn fd_check(seed: u64, f: impl Fn(&ModelParams) -> f64, grad: &[f64]) {
        let p = small(seed);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for (i, &gi) in grad.iter().enumerate() {
            let mut a = p.clone();
            a.as_mut_slice()[i] += h;
            let mut b = p.clone();
            b.as_mut_slice()[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            let err = (num - gi).abs() / num.abs().max(gi.abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn align_gradient_matches_finite_differences() {
        // Policy-score temperatures are detached, so only reward temperatures
        // have a gradient that finite differences can see.
        for (seed, all) in [(1, true), (2, false), (3, true)] {
            let cfg = AlignmentConfig {
                lambda: 0.7,
                sft_all_candidates: all,
                ..Default::default()
            };
            let s = sample(vec![0.9, 0.6, 0.6, 0.1]);
            let p = small(seed);
            let (_, g) = align_loss_grad(&p, &[&s], &cfg).unwrap();
            fd_check(seed, |q| align_loss(q, &s, &cfg).unwrap(), &g);
        }
    }

    #[test]
    fn lr_zero_and_determinism() {
        let p = small(3);
        let samples: Vec<_> = (0..6)
            .map(|i| sample(vec![1.0, 0.5 - 0.05 * i as f64, 0.0]))
            .collect();
        let frozen = AlignmentConfig {
            optim: OptimConfig {
                lr: 0.0,
                epochs: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        assert_eq!(train_align(p.clone(), &samples, &frozen).unwrap().0, p);
        let cfg = AlignmentConfig::default();
        let a = train_align(p.clone(), &samples, &cfg).unwrap().0;
        let b = train_align(p, &samples, &cfg).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau(&[3.0, 2.0, 1.0], &[1.0, 0.5, 0.0]), Some(1.0));
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 0.5, 0.0]), Some(-1.0));
        assert_eq!(kendall_tau(&[1.0, 2.0], &[0.5, 0.5]), None);
        assert_eq!(kendall_tau(&[1.0, 2.0, 0.0], &[0.5, 0.5, 0.1]), Some(1.0));
    }

    proptest! {
        #[test]
        fn bt_complement(a in -50.0..50.0f64, b in -50.0..50.0f64) {
            prop_assert_eq!(bt_probability(a, b) + bt_probability(b, a), 1.0);
        }

        #[test]
        fn pro_shift_invariant_and_nonnegative(
            scores in prop::collection::vec(-5.0..0.0f64, 2..6),
            gaps in prop::collection::vec(0.01..1.0f64, 5),
            c in -10.0..10.0f64,
        ) {
            let n = scores.len();
            let mut r = vec![0.0];
            for g in &gaps[..n - 1] {
                let last = *r.last().unwrap();
                r.push(last - g);
            }
            let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
            let (a, _) = pro_loss_from_scores(&scores, &r, TemperatureSource::Reward, 1e-6).unwrap();
            let (b, _) = pro_loss_from_scores(&scores, &shifted, TemperatureSource::Reward, 1e-6).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn lowering_top_score_never_helps(
            scores in prop::collection::vec(-5.0..0.0f64, 2..6),
            delta in 0.0..2.0f64,
        ) {
            let n = scores.len();
            let r: Vec<f64> = (0..n).map(|i| 1.0 - 0.2 * i as f64).collect();
            let (a, _) = pro_loss_from_scores(&scores, &r, TemperatureSource::Reward, 1e-6).unwrap();
            let mut lower = scores.clone();
            lower[0] -= delta;
            let (b, _) = pro_loss_from_scores(&lower, &r, TemperatureSource::Reward, 1e-6).unwrap();
            prop_assert!(b >= a - 1e-12);
        }
    }
}
