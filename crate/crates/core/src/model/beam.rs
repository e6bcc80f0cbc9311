use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::net::ModelParams;
use super::vocab::{Vocabulary, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    /// Content ids, EOS excluded.
    pub ids: Vec<usize>,
    pub text: String,
    /// Summed log-probability including the EOS step.
    pub logp_sum: f64,
    /// `logp_sum / (ids.len() + 1)`.
    pub score: f64,
}

struct Live {
    ids: Vec<usize>,
    logp: f64,
    h: Vec<f64>,
}

fn emittable(id: usize) -> bool {
    !matches!(id, PAD | BOS | UNK)
}

/// Length-bounded beam search over EOS-terminated sequences.
///
/// Each step pools every expansion of every live hypothesis and keeps the
/// `width` best by cumulative log-probability; EOS expansions retire into the
/// finished set. EOS is disallowed as the first token and forced after
/// `max_len` content tokens. Finished hypotheses are ranked by normalized
/// score, deduplicated by surface text, and truncated to `width`.
///
/// `text_of` renders content ids; it defines what "distinct" means.
pub fn beam_search_with(
    params: &ModelParams,
    prompt: &[usize],
    width: usize,
    max_len: usize,
    text_of: impl Fn(&[usize]) -> String,
) -> Vec<BeamCandidate> {
    let width = width.max(1);
    let max_len = max_len.max(1);
    let vocab_size = params.config().vocab_size;
    let prompt: Vec<usize> = prompt.iter().copied().filter(|&t| t < vocab_size).collect();
    let state = params.read_prompt(&prompt);

    let mut live = vec![Live {
        ids: Vec::new(),
        logp: 0.0,
        h: state.h0.clone(),
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();

    for step in 1..=max_len + 1 {
        if live.is_empty() {
            break;
        }
        // (cum logp, beam index, token, new hidden index)
        let mut pool: Vec<(f64, usize, usize)> = Vec::new();
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(live.len());
        for (b, hyp) in live.iter().enumerate() {
            let prev = hyp.ids.last().copied().unwrap_or(BOS);
            let (h, lp) = params.step(&state, &hyp.h, prev);
            hidden.push(h);
            for (tok, &l) in lp.iter().enumerate() {
                if !emittable(tok) {
                    continue;
                }
                let ok = if step == 1 {
                    tok != EOS
                } else if step == max_len + 1 {
                    tok == EOS
                } else {
                    true
                };
                if ok {
                    pool.push((hyp.logp + l, b, tok));
                }
            }
        }
        pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        pool.truncate(width);
        let mut next = Vec::new();
        for (logp, b, tok) in pool {
            if tok == EOS {
                finished.push((live[b].ids.clone(), logp));
            } else {
                let mut ids = live[b].ids.clone();
                ids.push(tok);
                next.push(Live {
                    ids,
                    logp,
                    h: hidden[b].clone(),
                });
            }
        }
        live = next;
    }

    let mut out: Vec<BeamCandidate> = finished
        .into_iter()
        .map(|(ids, logp_sum)| BeamCandidate {
            text: text_of(&ids),
            score: logp_sum / (ids.len() + 1) as f64,
            ids,
            logp_sum,
        })
        .collect();
    out.sort_by(compare_candidates);
    let mut seen = std::collections::HashSet::new();
    out.retain(|c| seen.insert(c.text.clone()));
    out.truncate(width);
    out
}

fn compare_candidates(a: &BeamCandidate, b: &BeamCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.text.cmp(&b.text))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search with candidates rendered through `vocab`.
pub fn beam_search(
    params: &ModelParams,
    vocab: &Vocabulary,
    prompt: &[usize],
    width: usize,
    max_len: usize,
) -> Vec<BeamCandidate> {
    beam_search_with(params, prompt, width, max_len, |ids| vocab.decode(ids))
}

/// Beam search where the text of a candidate is its id sequence.
pub fn beam_search_ids(
    params: &ModelParams,
    prompt: &[usize],
    width: usize,
    max_len: usize,
) -> Vec<BeamCandidate> {
    beam_search_with(params, prompt, width, max_len, |ids| {
        ids.iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::net::{log_prob, ModelConfig};

    fn params(v: usize, seed: u64) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                vocab_size: v,
                embed_dim: 4,
                hidden_dim: 5,
            },
            seed,
        )
    }

    fn greedy(p: &ModelParams, prompt: &[usize], max_len: usize) -> Vec<usize> {
        let state = p.read_prompt(prompt);
        let mut h = state.h0.clone();
        let mut ids = Vec::new();
        for step in 1..=max_len + 1 {
            let prev = ids.last().copied().unwrap_or(BOS);
            let (nh, lp) = p.step(&state, &h, prev);
            h = nh;
            let best = (0..lp.len())
                .filter(|&t| emittable(t))
                .filter(|&t| step != 1 || t != EOS)
                .filter(|&t| step != max_len + 1 || t == EOS)
                .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
                .unwrap();
            if best == EOS {
                break;
            }
            ids.push(best);
        }
        ids
    }

    fn exhaustive(p: &ModelParams, prompt: &[usize], max_len: usize) -> Vec<(Vec<usize>, f64)> {
        let content: Vec<usize> = (0..p.config().vocab_size)
            .filter(|&t| emittable(t) && t != EOS)
            .collect();
        let mut seqs: Vec<Vec<usize>> = content.iter().map(|&t| vec![t]).collect();
        let mut frontier = seqs.clone();
        for _ in 1..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for &t in &content {
                    let mut s2 = s.clone();
                    s2.push(t);
                    next.push(s2);
                }
            }
            seqs.extend(next.iter().cloned());
            frontier = next;
        }
        let mut scored: Vec<(Vec<usize>, f64)> = seqs
            .into_iter()
            .map(|s| {
                let mut r = s.clone();
                r.push(EOS);
                let lp: f64 = log_prob(p, prompt, &r).unwrap().iter().sum();
                (s, lp / r.len() as f64)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..10 {
            let p = params(9, seed);
            let got = beam_search_ids(&p, &[4, 5], 1, 4);
            assert_eq!(got.len(), 1);
            assert_eq!(got[0].ids, greedy(&p, &[4, 5], 4));
        }
    }

    #[test]
    fn scores_non_increasing_and_distinct() {
        let p = params(12, 3);
        let got = beam_search_ids(&p, &[4, 7], 5, 4);
        assert!(!got.is_empty() && got.len() <= 5);
        for w in got.windows(2) {
            assert!(w[0].score >= w[1].score);
            assert_ne!(w[0].text, w[1].text);
        }
        for c in &got {
            assert!(!c.ids.is_empty() && c.ids.len() <= 4);
            assert!(c.ids.iter().all(|&t| emittable(t) && t != EOS));
        }
    }

    #[test]
    fn exhaustive_equivalence_small_vocab() {
        // Two content tokens plus EOS.
        for seed in 0..20 {
            let p = params(6, seed);
            let got = beam_search_ids(&p, &[4], 9, 2);
            let want = exhaustive(&p, &[4], 2);
            assert_eq!(got.len(), want.len());
            for (g, (ids, s)) in got.iter().zip(&want) {
                assert_eq!(&g.ids, ids);
                assert!((g.score - s).abs() < 1e-12);
            }
        }
        // Three content tokens, width covering every prefix.
        for seed in 0..10 {
            let p = params(7, seed);
            let got = beam_search_ids(&p, &[5, 6], 16, 2);
            let want = exhaustive(&p, &[5, 6], 2);
            let want_ids: Vec<_> = want.iter().take(16).map(|w| w.0.clone()).collect();
            let got_ids: Vec<_> = got.iter().map(|g| g.ids.clone()).collect();
            assert_eq!(got_ids, want_ids);
        }
    }
}
