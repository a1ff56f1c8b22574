//! Beam search over the branch-0 decoder and confidence weighting of N-best lists.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{Precision, Tensor};
use crate::error::{Error, Result};
use crate::model::{DecoderState, ModelParams, EOS, PAD, SOS};

/// A decoded token sequence with its confidence score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Ends in `<eos>` unless `truncated`.
    pub tokens: Vec<usize>,
    /// Length-normalized log-probability: total log-prob ÷ token count.
    pub score: f64,
    /// Set when the search hit `max_len` before any beam emitted `<eos>`.
    pub truncated: bool,
}

impl Hypothesis {
    /// Unnormalized total log-probability.
    pub fn log_prob(&self) -> f64 {
        self.score * self.tokens.len() as f64
    }

    /// Tokens without the trailing `<eos>`.
    pub fn symbols(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Ranked hypotheses for one utterance plus their softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl NBestList {
    /// Sorts `hypotheses` by rank and attaches weights at `temperature`.
    pub fn new(mut hypotheses: Vec<Hypothesis>, temperature: f64) -> Result<Self> {
        hypotheses.sort_by(rank_order);
        let scores: Vec<f64> = hypotheses.iter().map(|h| h.score).collect();
        let weights = if scores.is_empty() {
            Vec::new()
        } else {
            nbest_weights(&scores, temperature)?
        };
        Ok(NBestList {
            hypotheses,
            weights,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }

    /// Keeps the first `n` entries and renormalizes the weights.
    pub fn truncate(&self, n: usize) -> Result<NBestList> {
        NBestList::new(self.hypotheses.iter().take(n).cloned().collect(), self.temperature)
    }
}

/// Score descending, then tokens lexicographically ascending.
fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Softmax of confidence scores at temperature `T`:
/// `q_n = exp(s_n/T) / Σ_i exp(s_i/T)`.
pub fn nbest_weights(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("nbest_weights needs at least one score"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub n_best: usize,
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 8,
            n_best: 4,
            max_len: 16,
            temperature: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn greedy(max_len: usize) -> Self {
        BeamConfig {
            beam_width: 1,
            n_best: 1,
            max_len,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_best == 0 || self.beam_width < self.n_best {
            return Err(Error::invalid(format!(
                "beam search needs beam_width >= n_best >= 1, got {} and {}",
                self.beam_width, self.n_best
            )));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

struct Beam {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

/// Beam search through branch 0.
///
/// All one-token extensions of the active beams compete for `beam_width`
/// slots; survivors that end in `<eos>` move to a finished pool. The search stops after
/// `max_len` steps, when no beam is active, or once the pool holds `n_best`
/// entries that no active beam can still beat: a beam with total log-prob
/// `S` can at best finish with normalized score `S / max_len`.
pub fn beam_search(params: &ModelParams, features: &Tensor, cfg: &BeamConfig) -> Result<NBestList> {
    beam_search_with(params, features, cfg, Precision::F64)
}

pub fn beam_search_with(
    params: &ModelParams,
    features: &Tensor,
    cfg: &BeamConfig,
    precision: Precision,
) -> Result<NBestList> {
    cfg.validate()?;
    let vocab = params.config().vocab_size;
    let mut session = params.session(precision);
    let enc = session.encode(features)?;
    let init = session.initial_state();
    let mut active = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: init,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let bound_len = cfg.max_len as f64;

    for step in 0..cfg.max_len {
        let mut candidates: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        let mut states = Vec::with_capacity(active.len());
        for (bi, beam) in active.iter().enumerate() {
            let prev = beam.tokens.last().copied().unwrap_or(SOS);
            let (lp, st) = session.decode_step(0, prev, &beam.state, &enc)?;
            states.push(st);
            let lp = session.graph.value(lp).data();
            for (tok, &l) in lp.iter().enumerate().take(vocab) {
                if tok == PAD || tok == SOS {
                    continue;
                }
                let total = beam.log_prob + l;
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                candidates.push((total, tokens, bi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
        });
        candidates.truncate(cfg.beam_width);
        let (done, open): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|c| c.1.last() == Some(&EOS));
        for (total, tokens, _) in done {
            let n = tokens.len() as f64;
            finished.push(Hypothesis {
                tokens,
                score: total / n,
                truncated: false,
            });
        }
        active = open
            .into_iter()
            .map(|(log_prob, tokens, bi)| Beam {
                tokens,
                log_prob,
                state: states[bi].clone(),
            })
            .collect();

        if active.is_empty() || step + 1 == cfg.max_len {
            break;
        }
        if finished.len() >= cfg.n_best {
            finished.sort_by(rank_order);
            let nth = finished[cfg.n_best - 1].score;
            let best_open = active
                .iter()
                .map(|b| b.log_prob / bound_len)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_open < nth {
                break;
            }
        }
    }

    let hyps = if finished.is_empty() {
        active
            .into_iter()
            .map(|b| {
                let n = b.tokens.len() as f64;
                Hypothesis {
                    tokens: b.tokens,
                    score: b.log_prob / n,
                    truncated: true,
                }
            })
            .collect()
    } else {
        finished
    };
    let mut hyps = hyps;
    hyps.sort_by(rank_order);
    hyps.truncate(cfg.n_best);
    NBestList::new(hyps, cfg.temperature)
}

/// Greedy (beam of one) decode; returns the best symbol sequence without `<eos>`.
pub fn greedy_decode(params: &ModelParams, features: &Tensor, max_len: usize) -> Result<Vec<usize>> {
    let list = beam_search(params, features, &BeamConfig::greedy(max_len))?;
    Ok(list.best().map(|h| h.symbols().to_vec()).unwrap_or_default())
}

/// Teacher-forced total log-probability of `tokens` through `branch`.
pub fn sequence_log_prob(params: &ModelParams, features: &Tensor, tokens: &[usize], branch: usize) -> Result<f64> {
    let mut s = params.session(Precision::F64);
    let enc = s.encode(features)?;
    let mut state = s.initial_state();
    let mut prev = SOS;
    let mut total = 0.0;
    for &t in tokens {
        let (lp, st) = s.decode_step(branch, prev, &state, &enc)?;
        total += s.graph.value(lp).data()[t];
        state = st;
        prev = t;
    }
    Ok(total)
}

const DUMP_HEADER: &str = "# nbest v1";

/// Writes N-best lists as tab-separated records
/// `utt_id  rank  score  weight  token ids (space-joined)`.
///
/// Ranks start at 1. A header line carries the softmax temperature.
pub fn write_nbest(path: &Path, lists: &[(String, NBestList)]) -> Result<usize> {
    let temperature = lists.first().map(|(_, l)| l.temperature).unwrap_or(1.0);
    let mut out = format!("{DUMP_HEADER} temperature={temperature}\n");
    let mut count = 0;
    for (id, list) in lists {
        if id.contains(['\t', '\n']) || id.is_empty() {
            return Err(Error::invalid(format!("utterance id `{id}` is not writable")));
        }
        for (rank, (h, w)) in list.hypotheses.iter().zip(&list.weights).enumerate() {
            let toks: Vec<String> = h.tokens.iter().map(|t| t.to_string()).collect();
            writeln!(out, "{id}\t{}\t{}\t{}\t{}", rank + 1, h.score, w, toks.join(" ")).expect("string write");
            count += 1;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(count)
}

pub fn read_nbest(path: &Path) -> Result<Vec<(String, NBestList)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p = path.display().to_string();
    let err = |line: usize, msg: &str| Error::Parse {
        path: p.clone(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header"))?;
    let temperature: f64 = header
        .strip_prefix(DUMP_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("temperature="))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err(1, "bad header"))?;
    let mut out: Vec<(String, NBestList)> = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(ln, "expected 5 tab-separated fields"));
        }
        let rank: usize = fields[1].parse().map_err(|_| err(ln, "bad rank"))?;
        let score: f64 = fields[2].parse().map_err(|_| err(ln, "bad score"))?;
        let weight: f64 = fields[3].parse().map_err(|_| err(ln, "bad weight"))?;
        let tokens = fields[4]
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err(ln, "bad token id"))?;
        if tokens.is_empty() {
            return Err(err(ln, "empty hypothesis"));
        }
        let truncated = tokens.last() != Some(&EOS);
        let hyp = Hypothesis {
            tokens,
            score,
            truncated,
        };
        match out.last_mut() {
            Some((id, list)) if id == fields[0] => {
                if rank != list.hypotheses.len() + 1 {
                    return Err(err(ln, "ranks must be consecutive"));
                }
                list.hypotheses.push(hyp);
                list.weights.push(weight);
            }
            _ => {
                if rank != 1 {
                    return Err(err(ln, "first record of an utterance must have rank 1"));
                }
                out.push((
                    fields[0].to_string(),
                    NBestList {
                        hypotheses: vec![hyp],
                        weights: vec![weight],
                        temperature,
                    },
                ));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_basic_cases() {
        assert_eq!(nbest_weights(&[-0.3, -0.3, -0.3, -0.3], 2.5).unwrap(), vec![0.25; 4]);
        let w = nbest_weights(&[-0.5, -1.5], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((w[0] - 0.7310586).abs() < 1e-7 && (w[1] - 0.2689414).abs() < 1e-7);
        let w = nbest_weights(&[-0.1, -3.0, -7.0], 1e6).unwrap();
        assert!(w.iter().all(|q| (q - 1.0 / 3.0).abs() < 1e-3));
        assert!(nbest_weights(&[-1.0], 0.0).is_err());
        assert!(nbest_weights(&[-1.0], -1.0).is_err());
    }

    fn features(k: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![k, d], (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn greedy_equals_argmax_chain() {
        let p = ModelParams::init(&ModelConfig::tiny(3, 4, 6), 3).unwrap();
        let x = features(3, 3, 4);
        let list = beam_search(&p, &x, &BeamConfig::greedy(6)).unwrap();
        let mut s = p.session(Precision::F64);
        let enc = s.encode(&x).unwrap();
        let mut st = s.initial_state();
        let mut prev = SOS;
        let mut chain = Vec::new();
        for _ in 0..6 {
            let (lp, next) = s.decode_step(0, prev, &st, &enc).unwrap();
            let v = s.graph.value(lp).data();
            let tok = (EOS..v.len()).max_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(b.cmp(&a))).unwrap();
            chain.push(tok);
            st = next;
            prev = tok;
            if tok == EOS {
                break;
            }
        }
        assert_eq!(list.hypotheses[0].tokens, chain);
    }

    #[test]
    fn hypotheses_rescore() {
        let p = ModelParams::init(&ModelConfig::tiny(3, 4, 7), 8).unwrap();
        let x = features(4, 3, 5);
        let cfg = BeamConfig {
            beam_width: 5,
            n_best: 4,
            max_len: 5,
            temperature: 1.0,
        };
        let list = beam_search(&p, &x, &cfg).unwrap();
        assert!(!list.is_empty());
        for h in &list.hypotheses {
            let lp = sequence_log_prob(&p, &x, &h.tokens, 0).unwrap();
            assert!((lp - h.log_prob()).abs() < 1e-6);
            assert!(h.score <= 0.0);
            assert!(!h.tokens.contains(&PAD));
        }
        let total: f64 = list.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn truncated_when_no_eos() {
        let mut p = ModelParams::init(&ModelConfig::tiny(3, 4, 5), 1).unwrap();
        // make <eos> essentially impossible
        let id = p.store().find("output.b0.b").unwrap();
        p.store_mut().get_mut(id).data_mut()[EOS] = -1e3;
        let list = beam_search(&p, &features(2, 3, 1), &BeamConfig { beam_width: 2, n_best: 2, max_len: 3, temperature: 1.0 }).unwrap();
        assert!(list.hypotheses.iter().all(|h| h.truncated && h.tokens.len() == 3));
    }

    #[test]
    fn invalid_beam_config() {
        let p = ModelParams::init(&ModelConfig::tiny(3, 4, 5), 1).unwrap();
        let x = features(2, 3, 1);
        assert!(beam_search(&p, &x, &BeamConfig { beam_width: 1, n_best: 2, max_len: 3, temperature: 1.0 }).is_err());
        assert!(beam_search(&p, &x, &BeamConfig { beam_width: 2, n_best: 2, max_len: 0, temperature: 1.0 }).is_err());
    }

    #[test]
    fn tie_break_is_lexicographic() {
        let h = |t: Vec<usize>| Hypothesis { tokens: t, score: -1.0, truncated: false };
        let list = NBestList::new(vec![h(vec![4, 2]), h(vec![3, 5, 2]), h(vec![3, 2])], 1.0).unwrap();
        let order: Vec<_> = list.hypotheses.iter().map(|h| h.tokens.clone()).collect();
        assert_eq!(order, vec![vec![3, 2], vec![3, 5, 2], vec![4, 2]]);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nbest.tsv");
        let p = ModelParams::init(&ModelConfig::tiny(3, 4, 6), 2).unwrap();
        let lists: Vec<(String, NBestList)> = (0..3)
            .map(|i| {
                let cfg = BeamConfig { beam_width: 4, n_best: 3, max_len: 4, temperature: 1.0 };
                (format!("utt{i}"), beam_search(&p, &features(3, 3, i), &cfg).unwrap())
            })
            .collect();
        let n = write_nbest(&path, &lists).unwrap();
        assert_eq!(n, lists.iter().map(|(_, l)| l.len()).sum::<usize>());
        assert_eq!(read_nbest(&path).unwrap(), lists);

        assert_eq!(write_nbest(&path, &[]).unwrap(), 0);
        assert!(read_nbest(&path).unwrap().is_empty());
    }
}
