//! Edit-distance error rates and the metrics record format.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::NBestList;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_len as f64
    }
}

impl std::ops::Add for ErrorCounts {
    type Output = ErrorCounts;

    fn add(self, o: ErrorCounts) -> ErrorCounts {
        ErrorCounts {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

/// Levenshtein alignment under unit costs.
///
/// Among minimal alignments the backtrace prefers substitution (or match),
/// then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<ErrorCounts> {
    if reference.is_empty() {
        return Err(Error::invalid("edit_distance needs a non-empty reference"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = ErrorCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[(i - 1) * w + j - 1] + mismatch == here {
                counts.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    Ok(counts)
}

/// Pooled error rate: total errors over total reference length.
pub fn corpus_error_rate<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("corpus_error_rate needs at least one pair"));
    }
    let mut total = ErrorCounts::default();
    for (r, h) in pairs {
        total = total + edit_distance(r, h)?;
    }
    Ok(total.rate())
}

/// Pooled error rate of the best hypothesis (fewest errors) in each list.
///
/// Hypothesis tokens are compared without their trailing `<eos>`.
pub fn nbest_oracle_error_rate(refs: &[&[usize]], lists: &[NBestList]) -> Result<f64> {
    if refs.len() != lists.len() || refs.is_empty() {
        return Err(Error::invalid("nbest_oracle_error_rate needs one non-empty list per reference"));
    }
    let mut total = ErrorCounts::default();
    for (r, list) in refs.iter().zip(lists) {
        if list.is_empty() {
            return Err(Error::invalid("empty N-best list"));
        }
        let best = list
            .hypotheses
            .iter()
            .map(|h| edit_distance(r, h.symbols()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .min_by_key(|c| c.errors())
            .expect("non-empty");
        total = total + best;
    }
    Ok(total.rate())
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub method: String,
    pub seed: u64,
    pub iteration: usize,
    pub cer: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_best_cer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_cer: Option<f64>,
    /// Marks the CER of the model a run returns.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_final: bool,
}

/// Appends records as JSON lines.
pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("metrics record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Hypothesis;
    use crate::model::EOS;
    use proptest::prelude::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn identical_and_empty() {
        let c = edit_distance(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!(c.errors(), 0);
        let c = edit_distance(&[1, 2, 3], &[]).unwrap();
        assert_eq!((c.deletions, c.errors()), (3, 3));
        assert!(edit_distance::<u8>(&[], &[1]).is_err());
    }

    #[test]
    fn kitten_sitting() {
        let c = edit_distance(&chars("kitten"), &chars("sitting")).unwrap();
        assert_eq!(c.errors(), 3);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (2, 1, 0));
    }

    #[test]
    fn substitution_preferred_over_indel_pair() {
        let c = edit_distance(&[1, 2], &[1, 3]).unwrap();
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
    }

    #[test]
    fn pooled_rates() {
        let a = [1, 2, 3, 4, 5];
        let b = [1, 2, 3, 4, 6];
        let long: Vec<i32> = (0..15).collect();
        let pooled = corpus_error_rate(&[(&a[..], &b[..]), (&long[..], &long[..])]).unwrap();
        assert!((pooled - 0.05).abs() < 1e-15);

        let r: Vec<i32> = (0..10).collect();
        let mut h = r.clone();
        h[0] = 99;
        h[1] = 98;
        h.pop();
        assert!((corpus_error_rate(&[(&r[..], &h[..])]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(corpus_error_rate(&[(&r[..], &r[..])]).unwrap(), 0.0);
    }

    fn list(seqs: &[&[usize]]) -> NBestList {
        let hyps = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut t = s.to_vec();
                t.push(EOS);
                Hypothesis {
                    tokens: t,
                    score: -(i as f64) - 0.1,
                    truncated: false,
                }
            })
            .collect();
        NBestList::new(hyps, 1.0).unwrap()
    }

    #[test]
    fn oracle_rate() {
        let r1: &[usize] = &[3, 4, 5];
        let r2: &[usize] = &[6, 7];
        let l1 = list(&[&[3, 4, 4], &[3, 4, 5]]);
        let l2 = list(&[&[6, 7], &[6]]);
        assert_eq!(nbest_oracle_error_rate(&[r1, r2], &[l1.clone(), l2.clone()]).unwrap(), 0.0);
        let one = nbest_oracle_error_rate(&[r1, r2], &[l1.truncate(1).unwrap(), l2.truncate(1).unwrap()]).unwrap();
        let direct = corpus_error_rate(&[(r1, &[3usize, 4, 4][..]), (r2, &[6usize, 7][..])]).unwrap();
        assert_eq!(one, direct);
    }

    #[test]
    fn metrics_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = vec![
            MetricsRecord { experiment: "e".into(), method: "mll".into(), seed: 1, iteration: 0, cer: 0.25, one_best_cer: Some(0.3), oracle_cer: Some(0.2), is_final: false },
            MetricsRecord { experiment: "e".into(), method: "seed".into(), seed: 1, iteration: 0, cer: 0.4, one_best_cer: None, oracle_cer: None, is_final: true },
        ];
        append_metrics(&p, &recs).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), recs);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in prop::collection::vec(0u8..4, 1..8),
                               b in prop::collection::vec(0u8..4, 1..8),
                               c in prop::collection::vec(0u8..4, 1..8)) {
            let ac = edit_distance(&a, &c).unwrap().errors();
            let ab = edit_distance(&a, &b).unwrap().errors();
            let bc = edit_distance(&b, &c).unwrap().errors();
            prop_assert!(ac <= ab + bc);
        }

        #[test]
        fn swapped_arguments_swap_insertions_and_deletions(a in prop::collection::vec(0u8..4, 1..8),
                                                           b in prop::collection::vec(0u8..4, 1..8)) {
            let ab = edit_distance(&a, &b).unwrap();
            let ba = edit_distance(&b, &a).unwrap();
            prop_assert_eq!(ab.errors(), ba.errors());
            prop_assert_eq!(ab.insertions as i64 - ab.deletions as i64, ba.deletions as i64 - ba.insertions as i64);
        }

        #[test]
        fn oracle_is_non_increasing_in_n(r in prop::collection::vec(3usize..7, 1..6),
                                          hs in prop::collection::vec(prop::collection::vec(3usize..7, 0..6), 1..5)) {
            let refs: Vec<&[usize]> = vec![&r];
            let seqs: Vec<&[usize]> = hs.iter().map(|h| h.as_slice()).collect();
            let full = list(&seqs);
            let mut prev = f64::INFINITY;
            for n in 1..=full.len() {
                let rate = nbest_oracle_error_rate(&refs, &[full.truncate(n).unwrap()]).unwrap();
                prop_assert!(rate <= prev);
                prev = rate;
            }
        }
    }
}
