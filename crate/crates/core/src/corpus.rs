//! Synthetic frame-emission corpora with a controllable domain shift.
//!
//! Every symbol owns an emission prototype in feature space. An utterance is a
//! random symbol string (no symbol repeats back-to-back, so segment
//! boundaries are recoverable); each symbol emits a few frames of
//! `prototype + speaker offset + Gaussian noise`. The shifted domain rotates
//! every prototype in consecutive coordinate planes and adds a fixed
//! per-symbol perturbation, standing in for an accent change.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{EOS, NUM_SPECIALS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Seed,
    Shifted,
}

impl Domain {
    fn tag(self) -> &'static str {
        match self {
            Domain::Seed => "seed",
            Domain::Shifted => "shifted",
        }
    }

    fn parse(s: &str) -> Option<Domain> {
        match s {
            "seed" => Some(Domain::Seed),
            "shifted" => Some(Domain::Shifted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// One character per symbol; token ids start after the specials.
    pub alphabet: String,
    pub feature_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub noise: f64,
    /// Rotation applied to every prototype in the shifted domain, in degrees.
    pub shift_angle_deg: f64,
    /// Norm of the fixed per-symbol offset added in the shifted domain.
    pub shift_perturbation: f64,
    pub len_min: usize,
    pub len_max: usize,
    /// Standard deviation of each speaker's constant feature offset.
    pub speaker_jitter: f64,
    /// Seeds the prototypes and the shift.
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            alphabet: "abcdefghi".into(),
            feature_dim: 16,
            frames_min: 2,
            frames_max: 4,
            noise: 0.3,
            shift_angle_deg: 50.0,
            shift_perturbation: 1.0,
            len_min: 3,
            len_max: 8,
            speaker_jitter: 0.1,
            seed: 7,
        }
    }
}

/// One utterance: `[K, D]` features and an optional reference ending in `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: Option<String>,
    pub features: Tensor,
    pub reference: Option<Vec<usize>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    /// Reference symbols without the trailing `<eos>`.
    pub fn symbols(&self) -> Option<&[usize]> {
        self.reference.as_deref().map(|r| match r.last() {
            Some(&EOS) => &r[..r.len() - 1],
            _ => r,
        })
    }

    /// Copy without the reference, as handed to unsupervised training.
    pub fn unlabeled(&self) -> Utterance {
        Utterance {
            reference: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

impl TaskSpec {
    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS + self.alphabet.chars().count()
    }

    pub fn num_symbols(&self) -> usize {
        self.alphabet.chars().count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_symbols();
        if n < 2 {
            return Err(Error::config("task.alphabet needs at least two symbols"));
        }
        let unique: std::collections::BTreeSet<char> = self.alphabet.chars().collect();
        if unique.len() != n {
            return Err(Error::config("task.alphabet has repeated characters"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("task.feature_dim must be positive"));
        }
        if self.frames_min == 0 || self.frames_max < self.frames_min {
            return Err(Error::config("task needs 1 <= frames_min <= frames_max"));
        }
        if self.len_min == 0 || self.len_max < self.len_min {
            return Err(Error::config("task needs 1 <= len_min <= len_max"));
        }
        if !(self.noise >= 0.0) || !(self.speaker_jitter >= 0.0) || !(self.shift_perturbation >= 0.0) {
            return Err(Error::config("task noise, jitter and perturbation must be non-negative"));
        }
        let protos = self.prototypes(Domain::Seed);
        for a in 0..n {
            for b in a + 1..n {
                let d = dist(protos.row(a), protos.row(b));
                if d <= 4.0 * self.noise {
                    return Err(Error::config(format!(
                        "prototypes {a} and {b} are {d:.3} apart, not more than 4σ = {:.3}",
                        4.0 * self.noise
                    )));
                }
            }
        }
        Ok(())
    }

    /// `[num_symbols, D]` emission prototypes for a domain.
    pub fn prototypes(&self, domain: Domain) -> Tensor {
        let (n, d) = (self.num_symbols(), self.feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        if domain == Domain::Shifted {
            let (s, c) = self.shift_angle_deg.to_radians().sin_cos();
            let mut prng = ChaCha8Rng::seed_from_u64(self.seed);
            prng.set_stream(1);
            for row in data.chunks_mut(d) {
                for pair in row.chunks_exact_mut(2) {
                    let (x, y) = (pair[0], pair[1]);
                    pair[0] = c * x - s * y;
                    pair[1] = s * x + c * y;
                }
                let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut prng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (v, u) in row.iter_mut().zip(&dir) {
                    *v += self.shift_perturbation * u / norm;
                }
            }
        }
        Tensor::new(vec![n, d], data).expect("prototype shape")
    }

    pub fn symbol_char(&self, token: usize) -> Option<char> {
        token.checked_sub(NUM_SPECIALS).and_then(|i| self.alphabet.chars().nth(i))
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != EOS)
            .map(|&t| self.symbol_char(t).unwrap_or('?'))
            .collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn domain_salt(domain: Domain) -> u64 {
    match domain {
        Domain::Seed => 0x5eed_0000,
        Domain::Shifted => 0x5417_0000,
    }
}

/// Generates `n_utterances` labeled utterances assigned round-robin to `n_speakers`.
///
/// Utterance `i` draws from its own RNG stream derived from `(seed, domain, i)`,
/// so the output does not depend on generation order.
pub fn generate(spec: &TaskSpec, domain: Domain, n_utterances: usize, n_speakers: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n_utterances == 0 || n_speakers == 0 {
        return Err(Error::invalid("generate needs at least one utterance and one speaker"));
    }
    let protos = spec.prototypes(domain);
    let d = spec.feature_dim;
    let n_sym = spec.num_symbols();
    let base = seed ^ domain_salt(domain);

    let speaker_offsets: Vec<Vec<f64>> = (0..n_speakers)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(base);
            rng.set_stream(1 << 40 | s as u64);
            (0..d)
                .map(|_| spec.speaker_jitter * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect();

    let utterances = (0..n_utterances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base);
            rng.set_stream(i as u64);
            let len = rng.gen_range(spec.len_min..=spec.len_max);
            let mut symbols: Vec<usize> = Vec::with_capacity(len);
            for _ in 0..len {
                let s = match symbols.last() {
                    None => rng.gen_range(0..n_sym),
                    Some(&prev) => {
                        let s = rng.gen_range(0..n_sym - 1);
                        if s >= prev {
                            s + 1
                        } else {
                            s
                        }
                    }
                };
                symbols.push(s);
            }
            let spk = i % n_speakers;
            let mut data = Vec::new();
            for &s in &symbols {
                let frames = rng.gen_range(spec.frames_min..=spec.frames_max);
                for _ in 0..frames {
                    for (&p, &o) in protos.row(s).iter().zip(&speaker_offsets[spk]) {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        data.push(p + o + spec.noise * noise);
                    }
                }
            }
            let k = data.len() / d;
            let mut reference: Vec<usize> = symbols.iter().map(|s| s + NUM_SPECIALS).collect();
            reference.push(EOS);
            Ok(Utterance {
                id: format!("{}-{i:05}", domain.tag()),
                speaker: Some(format!("spk{spk:03}")),
                features: Tensor::new(vec![k, d], data)?,
                reference: Some(reference),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        domain,
        feature_dim: d,
        utterances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Scale all features by U(0.8, 1.25).
    pub amplitude: bool,
    /// Resample the frame axis by a factor U(0.9, 1.1).
    pub speed: bool,
    /// Standard deviation of additive feature noise (0 disables).
    pub noise: f64,
}

/// Resamples the frame axis: output length is `round(K / factor)` and output
/// frame `j` copies input frame `min(K-1, floor(j·factor))`.
pub fn resample_frames(features: &Tensor, factor: f64) -> Tensor {
    let (k, d) = (features.shape()[0], features.shape()[1]);
    let out_k = ((k as f64 / factor).round() as usize).max(1);
    let mut data = Vec::with_capacity(out_k * d);
    for j in 0..out_k {
        let src = ((j as f64 * factor).floor() as usize).min(k - 1);
        data.extend_from_slice(features.row(src));
    }
    Tensor::new(vec![out_k, d], data).expect("resample shape")
}

pub fn scale_amplitude(features: &Tensor, scale: f64) -> Tensor {
    if scale == 1.0 {
        return features.clone();
    }
    let data = features.data().iter().map(|v| v * scale).collect();
    Tensor::new(features.shape().to_vec(), data).expect("same shape")
}

/// Feature-domain augmentation; target tokens are left untouched.
pub fn augment(utt: &Utterance, config: &AugmentConfig, rng: &mut impl Rng) -> Utterance {
    let mut features = utt.features.clone();
    if config.amplitude {
        features = scale_amplitude(&features, rng.gen_range(0.8..1.25));
    }
    if config.speed {
        features = resample_frames(&features, rng.gen_range(0.9..1.1));
    }
    if config.noise > 0.0 {
        for v in features.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += config.noise * n;
        }
    }
    Utterance {
        features,
        ..utt.clone()
    }
}

const HEADER: &str = "# nbsl-dataset v1";

/// Line-delimited text format:
///
/// ```text
/// # nbsl-dataset v1 domain=<seed|shifted> feature_dim=<D> count=<N>
/// utt <id> <speaker|-> <domain> <K> <token ids comma-separated|->
/// <K lines of D space-separated values>
/// ```
///
/// Values use the shortest representation that parses back to the same `f64`.
pub fn save(dataset: &Dataset, path: &Path) -> Result<usize> {
    let mut out = format!(
        "{HEADER} domain={} feature_dim={} count={}\n",
        dataset.domain.tag(),
        dataset.feature_dim,
        dataset.len()
    );
    for u in &dataset.utterances {
        if u.id.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("utterance id `{}` contains whitespace", u.id)));
        }
        let toks = match &u.reference {
            Some(r) => r.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
            None => "-".into(),
        };
        writeln!(
            out,
            "utt {} {} {} {} {}",
            u.id,
            u.speaker.as_deref().unwrap_or("-"),
            dataset.domain.tag(),
            u.frames(),
            toks
        )
        .expect("string write");
        for t in 0..u.frames() {
            let row: Vec<String> = u.features.row(t).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    let bytes = out.len();
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn load(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p = path.display().to_string();
    let err = |line: usize, msg: String| Error::Parse {
        path: p.clone(),
        line,
        msg,
    };
    let lines: Vec<&str> = text.lines().collect();
    let header = lines.first().ok_or_else(|| err(1, "missing header".into()))?;
    let rest = header
        .strip_prefix(HEADER)
        .ok_or_else(|| err(1, "not a dataset file".into()))?;
    let mut domain = None;
    let mut feature_dim = None;
    let mut count = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("domain", v)) => domain = Domain::parse(v),
            Some(("feature_dim", v)) => feature_dim = v.parse::<usize>().ok(),
            Some(("count", v)) => count = v.parse::<usize>().ok(),
            _ => return Err(err(1, format!("unexpected header field `{kv}`"))),
        }
    }
    let (domain, d, count) = match (domain, feature_dim, count) {
        (Some(a), Some(b), Some(c)) if b > 0 => (a, b, c),
        _ => return Err(err(1, "header needs domain, feature_dim and count".into())),
    };
    let mut utterances = Vec::with_capacity(count);
    let mut i = 1;
    while utterances.len() < count {
        let ln = i + 1;
        let line = lines
            .get(i)
            .ok_or_else(|| err(ln, format!("expected {count} utterances, found {}", utterances.len())))?;
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 6 || f[0] != "utt" {
            return Err(err(ln, "expected `utt <id> <speaker> <domain> <frames> <tokens>`".into()));
        }
        if Domain::parse(f[3]).is_none() {
            return Err(err(ln, format!("unknown domain `{}`", f[3])));
        }
        let k: usize = f[4].parse().map_err(|_| err(ln, "bad frame count".into()))?;
        if k == 0 {
            return Err(err(ln, "utterance has no frames".into()));
        }
        let reference = match f[5] {
            "-" => None,
            s => Some(
                s.split(',')
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err(ln, "bad token id".into()))?,
            ),
        };
        let mut data = Vec::with_capacity(k * d);
        for r in 0..k {
            let fl = i + 2 + r;
            let row = lines
                .get(i + 1 + r)
                .ok_or_else(|| err(fl, format!("file ends inside utterance `{}`", f[1])))?;
            let before = data.len();
            for v in row.split(' ') {
                data.push(v.parse::<f64>().map_err(|_| err(fl, format!("bad value `{v}`")))?);
            }
            if data.len() - before != d {
                return Err(err(fl, format!("expected {d} values, found {}", data.len() - before)));
            }
        }
        utterances.push(Utterance {
            id: f[1].to_string(),
            speaker: (f[2] != "-").then(|| f[2].to_string()),
            features: Tensor::new(vec![k, d], data)?,
            reference,
        });
        i += 1 + k;
    }
    if let Some(extra) = lines.get(i).filter(|l| !l.is_empty()) {
        return Err(err(i + 1, format!("unexpected trailing content `{extra}`")));
    }
    Ok(Dataset {
        domain,
        feature_dim: d,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest(protos: &Tensor, frame: &[f64]) -> usize {
        (0..protos.shape()[0])
            .min_by(|&a, &b| dist(protos.row(a), frame).partial_cmp(&dist(protos.row(b), frame)).unwrap())
            .unwrap()
    }

    #[test]
    fn noiseless_frames_are_prototypes() {
        let spec = TaskSpec {
            noise: 0.0,
            frames_min: 1,
            frames_max: 1,
            speaker_jitter: 0.0,
            ..TaskSpec::default()
        };
        let ds = generate(&spec, Domain::Seed, 20, 3, 1).unwrap();
        let protos = spec.prototypes(Domain::Seed);
        for u in &ds.utterances {
            let syms = u.symbols().unwrap();
            assert_eq!(syms.len(), u.frames());
            for (t, &s) in syms.iter().enumerate() {
                assert_eq!(u.features.row(t), protos.row(s - NUM_SPECIALS));
                assert_eq!(nearest(&protos, u.features.row(t)), s - NUM_SPECIALS);
            }
        }
    }

    #[test]
    fn identity_shift_matches_seed_domain() {
        let spec = TaskSpec {
            shift_angle_deg: 0.0,
            shift_perturbation: 0.0,
            ..TaskSpec::default()
        };
        assert_eq!(spec.prototypes(Domain::Seed), spec.prototypes(Domain::Shifted));
    }

    #[test]
    fn generation_is_reproducible_and_order_free() {
        let spec = TaskSpec::default();
        let a = generate(&spec, Domain::Shifted, 30, 4, 9).unwrap();
        let b = generate(&spec, Domain::Shifted, 30, 4, 9).unwrap();
        assert_eq!(a, b);
        let longer = generate(&spec, Domain::Shifted, 40, 4, 9).unwrap();
        assert_eq!(&longer.utterances[..30], &a.utterances[..]);
        assert_eq!(a.utterances[5].speaker.as_deref(), Some("spk001"));
        for u in &a.utterances {
            let s = u.symbols().unwrap();
            assert!(s.windows(2).all(|w| w[0] != w[1]));
            assert!((spec.len_min..=spec.len_max).contains(&s.len()));
            assert!(u.features.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = TaskSpec {
            noise: 10.0,
            ..TaskSpec::default()
        };
        assert!(generate(&spec, Domain::Seed, 1, 1, 0).is_err());
        let spec = TaskSpec {
            frames_min: 0,
            ..TaskSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn augmentation_rules() {
        let ds = generate(&TaskSpec::default(), Domain::Seed, 1, 1, 0).unwrap();
        let u = &ds.utterances[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(&augment(u, &AugmentConfig::default(), &mut rng), u);
        assert_eq!(scale_amplitude(&u.features, 1.0), u.features);
        let long = Tensor::zeros(&[100, 2]);
        assert_eq!(resample_frames(&long, 1.1).shape(), &[91, 2]);
        let all = AugmentConfig { amplitude: true, speed: true, noise: 0.1 };
        let a = augment(u, &all, &mut rng);
        assert_eq!(a.reference, u.reference);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let mut ds = generate(&TaskSpec::default(), Domain::Shifted, 5, 2, 3).unwrap();
        ds.utterances[1].reference = None;
        ds.utterances[2].speaker = None;
        save(&ds, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ds);

        let empty = Dataset { domain: Domain::Seed, feature_dim: 4, utterances: vec![] };
        save(&empty, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
        assert_eq!(load(&path).unwrap(), empty);

        save(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().collect();
        let keep = cut.len() - 3;
        fs::write(&path, cut[..keep].join("\n")).unwrap();
        let msg = load(&path).unwrap_err().to_string();
        assert!(msg.contains(&format!(":{}:", keep + 1)), "{msg}");
    }
}
