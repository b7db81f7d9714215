//! Synthetic unpaired first-person / third-person corpora.
//!
//! An action is a (verb, noun) pair. Its narration embedding is the
//! concatenation of a verb prototype and a noun prototype (each a unit vector
//! of `text_dim / 2` entries) plus per-sample gaussian noise, normalized. Two
//! actions that share a verb or a noun are therefore more similar than two
//! actions that share neither. Frames are rendered through a per-view random
//! matrix, so the same action looks different from the two views.
//!
//! First-person samples draw nouns from the first-person vocabulary
//! `0..n_nouns`. Third-person samples draw nouns from a vocabulary of the same
//! size made of `tpv_noun_set` (the shared nouns, a fraction
//! `noun_overlap_fraction` of the first-person vocabulary) plus third-person
//! only nouns with ids `n_nouns..`. With an overlap of zero no first-person
//! action ever has an exact third-person counterpart.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, write_err};
use crate::numerics::{norm, normalize_slice, RealMatrix, RealVector};
use crate::seed::{rng_from_seed, Rng};

/// Generation knobs for a synthetic world. `seed` is not part of the
/// serialized form: experiments derive it from their own seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub text_dim: usize,
    pub feat_dim: usize,
    pub frames_per_clip: usize,
    pub text_noise_std: f64,
    pub feat_noise_std: f64,
    pub noun_overlap_fraction: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_verbs: 6,
            n_nouns: 8,
            text_dim: 32,
            feat_dim: 24,
            frames_per_clip: 4,
            text_noise_std: 0.2,
            feat_noise_std: 0.3,
            noun_overlap_fraction: 0.25,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_verbs == 0 || self.n_nouns == 0 {
            return bad("n_verbs and n_nouns must be positive");
        }
        if self.n_verbs * self.n_nouns < 2 {
            return bad("n_verbs * n_nouns must be at least 2");
        }
        if self.text_dim < 2 || self.text_dim % 2 != 0 {
            return bad("text_dim must be even and at least 2");
        }
        if self.feat_dim < 2 {
            return bad("feat_dim must be at least 2");
        }
        if self.frames_per_clip == 0 {
            return bad("frames_per_clip must be positive");
        }
        if !(self.text_noise_std >= 0.0 && self.text_noise_std.is_finite()) {
            return bad("text_noise_std must be finite and >= 0");
        }
        if !(self.feat_noise_std >= 0.0 && self.feat_noise_std.is_finite()) {
            return bad("feat_noise_std must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.noun_overlap_fraction) {
            return bad("noun_overlap_fraction must be in [0, 1]");
        }
        Ok(())
    }

    /// Number of first-person nouns also present in the third-person vocabulary.
    pub fn shared_noun_count(&self) -> usize {
        (self.noun_overlap_fraction * self.n_nouns as f64).round() as usize
    }

    /// Total number of distinct noun ids across both views.
    pub fn noun_id_count(&self) -> usize {
        2 * self.n_nouns - self.shared_noun_count()
    }

    /// Size of the shared action label space.
    pub fn n_classes(&self) -> usize {
        self.n_verbs * self.noun_id_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Fpv,
    Tpv,
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            View::Fpv => "fpv",
            View::Tpv => "tpv",
        })
    }
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpv" => Ok(View::Fpv),
            "tpv" => Ok(View::Tpv),
            other => Err(Error::InvalidView(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub verb_prototypes: Vec<RealVector>,
    /// Indexed by noun id; ids `>= n_nouns` are third-person only.
    pub noun_prototypes: Vec<RealVector>,
    pub fpv_render: RealMatrix,
    pub tpv_render: RealMatrix,
    /// Shared nouns, ascending.
    pub tpv_noun_set: Vec<usize>,
}

impl SyntheticWorld {
    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    pub fn action_id(&self, verb: usize, noun: usize) -> usize {
        verb * self.spec.noun_id_count() + noun
    }

    /// Nouns a sample of `view` may carry.
    pub fn noun_pool(&self, view: View) -> Vec<usize> {
        match view {
            View::Fpv => (0..self.spec.n_nouns).collect(),
            View::Tpv => {
                let mut pool = self.tpv_noun_set.clone();
                pool.extend(self.spec.n_nouns..self.spec.noun_id_count());
                pool
            }
        }
    }

    fn render(&self, view: View) -> &RealMatrix {
        match view {
            View::Fpv => &self.fpv_render,
            View::Tpv => &self.tpv_render,
        }
    }

    /// Noise-free concatenated prototype for `(verb, noun)`, not normalized.
    fn action_text(&self, verb: usize, noun: usize) -> Vec<f64> {
        let mut t = self.verb_prototypes[verb].as_slice().to_vec();
        t.extend_from_slice(self.noun_prototypes[noun].as_slice());
        t
    }

    /// Narration embedding for one sample, drawing its noise from `rng`.
    pub fn narration(&self, verb: usize, noun: usize, rng: &mut Rng) -> Result<RealVector> {
        let mut t = self.action_text(verb, noun);
        if self.spec.text_noise_std > 0.0 {
            for x in t.iter_mut() {
                *x += self.spec.text_noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        RealVector::new(normalize_slice(&t)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSample {
    pub id: String,
    pub view: View,
    pub verb_id: usize,
    pub noun_id: usize,
    pub action_id: usize,
    pub frames: RealMatrix,
    pub narration: RealVector,
}

fn unit_gaussian(rng: &mut Rng, dim: usize) -> Result<RealVector> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if norm(&v) > 1e-6 {
            return RealVector::new(normalize_slice(&v)?);
        }
    }
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> RealMatrix {
    RealMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let half = spec.text_dim / 2;
    let verb_prototypes = (0..spec.n_verbs)
        .map(|_| unit_gaussian(&mut rng, half))
        .collect::<Result<Vec<_>>>()?;
    let noun_prototypes = (0..spec.noun_id_count())
        .map(|_| unit_gaussian(&mut rng, half))
        .collect::<Result<Vec<_>>>()?;
    let columns = spec.n_verbs + spec.noun_id_count();
    // Columns have unit expected norm.
    let scale = 1.0 / (spec.feat_dim as f64).sqrt();
    let fpv_render = gaussian_matrix(&mut rng, spec.feat_dim, columns, scale);
    let tpv_render = gaussian_matrix(&mut rng, spec.feat_dim, columns, scale);
    let mut nouns: Vec<usize> = (0..spec.n_nouns).collect();
    nouns.shuffle(&mut rng);
    let mut tpv_noun_set = nouns[..spec.shared_noun_count()].to_vec();
    tpv_noun_set.sort_unstable();
    Ok(SyntheticWorld {
        spec: spec.clone(),
        verb_prototypes,
        noun_prototypes,
        fpv_render,
        tpv_render,
        tpv_noun_set,
    })
}

pub fn sample_dataset(
    world: &SyntheticWorld,
    view: View,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<VideoSample>> {
    if n == 0 {
        return Err(Error::InvalidSpec("dataset size must be at least 1".into()));
    }
    let spec = &world.spec;
    let pool = world.noun_pool(view);
    let render = world.render(view);
    let mut rng = rng_from_seed(rng_seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let verb = rng.random_range(0..spec.n_verbs);
        let noun = pool[rng.random_range(0..pool.len())];
        let mut clean = vec![0.0; spec.feat_dim];
        for (r, c) in clean.iter_mut().enumerate() {
            *c = render.get(r, verb) + render.get(r, spec.n_verbs + noun);
        }
        let frames = RealMatrix::from_fn(spec.frames_per_clip, spec.feat_dim, |_, c| {
            if spec.feat_noise_std > 0.0 {
                clean[c] + spec.feat_noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                clean[c]
            }
        });
        let narration = world.narration(verb, noun, &mut rng)?;
        out.push(VideoSample {
            id: format!("{view}-{i:06}"),
            view,
            verb_id: verb,
            noun_id: noun,
            action_id: world.action_id(verb, noun),
            frames,
            narration,
        });
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_dataset(samples: &[VideoSample], path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        for s in samples {
            serde_json::to_writer(&mut *w, s).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: e.to_string(),
            })?;
            w.write_all(b"\n").map_err(write_err(path))?;
        }
        Ok(())
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<VideoSample>> {
    let file = File::open(path).map_err(write_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(write_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let sample: VideoSample =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let n = sample.narration.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(parse_err(format!("narration norm {n} is not 1")));
        }
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    fn small_spec() -> WorldSpec {
        WorldSpec {
            n_verbs: 3,
            n_nouns: 3,
            text_dim: 8,
            feat_dim: 6,
            frames_per_clip: 3,
            text_noise_std: 0.0,
            feat_noise_std: 0.1,
            noun_overlap_fraction: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn world_is_deterministic() {
        let spec = WorldSpec::default();
        assert_eq!(generate_world(&spec).unwrap(), generate_world(&spec).unwrap());
        let a = sample_dataset(&generate_world(&spec).unwrap(), View::Fpv, 20, 5).unwrap();
        let b = sample_dataset(&generate_world(&spec).unwrap(), View::Fpv, 20, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn world_invariants() {
        let spec = WorldSpec::default();
        let w = generate_world(&spec).unwrap();
        assert_eq!(w.tpv_noun_set.len(), 2);
        assert_ne!(w.fpv_render, w.tpv_render);
        assert_eq!(w.noun_prototypes.len(), spec.noun_id_count());
        let protos: Vec<_> = w.verb_prototypes.iter().chain(&w.noun_prototypes).collect();
        for p in &protos {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
        for (i, a) in w.verb_prototypes.iter().enumerate() {
            for b in &w.verb_prototypes[i + 1..] {
                assert!(dot(a.as_slice(), b.as_slice()) < 1.0 - 1e-9);
            }
        }
        for (i, a) in w.noun_prototypes.iter().enumerate() {
            for b in &w.noun_prototypes[i + 1..] {
                assert!(dot(a.as_slice(), b.as_slice()) < 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small_spec();
        s.n_verbs = 1;
        s.n_nouns = 1;
        assert!(matches!(generate_world(&s), Err(Error::InvalidSpec(_))));
        let mut s = small_spec();
        s.text_dim = 1;
        assert!(generate_world(&s).is_err());
        let mut s = small_spec();
        s.noun_overlap_fraction = 1.5;
        assert!(generate_world(&s).is_err());
        let mut s = small_spec();
        s.feat_noise_std = -0.1;
        assert!(generate_world(&s).is_err());
    }

    #[test]
    fn noiseless_narrations_repeat() {
        let w = generate_world(&small_spec()).unwrap();
        let mut rng = rng_from_seed(0);
        let a = w.narration(1, 2, &mut rng).unwrap();
        let b = w.narration(1, 2, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    /// Enumerates every pair of actions in a 3x3 world and checks that
    /// sharing a factor always beats sharing nothing.
    #[test]
    fn shared_factor_beats_disjoint_exhaustively() {
        let w = generate_world(&small_spec()).unwrap();
        let mut rng = rng_from_seed(0);
        let mut text = vec![vec![RealVector::zeros(1); 3]; 3];
        for v in 0..3 {
            for n in 0..3 {
                text[v][n] = w.narration(v, n, &mut rng).unwrap();
            }
        }
        let sim = |a: (usize, usize), b: (usize, usize)| {
            dot(text[a.0][a.1].as_slice(), text[b.0][b.1].as_slice())
        };
        let mut shared = Vec::new();
        let mut disjoint = Vec::new();
        for a in (0..3).flat_map(|v| (0..3).map(move |n| (v, n))) {
            for b in (0..3).flat_map(|v| (0..3).map(move |n| (v, n))) {
                if a == b {
                    assert!((sim(a, b) - 1.0).abs() < 1e-12);
                } else if a.0 == b.0 || a.1 == b.1 {
                    shared.push(sim(a, b));
                } else {
                    disjoint.push(sim(a, b));
                }
            }
        }
        // Same-verb and same-noun pairs with concatenated unit halves:
        // (1 + cos(other half)) / 2, while disjoint pairs lack the +1.
        let mut same_verb_ok = true;
        for v in 0..3 {
            for n1 in 0..3 {
                for n2 in 0..3 {
                    for v2 in 0..3 {
                        if n1 == n2 || v2 == v {
                            continue;
                        }
                        if sim((v, n1), (v, n2)) <= sim((v, n1), (v2, n2)) {
                            same_verb_ok = false;
                        }
                    }
                }
            }
        }
        assert!(same_verb_ok);
        // Concatenation symmetry: a same-verb similarity equals half of 1 + noun cosine.
        let nc = dot(w.noun_prototypes[0].as_slice(), w.noun_prototypes[1].as_slice());
        assert!((sim((0, 0), (0, 1)) - 0.5 * (1.0 + nc)).abs() < 1e-12);
        let vc = dot(w.verb_prototypes[0].as_slice(), w.verb_prototypes[1].as_slice());
        assert!((sim((0, 2), (1, 2)) - 0.5 * (1.0 + vc)).abs() < 1e-12);
        assert!(!shared.is_empty() && !disjoint.is_empty());
    }

    #[test]
    fn sample_invariants() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let one = sample_dataset(&w, View::Tpv, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        for s in sample_dataset(&w, View::Fpv, 50, 1)
            .unwrap()
            .iter()
            .chain(&one)
        {
            assert!((s.narration.norm() - 1.0).abs() < 1e-12);
            assert_eq!(s.action_id, w.action_id(s.verb_id, s.noun_id));
            assert!(s.frames.is_finite());
            assert_eq!(s.frames.shape(), (4, 24));
            assert!(w.noun_pool(s.view).contains(&s.noun_id));
        }
        assert!(sample_dataset(&w, View::Fpv, 0, 1).is_err());
    }

    #[test]
    fn noiseless_frames_collapse() {
        let mut spec = WorldSpec::default();
        spec.feat_noise_std = 0.0;
        let w = generate_world(&spec).unwrap();
        for s in sample_dataset(&w, View::Fpv, 10, 2).unwrap() {
            for r in 1..s.frames.rows() {
                assert_eq!(s.frames.row(r), s.frames.row(0));
            }
        }
    }

    #[test]
    fn zero_overlap_has_no_exact_matches() {
        let mut spec = WorldSpec::default();
        spec.noun_overlap_fraction = 0.0;
        let w = generate_world(&spec).unwrap();
        assert!(w.tpv_noun_set.is_empty());
        let fpv = sample_dataset(&w, View::Fpv, 300, 1).unwrap();
        let tpv = sample_dataset(&w, View::Tpv, 300, 2).unwrap();
        for f in &fpv {
            for t in &tpv {
                assert_ne!(f.action_id, t.action_id);
            }
        }
    }

    #[test]
    fn view_parsing() {
        assert_eq!("fpv".parse::<View>().unwrap(), View::Fpv);
        assert!(matches!("side".parse::<View>(), Err(Error::InvalidView(_))));
    }
}
