//! Synthetic multilingual image-text corpora.
//!
//! A [`ConceptWorld`] owns a latent inventory of concepts. Each language maps
//! concepts bijectively into its own disjoint block of content tokens, so a
//! translation is an exact remapping. Images are rendered from the concepts of
//! the anchor text: ROI features are noisy concept embeddings, patch features
//! are noisy concept glyphs laid out on a grid with background noise elsewhere.
//!
//! Every sample is drawn from its own RNG stream keyed by `(seed, corpus, index)`,
//! so outputs are a pure function of the world, the spec and the sample index.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};
use crate::model::{ModelConfig, TokenSequence, VisualFeatures, VisualMode, MASK, N_SPECIAL};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WorldConfig {
    pub n_concepts: usize,
    pub n_languages: usize,
    pub render_seed: u64,
    /// Standard deviation of the gaussian noise on ROI pseudo-features.
    pub roi_noise: f64,
    /// Standard deviation of the gaussian noise on patch renders.
    pub patch_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_concepts: 32,
            n_languages: 8,
            render_seed: 11,
            roi_noise: 0.1,
            patch_noise: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn vocab_size(&self) -> usize {
        N_SPECIAL + self.n_languages + self.n_languages * self.n_concepts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Alignment {
    Strict,
    Weak,
}

/// One image with texts in two distinct languages.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTriplet {
    pub id: usize,
    pub image: VisualFeatures,
    pub text_i: TokenSequence,
    pub text_j: TokenSequence,
    pub alignment: Alignment,
    /// Jaccard index of the two concept sets.
    pub concept_overlap: f64,
    pub concepts_i: Vec<usize>,
    pub concepts_j: Vec<usize>,
}

/// Translation-parallel text pair without an image.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelPair {
    pub id: usize,
    pub text_i: TokenSequence,
    pub text_j: TokenSequence,
    pub concepts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CorpusSpec {
    pub n_strict: usize,
    pub n_weak: usize,
    pub n_parallel: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Weights over unordered language pairs `(a, b)`, `a < b`, in
    /// lexicographic order. Empty means uniform.
    pub pair_weights: Vec<f64>,
    /// Bounds of the uniform distribution weak overlaps are drawn from.
    pub weak_overlap_lo: f64,
    pub weak_overlap_hi: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_strict: 2000,
            n_weak: 2000,
            n_parallel: 2000,
            min_len: 4,
            max_len: 8,
            pair_weights: Vec::new(),
            weak_overlap_lo: 0.2,
            weak_overlap_hi: 0.9,
            mask_prob: 0.15,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, world: &ConceptWorld) -> Result<()> {
        if world.n_languages < 2 {
            return Err(config_err!("the world needs at least 2 languages"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(config_err!(
                "data.min_len ({}) must be in 1..=data.max_len ({})",
                self.min_len,
                self.max_len
            ));
        }
        if 2 * self.max_len > world.n_concepts {
            return Err(config_err!(
                "data.max_len ({}) too large for {} concepts",
                self.max_len,
                world.n_concepts
            ));
        }
        for (name, p) in [
            ("data.mask_prob", self.mask_prob),
            ("data.weak_overlap_lo", self.weak_overlap_lo),
            ("data.weak_overlap_hi", self.weak_overlap_hi),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("{name} = {p} is not a probability"));
            }
        }
        if self.weak_overlap_lo > self.weak_overlap_hi {
            return Err(config_err!("data.weak_overlap_lo exceeds data.weak_overlap_hi"));
        }
        let n_pairs = world.n_languages * (world.n_languages - 1) / 2;
        if !self.pair_weights.is_empty() {
            if self.pair_weights.len() != n_pairs {
                return Err(config_err!(
                    "data.pair_weights has {} entries, expected {n_pairs}",
                    self.pair_weights.len()
                ));
            }
            if self.pair_weights.iter().any(|w| !(*w >= 0.0)) || self.pair_weights.iter().sum::<f64>() <= 0.0 {
                return Err(config_err!("data.pair_weights must be non-negative with a positive sum"));
            }
        }
        Ok(())
    }

    /// Normalized weight of each unordered pair, see [`ConceptWorld::language_pairs`].
    pub fn pair_probabilities(&self, world: &ConceptWorld) -> Vec<f64> {
        let n = world.language_pairs().len();
        if self.pair_weights.is_empty() {
            return vec![1.0 / n as f64; n];
        }
        let s: f64 = self.pair_weights.iter().sum();
        self.pair_weights.iter().map(|w| w / s).collect()
    }
}

/// Corpus tags separating RNG streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Strict,
    Weak,
    Parallel,
    HeldoutStrict,
    HeldoutWeak,
}

impl CorpusKind {
    fn tag(self) -> u64 {
        match self {
            CorpusKind::Strict => 0x5354_5249,
            CorpusKind::Weak => 0x5745_414b,
            CorpusKind::Parallel => 0x5041_5241,
            CorpusKind::HeldoutStrict => 0x4853_5452,
            CorpusKind::HeldoutWeak => 0x4857_454b,
        }
    }
}

pub fn sample_rng(seed: u64, kind: CorpusKind, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind.tag().rotate_left(17));
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptWorld {
    pub n_concepts: usize,
    pub n_languages: usize,
    pub render_seed: u64,
    /// `slots[lang][concept]` is the concept's slot inside the language block.
    slots: Vec<Vec<usize>>,
    /// `concepts[lang][slot]`, the inverse of `slots`.
    concepts: Vec<Vec<usize>>,
    roi_embed: Vec<Vec<f64>>,
    glyphs: Vec<Vec<f64>>,
    roi_noise: f64,
    patch_noise: f64,
    k_roi: usize,
    d_roi: usize,
    n_patches: usize,
    d_patch: usize,
}

impl ConceptWorld {
    /// Builds the world; visual dimensions come from the model configuration.
    pub fn new(cfg: &WorldConfig, model: &ModelConfig) -> Result<Self> {
        if cfg.n_concepts < 2 || cfg.n_languages < 1 {
            return Err(config_err!("world needs >= 2 concepts and >= 1 language"));
        }
        if cfg.n_languages != model.n_languages || cfg.vocab_size() != model.vocab_size {
            return Err(config_err!(
                "world ({} languages, vocab {}) does not match model ({} languages, vocab {})",
                cfg.n_languages,
                cfg.vocab_size(),
                model.n_languages,
                model.vocab_size
            ));
        }
        if !(cfg.roi_noise >= 0.0 && cfg.patch_noise >= 0.0) {
            return Err(config_err!("world noise levels must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.render_seed);
        let mut slots = Vec::with_capacity(cfg.n_languages);
        let mut concepts = Vec::with_capacity(cfg.n_languages);
        for _ in 0..cfg.n_languages {
            let mut inv: Vec<usize> = (0..cfg.n_concepts).collect();
            inv.shuffle(&mut rng);
            let mut fwd = vec![0; cfg.n_concepts];
            for (slot, &c) in inv.iter().enumerate() {
                fwd[c] = slot;
            }
            slots.push(fwd);
            concepts.push(inv);
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let roi_embed = (0..cfg.n_concepts)
            .map(|_| (0..model.d_roi).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let glyphs = (0..cfg.n_concepts)
            .map(|_| {
                (0..model.d_patch)
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        Ok(Self {
            n_concepts: cfg.n_concepts,
            n_languages: cfg.n_languages,
            render_seed: cfg.render_seed,
            slots,
            concepts,
            roi_embed,
            glyphs,
            roi_noise: cfg.roi_noise,
            patch_noise: cfg.patch_noise,
            k_roi: model.k_roi,
            d_roi: model.d_roi,
            n_patches: model.n_patches,
            d_patch: model.d_patch,
        })
    }

    fn lang_base(&self, lang: usize) -> usize {
        N_SPECIAL + self.n_languages + lang * self.n_concepts
    }

    /// Content token of `concept` in `lang`.
    pub fn token(&self, lang: usize, concept: usize) -> usize {
        self.lang_base(lang) + self.slots[lang][concept]
    }

    /// `(language, concept)` of a content token.
    pub fn concept_of(&self, token: usize) -> Option<(usize, usize)> {
        let base = N_SPECIAL + self.n_languages;
        if token < base || token >= base + self.n_languages * self.n_concepts {
            return None;
        }
        let lang = (token - base) / self.n_concepts;
        let slot = (token - base) % self.n_concepts;
        Some((lang, self.concepts[lang][slot]))
    }

    pub fn render_text(&self, lang: usize, concepts: &[usize]) -> TokenSequence {
        let content: Vec<usize> = concepts.iter().map(|&c| self.token(lang, c)).collect();
        TokenSequence::new(lang, &content)
    }

    /// Remaps a text's content into `lang`. `[MASK]` stays `[MASK]`.
    pub fn translate(&self, text: &TokenSequence, lang: usize) -> TokenSequence {
        let content: Vec<usize> = text
            .content()
            .iter()
            .map(|&t| match self.concept_of(t) {
                Some((_, c)) => self.token(lang, c),
                None => t,
            })
            .collect();
        TokenSequence::new(lang, &content)
    }

    /// Unordered language pairs `(a, b)` with `a < b`, lexicographic.
    pub fn language_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.n_languages {
            for b in a + 1..self.n_languages {
                out.push((a, b));
            }
        }
        out
    }

    /// Renders an image from the anchor concepts. Both feature blocks are
    /// filled; `mode` only records which one the encoder should use.
    pub fn render_image(&self, concepts: &[usize], mode: VisualMode, rng: &mut ChaCha8Rng) -> VisualFeatures {
        let roi_n = Normal::new(0.0, self.roi_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let patch_n = Normal::new(0.0, self.patch_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let mut roi = Vec::with_capacity(self.k_roi * self.d_roi);
        for r in 0..self.k_roi {
            let c = concepts[r % concepts.len()];
            roi.extend(self.roi_embed[c].iter().map(|&v| v + roi_n.sample(rng)));
        }
        let mut patches = Vec::with_capacity(self.n_patches * self.d_patch);
        for p in 0..self.n_patches {
            match concepts.get(p) {
                Some(&c) => patches.extend(self.glyphs[c].iter().map(|&v| v + patch_n.sample(rng))),
                None => patches.extend((0..self.d_patch).map(|_| patch_n.sample(rng))),
            }
        }
        VisualFeatures {
            mode,
            roi: Some(Tensor::matrix(self.k_roi, self.d_roi, roi).expect("sized")),
            patches: Some(Tensor::matrix(self.n_patches, self.d_patch, patches).expect("sized")),
        }
    }

    fn draw_concepts(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut all: Vec<usize> = (0..self.n_concepts).collect();
        let (picked, _) = all.partial_shuffle(rng, len);
        picked.to_vec()
    }

    fn draw_pair(&self, probs: &[f64], rng: &mut ChaCha8Rng) -> (usize, usize) {
        let pairs = self.language_pairs();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = pairs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        let (a, b) = pairs[pick];
        if rng.random_bool(0.5) {
            (a, b)
        } else {
            (b, a)
        }
    }
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Chooses `(len_j, kept)` so that a set of `len_i` concepts and a set of
/// `len_j` concepts sharing `kept` of them have the Jaccard index nearest to
/// `target`, excluding identical sets. Ties prefer `len_j` close to `len_i`,
/// then the shorter set, then fewer shared concepts.
pub fn nearest_overlap(len_i: usize, target: f64, min_len: usize, max_len: usize, n_concepts: usize) -> (usize, usize) {
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for m in min_len..=max_len {
        for k in 0..=len_i.min(m) {
            if k == len_i && k == m {
                continue;
            }
            if m - k > n_concepts - len_i {
                continue;
            }
            let j = k as f64 / (len_i + m - k) as f64;
            let key = (libm::fabs(j - target), m.abs_diff(len_i), m, k);
            let better = match best {
                None => true,
                Some(b) => key.0 < b.0 || (key.0 == b.0 && (key.1, key.2, key.3) < (b.1, b.2, b.3)),
            };
            if better {
                best = Some(key);
            }
        }
    }
    let (_, _, m, k) = best.expect("at least one non-identical configuration exists");
    (m, k)
}

fn strict_triplet(world: &ConceptWorld, spec: &CorpusSpec, probs: &[f64], id: usize, rng: &mut ChaCha8Rng) -> AlignedTriplet {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let concepts = world.draw_concepts(len, rng);
    let (li, lj) = world.draw_pair(probs, rng);
    let image = world.render_image(&concepts, VisualMode::Roi, rng);
    AlignedTriplet {
        id,
        image,
        text_i: world.render_text(li, &concepts),
        text_j: world.render_text(lj, &concepts),
        alignment: Alignment::Strict,
        concept_overlap: 1.0,
        concepts_i: concepts.clone(),
        concepts_j: concepts,
    }
}

/// `concepts` with all but `k` positions resampled in place to fresh concepts,
/// resized to `m`: surplus resampled positions are dropped, missing ones are
/// inserted at uniform positions. Kept concepts keep their relative order.
fn resample(world: &ConceptWorld, concepts: &[usize], m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = concepts.len();
    let mut keep = vec![false; n];
    for i in sample(rng, n, k) {
        keep[i] = true;
    }
    let mut fresh: Vec<usize> = (0..world.n_concepts).filter(|c| !concepts.contains(c)).collect();
    let (fresh, _) = fresh.partial_shuffle(rng, m - k);
    let mut fresh = fresh.iter().copied();
    // replaced positions beyond the m - k budget are dropped
    let mut budget = m - k;
    let mut out = Vec::with_capacity(m);
    for (i, &c) in concepts.iter().enumerate() {
        if keep[i] {
            out.push(c);
        } else if budget > 0 {
            budget -= 1;
            out.push(fresh.next().expect("m - k fresh concepts"));
        }
    }
    for c in fresh {
        let at = rng.random_range(0..=out.len());
        out.insert(at, c);
    }
    out
}

fn weak_triplet(world: &ConceptWorld, spec: &CorpusSpec, probs: &[f64], id: usize, rng: &mut ChaCha8Rng) -> AlignedTriplet {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let concepts_i = world.draw_concepts(len, rng);
    let (li, lj) = world.draw_pair(probs, rng);
    let target = if spec.weak_overlap_hi > spec.weak_overlap_lo {
        rng.random_range(spec.weak_overlap_lo..=spec.weak_overlap_hi)
    } else {
        spec.weak_overlap_lo
    };
    let (m, k) = nearest_overlap(len, target, spec.min_len, spec.max_len, world.n_concepts);
    let concepts_j = resample(world, &concepts_i, m, k, rng);
    let image = world.render_image(&concepts_i, VisualMode::Patch, rng);
    AlignedTriplet {
        id,
        image,
        text_i: world.render_text(li, &concepts_i),
        text_j: world.render_text(lj, &concepts_j),
        alignment: Alignment::Weak,
        concept_overlap: jaccard(&concepts_i, &concepts_j),
        concepts_i,
        concepts_j,
    }
}

/// Strictly aligned image-caption triplets (ROI mode).
pub fn gen_strict(world: &ConceptWorld, spec: &CorpusSpec) -> Result<Vec<AlignedTriplet>> {
    gen_strict_as(world, spec, CorpusKind::Strict, spec.n_strict)
}

pub fn gen_strict_as(world: &ConceptWorld, spec: &CorpusSpec, kind: CorpusKind, n: usize) -> Result<Vec<AlignedTriplet>> {
    spec.validate(world)?;
    let probs = spec.pair_probabilities(world);
    Ok((0..n)
        .map(|i| strict_triplet(world, spec, &probs, i, &mut sample_rng(spec.seed, kind, i)))
        .collect())
}

/// Weakly aligned triplets (PATCH mode) with recorded concept overlap.
pub fn gen_weak(world: &ConceptWorld, spec: &CorpusSpec) -> Result<Vec<AlignedTriplet>> {
    gen_weak_as(world, spec, CorpusKind::Weak, spec.n_weak)
}

pub fn gen_weak_as(world: &ConceptWorld, spec: &CorpusSpec, kind: CorpusKind, n: usize) -> Result<Vec<AlignedTriplet>> {
    spec.validate(world)?;
    let probs = spec.pair_probabilities(world);
    Ok((0..n)
        .map(|i| weak_triplet(world, spec, &probs, i, &mut sample_rng(spec.seed, kind, i)))
        .collect())
}

/// Parallel text pairs in distinct languages.
pub fn gen_parallel_text(world: &ConceptWorld, spec: &CorpusSpec) -> Result<Vec<ParallelPair>> {
    spec.validate(world)?;
    let probs = spec.pair_probabilities(world);
    Ok((0..spec.n_parallel)
        .map(|i| {
            let rng = &mut sample_rng(spec.seed, CorpusKind::Parallel, i);
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let concepts = world.draw_concepts(len, rng);
            let (li, lj) = world.draw_pair(&probs, rng);
            ParallelPair {
                id: i,
                text_i: world.render_text(li, &concepts),
                text_j: world.render_text(lj, &concepts),
                concepts,
            }
        })
        .collect())
}

/// Replaces content tokens with `[MASK]` independently with probability
/// `mask_prob`; when nothing was drawn, one uniformly chosen content token is
/// masked. Returns the masked text and the masked positions (indices into
/// [`TokenSequence::tokens`]).
pub fn apply_mask<R: Rng + ?Sized>(x: &TokenSequence, mask_prob: f64, rng: &mut R) -> (TokenSequence, Vec<usize>) {
    let mut out = x.clone();
    let n = out.content().len();
    let mut positions = Vec::new();
    if n == 0 {
        return (out, positions);
    }
    for (i, t) in out.content_mut().iter_mut().enumerate() {
        if rng.random_bool(mask_prob) {
            *t = MASK;
            positions.push(i + TokenSequence::CONTENT_OFFSET);
        }
    }
    if positions.is_empty() {
        let i = rng.random_range(0..n);
        out.content_mut()[i] = MASK;
        positions.push(i + TokenSequence::CONTENT_OFFSET);
    }
    (out, positions)
}

/// All three training corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub strict: Vec<AlignedTriplet>,
    pub weak: Vec<AlignedTriplet>,
    pub parallel: Vec<ParallelPair>,
}

impl Corpora {
    pub fn generate(world: &ConceptWorld, spec: &CorpusSpec) -> Result<Self> {
        Ok(Self {
            strict: gen_strict(world, spec)?,
            weak: gen_weak(world, spec)?,
            parallel: gen_parallel_text(world, spec)?,
        })
    }
}
