//! Evaluation: retrieval Recall@1, matching accuracy, cloze accuracy and the
//! regularization probe. Everything here runs on frozen parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::model::{Model, TokenSequence, VisualFeatures};
use crate::objectives::itm_pairs;
use crate::synthdata::{apply_mask, AlignedTriplet, Alignment, ConceptWorld};
use crate::tensor::{dist, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::ImageToText => "image_to_text",
            Direction::TextToImage => "text_to_image",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetrievalResult {
    pub direction: Direction,
    pub recall_at_1: f64,
    pub n_queries: usize,
    pub candidate_set_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetrievalSummary {
    pub image_to_text: RetrievalResult,
    pub text_to_image: RetrievalResult,
    pub average: f64,
}

/// How a (query, candidate) pair is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scorer {
    /// Euclidean VtR distance to the anchor-encoded pair.
    Distance,
    /// Negated matching-head logit.
    ItmHead,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalOptions {
    pub k_candidates: usize,
    pub n_queries: usize,
    pub scorer: Scorer,
    pub seed: u64,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self {
            k_candidates: 32,
            n_queries: 500,
            scorer: Scorer::Distance,
            seed: 7,
        }
    }
}

/// One query and its candidate list; `candidates[true_pos] == query`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub query: usize,
    pub candidates: Vec<usize>,
    pub true_pos: usize,
}

/// Queries over the first `n_queries` held-out triplets. Distractors are drawn
/// among triplets whose texts have the query's length, and the true partner
/// takes a uniformly drawn slot.
pub fn retrieval_queries(heldout: &[AlignedTriplet], k: usize, n_queries: usize, seed: u64) -> Result<Vec<Query>> {
    if k < 2 {
        return Err(config_err!("eval.k_candidates = {k} must be at least 2"));
    }
    if n_queries == 0 || n_queries > heldout.len() {
        return Err(config_err!(
            "eval.n_queries = {n_queries} must be in 1..={}",
            heldout.len()
        ));
    }
    let len = |t: &AlignedTriplet| t.text_i.content().len();
    let mut out = Vec::with_capacity(n_queries);
    for q in 0..n_queries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(q as u64);
        let pool: Vec<usize> = (0..heldout.len())
            .filter(|&c| c != q && len(&heldout[c]) == len(&heldout[q]))
            .collect();
        if pool.len() < k - 1 {
            return Err(config_err!(
                "only {} held-out distractors of length {} for {k} candidates",
                pool.len(),
                len(&heldout[q])
            ));
        }
        let mut candidates: Vec<usize> = sample(&mut rng, pool.len(), k - 1).into_iter().map(|i| pool[i]).collect();
        let true_pos = rng.random_range(0..k);
        candidates.insert(true_pos, q);
        out.push(Query {
            query: q,
            candidates,
            true_pos,
        });
    }
    Ok(out)
}

/// Whether the true candidate ranks first: lowest score, ties going to the
/// lower candidate index.
pub fn ranks_first(scores: &[f64], true_pos: usize) -> bool {
    let s = scores[true_pos];
    scores
        .iter()
        .enumerate()
        .all(|(i, &x)| i == true_pos || x > s || (x == s && i > true_pos))
}

fn vtr(model: &Model, v: &VisualFeatures, t: &TokenSequence) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let enc = model.encode(&mut g, &b, Some(v), t)?;
    Ok(g.value(enc.vtr.expect("visual input yields a VtR")).to_vec())
}

fn tr(model: &Model, t: &TokenSequence) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let enc = model.encode(&mut g, &b, None, t)?;
    Ok(g.value(enc.tr).to_vec())
}

fn itm_score(model: &Model, v: &VisualFeatures, t: &TokenSequence) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let enc = model.encode(&mut g, &b, Some(v), t)?;
    let z = model.itm_logit(&mut g, &b, &enc)?;
    Ok(-g.scalar(z))
}

/// Recall@1 in both directions over held-out strict triplets.
///
/// Image to text: the query `(v, x_i)` is anchor-encoded; candidate texts are
/// rendered in the language of `x_j` and paired with `v`; the true partner is
/// `x_j`. Text to image: the query is `x_j`; each candidate image `v'` is
/// scored by the distance between `(v', x_j)` and `(v', x'_i)`, with `x'_i` the
/// candidate's caption rendered in the language of `x_i`.
pub fn eval_retrieval(
    model: &Model,
    world: &ConceptWorld,
    heldout: &[AlignedTriplet],
    opts: &RetrievalOptions,
) -> Result<RetrievalSummary> {
    let queries = retrieval_queries(heldout, opts.k_candidates, opts.n_queries, opts.seed)?;
    let mut hits = [0usize; 2];
    for q in &queries {
        let t = &heldout[q.query];
        let (li, lj) = (t.text_i.language(), t.text_j.language());
        let text_of = |c: usize, lang: usize, side_j: bool| {
            if c == q.query {
                if side_j { t.text_j.clone() } else { t.text_i.clone() }
            } else {
                world.translate(&heldout[c].text_i, lang)
            }
        };
        // image to text
        let scores: Vec<f64> = match opts.scorer {
            Scorer::Distance => {
                let anchor = vtr(model, &t.image, &t.text_i)?;
                q.candidates
                    .iter()
                    .map(|&c| Ok(dist(&anchor, &vtr(model, &t.image, &text_of(c, lj, true))?)))
                    .collect::<Result<_>>()?
            }
            Scorer::ItmHead => q
                .candidates
                .iter()
                .map(|&c| itm_score(model, &t.image, &text_of(c, lj, true)))
                .collect::<Result<_>>()?,
        };
        hits[0] += ranks_first(&scores, q.true_pos) as usize;
        // text to image
        let scores: Vec<f64> = q
            .candidates
            .iter()
            .map(|&c| {
                let v = &heldout[c].image;
                match opts.scorer {
                    Scorer::Distance => {
                        let a = vtr(model, v, &text_of(c, li, false))?;
                        Ok(dist(&a, &vtr(model, v, &t.text_j)?))
                    }
                    Scorer::ItmHead => itm_score(model, v, &t.text_j),
                }
            })
            .collect::<Result<_>>()?;
        hits[1] += ranks_first(&scores, q.true_pos) as usize;
    }
    let n = queries.len();
    let result = |direction, h: usize| RetrievalResult {
        direction,
        recall_at_1: h as f64 / n as f64,
        n_queries: n,
        candidate_set_size: opts.k_candidates,
    };
    let i2t = result(Direction::ImageToText, hits[0]);
    let t2i = result(Direction::TextToImage, hits[1]);
    Ok(RetrievalSummary {
        average: (i2t.recall_at_1 + t2i.recall_at_1) / 2.0,
        image_to_text: i2t,
        text_to_image: t2i,
    })
}

/// Index of the largest entry, ties broken uniformly at random.
pub fn argmax_random_ties<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..row.len()).filter(|&i| row[i] == max).collect();
    ties[rng.random_range(0..ties.len())]
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClozeResult {
    pub accuracy: f64,
    pub n_positions: usize,
}

/// Accuracy of `logits` (`targets.len()` rows) against `targets`.
pub fn cloze_accuracy<R: Rng + ?Sized>(logits: &[f64], targets: &[usize], rng: &mut R) -> Result<ClozeResult> {
    if targets.is_empty() || logits.len() % targets.len() != 0 {
        return Err(config_err!("cloze: {} logits for {} targets", logits.len(), targets.len()));
    }
    let v = logits.len() / targets.len();
    let correct = targets
        .iter()
        .enumerate()
        .filter(|(i, &t)| argmax_random_ties(&logits[i * v..(i + 1) * v], rng) == t)
        .count();
    Ok(ClozeResult {
        accuracy: correct as f64 / targets.len() as f64,
        n_positions: targets.len(),
    })
}

/// Masked-token accuracy: `x_i` masked and encoded with its image.
pub fn eval_cloze(model: &Model, heldout: &[AlignedTriplet], mask_prob: f64, seed: u64) -> Result<ClozeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for t in heldout {
        let (masked, positions) = apply_mask(&t.text_i, mask_prob, &mut rng);
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let enc = model.encode(&mut g, &b, Some(&t.image), &masked)?;
        let mut pos = Vec::new();
        for p in positions {
            if let Some(&e) = enc.content_positions.get(p - TokenSequence::CONTENT_OFFSET) {
                pos.push(e);
                targets.push(t.text_i.tokens()[p]);
            }
        }
        if !pos.is_empty() {
            let l = model.mlm_logits(&mut g, &b, &enc, &pos)?;
            logits.extend_from_slice(g.value(l));
        }
    }
    cloze_accuracy(&logits, &targets, &mut rng)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ItmAccuracy {
    pub accuracy: f64,
    pub n_pairs: usize,
}

/// Matching accuracy over each image with its own caption and one swapped in
/// from another held-out triplet.
pub fn eval_itm(model: &Model, heldout: &[AlignedTriplet], seed: u64) -> Result<ItmAccuracy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = itm_pairs(heldout.len(), &mut rng)?;
    let mut correct = 0;
    for &(i, t, y) in &pairs {
        let s = -itm_score(model, &heldout[i].image, &heldout[t].text_i)?;
        correct += ((s > 0.0) == (y > 0.5)) as usize;
    }
    Ok(ItmAccuracy {
        accuracy: correct as f64 / pairs.len() as f64,
        n_pairs: pairs.len(),
    })
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when undefined.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeRecord {
    pub id: usize,
    pub alignment: Alignment,
    pub concept_overlap: f64,
    pub d_tr_reg: f64,
    pub d_tr_noreg: f64,
    pub d_vtr_reg: f64,
    pub d_vtr_noreg: f64,
    /// `d_vtr_reg / d_vtr_noreg`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeSummary {
    pub n_weak: usize,
    pub n_controls: usize,
    /// Spearman(d_vtr, d_tr) over weak triplets under the regularized model.
    pub spearman_reg: Option<f64>,
    pub spearman_noreg: Option<f64>,
    /// Spearman(ratio, 1 - concept_overlap) over weak triplets.
    pub spearman_ratio_irrelevance: Option<f64>,
    pub mean_d_tr_weak: f64,
    pub mean_d_tr_controls: Option<f64>,
    pub warnings: Vec<String>,
}

/// Distances between the two texts of each triplet and between their
/// pairings with the shared image, under both models. `controls` are strict
/// triplets reported alongside but kept out of the correlations.
pub fn regularization_probe(
    reg: &Model,
    noreg: &Model,
    weak: &[AlignedTriplet],
    controls: &[AlignedTriplet],
) -> Result<(Vec<ProbeRecord>, ProbeSummary)> {
    if reg.config() != noreg.config() {
        return Err(config_err!("probe checkpoints have different model configurations"));
    }
    let mut records = Vec::with_capacity(weak.len() + controls.len());
    for t in weak.iter().chain(controls) {
        let d_tr = |m: &Model| -> Result<f64> { Ok(dist(&tr(m, &t.text_i)?, &tr(m, &t.text_j)?)) };
        let d_vtr =
            |m: &Model| -> Result<f64> { Ok(dist(&vtr(m, &t.image, &t.text_i)?, &vtr(m, &t.image, &t.text_j)?)) };
        let (d_vtr_reg, d_vtr_noreg) = (d_vtr(reg)?, d_vtr(noreg)?);
        records.push(ProbeRecord {
            id: t.id,
            alignment: t.alignment,
            concept_overlap: t.concept_overlap,
            d_tr_reg: d_tr(reg)?,
            d_tr_noreg: d_tr(noreg)?,
            d_vtr_reg,
            d_vtr_noreg,
            ratio: if d_vtr_reg == d_vtr_noreg { 1.0 } else { d_vtr_reg / d_vtr_noreg },
        });
    }
    let w = &records[..weak.len()];
    let col = |f: fn(&ProbeRecord) -> f64| w.iter().map(f).collect::<Vec<f64>>();
    let mut warnings = Vec::new();
    if weak.len() < 20 {
        warnings.push(format!("only {} weak triplets; correlations are unreliable", weak.len()));
    }
    let summary = ProbeSummary {
        n_weak: weak.len(),
        n_controls: controls.len(),
        spearman_reg: spearman(&col(|r| r.d_vtr_reg), &col(|r| r.d_tr_reg)),
        spearman_noreg: spearman(&col(|r| r.d_vtr_noreg), &col(|r| r.d_tr_noreg)),
        spearman_ratio_irrelevance: spearman(&col(|r| r.ratio), &col(|r| 1.0 - r.concept_overlap)),
        mean_d_tr_weak: if w.is_empty() { 0.0 } else { col(|r| r.d_tr_reg).iter().sum::<f64>() / w.len() as f64 },
        mean_d_tr_controls: (!controls.is_empty()).then(|| {
            records[weak.len()..].iter().map(|r| r.d_tr_reg).sum::<f64>() / controls.len() as f64
        }),
        warnings,
    };
    Ok((records, summary))
}

/// Two-sided interval `[lo, hi]` of success counts holding at least `level`
/// of a Binomial(n, p) mass, with at most `(1 - level) / 2` in each tail.
pub fn binomial_interval(n: usize, p: f64, level: f64) -> (usize, usize) {
    let tail = (1.0 - level) / 2.0;
    let mut pmf = vec![0.0; n + 1];
    // log-space start avoids underflow of (1-p)^n
    let mut log_pk = n as f64 * libm::log1p(-p);
    for (k, slot) in pmf.iter_mut().enumerate() {
        *slot = libm::exp(log_pk);
        if k < n {
            log_pk += libm::log((n - k) as f64 / (k + 1) as f64) + libm::log(p) - libm::log1p(-p);
        }
    }
    let mut lo = 0;
    let mut acc = 0.0;
    while lo < n && acc + pmf[lo] <= tail {
        acc += pmf[lo];
        lo += 1;
    }
    let mut hi = n;
    let mut acc = 0.0;
    while hi > 0 && acc + pmf[hi] <= tail {
        acc += pmf[hi];
        hi -= 1;
    }
    (lo, hi)
}
