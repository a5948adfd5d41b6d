//! The four pre-training losses.
//!
//! Each function records its computation in the caller's [`Graph`] and returns
//! the scalar loss node together with a [`LossReport`] of plain values.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::error::{config_err, format_err, Result};
use crate::geometry::{
    build_xvtcl_negatives, interpolate_negative, relevance_distribution, HardnessTracker, InputRef, ReprPoint,
    Side, Space,
};
use crate::model::{Bound, Model, TokenSequence, VisualFeatures};
use crate::synthdata::{apply_mask, AlignedTriplet, Alignment, ParallelPair};
use crate::tensor::{dist_eps, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Task {
    #[cfg_attr(feature = "serde", serde(rename = "mclm"))]
    Mclm,
    #[cfg_attr(feature = "serde", serde(rename = "itm"))]
    Itm,
    #[cfg_attr(feature = "serde", serde(rename = "xtcl"))]
    Xtcl,
    #[cfg_attr(feature = "serde", serde(rename = "rxvtcl"))]
    Rxvtcl,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Mclm, Task::Itm, Task::Xtcl, Task::Rxvtcl];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mclm => "mclm",
            Task::Itm => "itm",
            Task::Xtcl => "xtcl",
            Task::Rxvtcl => "rxvtcl",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }

    pub fn is_contrastive(self) -> bool {
        matches!(self, Task::Xtcl | Task::Rxvtcl)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Plain-value summary of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub task: Task,
    pub total: f64,
    pub components: Vec<(String, f64)>,
    pub counts: Vec<(String, usize)>,
}

impl LossReport {
    fn new(task: Task) -> Self {
        Self {
            task,
            total: 0.0,
            components: Vec::new(),
            counts: Vec::new(),
        }
    }

    fn component(&mut self, name: &str, v: f64) {
        self.components.push((name.into(), v));
    }

    fn count(&mut self, name: &str, v: usize) {
        self.counts.push((name.into(), v));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn get_count(&self, name: &str) -> Option<usize> {
        self.counts.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Loss node plus its report.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub report: LossReport,
}

/// Which texts of the other pairs serve as XTCL negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum XtclNegatives {
    /// Both texts of every other pair: `2(|B| - 1)` negatives.
    BothSides,
    /// Only the anchor-side text of every other pair: `|B| - 1` negatives.
    AnchorSide,
}

/// How many other triplets provide R-XVtCL negatives for one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OtherTriplets {
    /// One uniformly drawn other triplet (6 negatives).
    One,
    /// Every other triplet of the batch (`6(|B| - 1)` negatives).
    All,
}

/// Per-anchor contrastive loss
/// `-ln( e^{-d+} / (e^{-d+} + sum_n e^{-d_n}) )` over euclidean distances.
pub fn contrastive_loss(g: &mut Graph, anchor: &ReprPoint, positive: &ReprPoint, negatives: &[ReprPoint]) -> Result<Var> {
    if negatives.is_empty() {
        return Err(config_err!("contrastive loss needs at least one negative"));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    let dp = g.euclid_dist(positive.vec, anchor.vec)?;
    logits.push(g.neg(dp));
    for n in negatives {
        let dn = g.euclid_dist(n.vec, anchor.vec)?;
        logits.push(g.neg(dn));
    }
    let s = g.stack(&logits)?;
    let s = g.reshape(s, &[1, negatives.len() + 1])?;
    g.cross_entropy(s, &[Some(0)])
}

/// The same loss on plain distances.
pub fn contrastive_value(d_pos: f64, d_negs: &[f64]) -> f64 {
    let max = d_negs.iter().fold(-d_pos, |m, &d| m.max(-d));
    let z: f64 = libm::exp(-d_pos - max) + d_negs.iter().map(|&d| libm::exp(-d - max)).sum::<f64>();
    d_pos + max + libm::log(z)
}

fn raw_contrastive(g: &Graph, anchor: &ReprPoint, positive: &ReprPoint, negatives: &[ReprPoint]) -> f64 {
    let a = g.value(anchor.vec);
    let dp = dist_eps(a, g.value(positive.vec));
    let dn: Vec<f64> = negatives.iter().map(|n| dist_eps(a, g.value(n.vec))).collect();
    contrastive_value(dp, &dn)
}

/// Hardens every negative against the anchor, then applies
/// [`contrastive_loss`]. Returns the loss, the value of the unhardened loss
/// and the number of degenerate negatives.
pub fn hardened_contrastive_loss(
    g: &mut Graph,
    anchor: &ReprPoint,
    positive: &ReprPoint,
    negatives: &[ReprPoint],
    tracker: &HardnessTracker,
) -> Result<(Var, f64, usize)> {
    let plain = raw_contrastive(g, anchor, positive, negatives);
    let mut hard = Vec::with_capacity(negatives.len());
    let mut degenerate = 0;
    for n in negatives {
        let h = interpolate_negative(g, anchor, positive, n, tracker)?;
        degenerate += h.degenerate as usize;
        hard.push(h.point);
    }
    Ok((contrastive_loss(g, anchor, positive, &hard)?, plain, degenerate))
}

/// `KL(P_vtr || P_tr)` with `P_tr` detached. Both distributions are relevance
/// distributions of three points around their anchor.
pub fn relevance_kl(
    g: &mut Graph,
    vtr_anchor: &ReprPoint,
    vtr_others: &[ReprPoint],
    tr_anchor: &ReprPoint,
    tr_others: &[ReprPoint],
) -> Result<Var> {
    let p_vtr = relevance_distribution(g, vtr_anchor, vtr_others)?;
    let p_tr = relevance_distribution(g, tr_anchor, tr_others)?;
    let p_tr = g.detach(p_tr);
    g.kl_div(p_vtr, p_tr)
}

/// Masked conditional language modelling on strictly aligned triplets.
///
/// Per sample the direction is drawn uniformly (`i -> j` or `j -> i`); the
/// source text is masked and encoded with the image; `mlm_term` is the mean
/// cross-entropy over all masked tokens of the batch, `ar_term` the mean
/// next-token cross-entropy of the decoder generating the other text.
pub fn mclm_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    b: &Bound,
    batch: &[&AlignedTriplet],
    mask_prob: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(config_err!("MCLM batch is empty"));
    }
    let mut mlm_logits = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut ar_logits = Vec::new();
    let mut ar_targets = Vec::new();
    let mut empty_masks = 0;
    let mut truncated = 0;
    for t in batch {
        let (src, tgt) = if rng.random_bool(0.5) {
            (&t.text_i, &t.text_j)
        } else {
            (&t.text_j, &t.text_i)
        };
        if tgt.content().is_empty() {
            return Err(format_err!("MCLM target text is empty"));
        }
        let (masked, positions) = apply_mask(src, mask_prob, rng);
        let enc = model.encode(g, b, Some(&t.image), &masked)?;
        truncated += enc.truncated;
        // map token index -> encoder position, dropping truncated positions
        let kept: Vec<(usize, usize)> = positions
            .iter()
            .filter_map(|&p| {
                let i = p - TokenSequence::CONTENT_OFFSET;
                enc.content_positions.get(i).map(|&pos| (pos, src.tokens()[p]))
            })
            .collect();
        if kept.is_empty() {
            empty_masks += 1;
        } else {
            let pos: Vec<usize> = kept.iter().map(|k| k.0).collect();
            mlm_logits.push(model.mlm_logits(g, b, &enc, &pos)?);
            mlm_targets.extend(kept.iter().map(|k| Some(k.1)));
        }
        let dec_in = tgt.decoder_tokens();
        ar_logits.push(model.decode(g, b, &enc, &dec_in)?);
        ar_targets.extend(dec_in[1..].iter().map(|&t| Some(t)));
        ar_targets.push(None);
    }
    let masked_tokens = mlm_targets.len();
    let target_tokens = ar_targets.iter().flatten().count();
    let mlm = if mlm_logits.is_empty() {
        g.constant(crate::tensor::Tensor::scalar(0.0))
    } else {
        let l = if mlm_logits.len() == 1 { mlm_logits[0] } else { g.concat_rows(&mlm_logits)? };
        g.cross_entropy(l, &mlm_targets)?
    };
    let l = if ar_logits.len() == 1 { ar_logits[0] } else { g.concat_rows(&ar_logits)? };
    let ar = g.cross_entropy(l, &ar_targets)?;
    let loss = g.add(mlm, ar)?;
    let mut r = LossReport::new(Task::Mclm);
    r.total = g.scalar(loss);
    r.component("mlm_term", g.scalar(mlm));
    r.component("ar_term", g.scalar(ar));
    r.count("masked_tokens", masked_tokens);
    r.count("target_tokens", target_tokens);
    r.count("empty_mask_samples", empty_masks);
    r.count("truncated_tokens", truncated);
    Ok(LossOutput { loss, report: r })
}

/// One image-text matching example: `(image owner, caption owner, label)`.
pub type ItmPair = (usize, usize, f64);

/// For every image of a batch of `n`, its own caption (label 1) and the
/// caption of a uniformly drawn other sample (label 0).
pub fn itm_pairs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<ItmPair>> {
    if n < 2 {
        return Err(config_err!("ITM needs a batch of at least 2 for in-batch negatives"));
    }
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut o = rng.random_range(0..n - 1);
        if o >= i {
            o += 1;
        }
        out.push((i, i, 1.0));
        out.push((i, o, 0.0));
    }
    Ok(out)
}

/// Binary cross-entropy of the matching head over [`itm_pairs`].
pub fn itm_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    b: &Bound,
    batch: &[&AlignedTriplet],
    rng: &mut R,
) -> Result<LossOutput> {
    let pairs = itm_pairs(batch.len(), rng)?;
    let mut logits = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for &(img, txt, y) in &pairs {
        let enc = model.encode(g, b, Some(&batch[img].image), &batch[txt].text_i)?;
        logits.push(model.itm_logit(g, b, &enc)?);
        labels.push(y);
    }
    let z = g.stack(&logits)?;
    let loss = g.bce_with_logits(z, &labels)?;
    let mut r = LossReport::new(Task::Itm);
    r.total = g.scalar(loss);
    r.component("bce", r.total);
    let correct = g
        .value(z)
        .iter()
        .zip(&labels)
        .filter(|(&z, &y)| (z > 0.0) == (y > 0.5))
        .count();
    r.count("positives", labels.iter().filter(|&&y| y > 0.5).count());
    r.count("negatives", labels.iter().filter(|&&y| y < 0.5).count());
    r.count("correct", correct);
    Ok(LossOutput { loss, report: r })
}

/// Cross-lingual textual contrastive loss with hardened negatives.
///
/// The report's `plain_contrastive` component is the batch mean of the
/// unhardened loss; that value feeds the hardness tracker.
pub fn xtcl_loss(
    g: &mut Graph,
    model: &Model,
    b: &Bound,
    batch: &[&ParallelPair],
    tracker: &HardnessTracker,
    negatives: XtclNegatives,
) -> Result<LossOutput> {
    if batch.len() < 2 {
        return Err(config_err!("XTCL needs a batch of at least 2 pairs, got {}", batch.len()));
    }
    let mut tr = Vec::with_capacity(batch.len());
    for (k, p) in batch.iter().enumerate() {
        let ei = model.encode(g, b, None, &p.text_i)?;
        let ej = model.encode(g, b, None, &p.text_j)?;
        let pt = |v, side| ReprPoint {
            vec: v,
            source: InputRef::text(k, side),
            space: Space::Utrs,
        };
        tr.push((pt(ei.tr, Side::I), pt(ej.tr, Side::J)));
    }
    let mut per_anchor = Vec::with_capacity(batch.len());
    let mut plain = 0.0;
    let mut degenerate = 0;
    let mut n_neg = 0;
    for (k, (anchor, positive)) in tr.iter().enumerate() {
        let negs: Vec<ReprPoint> = tr
            .iter()
            .enumerate()
            .filter(|(o, _)| *o != k)
            .flat_map(|(_, (i, j))| match negatives {
                XtclNegatives::BothSides => [Some(*i), Some(*j)],
                XtclNegatives::AnchorSide => [Some(*i), None],
            })
            .flatten()
            .collect();
        n_neg += negs.len();
        let (l, p, d) = hardened_contrastive_loss(g, anchor, positive, &negs, tracker)?;
        per_anchor.push(l);
        plain += p;
        degenerate += d;
    }
    let loss = g.mean_of(&per_anchor)?;
    let mut r = LossReport::new(Task::Xtcl);
    r.total = g.scalar(loss);
    r.component("contrastive_term", r.total);
    r.component("plain_contrastive", plain / batch.len() as f64);
    r.count("negatives", n_neg);
    r.count("degenerate", degenerate);
    Ok(LossOutput { loss, report: r })
}

/// Knobs of [`rxvtcl_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RxvtclOptions {
    pub others: OtherTriplets,
    /// Add `KL(P_vtr || P_tr)` for weakly aligned anchors.
    pub use_kl: bool,
}

impl Default for RxvtclOptions {
    fn default() -> Self {
        Self {
            others: OtherTriplets::One,
            use_kl: true,
        }
    }
}

struct VtrCache<'m, 'b> {
    model: &'m Model,
    bound: &'b Bound,
    vtr: BTreeMap<InputRef, ReprPoint>,
    tr: BTreeMap<(usize, Side), ReprPoint>,
}

impl VtrCache<'_, '_> {
    fn vtr(&mut self, g: &mut Graph, v: &VisualFeatures, t: &TokenSequence, r: InputRef) -> Result<ReprPoint> {
        if let Some(p) = self.vtr.get(&r) {
            return Ok(*p);
        }
        let enc = self.model.encode(g, self.bound, Some(v), t)?;
        let p = ReprPoint {
            vec: enc.vtr.expect("visual input yields a VtR"),
            source: r,
            space: Space::Uvtrs,
        };
        self.vtr.insert(r, p);
        Ok(p)
    }

    fn tr(&mut self, g: &mut Graph, t: &TokenSequence, owner: usize, side: Side) -> Result<ReprPoint> {
        if let Some(p) = self.tr.get(&(owner, side)) {
            return Ok(*p);
        }
        let enc = self.model.encode(g, self.bound, None, t)?;
        let p = ReprPoint {
            vec: enc.tr,
            source: InputRef::text(owner, side),
            space: Space::Utrs,
        };
        self.tr.insert((owner, side), p);
        Ok(p)
    }
}

/// Regularized cross-lingual visio-textual contrastive loss.
///
/// For every anchor triplet `(v, x_i, x_j)`: anchor `VtR(v, x_i)`, positive
/// `VtR(v, x_j)`, six hardened negatives per other triplet. The other triplet
/// is drawn among batch members of the same alignment when there is one. Weakly aligned
/// anchors add `KL(P_vtr || P_tr)` over `(v, x_j)`, `(v, x^_i)`, `(v, x^_j)`
/// in the visio-textual space and `x_j`, `x^_i`, `x^_j` in the textual space.
/// `total = mean_strict(contrastive) + mean_weak(contrastive + kl)`; a side
/// without triplets contributes 0.
pub fn rxvtcl_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    b: &Bound,
    batch: &[&AlignedTriplet],
    tracker: &HardnessTracker,
    opts: RxvtclOptions,
    rng: &mut R,
) -> Result<LossOutput> {
    let n = batch.len();
    if n < 2 {
        return Err(config_err!("R-XVtCL needs a batch of at least 2 triplets, got {n}"));
    }
    let mut cache = VtrCache {
        model,
        bound: b,
        vtr: BTreeMap::new(),
        tr: BTreeMap::new(),
    };
    let mut strict_terms = Vec::new();
    let mut weak_terms = Vec::new();
    let mut kl_terms = Vec::new();
    let mut plain = 0.0;
    let mut degenerate = 0;
    let mut n_neg = 0;
    for (a, t) in batch.iter().enumerate() {
        // same-alignment triplets first; the first entry also feeds the KL term
        let (mut others, rest): (Vec<usize>, Vec<usize>) =
            (0..n).filter(|&o| o != a).partition(|&o| batch[o].alignment == t.alignment);
        let pool_same = !others.is_empty();
        match opts.others {
            OtherTriplets::One => {
                let pool = if pool_same { &others } else { &rest };
                let o = pool[rng.random_range(0..pool.len())];
                others = alloc::vec![o];
            }
            OtherTriplets::All => others.extend(rest),
        }
        let anchor = cache.vtr(g, &t.image, &t.text_i, InputRef::pair(a, a, Side::I))?;
        let positive = cache.vtr(g, &t.image, &t.text_j, InputRef::pair(a, a, Side::J))?;
        let mut negs = Vec::with_capacity(6 * others.len());
        for &o in &others {
            negs.extend(build_xvtcl_negatives(t, a, batch[o], o, |v, x, r| cache.vtr(g, v, x, r))?);
        }
        n_neg += negs.len();
        let (c, p, d) = hardened_contrastive_loss(g, &anchor, &positive, &negs, tracker)?;
        plain += p;
        degenerate += d;
        match t.alignment {
            Alignment::Strict => strict_terms.push(c),
            Alignment::Weak if opts.use_kl => {
                let o = others[0];
                let other = batch[o];
                let tr_anchor = cache.tr(g, &t.text_i, a, Side::I)?;
                let tr_others = [
                    cache.tr(g, &t.text_j, a, Side::J)?,
                    cache.tr(g, &other.text_i, o, Side::I)?,
                    cache.tr(g, &other.text_j, o, Side::J)?,
                ];
                // the first two negatives pair the anchor image with x^_i, x^_j
                let vtr_others = [positive, negs[0], negs[1]];
                let kl = relevance_kl(g, &anchor, &vtr_others, &tr_anchor, &tr_others)?;
                kl_terms.push(kl);
                weak_terms.push(g.add(c, kl)?);
            }
            Alignment::Weak => weak_terms.push(c),
        }
    }
    let mut parts = Vec::with_capacity(2);
    let mut report_strict = 0.0;
    let mut report_weak = 0.0;
    if !strict_terms.is_empty() {
        let m = g.mean_of(&strict_terms)?;
        report_strict = g.scalar(m);
        parts.push(m);
    }
    if !weak_terms.is_empty() {
        let m = g.mean_of(&weak_terms)?;
        report_weak = g.scalar(m);
        parts.push(m);
    }
    let loss = if parts.len() == 1 { parts[0] } else { g.add(parts[0], parts[1])? };
    let kl_mean = if kl_terms.is_empty() {
        0.0
    } else {
        kl_terms.iter().map(|&k| g.scalar(k)).sum::<f64>() / kl_terms.len() as f64
    };
    let mut r = LossReport::new(Task::Rxvtcl);
    r.total = g.scalar(loss);
    r.component("strict_term", report_strict);
    r.component("weak_term", report_weak);
    r.component("kl_term", kl_mean);
    r.component("plain_contrastive", plain / n as f64);
    r.count("strict", strict_terms.len());
    r.count("weak", n - strict_terms.len());
    r.count("negatives", n_neg);
    r.count("degenerate", degenerate);
    Ok(LossOutput { loss, report: r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pt(g: &mut Graph, v: &[f64], rg: bool) -> ReprPoint {
        ReprPoint {
            vec: g.leaf(Tensor::vector(v.to_vec()), rg),
            source: InputRef::text(0, Side::I),
            space: Space::Utrs,
        }
    }

    #[test]
    fn all_equal_embeddings_give_ln_one_plus_n() {
        for n in [1usize, 2, 7, 30] {
            let mut g = Graph::new();
            let a = pt(&mut g, &[0.3, -0.2], false);
            let p = pt(&mut g, &[0.3, -0.2], false);
            let negs: Vec<_> = (0..n).map(|_| pt(&mut g, &[0.3, -0.2], false)).collect();
            let l = contrastive_loss(&mut g, &a, &p, &negs).unwrap();
            assert!((g.scalar(l) - libm::log(1.0 + n as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn separation_limit() {
        let mut g = Graph::new();
        let a = pt(&mut g, &[0.0, 0.0], false);
        let p = pt(&mut g, &[0.0, 0.0], false);
        let negs = [pt(&mut g, &[60.0, 0.0], false), pt(&mut g, &[0.0, -80.0], false)];
        let l = contrastive_loss(&mut g, &a, &p, &negs).unwrap();
        assert!(g.scalar(l) < 1e-20);
    }

    #[test]
    fn contrastive_value_matches_graph() {
        let mut g = Graph::new();
        let a = pt(&mut g, &[0.0, 0.0], false);
        let p = pt(&mut g, &[1.0, 0.5], false);
        let negs = [pt(&mut g, &[2.0, 0.0], false), pt(&mut g, &[0.0, -0.3], false)];
        let l = contrastive_loss(&mut g, &a, &p, &negs).unwrap();
        let v = contrastive_value(
            dist_eps(&[0.0, 0.0], &[1.0, 0.5]),
            &[dist_eps(&[0.0, 0.0], &[2.0, 0.0]), dist_eps(&[0.0, 0.0], &[0.0, -0.3])],
        );
        assert!((g.scalar(l) - v).abs() < 1e-14);
    }

    #[test]
    fn single_descent_step_lowers_loss() {
        let start = (vec![0.1, 0.2], vec![1.0, -0.4], vec![0.7, 0.9]);
        let eval = |a: &[f64], p: &[f64], n: &[f64]| {
            let mut g = Graph::new();
            let a = pt(&mut g, a, true);
            let p = pt(&mut g, p, true);
            let nn = pt(&mut g, n, false);
            let l = contrastive_loss(&mut g, &a, &p, &[nn]).unwrap();
            g.backward(l).unwrap();
            (g.scalar(l), g.grad(a.vec).unwrap().to_vec(), g.grad(p.vec).unwrap().to_vec())
        };
        let (l0, ga, gp) = eval(&start.0, &start.1, &start.2);
        let lr = 1e-4;
        let a1: Vec<f64> = start.0.iter().zip(&ga).map(|(x, d)| x - lr * d).collect();
        let p1: Vec<f64> = start.1.iter().zip(&gp).map(|(x, d)| x - lr * d).collect();
        let (l1, _, _) = eval(&a1, &p1, &start.2);
        assert!(l1 < l0);
    }

    #[test]
    fn kl_path_leaves_textual_points_untouched() {
        let mut g = Graph::new();
        let va = pt(&mut g, &[0.0, 0.0], true);
        let vo: Vec<_> = [[1.0, 0.0], [0.0, 2.0], [1.5, 1.5]].iter().map(|v| pt(&mut g, v, true)).collect();
        let ta = pt(&mut g, &[0.1, 0.0], true);
        let to: Vec<_> = [[2.0, 0.0], [0.0, 0.5], [1.0, 1.0]].iter().map(|v| pt(&mut g, v, true)).collect();
        let k = relevance_kl(&mut g, &va, &vo, &ta, &to).unwrap();
        assert!(g.scalar(k) > 0.0);
        g.backward(k).unwrap();
        assert!(g.grad(va.vec).is_some());
        assert!(g.grad(ta.vec).is_none());
        assert!(to.iter().all(|p| g.grad(p.vec).is_none()));
    }

    #[test]
    fn kl_vanishes_for_matching_geometry() {
        let mut g = Graph::new();
        let mk = |g: &mut Graph| {
            let a = pt(g, &[0.0, 0.0], false);
            let o: Vec<_> = [[1.0, 0.0], [0.0, 2.0], [1.5, 1.5]].iter().map(|v| pt(g, v, false)).collect();
            (a, o)
        };
        let (va, vo) = mk(&mut g);
        let (ta, to) = mk(&mut g);
        let k = relevance_kl(&mut g, &va, &vo, &ta, &to).unwrap();
        assert!(g.scalar(k).abs() < 1e-12);
    }

    #[test]
    fn itm_sampler_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pairs = itm_pairs(2, &mut rng).unwrap();
        assert_eq!(pairs, vec![(0, 0, 1.0), (0, 1, 0.0), (1, 1, 1.0), (1, 0, 0.0)]);
        let mut again = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(itm_pairs(2, &mut again).unwrap(), pairs);
        assert!(itm_pairs(1, &mut rng).is_err());
        let big = itm_pairs(9, &mut rng).unwrap();
        for (k, &(i, t, y)) in big.iter().enumerate() {
            if k % 2 == 0 {
                assert_eq!((i, t, y), (k / 2, k / 2, 1.0));
            } else {
                assert_ne!(i, t);
                assert_eq!(y, 0.0);
            }
        }
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(Task::parse(t.name()), Some(t));
        }
        assert_eq!(Task::parse("XTCL"), Some(Task::Xtcl));
        assert_eq!(Task::parse("nope"), None);
    }
}
