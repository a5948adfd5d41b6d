//! Representation-space bookkeeping: anchors, positives and negatives, the
//! smoothed linear interpolation that hardens negatives, the trailing hardness
//! statistic that drives it, and relevance distributions.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{config_err, numeric_err, shape_err, Result};
use crate::model::{TokenSequence, VisualFeatures};
use crate::synthdata::AlignedTriplet;
use crate::tensor::{dist, Graph, Var};

/// Which embedding space a point lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Space {
    /// Textual representations (state at `[BOS]`).
    Utrs,
    /// Visio-textual representations (state at `[CLS]`).
    Uvtrs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    I,
    J,
}

/// Identifies an encoder input by the batch positions its parts came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InputRef {
    pub image: Option<usize>,
    pub text: usize,
    pub side: Side,
}

impl InputRef {
    pub fn text(text: usize, side: Side) -> Self {
        Self {
            image: None,
            text,
            side,
        }
    }

    pub fn pair(image: usize, text: usize, side: Side) -> Self {
        Self {
            image: Some(image),
            text,
            side,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprPoint {
    pub vec: Var,
    pub source: InputRef,
    pub space: Space,
}

#[derive(Clone, Debug)]
pub struct ContrastSet {
    pub anchor: ReprPoint,
    pub positive: ReprPoint,
    pub negatives: Vec<ReprPoint>,
    pub space: Space,
}

impl ContrastSet {
    pub fn new(anchor: ReprPoint, positive: ReprPoint, negatives: Vec<ReprPoint>) -> Result<Self> {
        let space = anchor.space;
        if positive.space != space || negatives.iter().any(|n| n.space != space) {
            return Err(config_err!("contrast set mixes representation spaces"));
        }
        if negatives.is_empty() {
            return Err(config_err!("contrast set has no negatives"));
        }
        Ok(Self {
            anchor,
            positive,
            negatives,
            space,
        })
    }
}

/// Trailing mean of `exp(-loss)` over the last `capacity` steps, scaled by
/// the slack coefficient `zeta` to form the interpolation exponent.
#[derive(Clone, Debug, PartialEq)]
pub struct HardnessTracker {
    window: VecDeque<f64>,
    capacity: usize,
    zeta: f64,
    p_avg: f64,
}

impl Default for HardnessTracker {
    fn default() -> Self {
        Self::new(100, 0.9).expect("valid defaults")
    }
}

impl HardnessTracker {
    pub fn new(capacity: usize, zeta: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(config_err!("tracker window must hold at least one step"));
        }
        if !(0.0..=1.0).contains(&zeta) {
            return Err(config_err!("zeta = {zeta} outside [0, 1]"));
        }
        Ok(Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            zeta,
            p_avg: 0.0,
        })
    }

    /// Mean of the window contents; 0 while empty.
    pub fn p_avg(&self) -> f64 {
        self.p_avg
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    /// `zeta * p_avg`.
    pub fn exponent(&self) -> f64 {
        self.zeta * self.p_avg
    }

    /// Records one step's contrastive loss.
    pub fn update(&mut self, step_loss: f64) -> Result<()> {
        if !(step_loss >= 0.0) || !step_loss.is_finite() {
            return Err(numeric_err!("tracker update with invalid loss {step_loss}"));
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(libm::exp(-step_loss));
        // recomputed rather than updated incrementally so the value is an
        // exact function of the window contents
        self.p_avg = self.window.iter().sum::<f64>() / self.window.len() as f64;
        Ok(())
    }
}

/// Interpolation factor `(d_pos / d_neg)^exponent`.
pub fn lambda(d_pos: f64, d_neg: f64, exponent: f64) -> f64 {
    libm::pow(d_pos / d_neg, exponent)
}

/// Outcome of hardening one negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hardened {
    pub point: ReprPoint,
    pub lambda: f64,
    pub interpolated: bool,
    /// The negative coincided with the anchor and was returned unchanged.
    pub degenerate: bool,
}

const KEEP: f64 = 0.0;
const MOVE: f64 = 1.0;
const DEGENERATE: f64 = 2.0;

/// Moves a negative that lies farther from the anchor than the positive toward
/// the anchor along their segment: `anchor + lambda (negative - anchor)`.
/// Negatives already within the positive's distance are returned as is.
///
/// `lambda` and the branch choice are computed from current values and enter
/// the graph as constants.
pub fn interpolate_negative(
    g: &mut Graph,
    anchor: &ReprPoint,
    positive: &ReprPoint,
    negative: &ReprPoint,
    tracker: &HardnessTracker,
) -> Result<Hardened> {
    if anchor.space != positive.space || anchor.space != negative.space {
        return Err(config_err!("interpolation across representation spaces"));
    }
    let a = g.value(anchor.vec);
    if a.len() != g.value(positive.vec).len() || a.len() != g.value(negative.vec).len() {
        return Err(shape_err!("interpolation points differ in dimension"));
    }
    let d_pos = dist(a, g.value(positive.vec));
    let d_neg = dist(a, g.value(negative.vec));
    let (branch, lam) = if d_neg == 0.0 {
        (DEGENERATE, 1.0)
    } else if d_neg > d_pos {
        (MOVE, lambda(d_pos, d_neg, tracker.exponent()))
    } else {
        (KEEP, 1.0)
    };
    let branch = g.stop_scalar(branch);
    let lam = g.stop_scalar(lam);
    if branch != MOVE {
        return Ok(Hardened {
            point: *negative,
            lambda: 1.0,
            interpolated: false,
            degenerate: branch == DEGENERATE,
        });
    }
    let diff = g.sub(negative.vec, anchor.vec)?;
    let step = g.scale(diff, lam);
    let vec = g.add(anchor.vec, step)?;
    Ok(Hardened {
        point: ReprPoint {
            vec,
            source: negative.source,
            space: negative.space,
        },
        lambda: lam,
        interpolated: true,
        degenerate: false,
    })
}

/// Softmax over negated euclidean distances from `anchor` to each point of
/// `others`, in order.
pub fn relevance_distribution(g: &mut Graph, anchor: &ReprPoint, others: &[ReprPoint]) -> Result<Var> {
    if others.len() < 2 {
        return Err(config_err!("relevance distribution needs at least 2 points"));
    }
    let d = g.value(anchor.vec).len();
    let mut dists = Vec::with_capacity(others.len());
    for o in others {
        if o.space != anchor.space {
            return Err(config_err!("relevance distribution across representation spaces"));
        }
        if g.value(o.vec).len() != d {
            return Err(shape_err!(
                "relevance distribution: point {:?} vs anchor {:?}",
                g.shape(o.vec),
                g.shape(anchor.vec)
            ));
        }
        dists.push(g.euclid_dist(o.vec, anchor.vec)?);
    }
    let s = g.stack(&dists)?;
    let s = g.neg(s);
    g.softmax(s)
}

/// The six negatives built from another triplet `(v^, x^_i, x^_j)` of the
/// batch, in fixed order: `(v, x^_i)`, `(v, x^_j)` share the anchor image;
/// `(v^, x_i)`, `(v^, x_j)` share the anchor texts; `(v^, x^_i)`, `(v^, x^_j)`
/// share nothing.
///
/// `anchor_pos` and `other_pos` are the batch positions of the two triplets;
/// `encode` maps `(image, text, source)` to a VtR point.
pub fn build_xvtcl_negatives<F>(
    triplet: &AlignedTriplet,
    anchor_pos: usize,
    other: &AlignedTriplet,
    other_pos: usize,
    mut encode: F,
) -> Result<Vec<ReprPoint>>
where
    F: FnMut(&VisualFeatures, &TokenSequence, InputRef) -> Result<ReprPoint>,
{
    if anchor_pos == other_pos {
        return Err(config_err!("negatives need a different triplet of the batch"));
    }
    let (a, o) = (anchor_pos, other_pos);
    let plan: [(&VisualFeatures, &TokenSequence, InputRef); 6] = [
        (&triplet.image, &other.text_i, InputRef::pair(a, o, Side::I)),
        (&triplet.image, &other.text_j, InputRef::pair(a, o, Side::J)),
        (&other.image, &triplet.text_i, InputRef::pair(o, a, Side::I)),
        (&other.image, &triplet.text_j, InputRef::pair(o, a, Side::J)),
        (&other.image, &other.text_i, InputRef::pair(o, o, Side::I)),
        (&other.image, &other.text_j, InputRef::pair(o, o, Side::J)),
    ];
    plan.into_iter().map(|(v, t, r)| encode(v, t, r)).collect()
}
