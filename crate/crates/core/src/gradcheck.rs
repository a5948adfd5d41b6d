//! Central finite-difference checks of parameter gradients.
//!
//! Stop-gradient quantities (interpolation factors, branch choices, detached
//! distributions) are logged on the analytic pass and replayed on every
//! perturbed pass, so the checked function is exactly the one the analytic
//! gradient differentiates.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{numeric_err, Result};
use crate::geometry::HardnessTracker;
use crate::model::{Bound, Model, ModelConfig};
use crate::objectives::{itm_loss, mclm_loss, rxvtcl_loss, xtcl_loss, RxvtclOptions, Task, XtclNegatives};
use crate::synthdata::{AlignedTriplet, ConceptWorld, Corpora, CorpusSpec, ParallelPair, WorldConfig};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Check every `stride`-th scalar of each tensor (1 = all).
    pub stride: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub loss: f64,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of `f` with respect to every parameter of `model`
/// against central differences. `f` must be a deterministic function of the
/// parameters: any randomness has to be reseeded inside it.
pub fn check_params<F>(model: &Model, mut f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &Model, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let loss = f(&mut g, model, &b)?;
    let l0 = g.scalar(loss);
    if !l0.is_finite() {
        return Err(numeric_err!("gradcheck: loss is {l0}"));
    }
    g.backward(loss)?;
    let grads = model.collect_grads(&g, &b);
    let log = g.stopped_values().to_vec();
    drop(g);

    let mut probe = model.clone();
    let mut eval = |m: &Model| -> Result<f64> {
        let mut g = Graph::with_replay(log.clone());
        let b = m.bind(&mut g, false);
        let l = f(&mut g, m, &b)?;
        Ok(g.scalar(l))
    };
    let mut report = GradcheckReport {
        loss: l0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let stride = opts.stride.max(1);
    for (p, grad) in grads.iter().enumerate() {
        for i in (0..grad.len()).step_by(stride) {
            let x = probe.params().tensors()[p].data()[i];
            probe.params_mut().tensors_mut()[p].data_mut()[i] = x + opts.step;
            let up = eval(&probe)?;
            probe.params_mut().tensors_mut()[p].data_mut()[i] = x - opts.step;
            let down = eval(&probe)?;
            probe.params_mut().tensors_mut()[p].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(numeric_err!("gradcheck: non-finite difference at {}[{i}]", model.params().names()[p]));
            }
            let e = rel_err(grad[i], numeric, opts.floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = e;
                report.worst_param = model.params().names()[p].clone();
                report.worst_index = i;
                report.analytic = grad[i];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Model of 4167 parameters over a 2-language, 6-concept world.
pub fn toy_model_config() -> ModelConfig {
    let world = toy_world_config();
    ModelConfig {
        d_model: 8,
        n_enc_layers: 2,
        n_dec_layers: 1,
        n_heads: 2,
        vocab_size: world.vocab_size(),
        n_languages: world.n_languages,
        d_roi: 4,
        d_patch: 3,
        k_roi: 4,
        n_patches: 16,
        max_seq_len: 40,
    }
}

pub fn toy_world_config() -> WorldConfig {
    WorldConfig {
        n_concepts: 6,
        n_languages: 2,
        ..WorldConfig::default()
    }
}

/// Minimal batches for every loss: one strict and one weak triplet, two
/// parallel pairs.
pub struct ToyBatch {
    pub model: Model,
    pub strict: AlignedTriplet,
    pub weak: AlignedTriplet,
    pub parallel: Vec<ParallelPair>,
    pub tracker: HardnessTracker,
}

impl ToyBatch {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = toy_model_config();
        let world = ConceptWorld::new(&toy_world_config(), &cfg)?;
        let spec = CorpusSpec {
            n_strict: 2,
            n_weak: 1,
            n_parallel: 2,
            min_len: 2,
            max_len: 3,
            seed,
            ..CorpusSpec::default()
        };
        let c = Corpora::generate(&world, &spec)?;
        let mut tracker = HardnessTracker::default();
        // a non-empty window so that negatives actually move
        tracker.update(0.7)?;
        Ok(Self {
            model: Model::new(cfg, seed)?,
            strict: c.strict[0].clone(),
            weak: c.weak[0].clone(),
            parallel: c.parallel,
            tracker,
        })
    }

    /// The loss of `task` on this batch, with its sampling reseeded from `seed`.
    pub fn loss(&self, task: Task, g: &mut Graph, m: &Model, b: &Bound, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = [&self.strict, &self.weak];
        let out = match task {
            Task::Mclm => mclm_loss(g, m, b, &[&self.strict], 0.5, &mut rng)?,
            Task::Itm => itm_loss(g, m, b, &pair, &mut rng)?,
            Task::Xtcl => {
                let p: Vec<&ParallelPair> = self.parallel.iter().collect();
                xtcl_loss(g, m, b, &p, &self.tracker, XtclNegatives::BothSides)?
            }
            Task::Rxvtcl => rxvtcl_loss(g, m, b, &pair, &self.tracker, RxvtclOptions::default(), &mut rng)?,
        };
        Ok(out.loss)
    }
}

/// Gradient check of each loss on [`ToyBatch`].
pub fn loss_suite(seed: u64, opts: GradcheckOptions) -> Result<Vec<(Task, GradcheckReport)>> {
    let toy = ToyBatch::new(seed)?;
    Task::ALL
        .into_iter()
        .map(|t| {
            let r = check_params(&toy.model, |g, m, b| toy.loss(t, g, m, b, seed), opts)?;
            Ok((t, r))
        })
        .collect()
}

/// Gradient check of the sum of all four losses on [`ToyBatch`].
pub fn composite(seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let toy = ToyBatch::new(seed)?;
    check_params(
        &toy.model,
        |g, m, b| {
            let parts = Task::ALL
                .into_iter()
                .map(|t| toy.loss(t, g, m, b, seed))
                .collect::<Result<Vec<_>>>()?;
            let s = g.stack(&parts)?;
            Ok(g.sum(s))
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_model_is_small() {
        assert_eq!(toy_model_config().param_count(), 4167);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(2.0, 1.0, 1e-5), 0.5);
        assert!((rel_err(0.0, 1e-7, 1e-5) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn composite_loss_gradients() {
        let r = composite(3, GradcheckOptions::default()).unwrap();
        assert_eq!(r.checked, 4167);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
