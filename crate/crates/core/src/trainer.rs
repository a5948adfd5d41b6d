//! Deterministic multi-task training loop.
//!
//! Every step draws its batch from an RNG keyed on `(seed, step)`, so a run is
//! a pure function of its configuration and corpora. File output (checkpoints,
//! metrics streams, wall-clock time) belongs to the caller.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, numeric_err, Error, Result};
use crate::geometry::HardnessTracker;
use crate::model::Model;
use crate::objectives::{
    itm_loss, mclm_loss, rxvtcl_loss, xtcl_loss, LossOutput, LossReport, OtherTriplets, RxvtclOptions, Task,
    XtclNegatives,
};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::synthdata::{AlignedTriplet, Corpora, ParallelPair};
use crate::tensor::Graph;

/// How the scheduled tasks share optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Combine {
    /// One task per step, cycling through the schedule.
    RoundRobin,
    /// Every scheduled task each step; the weighted sum is differentiated.
    WeightedSum,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_mclm: usize,
    pub batch_itm: usize,
    pub batch_xtcl: usize,
    pub batch_rxvtcl: usize,
    pub schedule: Vec<Task>,
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    pub no_kl: bool,
    pub no_rxvtcl: bool,
    pub no_xtcl: bool,
    /// Maximum joint gradient norm; 0 disables clipping.
    pub clip_norm: f64,
    pub xtcl_negatives: XtclNegatives,
    pub rxvtcl_others: OtherTriplets,
    pub tracker_window: usize,
    pub zeta: f64,
    /// XTCL and R-XVtCL feed and read one tracker instead of one each.
    pub shared_tracker: bool,
    pub combine: Combine,
    /// Weights of mclm, itm, xtcl, rxvtcl under [`Combine::WeightedSum`].
    pub task_weights: [f64; 4],
    /// Add elapsed seconds to metrics records; off keeps streams bitwise
    /// reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 500,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_mclm: 32,
            batch_itm: 32,
            batch_xtcl: 32,
            batch_rxvtcl: 16,
            schedule: Task::ALL.to_vec(),
            seed: 7,
            checkpoint_interval: 0,
            no_kl: false,
            no_rxvtcl: false,
            no_xtcl: false,
            clip_norm: 0.0,
            xtcl_negatives: XtclNegatives::BothSides,
            rxvtcl_others: OtherTriplets::One,
            tracker_window: 100,
            zeta: 0.9,
            shared_tracker: false,
            combine: Combine::RoundRobin,
            task_weights: [1.0; 4],
            record_wall_time: false,
        }
    }
}

/// The learning rate used for the 24-layer model in the original setting.
pub const PAPER_LR: f64 = 5e-5;

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// The schedule after ablation flags.
    pub fn effective_schedule(&self) -> Vec<Task> {
        self.schedule
            .iter()
            .copied()
            .filter(|t| !(self.no_rxvtcl && *t == Task::Rxvtcl) && !(self.no_xtcl && *t == Task::Xtcl))
            .collect()
    }

    pub fn batch_size(&self, t: Task) -> usize {
        match t {
            Task::Mclm => self.batch_mclm,
            Task::Itm => self.batch_itm,
            Task::Xtcl => self.batch_xtcl,
            Task::Rxvtcl => self.batch_rxvtcl,
        }
    }

    pub fn weight(&self, t: Task) -> f64 {
        self.task_weights[t as usize]
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err!("train.steps must be at least 1"));
        }
        self.adam().validate()?;
        if self.schedule.is_empty() {
            return Err(config_err!("train.schedule is empty"));
        }
        if self.effective_schedule().is_empty() {
            return Err(config_err!("ablation flags remove every scheduled task"));
        }
        for t in self.effective_schedule() {
            let b = self.batch_size(t);
            let min = if t == Task::Mclm { 1 } else { 2 };
            if b < min {
                return Err(config_err!("train.batch_{t} = {b} must be at least {min}"));
            }
        }
        if !(self.clip_norm >= 0.0) {
            return Err(config_err!("train.clip_norm = {} must be >= 0", self.clip_norm));
        }
        if self.tracker_window == 0 {
            return Err(config_err!("train.tracker_window must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(config_err!("train.zeta = {} outside [0, 1]", self.zeta));
        }
        if self.task_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(config_err!("train.task_weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    pub step: usize,
    /// Task name, or `weighted_sum`.
    pub task: String,
    pub total: f64,
    /// Components keyed `name` (round robin) or `task.name` (weighted sum).
    pub components: Vec<(String, f64)>,
    pub counts: Vec<(String, usize)>,
    pub p_avg_xtcl: f64,
    pub p_avg_rxvtcl: f64,
    pub grad_norm: f64,
    pub batch_fingerprint: String,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub wall_time: Option<f64>,
}

impl MetricsRecord {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Batch positions drawn for one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BatchIndices {
    Strict(Vec<usize>),
    Parallel(Vec<usize>),
    /// Strict then weak positions.
    Mixed(Vec<usize>, Vec<usize>),
}

impl BatchIndices {
    fn fingerprint(&self, task: Task, step: usize) -> u64 {
        // FNV-1a over (step, task, indices)
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(step as u64);
        eat(task as u64);
        let (a, b): (&[usize], &[usize]) = match self {
            BatchIndices::Strict(a) | BatchIndices::Parallel(a) => (a, &[]),
            BatchIndices::Mixed(a, b) => (a, b),
        };
        for &i in a {
            eat(i as u64);
        }
        eat(u64::MAX);
        for &i in b {
            eat(i as u64);
        }
        h
    }
}

const BATCH_TAG: u64 = 0x6261_7463_6800_0000;
const LOSS_TAG: u64 = 0x6c6f_7373_0000_0000;

fn step_rng(seed: u64, tag: u64, step: usize, task: Task) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ tag ^ (task as u64));
    r.set_stream(step as u64);
    r
}

fn draw(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    sample(rng, n, k.min(n)).into_vec()
}

pub struct Trainer {
    cfg: TrainConfig,
    schedule: Vec<Task>,
    model: Model,
    opt: Adam,
    corpora: Corpora,
    mask_prob: f64,
    /// XTCL's tracker, then R-XVtCL's; see [`Trainer::tracker`].
    trackers: [HardnessTracker; 2],
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Model, corpora: Corpora, mask_prob: f64) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.effective_schedule();
        for &t in &schedule {
            let (name, n) = match t {
                Task::Mclm | Task::Itm => ("strict", corpora.strict.len()),
                Task::Xtcl => ("parallel", corpora.parallel.len()),
                Task::Rxvtcl => ("strict + weak", corpora.strict.len() + corpora.weak.len()),
            };
            let need = if t == Task::Mclm { 1 } else { 2 };
            if n < need {
                return Err(config_err!("task {t} needs the {name} corpus ({n} samples present)"));
            }
        }
        let opt = Adam::new(cfg.adam(), model.params().tensors())?;
        let tracker = HardnessTracker::new(cfg.tracker_window, cfg.zeta)?;
        Ok(Self {
            schedule,
            model,
            opt,
            corpora,
            mask_prob,
            trackers: [tracker.clone(), tracker],
            step: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &[Task] {
        &self.schedule
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn corpora(&self) -> &Corpora {
        &self.corpora
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    fn tracker_slot(&self, t: Task) -> Option<usize> {
        match t {
            Task::Xtcl => Some(0),
            Task::Rxvtcl => Some(if self.cfg.shared_tracker { 0 } else { 1 }),
            _ => None,
        }
    }

    /// The tracker `t` hardens its negatives with; the same one for both
    /// contrastive tasks under `shared_tracker`.
    pub fn tracker(&self, t: Task) -> Option<&HardnessTracker> {
        self.tracker_slot(t).map(|i| &self.trackers[i])
    }

    /// Task of the next round-robin step.
    pub fn next_task(&self) -> Task {
        self.schedule[self.step % self.schedule.len()]
    }

    /// The batch `task` draws at `step`.
    pub fn batch_for(&self, task: Task, step: usize) -> BatchIndices {
        let mut rng = step_rng(self.cfg.seed, BATCH_TAG, step, task);
        let k = self.cfg.batch_size(task);
        match task {
            Task::Mclm | Task::Itm => BatchIndices::Strict(draw(&mut rng, self.corpora.strict.len(), k)),
            Task::Xtcl => BatchIndices::Parallel(draw(&mut rng, self.corpora.parallel.len(), k)),
            Task::Rxvtcl => {
                let (ns, nw) = (self.corpora.strict.len(), self.corpora.weak.len());
                let kw = if nw == 0 { 0 } else if ns == 0 { k } else { k / 2 };
                let s = draw(&mut rng, ns, k - kw);
                let w = draw(&mut rng, nw, kw);
                BatchIndices::Mixed(s, w)
            }
        }
    }

    /// Evaluates `task` on `batch` in `g`, drawing loss-internal randomness
    /// from the `(seed, step)` stream.
    pub fn loss_on(
        &self,
        g: &mut Graph,
        b: &crate::model::Bound,
        task: Task,
        batch: &BatchIndices,
        step: usize,
        use_kl: bool,
    ) -> Result<LossOutput> {
        let mut rng = step_rng(self.cfg.seed, LOSS_TAG, step, task);
        let strict = |ix: &[usize]| -> Vec<&AlignedTriplet> { ix.iter().map(|&i| &self.corpora.strict[i]).collect() };
        match (task, batch) {
            (Task::Mclm, BatchIndices::Strict(ix)) => {
                mclm_loss(g, &self.model, b, &strict(ix), self.mask_prob, &mut rng)
            }
            (Task::Itm, BatchIndices::Strict(ix)) => itm_loss(g, &self.model, b, &strict(ix), &mut rng),
            (Task::Xtcl, BatchIndices::Parallel(ix)) => {
                let p: Vec<&ParallelPair> = ix.iter().map(|&i| &self.corpora.parallel[i]).collect();
                xtcl_loss(g, &self.model, b, &p, &self.trackers[0], self.cfg.xtcl_negatives)
            }
            (Task::Rxvtcl, BatchIndices::Mixed(s, w)) => {
                let mut t = strict(s);
                t.extend(w.iter().map(|&i| &self.corpora.weak[i]));
                let opts = RxvtclOptions {
                    others: self.cfg.rxvtcl_others,
                    use_kl,
                };
                let tracker = &self.trackers[self.tracker_slot(Task::Rxvtcl).expect("contrastive task")];
                rxvtcl_loss(g, &self.model, b, &t, tracker, opts, &mut rng)
            }
            _ => Err(config_err!("batch kind does not match task {task}")),
        }
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        if self.is_done() {
            return Err(config_err!("training already ran its {} steps", self.cfg.steps));
        }
        let step = self.step;
        let tasks: Vec<Task> = match self.cfg.combine {
            Combine::RoundRobin => alloc::vec![self.next_task()],
            Combine::WeightedSum => self.schedule.clone(),
        };
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, true);
        let mut outs: Vec<(Task, LossOutput)> = Vec::with_capacity(tasks.len());
        let mut fingerprint: u64 = 0;
        for &t in &tasks {
            let batch = self.batch_for(t, step);
            fingerprint ^= batch.fingerprint(t, step);
            let out = self.loss_on(&mut g, &b, t, &batch, step, !self.cfg.no_kl).map_err(|e| match e {
                Error::Numeric(d) => numeric_err!("{d} in {t} at step {step}, batch {fingerprint:016x}"),
                other => other,
            })?;
            if !out.report.total.is_finite() {
                return Err(numeric_err!(
                    "{t} loss is {} at step {step}, batch {fingerprint:016x}",
                    out.report.total
                ));
            }
            outs.push((t, out));
        }
        let loss = if outs.len() == 1 {
            outs[0].1.loss
        } else {
            let parts: Vec<_> = outs.iter().map(|(t, o)| g.scale(o.loss, self.cfg.weight(*t))).collect();
            let s = g.stack(&parts)?;
            g.sum(s)
        };
        let total = g.scalar(loss);
        g.backward(loss).map_err(|e| match e {
            Error::Numeric(d) => numeric_err!("{d} at step {step}, batch {fingerprint:016x}"),
            other => other,
        })?;
        let mut grads = self.model.collect_grads(&g, &b);
        drop(g);
        let grad_norm = if self.cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, self.cfg.clip_norm)
        } else {
            libm::sqrt(grads.iter().flatten().map(|x| x * x).sum::<f64>())
        };
        if !grad_norm.is_finite() {
            return Err(numeric_err!(
                "non-finite gradient at step {step}, batch {fingerprint:016x}"
            ));
        }
        self.opt.step(self.model.params_mut().tensors_mut(), &grads)?;
        for (t, o) in &outs {
            if let (Some(i), Some(p)) = (self.tracker_slot(*t), o.report.get("plain_contrastive")) {
                self.trackers[i].update(p)?;
            }
        }
        self.step += 1;
        Ok(self.record(step, total, grad_norm, fingerprint, outs.iter().map(|(_, o)| &o.report).collect()))
    }

    fn record(&self, step: usize, total: f64, grad_norm: f64, fp: u64, reports: Vec<&LossReport>) -> MetricsRecord {
        let single = reports.len() == 1 && self.cfg.combine == Combine::RoundRobin;
        let key = |r: &LossReport, n: &str| if single { String::from(n) } else { alloc::format!("{}.{n}", r.task) };
        let mut components = Vec::new();
        let mut counts = Vec::new();
        for r in &reports {
            if !single {
                components.push((alloc::format!("{}.total", r.task), r.total));
            }
            components.extend(r.components.iter().map(|(n, v)| (key(r, n), *v)));
            counts.extend(r.counts.iter().map(|(n, v)| (key(r, n), *v)));
        }
        MetricsRecord {
            step,
            task: if single { String::from(reports[0].task.name()) } else { String::from("weighted_sum") },
            total,
            components,
            counts,
            p_avg_xtcl: self.trackers[0].p_avg(),
            p_avg_rxvtcl: self.trackers[self.tracker_slot(Task::Rxvtcl).expect("contrastive task")].p_avg(),
            grad_norm,
            batch_fingerprint: alloc::format!("{fp:016x}"),
            wall_time: None,
        }
    }

    /// Runs the remaining steps, handing every record to `sink`.
    pub fn run<F: FnMut(&Trainer, &MetricsRecord) -> Result<()>>(&mut self, mut sink: F) -> Result<()> {
        while !self.is_done() {
            let r = self.step()?;
            sink(self, &r)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{toy_model_config, toy_world_config};
    use crate::synthdata::{ConceptWorld, CorpusSpec};

    fn toy_trainer(cfg: TrainConfig) -> Result<Trainer> {
        let mc = toy_model_config();
        let world = ConceptWorld::new(&toy_world_config(), &mc)?;
        let spec = CorpusSpec {
            n_strict: 20,
            n_weak: 20,
            n_parallel: 20,
            min_len: 2,
            max_len: 3,
            ..CorpusSpec::default()
        };
        let corpora = Corpora::generate(&world, &spec)?;
        Trainer::new(cfg, Model::new(mc, 1)?, corpora, spec.mask_prob)
    }

    fn small() -> TrainConfig {
        TrainConfig {
            steps: 8,
            batch_mclm: 3,
            batch_itm: 3,
            batch_xtcl: 3,
            batch_rxvtcl: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_schedules() {
        let cfg = TrainConfig {
            no_rxvtcl: true,
            no_xtcl: true,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_schedule(), alloc::vec![Task::Mclm, Task::Itm]);
        let cfg = TrainConfig {
            no_kl: true,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_schedule(), Task::ALL.to_vec());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { schedule: Vec::new(), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_xtcl: 1, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn round_robin_and_tracker_updates() {
        let mut t = toy_trainer(small()).unwrap();
        let mut seen = Vec::new();
        t.run(|tr, r| {
            seen.push((r.task.clone(), tr.tracker(Task::Xtcl).unwrap().len(), tr.tracker(Task::Rxvtcl).unwrap().len()));
            Ok(())
        })
        .unwrap();
        let names: Vec<&str> = seen.iter().map(|s| s.0.as_str()).collect();
        assert_eq!(names, ["mclm", "itm", "xtcl", "rxvtcl", "mclm", "itm", "xtcl", "rxvtcl"]);
        let lens: Vec<(usize, usize)> = seen.iter().map(|s| (s.1, s.2)).collect();
        assert_eq!(lens, [(0, 0), (0, 0), (1, 0), (1, 1), (1, 1), (1, 1), (2, 1), (2, 2)]);
        assert!(t.step().is_err());
    }

    #[test]
    fn shared_tracker_sees_both_tasks() {
        let mut t = toy_trainer(TrainConfig { shared_tracker: true, ..small() }).unwrap();
        let mut lens = Vec::new();
        t.run(|tr, r| {
            assert_eq!(r.p_avg_xtcl, r.p_avg_rxvtcl);
            lens.push(tr.tracker(Task::Rxvtcl).unwrap().len());
            Ok(())
        })
        .unwrap();
        assert_eq!(lens, [0, 0, 1, 2, 2, 2, 3, 4]);
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let mut t = toy_trainer(small()).unwrap();
            let mut recs = Vec::new();
            t.run(|_, r| {
                recs.push(r.clone());
                Ok(())
            })
            .unwrap();
            (t.into_model().params().clone(), recs)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn weighted_sum_mode() {
        let cfg = TrainConfig {
            combine: Combine::WeightedSum,
            task_weights: [1.0, 0.5, 1.0, 2.0],
            steps: 2,
            ..small()
        };
        let mut t = toy_trainer(cfg).unwrap();
        let r = t.step().unwrap();
        assert_eq!(r.task, "weighted_sum");
        let parts: f64 = Task::ALL
            .iter()
            .map(|k| t.config().weight(*k) * r.component(&alloc::format!("{k}.total")).unwrap())
            .sum();
        assert!((parts - r.total).abs() < 1e-9);
        assert_eq!(t.tracker(Task::Xtcl).unwrap().len(), 1);
        assert_eq!(t.tracker(Task::Rxvtcl).unwrap().len(), 1);
    }

    #[test]
    fn missing_corpus() {
        let mc = toy_model_config();
        let corpora = Corpora {
            strict: Vec::new(),
            weak: Vec::new(),
            parallel: Vec::new(),
        };
        let err = Trainer::new(TrainConfig::default(), Model::new(mc, 1).unwrap(), corpora, 0.15).err().unwrap();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn rxvtcl_batches_mix_alignments() {
        let t = toy_trainer(small()).unwrap();
        match t.batch_for(Task::Rxvtcl, 3) {
            BatchIndices::Mixed(s, w) => assert_eq!((s.len(), w.len()), (2, 2)),
            other => panic!("{other:?}"),
        }
    }
}
