//! The steps behind each subcommand, with file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rc3_core::eval::{
    eval_cloze, eval_itm, eval_retrieval, regularization_probe, ClozeResult, ItmAccuracy, ProbeRecord, ProbeSummary,
    RetrievalSummary,
};
use rc3_core::model::Model;
use rc3_core::synthdata::ConceptWorld;
use rc3_core::trainer::Trainer;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint;
use crate::config::Config;
use crate::corpus::CorpusSet;
use crate::error::{Error, Result};
use crate::metrics::MetricsWriter;

/// Loads `data` when given, otherwise generates the corpora in memory.
pub fn corpus(cfg: &Config, world: &ConceptWorld, data: Option<&Path>) -> Result<CorpusSet> {
    match data {
        Some(dir) => CorpusSet::load(cfg, dir),
        None => CorpusSet::generate(world, cfg),
    }
}

pub fn gen_data(cfg: &Config, world: &ConceptWorld, out: &Path) -> Result<CorpusSet> {
    let set = CorpusSet::generate(world, cfg)?;
    set.save(cfg, out)?;
    Ok(set)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("step-{step:06}"))
}

/// Trains from `init` (or a fresh model seeded by `train.seed`), writing
/// `config.toml`, `metrics.jsonl`, intermediate checkpoints every
/// `train.checkpoint_interval` steps and `final/`.
pub fn train(
    cfg: &Config,
    corpus: &CorpusSet,
    init: Option<Model>,
    out: &Path,
    echo: bool,
    stdout: &mut dyn Write,
) -> Result<TrainOutcome> {
    let model = match init {
        Some(m) => m,
        None => Model::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let mut trainer = Trainer::new(cfg.train.clone(), model, corpus.train.clone(), cfg.data.mask_prob)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cpath = out.join("config.toml");
    fs::write(&cpath, cfg.to_toml()).map_err(|e| Error::io(&cpath, e))?;
    let mpath = out.join("metrics.jsonl");
    let mut writer = MetricsWriter::create(&mpath, echo)?;
    let start = Instant::now();
    let interval = cfg.train.checkpoint_interval;
    while !trainer.is_done() {
        let mut r = trainer.step()?;
        if cfg.train.record_wall_time {
            r.wall_time = Some(start.elapsed().as_secs_f64());
        }
        writer.write(&r, stdout)?;
        let done = trainer.steps_done();
        if interval > 0 && done % interval == 0 && !trainer.is_done() {
            checkpoint::save(trainer.model(), &checkpoint_dir(out, done))?;
        }
    }
    writer.finish()?;
    let steps = trainer.steps_done();
    let model = trainer.into_model();
    let final_checkpoint = out.join("final");
    checkpoint::save(&model, &final_checkpoint)?;
    Ok(TrainOutcome {
        model,
        steps,
        final_checkpoint,
        metrics: mpath,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub retrieval: RetrievalSummary,
    pub itm: ItmAccuracy,
    pub cloze: ClozeResult,
}

pub fn evaluate(cfg: &Config, world: &ConceptWorld, model: &Model, corpus: &CorpusSet) -> Result<EvalReport> {
    let held = &corpus.heldout_strict[..cfg.eval.n_heldout.min(corpus.heldout_strict.len())];
    Ok(EvalReport {
        retrieval: eval_retrieval(model, world, held, &cfg.eval.retrieval())?,
        itm: eval_itm(model, held, cfg.eval.seed)?,
        cloze: eval_cloze(model, held, cfg.data.mask_prob, cfg.eval.seed)?,
    })
}

#[derive(Serialize)]
struct RetrievalRow<'a> {
    direction: &'a str,
    recall_at_1: f64,
    n_queries: usize,
    candidate_set_size: usize,
}

/// `retrieval.csv` plus `eval.jsonl` with one record per metric.
pub fn write_eval(report: &EvalReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let r = &report.retrieval;
    let rows = [
        RetrievalRow {
            direction: r.image_to_text.direction.name(),
            recall_at_1: r.image_to_text.recall_at_1,
            n_queries: r.image_to_text.n_queries,
            candidate_set_size: r.image_to_text.candidate_set_size,
        },
        RetrievalRow {
            direction: r.text_to_image.direction.name(),
            recall_at_1: r.text_to_image.recall_at_1,
            n_queries: r.text_to_image.n_queries,
            candidate_set_size: r.text_to_image.candidate_set_size,
        },
        RetrievalRow {
            direction: "average",
            recall_at_1: r.average,
            n_queries: r.image_to_text.n_queries,
            candidate_set_size: r.image_to_text.candidate_set_size,
        },
    ];
    write_csv(&out.join("retrieval.csv"), &rows)?;
    let lines = [
        json!({"kind": "retrieval", "result": r}),
        json!({"kind": "itm", "result": report.itm}),
        json!({"kind": "cloze", "result": report.cloze}),
    ];
    write_jsonl(&out.join("eval.jsonl"), &lines)
}

pub fn probe(cfg: &Config, reg: &Model, noreg: &Model, corpus: &CorpusSet) -> Result<(Vec<ProbeRecord>, ProbeSummary)> {
    let weak = &corpus.heldout_weak[..cfg.eval.probe_weak.min(corpus.heldout_weak.len())];
    let controls = &corpus.heldout_strict[..cfg.eval.probe_controls.min(corpus.heldout_strict.len())];
    Ok(regularization_probe(reg, noreg, weak, controls)?)
}

/// `probe.csv` with one row per triplet and `probe_summary.json`.
pub fn write_probe(records: &[ProbeRecord], summary: &ProbeSummary, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_csv(&out.join("probe.csv"), records)?;
    let path = out.join("probe_summary.json");
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_jsonl(path: &Path, lines: &[serde_json::Value]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
