//! Metrics stream: one JSON object per line, keys sorted.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rc3_core::trainer::MetricsRecord;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub fn to_json(r: &MetricsRecord) -> Value {
    let components: Map<String, Value> = r.components.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    let counts: Map<String, Value> = r.counts.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    let mut obj = json!({
        "step": r.step,
        "task": r.task,
        "total": r.total,
        "components": components,
        "counts": counts,
        "p_avg_xtcl": r.p_avg_xtcl,
        "p_avg_rxvtcl": r.p_avg_rxvtcl,
        "grad_norm": r.grad_norm,
        "batch_fingerprint": r.batch_fingerprint,
    });
    if let Some(t) = r.wall_time {
        obj["wall_time"] = json!(t);
    }
    obj
}

/// Appends records to a file in step order, optionally echoing each line.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    echo: bool,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path, echo: bool) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            echo,
            last_step: None,
        })
    }

    pub fn write(&mut self, r: &MetricsRecord, stdout: &mut dyn Write) -> Result<()> {
        if self.last_step.is_some_and(|s| r.step <= s) {
            return Err(Error::Config(format!("metrics step {} after step {:?}", r.step, self.last_step)));
        }
        self.last_step = Some(r.step);
        let line = to_json(r).to_string();
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        if self.echo {
            writeln!(stdout, "{line}").map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
