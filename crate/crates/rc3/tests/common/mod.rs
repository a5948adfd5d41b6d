#![allow(dead_code)]

use std::path::Path;

use rc3::config::{self, Config};

/// A configuration small enough for a few training steps per test.
pub const TINY: &str = r#"
[model]
d_model = 16
n_enc_layers = 1
n_dec_layers = 1
n_heads = 2

[data]
n_strict = 60
n_weak = 60
n_parallel = 60

[train]
steps = 8
batch_mclm = 8
batch_itm = 8
batch_xtcl = 8
batch_rxvtcl = 8

[eval]
n_heldout = 100
n_queries = 20
k_candidates = 8
probe_weak = 30
probe_controls = 10
"#;

pub fn tiny() -> Config {
    config::resolve(Some(TINY), None, &[]).unwrap()
}

pub fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the command line in-process.
pub fn rc3(args: &[&str], env_seed: Option<&str>) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("rc3").chain(args.iter().copied());
    let code = rc3::cli::run(argv, env_seed, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}
