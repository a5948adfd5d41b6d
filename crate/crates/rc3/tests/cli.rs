mod common;

use std::fs;
use std::process::Command;

use common::{rc3, write_tiny};
use rc3::config::{kebab, Config};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rc3"))
}

#[test]
fn zero_steps_is_a_validation_error() {
    let out = bin().args(["train", "--out", "unused", "--steps", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("rc3: config error: train.steps"), "{err}");
}

#[test]
fn unknown_flags_and_subcommands_are_rejected() {
    for args in [vec!["train", "--out", "x", "--stepz", "3"], vec!["fit"], vec!["inspect-ckpt", "a", "--steps", "1"]] {
        let o = rc3(&args, None);
        assert_eq!(o.code, 1, "{args:?}");
        assert!(o.stderr.starts_with("rc3: usage error: "), "{}", o.stderr);
    }
    assert_eq!(rc3(&["--help"], None).code, 0);
}

#[test]
fn every_config_field_has_a_flag() {
    let cmd = rc3::cli::command();
    for sub in ["gen-data", "train", "eval", "gradcheck", "probe"] {
        let sub = cmd.find_subcommand(sub).unwrap();
        let longs: Vec<&str> = sub.get_arguments().filter_map(|a| a.get_long()).collect();
        for (section, key, _) in Config::fields() {
            let flag = format!("{section}-{}", kebab(&key));
            assert!(longs.contains(&flag.as_str()), "{} lacks --{flag}", sub.get_name());
        }
    }
}

#[test]
fn flag_over_file_over_env_over_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        format!("{}\n", common::TINY.replace("[train]\n", "[train]\nlr = 0.002\n").replace("[data]\n", "[data]\nseed = 5\n")),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let run = |extra: &[&str], env: Option<&str>| -> toml::Table {
        let out = dir.path().join("run");
        let mut args = vec!["train", "--config", cfg, "--out", out.to_str().unwrap(), "--steps", "2"];
        args.extend_from_slice(extra);
        let o = rc3(&args, env);
        assert_eq!(o.code, 0, "{}", o.stderr);
        toml::from_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap()
    };
    let get = |t: &toml::Table, s: &str, k: &str| t[s][k].clone();

    let t = run(&[], Some("99"));
    // flag beats file, file beats default
    assert_eq!(get(&t, "train", "steps").as_integer(), Some(2));
    assert_eq!(get(&t, "train", "lr").as_float(), Some(0.002));
    assert_eq!(get(&t, "train", "beta1").as_float(), Some(0.9));
    // file beats env, env beats default
    assert_eq!(get(&t, "data", "seed").as_integer(), Some(5));
    assert_eq!(get(&t, "train", "seed").as_integer(), Some(99));
    assert_eq!(get(&t, "eval", "seed").as_integer(), Some(99));

    // the shorthand beats file and env; a qualified flag beats the shorthand
    let t = run(&["--seed", "11", "--eval-seed", "12"], Some("99"));
    assert_eq!(get(&t, "data", "seed").as_integer(), Some(11));
    assert_eq!(get(&t, "train", "seed").as_integer(), Some(11));
    assert_eq!(get(&t, "eval", "seed").as_integer(), Some(12));

    let t = run(&[], None);
    assert_eq!(get(&t, "train", "seed").as_integer(), Some(7));
}

#[test]
fn seed_is_read_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = dir.path().join("run");
    let st = bin()
        .args(["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--steps", "1"])
        .env("RC3_SEED", "123")
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(0));
    let t: toml::Table = toml::from_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(t["train"]["seed"].as_integer(), Some(123));
    let st = bin().args(["train", "--out", "x"]).env("RC3_SEED", "abc").output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8(st.stderr).unwrap().starts_with("rc3: config error: RC3_SEED"));
}

#[test]
fn gradcheck_prints_four_errors() {
    let out = bin().args(["gradcheck", "--seed", "7"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    for (l, name) in lines.iter().zip(["mclm", "itm", "xtcl", "rxvtcl"]) {
        let mut w = l.split_whitespace();
        assert_eq!(w.next(), Some(name));
        assert_eq!(w.next(), Some("max_rel_err"));
        let e: f64 = w.next().unwrap().parse().unwrap();
        assert!(e < 1e-4, "{l}");
    }
    // an impossible tolerance is a numeric failure
    let o = rc3(&["gradcheck", "--tolerance", "0"], None);
    assert_eq!(o.code, 2);
    assert!(o.stderr.starts_with("rc3: gradcheck failure: "), "{}", o.stderr);
}

#[test]
fn divergent_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = dir.path().join("run");
    let o = rc3(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--lr", "1e305", "--steps", "40"], None);
    assert_eq!(o.code, 2, "{}", o.stderr);
    assert!(o.stderr.starts_with("rc3: numeric error: "), "{}", o.stderr);
    assert!(o.stderr.contains("batch "), "{}", o.stderr);
}

#[test]
fn pipeline_outputs_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let cfg = write_tiny(dir.path());
    let ok = |args: &[&str]| {
        let o = rc3(args, None);
        assert_eq!(o.code, 0, "{args:?}: {}", o.stderr);
        o
    };
    ok(&["gen-data", "--config", &cfg, "--out", &p("data")]);
    ok(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p("reg"), "--checkpoint-interval", "4"]);
    ok(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p("noreg"), "--no-kl"]);
    assert!(dir.path().join("reg/step-000004/manifest.toml").exists());
    assert!(!dir.path().join("reg/step-000008").exists());

    let metrics = fs::read_to_string(p("reg/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (0..8).collect::<Vec<_>>());

    let o = ok(&["eval", "--config", &cfg, "--data", &p("data"), "--ckpt", &p("reg/final"), "--out", &p("eval")]);
    assert!(o.stdout.starts_with("recall@1 image_to_text "), "{}", o.stdout);
    let csv = fs::read_to_string(p("eval/retrieval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "direction,recall_at_1,n_queries,candidate_set_size");
    assert_eq!(rows.len(), 4);
    let kinds: Vec<String> = fs::read_to_string(p("eval/eval.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds, ["retrieval", "itm", "cloze"]);

    ok(&["probe", "--config", &cfg, "--data", &p("data"), "--reg", &p("reg/final"), "--noreg", &p("noreg/final"), "--out", &p("probe")]);
    assert_eq!(fs::read_to_string(p("probe/probe.csv")).unwrap().lines().count(), 1 + 30 + 10);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("probe/probe_summary.json")).unwrap()).unwrap();
    assert_eq!(s["n_weak"], 30);

    let o = ok(&["inspect-ckpt", &p("reg/final")]);
    assert!(o.stdout.contains("[[tensor]]") && o.stdout.contains("blob ok"), "{}", o.stdout);

    // mismatched model config: exit 1 with the manifest diff
    let o = rc3(&["eval", "--config", &cfg, "--ckpt", &p("reg/final"), "--out", &p("e2"), "--d-model", "32"], None);
    assert_eq!(o.code, 1);
    assert!(o.stderr.starts_with("rc3: checkpoint error: "), "{}", o.stderr);
    assert!(o.stderr.contains("first mismatch tensor #0: expected tok_emb"), "{}", o.stderr);
    assert!(o.stderr.contains("model.d_model: expected 32, found 16"), "{}", o.stderr);

    // corpora generated under another seed
    let o = rc3(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p("r3"), "--data-seed", "8"], None);
    assert_eq!(o.code, 1);
    assert!(o.stderr.starts_with("rc3: corpus error: ") && o.stderr.contains("fingerprint"), "{}", o.stderr);

    let o = rc3(&["inspect-ckpt", &p("missing")], None);
    assert_eq!(o.code, 1);
    assert!(o.stderr.starts_with("rc3: io error: "), "{}", o.stderr);
}

#[test]
fn identical_argv_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = rc3(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--print-metrics"], None);
        assert_eq!(o.code, 0);
        let read = |f: &str| fs::read(out.join(f)).unwrap();
        (o.stdout.replace(name, ""), read("metrics.jsonl"), read("final/params.bin"), read("final/manifest.toml"))
    };
    assert_eq!(run("run-first"), run("run-second"));
}
