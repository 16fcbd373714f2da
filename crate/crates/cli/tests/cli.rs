use std::path::{Path, PathBuf};
use std::process::Command;

use lorapt::adapters::{param_count, EncoderWeights, Method};
use lorapt::segmetrics::Mask3D;
use lorapt_cli::container::{Array, Container, Dtype};
use lorapt_cli::schema;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn lorapt(args: &[&str]) -> Out {
    lorapt_env(args, &[])
}

fn lorapt_env(args: &[&str], env: &[(&str, &str)]) -> Out {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lorapt"));
    cmd.args(args).env_remove("TSPT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let o = cmd.output().expect("binary runs");
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8(o.stdout).unwrap(),
        stderr: String::from_utf8(o.stderr).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

fn write_mask(dir: &Path, name: &str, m: &Mask3D) -> PathBuf {
    let path = dir.join(name);
    schema::mask_to_container(m).unwrap().write(&path).unwrap();
    path
}

fn cube(dims: [usize; 3], lo: usize, hi: usize) -> Mask3D {
    let mut m = Mask3D::empty(dims, [1.0; 3]).unwrap();
    for x in lo..hi {
        for y in lo..hi {
            for z in lo..hi {
                m.set(x, y, z, true);
            }
        }
    }
    m
}

#[test]
fn decompose_then_merge_restores_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.tspt");
    let ad = dir.path().join("ad.tspt");
    let back = dir.path().join("back.tspt");
    let w = EncoderWeights::random(8, 2, 1.0, 5);
    let extra = Array::from_f64("head.bias", vec![3], &[0.5, -1.0, 2.0], Dtype::F32).unwrap();
    schema::weights_to_container(&w, Dtype::F64, &[extra.clone()])
        .unwrap()
        .write(&ck)
        .unwrap();

    let o = lorapt(&["decompose", "--in", p(&ck), "--rank", "2", "--out", p(&ad), "--dtype", "f64"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let want = param_count(Method::LoraPt, 8, 2, 2);
    assert!(o.stdout.contains(&format!("trainable parameters: {want}")), "{}", o.stdout);
    for name in ["w_sa", "w_up", "w_down"] {
        assert!(o.stdout.contains(name));
    }

    let o = lorapt(&["merge", "--adapter", p(&ad), "--out", p(&back), "--dtype", "f64"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let (got, extras) = schema::weights_from_container(&Container::read(&back).unwrap()).unwrap();
    assert!(got.max_rel_diff(&w) <= 1e-12);
    assert_eq!(extras, vec![extra]);
}

#[test]
fn inspect_lists_arrays_and_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.tspt");
    let o = lorapt(&["init-checkpoint", "--d", "4", "--layers", "1", "--out", p(&ck)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let o = lorapt(&["inspect", p(&ck)]);
    assert_eq!(o.code, 0);
    assert!(o.stdout.contains("layer.1.q"));
    assert!(o.stdout.contains("layer.1.up"));
    assert!(o.stdout.contains("\"kind\":\"checkpoint\""));

    let bytes = std::fs::read(&ck).unwrap();
    let bad = dir.path().join("bad.tspt");
    std::fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
    assert_eq!(lorapt(&["inspect", p(&bad)]).code, 2);
    let mut flipped = bytes.clone();
    flipped[0] = b'X';
    std::fs::write(&bad, &flipped).unwrap();
    assert_eq!(lorapt(&["inspect", p(&bad)]).code, 2);
    assert_eq!(lorapt(&["inspect", p(&dir.path().join("missing"))]).code, 2);
    // a header where a checkpoint is expected but the payload is an adapter
    let ad = dir.path().join("ad.tspt");
    assert_eq!(lorapt(&["decompose", "--in", p(&ck), "--rank", "1", "--out", p(&ad)]).code, 0);
    assert_eq!(lorapt(&["decompose", "--in", p(&ad), "--rank", "1", "--out", p(&bad)]).code, 2);
}

#[test]
fn tensorize_writes_three_stacks() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.tspt");
    let st = dir.path().join("st.tspt");
    assert_eq!(lorapt(&["init-checkpoint", "--d", "4", "--layers", "3", "--out", p(&ck)]).code, 0);
    let o = lorapt(&["tensorize", "--in", p(&ck), "--out", p(&st)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("w_sa: 4x4x12"));
    assert!(o.stdout.contains("w_up: 4x16x3"));
    let c = Container::read(&st).unwrap();
    assert_eq!(c.require("w_down").unwrap().shape, vec![16, 4, 3]);
}

#[test]
fn argument_errors_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.tspt");
    assert_eq!(lorapt(&["init-checkpoint", "--d", "4", "--layers", "1", "--out", p(&ck)]).code, 0);
    let out = dir.path().join("o.tspt");
    for args in [
        vec!["decompose", "--in", p(&ck), "--rank", "0", "--out", p(&out)],
        vec!["decompose", "--in", p(&ck), "--rank", "5", "--out", p(&out)],
        vec!["count-params", "--method", "lora", "--d", "8", "--layers", "1", "--rank", "0"],
        vec!["count-params", "--method", "dora", "--d", "8", "--layers", "1", "--rank", "1"],
        vec!["verify", "--suite", "everything"],
        vec!["no-such-command"],
        vec!["init-checkpoint", "--d", "4"],
    ] {
        assert_eq!(lorapt(&args).code, 3, "{args:?}");
    }
    assert!(!out.exists());
    assert_eq!(lorapt(&["--help"]).code, 0);
    assert_eq!(lorapt(&["--version"]).code, 0);
}

#[test]
fn count_params_prints_the_closed_form() {
    let o = lorapt(&["count-params", "--method", "lora-pt", "--d", "768", "--layers", "12", "--rank", "1"]);
    assert_eq!((o.code, o.stdout.trim()), (0, "165960"));
    let o = lorapt(&["count-params", "--method", "lora", "--d", "768", "--layers", "12", "--rank", "32"]);
    assert_eq!((o.code, o.stdout.trim()), (0, "5308416"));
    let o = lorapt(&["count-params", "--method", "pissa", "--d", "768", "--layers", "12", "--rank", "2"]);
    assert_eq!(o.stdout.trim(), param_count(Method::Pissa, 768, 12, 2).to_string());
}

#[test]
fn verify_reports_each_property() {
    let o = lorapt(&["verify", "--suite", "tprod", "--seed", "3"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.stdout.lines().filter(|l| l.starts_with("PASS ")).count(), 5);
    assert!(!o.stdout.contains("FAIL"));
}

#[test]
fn thread_cap_is_validated() {
    let args = ["count-params", "--method", "lora", "--d", "4", "--layers", "1", "--rank", "1"];
    assert_eq!(lorapt_env(&args, &[("TSPT_THREADS", "2")]).code, 0);
    assert_eq!(lorapt_env(&args, &[("TSPT_THREADS", "0")]).code, 3);
    assert_eq!(lorapt_env(&args, &[("TSPT_THREADS", "many")]).code, 3);
}

#[test]
fn train_toy_reports_losses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d = 8\nlayers = 1\nseq_len = 4\ntotal_iters = 20\nn_samples = 8\nmethod = pissa\nrank = 2\n");
    let o = lorapt(&["train-toy", "--config", p(&cfg)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("method=pissa rank=2"));
    assert!(o.stdout.contains(&format!("params={}", param_count(Method::Pissa, 8, 1, 2))));
    let line = o.stdout.lines().find(|l| l.starts_with("initial_loss=")).unwrap();
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|kv| kv.split_once('=').unwrap().1.parse().unwrap())
        .collect();
    assert!(vals[1] < vals[0]);
}

#[test]
fn bad_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    for body in ["rank = 0\n", "d = 8\nrank = 9\n", "colour = red\n", "total_iters = 0\n", "lr0 = quick\n"] {
        let cfg = write_config(dir.path(), body);
        assert_eq!(lorapt(&["train-toy", "--config", p(&cfg)]).code, 2, "{body}");
    }
    assert_eq!(lorapt(&["train-toy", "--config", p(&dir.path().join("nope.cfg"))]).code, 2);
}

#[test]
fn diverging_training_exits_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d = 8\nlayers = 1\nseq_len = 4\ntotal_iters = 50\nn_samples = 4\nlr0 = 1e300\n");
    let o = lorapt(&["train-toy", "--config", p(&cfg)]);
    assert_eq!(o.code, 1, "{}{}", o.stdout, o.stderr);
    assert!(o.stderr.to_lowercase().contains("non-finite") || o.stderr.contains("NaN"), "{}", o.stderr);
}

#[test]
fn rank_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d = 8\nlayers = 1\nseq_len = 4\ntotal_iters = 10\nn_samples = 4\nseed = 3\n");
    let csv_path = dir.path().join("sweep.csv");
    let o = lorapt(&[
        "rank-sweep", "--config", p(&cfg), "--ranks", "1,2", "--methods", "lora-pt,lora", "--out", p(&csv_path),
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap(), vec!["method", "rank", "params", "final_loss", "seed"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let m: Method = row[0].parse().unwrap();
        let r: u64 = row[1].parse().unwrap();
        assert_eq!(row[2].parse::<u64>().unwrap(), param_count(m, 8, 1, r));
        assert!(row[3].parse::<f64>().unwrap().is_finite());
        assert_eq!(&row[4], "3");
    }
    // same run to stdout is byte-identical
    let o = lorapt(&["rank-sweep", "--config", p(&cfg), "--ranks", "1,2", "--methods", "lora-pt,lora"]);
    assert_eq!(o.stdout, text);
    assert_eq!(lorapt(&["rank-sweep", "--config", p(&cfg), "--ranks", "1,9"]).code, 3);
}

#[test]
fn seg_metrics_identical_masks() {
    let dir = tempfile::tempdir().unwrap();
    let m = cube([6, 6, 6], 1, 4);
    let a = write_mask(dir.path(), "a.tspt", &m);
    let b = write_mask(dir.path(), "b.tspt", &m);
    let o = lorapt(&["seg-metrics", "--pred", p(&a), "--gt", p(&b)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.stdout.trim(), "dice=1.0 hd95=0.0");
}

#[test]
fn seg_metrics_empty_prediction_is_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_mask(dir.path(), "a.tspt", &Mask3D::empty([4, 4, 4], [1.0; 3]).unwrap());
    let b = write_mask(dir.path(), "b.tspt", &cube([4, 4, 4], 0, 2));
    let o = lorapt(&["seg-metrics", "--pred", p(&a), "--gt", p(&b)]);
    assert_eq!(o.code, 4);
    assert_eq!(o.stdout.trim(), "dice=0.0 hd95=undefined");
}

#[test]
fn seg_metrics_postprocess_drops_small_islands() {
    let dir = tempfile::tempdir().unwrap();
    let gt = cube([12, 12, 12], 0, 5);
    let mut pred = gt.clone();
    pred.set(11, 11, 11, true);
    let a = write_mask(dir.path(), "a.tspt", &pred);
    let b = write_mask(dir.path(), "b.tspt", &gt);
    let raw = lorapt(&["seg-metrics", "--pred", p(&a), "--gt", p(&b)]);
    assert_eq!(raw.code, 0);
    assert_ne!(raw.stdout.trim(), "dice=1.0 hd95=0.0");
    let o = lorapt(&["seg-metrics", "--pred", p(&a), "--gt", p(&b), "--postprocess", "10"]);
    assert_eq!(o.stdout.trim(), "dice=1.0 hd95=0.0");
    assert_eq!(lorapt(&["seg-metrics", "--pred", p(&a), "--gt", p(&b), "--postprocess", "-1"]).code, 3);
}

#[test]
fn seg_metrics_shape_mismatch_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_mask(dir.path(), "a.tspt", &cube([4, 4, 4], 0, 2));
    let b = write_mask(dir.path(), "b.tspt", &cube([4, 4, 5], 0, 2));
    assert_eq!(lorapt(&["seg-metrics", "--pred", p(&a), "--gt", p(&b)]).code, 2);
}

#[test]
fn in_process_runner_matches_the_binary() {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = lorapt_cli::run(
        ["lorapt", "count-params", "--method", "lora-pt", "--d", "16", "--layers", "2", "--rank", "3"],
        &mut out,
        &mut err,
    );
    assert_eq!(code, 0);
    assert_eq!(String::from_utf8(out).unwrap().trim(), param_count(Method::LoraPt, 16, 2, 3).to_string());
}
