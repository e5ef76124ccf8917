use std::path::Path;
use std::process::{Command, Output};

use acrnet::codec::{self, FeedbackPayload};
use acrnet::csi::Dataset;
use acrnet::model::{AcrNet, Eta, ModelConfig};
use acrnet::train::Checkpoint;

fn acrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acrnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = acrnet(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn err_line(args: &[&str]) -> String {
    let o = acrnet(args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let e = stderr(&o);
    assert_eq!(e.lines().count(), 1, "expected one line, got {e:?}");
    e.trim_end().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, count: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(name);
    ok(&[
        "gen-data",
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--output",
        p(&path),
    ]);
    path
}

#[test]
fn count_prints_banner_and_totals() {
    let out = ok(&["count", "--k", "1", "--eta", "1/4"]);
    assert!(out
        .lines()
        .next()
        .unwrap()
        .starts_with("# acrnet count k=1 eta=1/4"));
    assert!(out.contains("total.flops=4644864"));
    assert!(out.contains("total.params=2102380"));
}

#[test]
fn count_accepts_feature_length() {
    let out = ok(&["count", "--k", "10", "--eta", "256"]);
    assert!(out.contains("eta=1/8"));
}

#[test]
fn plan_fixtures() {
    let out = ok(&["plan", "--max-bits", "2048"]);
    assert!(out.contains("eta=1/4") && out.contains("bits=4"), "{out}");

    let out = ok(&["plan", "--eta", "1/4", "--ue-params", "40000"]);
    assert!(out.contains("binarize_encoder_fc=true"), "{out}");
    assert!(out.contains("binarize_decoder_fc=false"), "{out}");

    let out = ok(&["plan", "--eta", "1/4", "--bs-flops", "25e6"]);
    assert!(out.contains("\nk=10\n"), "{out}");
}

#[test]
fn infeasible_plan_names_a_constraint() {
    let e = err_line(&["plan", "--ue-flops", "1000"]);
    assert!(e.starts_with("error[infeasible]:"), "{e}");
    assert!(e.contains("ue-flops"), "{e}");
}

#[test]
fn usage_and_config_errors_are_one_line() {
    assert!(err_line(&["frobnicate"]).starts_with("error[usage]:"));
    assert!(err_line(&["count", "--k", "x"]).starts_with("error[usage]:"));
    assert!(err_line(&["count", "--eta", "1/3"]).starts_with("error[config]:"));
    assert!(err_line(&["count", "--k", "0"]).starts_with("error[config]:"));
    assert!(err_line(&["plan", "--ue-params", "0"]).starts_with("error[config]:"));
}

#[test]
fn missing_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csid");
    let e = err_line(&["roundtrip", "--bits", "4", "--input", p(&missing)]);
    assert!(e.starts_with("error[io]:"), "{e}");

    let junk = dir.path().join("junk.csid");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let e = err_line(&["roundtrip", "--bits", "4", "--input", p(&junk)]);
    assert!(e.starts_with("error[format]:"), "{e}");

    let e = err_line(&[
        "decode",
        "--bits",
        "4",
        "--input",
        p(&junk),
        "--output",
        p(&dir.path().join("out.csid")),
    ]);
    assert!(e.starts_with("error[format]:"), "{e}");
}

#[test]
fn codec_without_bits_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.csid", 4, 1);
    let e = err_line(&["roundtrip", "--input", p(&data)]);
    assert!(e.starts_with("error[config]:"), "{e}");
}

#[test]
fn encode_decode_matches_in_process_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.csid", 6, 3);
    let payload = dir.path().join("fb.bin");
    let recon = dir.path().join("r.csid");
    let common = ["--k", "2", "--eta", "1/8", "--bits", "3", "--seed", "9"];
    let mut args = vec!["encode", "--input", p(&data), "--output", p(&payload)];
    args.extend(common);
    let out = ok(&args);
    assert!(out.contains("768 bits each"), "{out}");
    let mut args = vec!["decode", "--input", p(&payload), "--output", p(&recon)];
    args.extend(common);
    ok(&args);

    let ds = Dataset::load(&data).unwrap();
    let mut cfg = ModelConfig::new(2, Eta::reciprocal(8).unwrap());
    cfg.quant_bits = Some(3);
    let model = AcrNet::build(&cfg, 9).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let v = model.encode(&ds.batch(&idx)).unwrap();
    let codes = codec::quantize(v.data(), 3).unwrap();
    let deq = codec::dequantize(&codes, 3).unwrap();
    let v = acrnet::tensor::Tensor::new(v.shape().to_vec(), deq).unwrap();
    let expected = model.decode(&v).unwrap();

    let got = Dataset::load(&recon).unwrap();
    assert_eq!(got.len(), ds.len());
    assert_eq!(got.data(), expected.data());

    let bytes = std::fs::read(&payload).unwrap();
    let payloads = FeedbackPayload::read_stream(&bytes).unwrap();
    assert_eq!(payloads.len(), ds.len());
    assert!(payloads.iter().all(|q| q.payload_bits() == 768));
}

#[test]
fn roundtrip_reports_nmse() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.csid", 5, 2);
    let out = ok(&["roundtrip", "--bits", "4", "--input", p(&data)]);
    assert!(out.contains("samples=5 feedback_bits=2048"), "{out}");
    assert!(out.contains("nmse_db="), "{out}");
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "t.csid", 16, 4);
    let val = dir.path().join("v.csid");
    ok(&[
        "gen-data",
        "--count",
        "8",
        "--seed",
        "5",
        "--norm-from",
        p(&train),
        "--output",
        p(&val),
    ]);
    let ck = dir.path().join("m.ckpt");
    let hist = dir.path().join("h.csv");
    let out = ok(&[
        "train",
        "--input",
        p(&train),
        "--val",
        p(&val),
        "--epochs",
        "2",
        "--batch",
        "8",
        "--bits",
        "4",
        "--checkpoint",
        p(&ck),
        "--output",
        p(&hist),
    ]);
    assert!(
        out.contains("epoch=1 ") && out.contains("epoch=2 "),
        "{out}"
    );
    assert!(std::fs::read_to_string(&hist).unwrap().lines().count() >= 3);

    let c = Checkpoint::load(&ck).unwrap();
    assert_eq!(c.epoch, 2);
    assert_eq!(c.config.quant_bits, Some(4));

    let out = ok(&["eval", "--checkpoint", p(&ck), "--input", p(&val)]);
    assert!(out.contains("nmse_db="), "{out}");

    let ck2 = dir.path().join("m2.ckpt");
    let out = ok(&[
        "train",
        "--input",
        p(&train),
        "--epochs",
        "3",
        "--batch",
        "8",
        "--bits",
        "4",
        "--resume",
        p(&ck),
        "--checkpoint",
        p(&ck2),
    ]);
    assert!(
        out.contains("epoch=3 ") && !out.contains("epoch=1 "),
        "{out}"
    );

    let e = err_line(&[
        "train",
        "--input",
        p(&train),
        "--epochs",
        "3",
        "--k",
        "2",
        "--bits",
        "4",
        "--resume",
        p(&ck),
        "--checkpoint",
        p(&ck2),
    ]);
    assert!(
        e.starts_with("error[format]:") || e.starts_with("error[config]:"),
        "{e}"
    );

    let out = ok(&["roundtrip", "--checkpoint", p(&ck), "--input", p(&val)]);
    assert!(out.contains("feedback_bits=2048"), "{out}");
}
