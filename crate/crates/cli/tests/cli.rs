use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use tempfile::TempDir;

fn volenc() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_volenc"));
    c.env_remove("VOLENC_MODEL");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    volenc().args(args).current_dir(dir).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A corpus and a briefly trained model shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&["synth-data", "--seed", "3", "--stocks", "2", "--out", "corpus.csv"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let o = run(
            &["train", "--corpus", "corpus.csv", "--epochs", "2", "--out", "model.json"],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture { dir }
    })
}

#[test]
fn help_and_version_exit_zero() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--help"], d.path()).status.code(), Some(0));
    assert_eq!(run(&["--version"], d.path()).status.code(), Some(0));
}

#[test]
fn unknown_flag_and_missing_subcommand_are_validation_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(&["synth-data", "--out", "x.csv", "--bogus"], d.path()).status.code(), Some(1));
    assert_eq!(run(&[], d.path()).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"], d.path()).status.code(), Some(1));
}

#[test]
fn missing_input_file_is_reported_before_work() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["train", "--corpus", "nope.csv", "--out", "m.json"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.csv"), "{}", stderr(&o));
    assert!(!d.path().join("m.json").exists());
}

#[test]
fn bad_flag_values_are_validation_errors() {
    let f = fixture();
    let o = run(&["train", "--corpus", "corpus.csv", "--epochs", "0", "--out", "x.json"], f.dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--epochs"));
    let o = run(&["sweep", "--model", "model.json", "--dim", "4", "--out", "s.csv"], f.dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--dim"));
    let o = run(
        &["extrapolate", "--model", "model.json", "--corpus", "corpus.csv", "--known-terms", "5", "--out", "e.csv"],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("term 5"), "{}", stderr(&o));
}

#[test]
fn output_directory_must_exist() {
    let f = fixture();
    let o = run(&["synth-data", "--out", "missing/dir/corpus.csv"], f.dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing/dir"));
}

#[test]
fn grid_mismatch_is_a_validation_error() {
    let f = fixture();
    let text = std::fs::read_to_string(f.path("corpus.csv")).unwrap();
    let filtered: String = text
        .lines()
        .filter(|l| !l.contains(",1.2,"))
        .map(|l| format!("{l}\n"))
        .collect();
    let small = f.path("small-grid.csv");
    std::fs::write(&small, filtered).unwrap();
    let o = run(
        &["evaluate", "--model", "model.json", "--corpus", "small-grid.csv", "--out", "r.csv"],
        f.dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn synth_data_is_byte_identical_across_runs_and_writes_manifest() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a.csv", "b.csv"] {
        let o = run(&["synth-data", "--seed", "7", "--stocks", "1", "--out", out, "--prices", &format!("p-{out}")], d.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |n: &str| std::fs::read(d.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("p-a.csv"), read("p-b.csv"));
    let m: serde_json::Value = serde_json::from_slice(&read("a.csv.manifest.json")).unwrap();
    assert_eq!(m["command"], "synth-data");
    assert_eq!(m["seeds"]["synth"], 7);
    assert_eq!(m["config"]["stocks"], 1);
    assert_eq!(m["outputs"][1], "p-a.csv");
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let f = fixture();
    let hist = std::fs::read_to_string(f.path("model.json.history.csv")).unwrap();
    let lines: Vec<&str> = hist.lines().collect();
    assert_eq!(lines[0], "epoch,total,recon,kl,cov,cov_signed,mean_sigma");
    assert_eq!(lines.len(), 3);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.path("model.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["init"], 1);
    assert_eq!(m["seeds"]["train"], 11);
    assert_eq!(m["config"]["lambda_cov"], 0.1);
    let model = volenc_core::checkpoint::load_model(&f.path("model.json")).unwrap();
    assert_eq!(model.latent_dim(), 3);
}

#[test]
fn model_path_falls_back_to_environment() {
    let f = fixture();
    let o = volenc()
        .args(["sweep", "--dim", "1", "--steps", "3", "--out", "env-sweep.csv"])
        .env("VOLENC_MODEL", f.path("model.json"))
        .current_dir(f.dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(f.path("env-sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 56);
    assert!(text.contains("z1=-2.000000"));
    let o = run(&["sweep", "--dim", "1", "--out", "x.csv"], f.dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analysis_subcommands_produce_their_tables() {
    let f = fixture();
    let dir = f.dir.path();
    let m = ["--model", "model.json", "--corpus", "corpus.csv"];
    let with = |cmd: &str, extra: &[&str]| {
        let mut a = vec![cmd];
        a.extend(m);
        a.extend(extra);
        let o = run(&a, dir);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    };
    with("encode", &["--out", "enc.csv"]);
    with("diagnose", &["--out", "diag.json"]);
    with("evaluate", &["--out", "recon.csv"]);
    with("infer-stock", &["--prices", "prices.csv", "--out", "stock.csv"]);

    let enc = std::fs::read_to_string(f.path("enc.csv")).unwrap();
    assert!(enc.starts_with("date,symbol,stress,mu_1,mu_2,mu_3,log_sigma_1"));
    assert_eq!(enc.lines().count(), 1 + 3 * 1250);
    let diag: serde_json::Value = serde_json::from_slice(&std::fs::read(f.path("diag.json")).unwrap()).unwrap();
    assert_eq!(diag["latent_dim"], 3);
    assert_eq!(diag["test_correlations"]["matrix"].as_array().unwrap().len(), 3);
    assert!(f.path("diag.json.correlations.csv").exists());
    let recon = std::fs::read_to_string(f.path("recon.csv")).unwrap();
    assert!(recon.lines().last().unwrap().starts_with("ALL,"));
    let stock = std::fs::read_to_string(f.path("stock.csv")).unwrap();
    assert!(stock.starts_with("symbol,z1_error,z2_error,z3_error,satisfaction\n"));
    assert_eq!(stock.lines().count(), 1 + 2 + 1);
    for name in ["enc.csv", "diag.json", "recon.csv", "stock.csv"] {
        assert!(f.path(&format!("{name}.manifest.json")).exists(), "{name}");
    }
}

#[test]
fn extrapolate_writes_per_symbol_table() {
    let f = fixture();
    let o = run(
        &[
            "extrapolate", "--model", "model.json", "--corpus", "corpus.csv", "--known-terms", "3,6,9,12",
            "--known-moneyness", "0.95,1.00,1.05", "--starts", "2", "--out", "extrap.csv",
        ],
        f.dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(f.path("extrap.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "symbol,mae_known,mae_unknown,satisfaction");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("ALL,"));
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[tokio::test]
async fn serve_answers_the_client() {
    let f = fixture();
    let mut child = volenc()
        .args(["serve", "--model", "model.json", "--port", "0"])
        .current_dir(f.dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let _guard = Server(child);
    let url = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    let client = volenc_client::Client::new(url);
    let meta = client.meta().await.unwrap();
    assert_eq!(meta.latent_dim, 3);
    let a = client.decode(&[0.0, 0.0, 0.0]).await.unwrap();
    let b = client.decode(&[0.0, 0.0, 0.0]).await.unwrap();
    assert_eq!(a, b);
    let err = client.decode(&[0.0; 4]).await.unwrap_err();
    assert_eq!(err.status().map(|s| s.as_u16()), Some(400));
}

#[test]
fn serve_on_a_taken_port_is_a_runtime_failure() {
    let f = fixture();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let o = run(&["serve", "--model", "model.json", "--port", &port], f.dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
