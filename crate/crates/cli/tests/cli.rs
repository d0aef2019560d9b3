//! Runs the `ldam` binary as a user would.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use ldam_core::grid::png_dimensions;
use ldam_core::{build_discriminator, build_lenet, save_checkpoint};

fn ldam() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ldam"));
    c.env_remove("LDAM_DATA_DIR")
        .env_remove("LDAM_MODELS_DIR")
        .env_remove("LDAM_RUNS_DIR")
        .env_remove("LDAM_BIND_ADDR")
        .env("RUST_LOG", "warn");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn ok(c: &mut Command) -> String {
    let out = run(c);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        c,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn models(dir: &Path) {
    save_checkpoint(&build_lenet(0), &dir.join("lenet.ckpt")).unwrap();
    save_checkpoint(&build_discriminator(0), &dir.join("disc.ckpt")).unwrap();
}

#[test]
fn train_is_deterministic_and_zero_epochs_writes_init() {
    let t = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(ldam()
            .args(["train", "--epochs", "1", "--param-avg-from", "0", "--limit", "300", "--seed", "4"])
            .arg("--data-dir")
            .arg(data_dir())
            .arg("--out")
            .arg(t.path().join(out)));
    }
    for f in ["lenet-s4.ckpt", "lenet-s4-avg.ckpt", "lenet-s4-snapshot-01.ckpt"] {
        let a = std::fs::read(t.path().join("a").join(f)).unwrap();
        let b = std::fs::read(t.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }

    let stdout = ok(ldam()
        .args(["train", "--epochs", "0", "--limit", "10", "--seed", "9"])
        .arg("--data-dir")
        .arg(data_dir())
        .arg("--out")
        .arg(t.path().join("z")));
    let last: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(last["files"].as_array().unwrap().len(), 1);
    let init = ldam_core::load_checkpoint(&t.path().join("z/lenet-s9.ckpt")).unwrap();
    assert_eq!(init.params, build_lenet(9).params);
}

#[test]
fn train_without_data_is_actionable() {
    let out = run(ldam().args(["train", "--epochs", "1"]));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data-dir") && err.contains("LDAM_DATA_DIR"), "{err}");
}

#[test]
fn sample_sweep_grid_shape_and_metrics() {
    let t = tempfile::tempdir().unwrap();
    models(t.path());
    let grid = t.path().join("out/fig.png");
    ok(ldam()
        .args(["sample", "--model", "lenet", "--disc-model", "disc", "--steps", "0"])
        .args(["--disc-weight", "0,0.2,0.5,0.8,1.0"])
        .arg("--models-dir")
        .arg(t.path())
        .arg("--out")
        .arg(&grid));
    assert_eq!(png_dimensions(&std::fs::read(&grid).unwrap()).unwrap(), (10 * 28, 5 * 28));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(grid.with_extension("json")).unwrap()).unwrap();
    assert_eq!(m["rows"].as_array().unwrap().len(), 5);
    assert_eq!(m["rows"][3]["disc_weight"].as_f64().unwrap() as f32, 0.8);
    assert_eq!(m["rows"][0]["chains"][7]["seed"], 7);

    // same seed, same bytes
    let again = t.path().join("again.png");
    for out in [&grid, &again] {
        ok(ldam()
            .args(["sample", "--model", "lenet", "--steps", "20", "--neurons", "presoftmax:0..2"])
            .arg("--models-dir")
            .arg(t.path())
            .arg("--out")
            .arg(out));
    }
    assert_eq!(std::fs::read(&grid).unwrap(), std::fs::read(&again).unwrap());

    let out = run(ldam()
        .args(["sample", "--model", "lenet", "--neurons", "layer0:2"])
        .arg("--models-dir")
        .arg(t.path()));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer10: Dense"));

    let out = run(ldam()
        .args(["sample", "--model", "lenet", "--disc-weight", "0.5"])
        .arg("--models-dir")
        .arg(t.path()));
    assert!(!out.status.success());
}

#[test]
fn probe_refuses_zero_lambda_and_reports_schema() {
    let t = tempfile::tempdir().unwrap();
    models(t.path());
    let out = run(ldam()
        .args(["probe-filter", "--model", "lenet", "--lambda", "0"])
        .arg("--models-dir")
        .arg(t.path()));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    let report = t.path().join("probe.json");
    let stdout = ok(ldam()
        .args(["probe-filter", "--model", "lenet", "--max-steps", "2000"])
        .arg("--models-dir")
        .arg(t.path())
        .arg("--out")
        .arg(&report));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["all_pass", "ascent_tolerance", "kernels", "lambda", "model", "position", "threshold"]);
    let k = v["kernels"][0].as_object().unwrap();
    for field in ["channel", "ascent_relative_error", "sample_cosine", "sampler_steps", "pass"] {
        assert!(k.contains_key(field), "{field}");
    }
    assert_eq!(v["kernels"].as_array().unwrap().len(), 6);
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&std::fs::read(&report).unwrap()).unwrap(), v);
}

#[test]
fn fetch_imports_from_a_local_directory() {
    let t = tempfile::tempdir().unwrap();
    let src = t.path().join("src");
    std::fs::create_dir_all(&src).unwrap();
    // one file gzipped, the rest plain
    for name in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        let bytes = std::fs::read(data_dir().join(name)).unwrap();
        if name.starts_with("t10k-labels") {
            let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
            gz.write_all(&bytes).unwrap();
            std::fs::write(src.join(format!("{name}.gz")), gz.finish().unwrap()).unwrap();
        } else {
            std::fs::write(src.join(name), bytes).unwrap();
        }
    }
    let dest = t.path().join("mnist");
    let stdout = ok(ldam().arg("fetch").arg("--data-dir").arg(&dest).arg("--from").arg(&src));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["written"].as_array().unwrap().len(), 4);
    assert_eq!(
        std::fs::read(dest.join("t10k-labels-idx1-ubyte")).unwrap(),
        std::fs::read(data_dir().join("t10k-labels-idx1-ubyte")).unwrap()
    );
    // a complete directory is left alone
    let stdout = ok(ldam().arg("fetch").arg("--data-dir").arg(&dest).arg("--from").arg(&src));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(v["written"].as_array().unwrap().is_empty());
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn wait_for_health(base: &str) {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        if let Ok(r) = reqwest::blocking::get(format!("{base}/health")) {
            if r.status().is_success() {
                return;
            }
        }
        assert!(Instant::now() < deadline, "server did not come up");
        std::thread::sleep(Duration::from_millis(100));
    }
}

#[test]
fn serve_lists_models_and_shuts_down_gracefully() {
    let t = tempfile::tempdir().unwrap();
    let mdir = t.path().join("models");
    std::fs::create_dir_all(&mdir).unwrap();
    models(&mdir);
    let port = free_port();
    let base = format!("http://127.0.0.1:{port}");
    let mut child = ldam()
        .arg("serve")
        .env("LDAM_BIND_ADDR", format!("127.0.0.1:{port}"))
        .env("LDAM_RUNS_DIR", t.path().join("runs"))
        .env("LDAM_MODELS_DIR", &mdir)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    wait_for_health(&base);

    let health: serde_json::Value = reqwest::blocking::get(format!("{base}/health")).unwrap().json().unwrap();
    assert_eq!(health["version"], env!("CARGO_PKG_VERSION"));
    let models: serde_json::Value = reqwest::blocking::get(format!("{base}/models")).unwrap().json().unwrap();
    assert_eq!(models.as_array().unwrap().len(), 2);

    // a second server on the same port fails clearly
    let clash = run(ldam()
        .arg("serve")
        .arg("--bind")
        .arg(format!("127.0.0.1:{port}"))
        .arg("--runs-dir")
        .arg(t.path().join("runs2")));
    assert!(!clash.status.success());
    assert!(String::from_utf8_lossy(&clash.stderr).contains("already in use"));

    let client = reqwest::blocking::Client::new();
    let created: serde_json::Value = client
        .post(format!("{base}/sessions"))
        .json(&serde_json::json!({ "model": "lenet", "neuron": { "layer_index": 10, "unit": 1 } }))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let id = created["id"].as_str().unwrap().to_string();
    client
        .post(format!("{base}/sessions/{id}/control"))
        .json(&serde_json::json!({ "action": "start" }))
        .send()
        .unwrap();
    std::thread::sleep(Duration::from_millis(200));

    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let deadline = Instant::now() + Duration::from_secs(30);
    let exit = loop {
        if let Some(s) = child.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "serve ignored ctrl-c");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(exit.success());
    let rec: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("runs").join(&id).join("session.json")).unwrap()).unwrap();
    assert_eq!(rec["state"], "paused");
    assert!(rec["tick"].as_u64().unwrap() > 0, "progress persisted on shutdown");
}
