use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cco_cli::config::RunMetadata;
use cco_cli::output::{parse_matrix_csv, sha256_hex, RunManifest};
use cco_core::seeds::Seed;

const PAIR: &str = "[system]\ninner = \"harmonic\"\ndriving = \"displaced\"\n\n[system.params]\na = 0.5\nb = 1.0\n";

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn exec(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_cco-transitions"))
            .args(args)
            .env("CCO_OUTPUT_DIR", self.out(out))
            .env("RUST_LOG", "error")
            .output()
            .unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&read(&dir.join("manifest.json"))).unwrap()
}

#[test]
fn seed_reports_the_displaced_equilibrium() {
    let r = Run::new();
    let cfg = r.config("seed.toml", &format!("{PAIR}\n[run.seeds]\nguess = [0.3, -0.2]\n"));
    let o = r.exec("out", &["seed", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let seeds: Vec<Seed> = serde_json::from_str(&read(&r.out("out/seeds.json"))).unwrap();
    assert_eq!(seeds.len(), 1);
    let x = seeds[0].point.as_slice();
    assert!(x[0].abs() < 1e-10 && (x[1] - 1.0 / 0.75).abs() < 1e-10, "{x:?}");
}

#[test]
fn manifest_lists_every_output_with_its_checksum() {
    let r = Run::new();
    let cfg = r.config("seed.toml", PAIR);
    let o = r.exec("out", &["seed", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = r.out("out");
    let m = manifest(&dir);
    assert_eq!(m.subcommand, "seed");
    assert_eq!(m.config_sha256.as_deref(), Some(sha256_hex(PAIR.as_bytes()).as_str()));
    let mut listed: Vec<String> = m.outputs.iter().map(|o| o.path.clone()).collect();
    listed.sort();
    let mut present: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    present.sort();
    assert_eq!(listed, present);
    for rec in &m.outputs {
        let bytes = std::fs::read(dir.join(&rec.path)).unwrap();
        assert_eq!(rec.sha256, sha256_hex(&bytes), "{}", rec.path);
        assert_eq!(rec.bytes, bytes.len() as u64);
    }
}

#[test]
fn unknown_key_exits_with_code_two_and_location() {
    let r = Run::new();
    let cfg = r.config("bad.toml", &format!("{PAIR}\n[run]\ntau = 1.0\nhbarr = 0.1\n"));
    let o = r.exec("out", &["density-classical", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.toml:11:"), "{err}");
    assert!(err.contains("hbarr"), "{err}");
}

#[test]
fn unparsable_system_exits_with_code_two() {
    let r = Run::new();
    let cfg = r.config("bad.toml", "[system]\ninner = \"harmonic\"\ndriving = \"p^2 + \"\n");
    let o = r.exec("out", &["seed", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:3:1"), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_with_code_two() {
    let r = Run::new();
    let o = r.exec("out", &["seed"]);
    assert_eq!(o.status.code(), Some(2));
    let o = r.exec("out", &["seed", "--config", r.out("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_code_one_and_stage() {
    let r = Run::new();
    let cfg = r.config(
        "two.toml",
        "[system]\ninner = \"coupled_quartic\"\ndriving = \"coupled_drive\"\ndof = 2\n",
    );
    let o = r.exec("out", &["oracle", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage `oracle-model`"), "{}", stderr(&o));
}

#[test]
fn compare_of_a_file_with_itself_is_zero() {
    let r = Run::new();
    let cfg = r.config(
        "mc.toml",
        &format!("{PAIR}\n[run]\nbins = [4, 5]\nsamples = 2000\nsampling_box = [[-4, 4], [-5, 5]]\n"),
    );
    let o = r.exec("mc", &["density-classical", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = r.out("mc/classical_binned.csv");
    let o = r.exec(
        "cmp",
        &["compare", "--left", csv.to_str().unwrap(), "--right", csv.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&read(&r.out("cmp/compare.json"))).unwrap();
    assert_eq!(summary["l2"], 0.0);
    assert_eq!(summary["max_abs"], 0.0);
    let diff = parse_matrix_csv(&read(&r.out("cmp/difference.csv"))).unwrap();
    assert_eq!(diff.values.shape(), (4, 5));
    assert!(diff.values.iter().all(|v| *v == 0.0));
}

#[test]
fn compare_rejects_different_grids() {
    let r = Run::new();
    let a = r.config("a.csv", "E\\E',1.0,2.0\n0.5,1.0,2.0\n");
    let b = r.config("b.csv", "E\\E',1.0,2.5\n0.5,1.0,2.0\n");
    let o = r.exec("cmp", &["compare", "--left", a.to_str().unwrap(), "--right", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage `compare`"));
    let o = r.exec("cmp", &["compare", "--left", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn monte_carlo_csv_is_byte_identical_on_rerun() {
    let r = Run::new();
    let cfg = r.config(
        "mc.toml",
        &format!(
            "{PAIR}\n[run]\nbins = [6, 7]\nsamples = 20000\nseed = 11\n\
             sampling_box = [[-4.5, 4.5], [-5.5, 5.5]]\n[output]\ncuts = [1.0]\n"
        ),
    );
    let c = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = r.exec(out, &["density-classical", "--config", c]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let (ma, mb) = (manifest(&r.out("a")), manifest(&r.out("b")));
    assert_eq!(ma.rng_seeds, vec![11]);
    let data: Vec<_> = ma.outputs.iter().filter(|o| !o.path.ends_with(".json")).collect();
    assert_eq!(data.len(), 10);
    for rec in data {
        assert!(mb.outputs.contains(rec), "{}", rec.path);
        assert_eq!(
            std::fs::read(r.out("a").join(&rec.path)).unwrap(),
            std::fs::read(r.out("b").join(&rec.path)).unwrap()
        );
    }
}

#[test]
fn overrides_change_the_grid() {
    let r = Run::new();
    let cfg = r.config("s.toml", &format!("{PAIR}\n[run]\nclassical = \"section\"\n"));
    let o = r.exec(
        "out",
        &[
            "density-classical",
            "--config",
            cfg.to_str().unwrap(),
            "--bins",
            "3,4",
            "--E-range",
            "0.9,1.1",
            "--Ep-range",
            "0.6,2.0",
            "--tau",
            "0.8",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = parse_matrix_csv(&read(&r.out("out/classical_binned.csv"))).unwrap();
    assert_eq!(m.e_values, vec![0.9, 1.0, 1.1]);
    assert_eq!(m.e_prime_values.len(), 4);
    assert!(m.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    let meta: RunMetadata = serde_json::from_str(&read(&r.out("out/metadata.json"))).unwrap();
    assert_eq!(meta.grid.tau, 0.8);
    assert_eq!(meta.config.run.bins, (3, 4));
}

#[test]
fn emitted_json_round_trips() {
    let r = Run::new();
    let cfg = r.config(
        "cco.toml",
        &format!("{PAIR}\n[run.cco]\ntimes = [[0.8, 0.6, 0.5], [1.5, 1.0, 1.0]]\n"),
    );
    let o = r.exec("out", &["cco", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = r.out("out");
    let meta_text = read(&dir.join("metadata.json"));
    let meta: RunMetadata = serde_json::from_str(&meta_text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&meta).unwrap() + "\n", meta_text);
    let m = manifest(&dir);
    let again: RunManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(again, m);
    let orbits: Vec<serde_json::Value> = serde_json::from_str(&read(&dir.join("orbits.json"))).unwrap();
    assert_eq!(orbits.len(), 2);
    for o in &orbits {
        assert!(o["closure_residual"].as_f64().unwrap() < 1e-9);
    }
}

#[test]
fn density_sc_and_oracle_share_the_grid() {
    let r = Run::new();
    let body = format!(
        "{PAIR}\n[run]\nhbar = 0.1\nepsilon = 0.1\ne_range = [1.0, 1.2]\ne_prime_range = [1.6, 2.4]\n\
         bins = [2, 9]\n[run.oracle]\nlevel_cutoff = 3.0\n[run.oracle.basis]\nsize = 128\n\
         omega = 0.7071067811865476\n"
    );
    let cfg = r.config("g.toml", &body);
    let c = cfg.to_str().unwrap();
    let o = r.exec("sc", &["density-sc", "--config", c]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = r.exec("oracle", &["oracle", "--config", c]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sc = parse_matrix_csv(&read(&r.out("sc/oscillatory.csv"))).unwrap();
    let q = parse_matrix_csv(&read(&r.out("oracle/oracle.csv"))).unwrap();
    assert_eq!(sc.e_values, q.e_values);
    assert_eq!(sc.e_prime_values, q.e_prime_values);
    assert!(sc.values.iter().any(|v| *v != 0.0));
    assert!(q.values.iter().all(|v| *v > 0.0));
    let o = r.exec(
        "cmp",
        &[
            "compare",
            "--left",
            r.out("sc/oscillatory.csv").to_str().unwrap(),
            "--right",
            r.out("oracle/oracle.csv").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
