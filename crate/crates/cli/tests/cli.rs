use std::path::Path;
use std::process::{Command, Output};

fn semfwi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semfwi")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const VALID: [&str; 6] = ["perfect", "jscc_no_si", "jscc_si", "distributed_jscc", "semantic_jscc", "semantic_jscc_oac"];

#[test]
fn unknown_scheme_flag_lists_valid_ids() {
    let dir = tempfile::tempdir().unwrap();
    let o = semfwi(&["--schemes", "perfect,smoke_signals", "eval-comm"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("smoke_signals"), "{e}");
    for id in VALID {
        assert!(e.contains(id), "{id} missing from: {e}");
    }
}

#[test]
fn unknown_scheme_in_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[imaging]\nschemes = [\"telegraph\"]\n").unwrap();
    let o = semfwi(&["-c", cfg.to_str().unwrap(), "eval-imaging"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("semantic_jscc_oac"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert_ne!(semfwi(&["no-such-command"], dir.path()).status.code(), Some(0));
    let o = semfwi(&["--set", "imaging.runs", "eval-imaging"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = semfwi(&["-c", "missing.toml", "gen-data"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plot_emits_one_curve_per_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("comm.csv");
    let mut text = String::from("schema_version,round,n_tx,scheme,snr_db,samples,mean_nmse,halfwidth,max_power\n");
    for scheme in VALID {
        for snr in [0.0, 10.0, 20.0] {
            text.push_str(&format!("1,gradient,7,{scheme},{snr},10,0.25,0.01,1.0\n"));
        }
    }
    std::fs::write(&csv, text).unwrap();
    let o = semfwi(&["plot", csv.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("comm_gradient_n7.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="curve""#).count(), VALID.len());
    for id in VALID {
        assert!(svg.contains(id));
    }
}

#[test]
fn plot_rejects_unknown_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    std::fs::write(&csv, "a,b\n1,2\n").unwrap();
    assert_eq!(semfwi(&["plot", csv.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn oracle_commands_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = semfwi(&["mi-oracle", "--joints", "20"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));

    let o = semfwi(&["--set", "artifacts=out", "gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(!out.contains("FAIL"), "{out}");
    assert!(dir.path().join("out/results/gradcheck.json").is_file());
    assert!(dir.path().join("out/results/bundle_gradcheck.json").is_file());
}
