use std::fs;
use std::process::{Command, Output};

fn mcwave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcwave")).args(args).output().unwrap()
}

#[test]
fn missing_config_is_a_config_error() {
    let out = mcwave(&["run", "no-such-config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_key_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[field]\ngenerator = \"uniform\"\nvalue = 1.0\n\n[time]\ntua = 1e-3\n").unwrap();
    let out = mcwave(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 6"), "{err}");
}

#[test]
fn bad_scheme_flag_is_rejected() {
    let out = mcwave(&["run", "uniform", "--scheme", "leapfrog"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn uniform_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("u");
    let out = mcwave(&["run", "uniform", "--H", "5", "--scheme", "implicit", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["field.txt", "tensors.csv", "plan.csv", "stability.csv", "energy_implicit.csv", "errors_implicit.csv", "manifest.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let errors = fs::read_to_string(out_dir.join("errors_implicit.csv")).unwrap();
    assert!(errors.starts_with("t,e_1,scheme,H,l\n"), "{errors}");

    let again = mcwave(&["run", "uniform", "--H", "5", "--scheme", "implicit", "--expect-blowup", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(3));
}
