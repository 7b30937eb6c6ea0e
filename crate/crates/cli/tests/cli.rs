use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{name}.toml"))
}

fn phaselab(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phaselab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn phaselab")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn malformed_config_exits_1_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[field]\nlower = [0.0\nupper = [1.0]\n").unwrap();
    let o = phaselab(&["solve"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[field]\nlower = [0.0]\nupper = [1.0]\nspacing = 0.1\nspcing = 0.2\n").unwrap();
    let o = phaselab(&["solve"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("spcing"), "{}", stderr(&o));
}

#[test]
fn verify_on_empty_directory_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = phaselab(&["verify"], &preset("kink-in-box"), dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn divergent_step_exits_2_with_diagnosis() {
    let dir = tempfile::tempdir().unwrap();
    let o = phaselab(&["solve"], &preset("divergent-dt"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("explicit stability bound"), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("solve.txt")).unwrap();
    assert!(report.contains("pass = false"));
}

#[test]
fn folded_sample_exits_3_with_scale() {
    let dir = tempfile::tempdir().unwrap();
    let o = phaselab(&["flatness"], &preset("folded"), dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("scale 2^"), "{}", stderr(&o));
    assert!(fs::read_to_string(dir.path().join("flatness.txt")).unwrap().contains("[gate]"));
}

#[test]
fn kink_solve_verify_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("kink-in-box");
    for cmd in ["solve", "verify", "index", "layers", "report"] {
        let o = phaselab(&[cmd, "--format", "csv,text,svg"], &cfg, dir.path());
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("failed = 0"), "{summary}");
    for entry in fs::read_dir(dir.path()).unwrap().flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let text = match fs::read_to_string(entry.path()) {
            Ok(t) => t,
            Err(_) => continue,
        };
        if name.ends_with(".json") {
            continue;
        }
        let head = if name.ends_with(".svg") {
            text.lines().next().unwrap().to_string()
        } else {
            text.lines().take(3).collect::<Vec<_>>().join("\n")
        };
        assert!(head.contains("config-sha256") && head.contains("seed 0"), "{name}: {head}");
    }
}

#[test]
fn noise_field_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("noise-field");
    assert_eq!(phaselab(&["solve"], &cfg, dir.path()).status.code(), Some(0));
    let o = phaselab(&["verify"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    let violations: usize = text
        .lines()
        .skip_while(|l| *l != "[monotonicity]")
        .find_map(|l| l.strip_prefix("violations = "))
        .and_then(|v| v.parse().ok())
        .unwrap();
    assert!(violations > 0);
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = preset("quantization-two");
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        assert_eq!(phaselab(&["solve", "--threads", threads], &cfg, dir.path()).status.code(), Some(0));
        assert_eq!(phaselab(&["verify", "--threads", threads], &cfg, dir.path()).status.code(), Some(0));
    }
    for f in ["field.bin", "density.csv", "profile.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_changes_sampled_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = preset("noise-field");
    assert_eq!(phaselab(&["solve"], &cfg, a.path()).status.code(), Some(0));
    assert_eq!(phaselab(&["solve", "--seed", "8"], &cfg, b.path()).status.code(), Some(0));
    assert_ne!(fs::read(a.path().join("field.bin")).unwrap(), fs::read(b.path().join("field.bin")).unwrap());
    let h = fs::read_to_string(b.path().join("solve.txt")).unwrap();
    assert!(h.lines().nth(2) == Some("# seed 8"), "{h}");
}

#[test]
fn toda_svg_carries_the_harmonic_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = phaselab(&["toda", "--format", "svg"], &preset("harmonic-single-layer"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svg = fs::read_to_string(dir.path().join("toda.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    // b + c log r is a straight line on the log-r axis.
    let pts: Vec<(f64, f64)> = svg
        .split("points=\"")
        .nth(1)
        .and_then(|s| s.split('"').next())
        .unwrap()
        .split(' ')
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect();
    let (first, last) = (pts[0], pts[pts.len() - 1]);
    let slope = (last.1 - first.1) / (last.0 - first.0);
    assert!(pts.iter().all(|p| (first.1 + slope * (p.0 - first.0) - p.1).abs() < 0.02));
    assert!(!dir.path().join("toda.txt").exists());
}
