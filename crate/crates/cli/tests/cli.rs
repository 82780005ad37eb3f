use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dtrace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtrace"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|t| t.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .parse()
        .unwrap()
}

fn gen(dir: &Path, model: &str, p: &str, n: &str) -> String {
    let o = dtrace(dir, &["--seed", "7", "gen", "--model", model, "--p", p, "--n", n]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    let line = s.lines().find(|l| l.starts_with("lambda_max=")).unwrap();
    line.trim_start_matches("lambda_max=").split_whitespace().next().unwrap().to_string()
}

#[test]
fn gen_writes_reproducible_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), "1", "25", "40");
    gen(b.path(), "1", "25", "40");
    let strip = |p: &Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(str::to_owned)
            .collect::<Vec<_>>()
    };
    let da = strip(&a.path().join("data.csv"));
    assert_eq!(da.len(), 40);
    assert_eq!(da, strip(&b.path().join("data.csv")));
    let theta = fs::read_to_string(a.path().join("data_theta.coo")).unwrap();
    assert!(theta.starts_with("# dtrace"));
    // diagonal 25 entries plus 24 + 23 upper-band entries
    assert!(theta.lines().any(|l| l == "25 72"));
}

#[test]
fn gen_rejects_bad_model_dimension() {
    let d = tempfile::tempdir().unwrap();
    let o = dtrace(d.path(), &["gen", "--model", "5", "--p", "10", "--n", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("perfect square"));
}

#[test]
fn solve_at_lambda_max_is_diagonal() {
    let d = tempfile::tempdir().unwrap();
    let lmax = gen(d.path(), "1", "20", "30");
    let data = d.path().join("data.csv");
    let o = dtrace(
        d.path(),
        &["solve", "--data", data.to_str().unwrap(), "--lambda", &lmax],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert_eq!(field(&line, "s_off"), 0.0);
    let est = fs::read_to_string(d.path().join("estimate.coo")).unwrap();
    // standardized data: the diagonal solution is the identity
    for l in est.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = l.split_whitespace().collect();
        assert_eq!(f[0], f[1]);
        assert!((f[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn solve_tiny_csv_with_each_solver() {
    let d = tempfile::tempdir().unwrap();
    let csv = d.path().join("tiny.csv");
    fs::write(
        &csv,
        "x,y,z\n1.0,2.0,0.5\n0.3,-1.0,1.1\n2.2,0.4,-0.7\n-1.5,0.9,0.2\n0.1,-0.3,0.8\n",
    )
    .unwrap();
    let mut objectives = Vec::new();
    for s in ["mars", "ssnal", "iadmm", "eadmm"] {
        let o = dtrace(
            d.path(),
            &["--tol", "1e-8", "solve", "--data", csv.to_str().unwrap(), "--header", "--lambda", "0.05", "--solver", s],
        );
        assert!(o.status.success(), "{s}: {}", String::from_utf8_lossy(&o.stderr));
        objectives.push(field(&stdout(&o), "objective"));
    }
    for v in &objectives {
        assert!((v - objectives[0]).abs() <= 1e-6 * (1.0 + objectives[0].abs()));
    }
}

#[test]
fn unknown_solver_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "1", "10", "20");
    let data = d.path().join("data.csv");
    let o = dtrace(
        d.path(),
        &["solve", "--data", data.to_str().unwrap(), "--lambda", "0.1", "--solver", "glasso"],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = dtrace(d.path(), &["solve", "--data", data.to_str().unwrap(), "--lambda", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

fn path_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("path").join("path.csv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn path_warm_cold_and_single_lambda() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "1", "40", "60");
    let data = d.path().join("data.csv");
    let data = data.to_str().unwrap();
    let warm = tempfile::tempdir().unwrap();
    let o = dtrace(warm.path(), &["--tol", "1e-6", "path", "--data", data, "--grid", "0.1:5:6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("capped at lambda_max"));
    let cold = tempfile::tempdir().unwrap();
    let o = dtrace(cold.path(), &["--tol", "1e-6", "path", "--data", data, "--grid", "0.1:5:6", "--cold"]);
    assert!(o.status.success());
    let (w, c) = (path_rows(warm.path()), path_rows(cold.path()));
    assert_eq!(w.len(), 6);
    for (a, b) in w.iter().zip(&c) {
        let (oa, ob): (f64, f64) = (a[3].parse().unwrap(), b[3].parse().unwrap());
        assert!((oa - ob).abs() <= 1e-6 * (1.0 + oa.abs()));
        assert!(a[2].parse::<f64>().unwrap() <= 1e-6);
    }

    let lam = &w[3][1];
    let single = tempfile::tempdir().unwrap();
    let o = dtrace(single.path(), &["--tol", "1e-6", "path", "--data", data, "--lambdas", lam]);
    assert!(o.status.success());
    let s = tempfile::tempdir().unwrap();
    let o2 = dtrace(s.path(), &["--tol", "1e-6", "solve", "--data", data, "--lambda", lam]);
    assert!(o2.status.success());
    let via_path: f64 = path_rows(single.path())[0][3].parse().unwrap();
    assert!((via_path - field(&stdout(&o2), "objective")).abs() <= 1e-9 * (1.0 + via_path.abs()));

    let o = dtrace(single.path(), &["path", "--data", data, "--lambdas", "0.1,0.2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cv_writes_report() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "1", "20", "80");
    let data = d.path().join("data.csv");
    let o = dtrace(
        d.path(),
        &["cv", "--data", data.to_str().unwrap(), "--grid", "0.05:0.6:5", "--folds", "4"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cv = fs::read_to_string(d.path().join("cv.csv")).unwrap();
    assert_eq!(cv.lines().filter(|l| !l.starts_with('#')).count(), 6);
    assert!(d.path().join("estimate.coo").exists());
    let o = dtrace(d.path(), &["cv", "--data", data.to_str().unwrap(), "--grid", "0.05:0.6:5", "--folds", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_small_single_cell_and_config_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.conf");
    fs::write(&cfg, "# bench settings\nreps = 1\nsolvers = mars\nmodels = 1\ndims = 30x20\ntol = 1e-3\n").unwrap();
    let o = dtrace(
        d.path(),
        &["--config", cfg.to_str().unwrap(), "--tol", "1e-5", "bench", "--suite", "small", "--gate"],
    );
    assert!(o.status.success(), "{}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("bench.csv")).unwrap();
    // the command-line tol beats the config file
    assert!(csv.contains("--tol 1e-5"));
    assert!(csv.lines().filter(|l| !l.starts_with('#')).count() > 1);
    assert!(fs::read_to_string(d.path().join("bench.txt")).unwrap().contains("mars"));
}

#[test]
fn bench_gate_failure_exits_3() {
    let d = tempfile::tempdir().unwrap();
    // two ADMM iterations cannot reach the tolerance, so the residual gate fails
    let o = dtrace(
        d.path(),
        &["--tol", "1e-8", "bench", "--max-admm-iter", "2", "--solvers", "iadmm", "--models", "1", "--dims", "20x30", "--reps", "1", "--gate"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
