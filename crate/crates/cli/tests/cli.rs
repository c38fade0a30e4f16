use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// One calibrated cache shared by every test in this binary.
fn cache() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        for w in ["1", "2", "3"] {
            let out = Command::new(env!("CARGO_BIN_EXE_adj"))
                .args(["calibrate", "--tuples", "2000", "--seeks", "2000", "--workers", w])
                .env("ADJ_CACHE_DIR", dir.path())
                .output()
                .unwrap();
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
        dir
    })
    .path()
}

fn adj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adj"))
        .args(args)
        .env("ADJ_CACHE_DIR", cache())
        .current_dir(root())
        .output()
        .unwrap()
}

fn running_args() -> Vec<String> {
    let mut v = vec!["--query".to_string(), "queries/running.dl".to_string()];
    for r in ["R1", "R2", "R3", "R4", "R5"] {
        v.push("--bind".into());
        v.push(format!("{r}=queries/running/{r}.tsv"));
    }
    v
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn with<'a>(base: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = extra[..1].to_vec();
    v.extend(base.iter().map(String::as_str));
    v.extend_from_slice(&extra[1..]);
    v
}

fn write_graph(dir: &Path, edges: &[(u64, u64)]) -> PathBuf {
    let path = dir.join("g.txt");
    let text: String = edges.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect();
    std::fs::write(&path, format!("# test graph\n{text}")).unwrap();
    path
}

#[test]
fn plan_lists_both_candidates() {
    let base = running_args();
    let v = json(&adj(&with(&base, &["plan", "--workers", "2"])));
    assert_eq!(v["plan"]["candidates"], serde_json::json!(["R2⋈R3", "R4⋈R5"]));
    assert_eq!(v["plan"]["fhw"], "3/2");
    let v = json(&adj(&with(&base, &["plan", "--workers", "2", "--mode", "hcube-lf"])));
    assert_eq!(v["plan"]["precomputed"], serde_json::json!([]));
}

#[test]
fn run_report_matches_schema_and_oracle() {
    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(root().join("crates/cli/schema/run-report.schema.json")).unwrap())
            .unwrap();
    let validator = jsonschema::JSONSchema::compile(&schema).unwrap();
    let base = running_args();
    let mut cards = Vec::new();
    for mode in ["adj", "hcube-lf", "oracle"] {
        let v = json(&adj(&with(&base, &["run", "--workers", "3", "--mode", mode])));
        if let Err(errors) = validator.validate(&v) {
            let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
            panic!("{mode}: {msgs:?}");
        }
        let c = &v["costs"];
        let sum: f64 = ["optimization", "pre_computing", "communication", "computation"]
            .iter()
            .map(|k| c[k].as_f64().unwrap())
            .sum();
        assert!((sum - c["total"].as_f64().unwrap()).abs() < 1e-9);
        cards.push(v["cardinality"].as_u64().unwrap());
    }
    assert_eq!(cards, vec![7, 7, 7]);
}

#[test]
fn materialize_writes_result_tuples() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("out.tsv");
    let base = running_args();
    let out = adj(&with(&base, &["run", "--workers", "2", "--materialize", out_path.to_str().unwrap()]));
    json(&out);
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().any(|l| l == "4\t3\t2\t2\t1"));
}

#[test]
fn graph_binding_triangles_agree_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let edges: Vec<(u64, u64)> = (0..30u64).flat_map(|i| [(i, (i + 1) % 30), (i, (i + 2) % 30), ((i + 3) % 30, i)]).collect();
    let g = write_graph(dir.path(), &edges);
    let g = g.to_str().unwrap();
    let card = |mode: &str| {
        json(&adj(&["run", "--query", "queries/q1.dl", "--graph", g, "--workers", "3", "--mode", mode]))["cardinality"]
            .as_u64()
            .unwrap()
    };
    let truth = card("oracle");
    assert!(truth > 0);
    assert_eq!(card("adj"), truth);
    assert_eq!(card("hcube-lf"), truth);
}

#[test]
fn table_output_has_cost_columns() {
    let base = running_args();
    let out = adj(&with(&base, &["run", "--workers", "2", "--table"]));
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for col in ["Optimization", "Pre-Computing", "Communication", "Computation", "Total"] {
        assert!(text.contains(col), "{text}");
    }
}

#[test]
fn estimate_exhaustive_and_empty() {
    let base = running_args();
    let v = json(&adj(&with(&base, &["estimate", "--exhaustive"])));
    assert_eq!(v["estimate"], 7.0);
    assert_eq!(v["exhaustive"], true);

    let dir = tempfile::tempdir().unwrap();
    // a directed path has no triangles
    let g = write_graph(dir.path(), &(0..20).map(|i| (i, i + 1)).collect::<Vec<_>>());
    let v = json(&adj(&["estimate", "--query", "queries/q1.dl", "--graph", g.to_str().unwrap()]));
    assert_eq!(v["estimate"], 0.0);

    let v = json(&adj(&with(&base, &["estimate", "--sweep", "1,2,1000"])));
    let runs = v["sweep"]["runs"].as_array().unwrap();
    assert_eq!(v["sweep"]["truth"], 7);
    assert_eq!(runs.len(), 3);
    assert!(runs.iter().all(|r| r["d"].as_f64().map_or(true, |d| d >= 1.0)));
}

#[test]
fn exit_codes() {
    // usage
    assert_eq!(adj(&["plan"]).status.code(), Some(1));
    assert_eq!(adj(&["plan", "--query", "queries/none.dl"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dl");
    std::fs::write(&bad, "Q(a :- R(a).").unwrap();
    assert_eq!(adj(&["plan", "--query", bad.to_str().unwrap()]).status.code(), Some(1));

    // binding
    let out = adj(&["plan", "--query", "queries/running.dl", "--bind", "R1=queries/running/R1.tsv", "--workers", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("R2"));

    // runtime abort: a one-tuple budget cannot hold any hypercube
    let base = running_args();
    let out = adj(&with(&base, &["run", "--workers", "2", "--mode", "hcube-lf", "--memory-tuples", "1"]));
    assert!(matches!(out.status.code(), Some(2) | Some(3)), "{:?}", out.status);

    assert_eq!(adj(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_calibration_is_reported() {
    let empty = tempfile::tempdir().unwrap();
    let mut args = vec!["plan".to_string()];
    args.extend(running_args());
    args.extend(["--workers".to_string(), "7".to_string()]);
    let out = Command::new(env!("CARGO_BIN_EXE_adj"))
        .args(&args)
        .env("ADJ_CACHE_DIR", empty.path())
        .current_dir(root())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("adj calibrate"));
}

#[test]
fn calibration_is_cached_until_forced() {
    let dir = tempfile::tempdir().unwrap();
    let run = |force: bool| {
        let mut args = vec!["calibrate", "--tuples", "1000", "--seeks", "1000", "--workers", "2"];
        if force {
            args.push("--force");
        }
        let out = Command::new(env!("CARGO_BIN_EXE_adj")).args(&args).env("ADJ_CACHE_DIR", dir.path()).output().unwrap();
        json(&out)
    };
    let first = run(false);
    assert_eq!(first["reused"], false);
    let cal = &first["calibration"];
    assert!(cal["alpha"].as_f64().unwrap() > 0.0);
    let points = cal["beta"]["points"].as_array().unwrap();
    assert_eq!(points.len(), 4);
    assert!(points.iter().all(|p| p[1].as_f64().unwrap() > 0.0));
    let second = run(false);
    assert_eq!(second["reused"], true);
    assert_eq!(second["calibration"], first["calibration"]);
    assert_eq!(run(true)["reused"], false);
}
