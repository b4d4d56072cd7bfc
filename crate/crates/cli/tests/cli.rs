use std::fs;
use std::path::Path;

use qrlora::io::{load_adapter, load_matrix};
use qrlora_cli::{main_with, ExperimentConfig};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with(std::iter::once("qr-adapt").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

const SPECS: &str = r#"
[[specs]]
method = "full_ft"

[[specs]]
method = "lora"
rank = 2
projections = ["q", "v"]

[[specs]]
method = "svd_lora"
rank = 2
top_k = 1
alpha = 2.0
projections = ["q", "v"]

[[specs]]
method = "qr_lora"
policy = "energy:0.5"
layer_scope = "all"
projections = ["o"]
"#;

fn config(dir: &Path, specs: &str) -> String {
    format!(
        r#"
schema = 1
output_dir = "{}"

[model]
vocab_size = 16
d_model = 8
n_heads = 2
n_layers = 2
d_ff = 16
max_seq_len = 8
n_classes = 2
seed = 1

[task]
kind = "bag_separable"
vocab_size = 16
seq_len = 8
n_classes = 2
n_train = 64
n_eval = 32
seed = 1

[train]
epochs = 1
batch_size = 16
train_cap = 64
seed = 1

[sweep]
taus = [0.5, 0.7, 0.8]
sizes = [32, 64]
{specs}"#,
        dir.join("out").display()
    )
}

fn write_config(dir: &Path, specs: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, config(dir, specs)).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn identity_decompose_report_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("id.csv");
    fs::write(&input, "1,0,0\n0,1,0\n0,0,1\n").unwrap();
    let out = dir.path().join("f");
    let (code, stdout, _) = run(&["decompose", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--verify"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("diag\t[1.000000e0, 1.000000e0, 1.000000e0]"));
    assert!(stdout.lines().any(|l| l == "energy:0.5\t2"));
    assert_eq!(load_matrix(&out.join("q.qrla")).unwrap(), qrlora::Matrix::identity(3));
    assert_eq!(fs::read_to_string(out.join("perm.txt")).unwrap(), "0,1,2\n");
}

#[test]
fn random_matrix_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.qrla");
    let w = qrlora::Matrix::from_fn(12, 9, |i, j| ((i * 9 + j) as f64 * 0.37).sin() * 1e3);
    qrlora::io::save_matrix(&input, &w).unwrap();
    let (code, stdout, _) = run(&["decompose", input.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--verify"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("verify\t"));
}

#[test]
fn rank_report_accepts_extra_policies() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("d.csv");
    fs::write(&input, "# diagonal\n4,0\n0,1\n").unwrap();
    let (code, stdout, _) = run(&["rank-report", input.to_str().unwrap(), "--policy", "fixed:1"]);
    assert_eq!(code, 0);
    assert!(stdout.lines().any(|l| l == "fixed:1\t1"));
    assert!(stdout.lines().any(|l| l == "energy:0.8\t1"));
}

#[test]
fn adapter_command_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.csv");
    fs::write(&input, "1,2,3\n4,5,6\n7,8,10\n").unwrap();
    let out = dir.path().join("a.qrlc");
    let (code, stdout, _) = run(&["adapter", input.to_str().unwrap(), "--policy", "fixed:2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.starts_with("qr_lora:fixed:2\ttrainable 2"));
    let (spec, _) = load_adapter(&out).unwrap();
    assert_eq!(spec.policy.to_string(), "fixed:2");
}

#[test]
fn run_writes_one_row_per_spec() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPECS);
    let (code, stdout, stderr) = run(&["run", "--config", &cfg]);
    assert_eq!(code, 0, "{stderr}");
    let csv = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(stdout, csv);
    let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(methods, ["full_ft", "lora", "svd_lora", "qr_lora"]);
    let jsonl = fs::read_to_string(dir.path().join("out/results.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 4);

    let (code, stdout, _) = run(&["run", "--config", &cfg, "--format", "jsonl"]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 4);
    assert!(stdout.starts_with('{'));
}

#[test]
fn empty_spec_list_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (code, stdout, _) = run(&["run", "--config", &cfg]);
    assert_eq!(code, 0);
    assert_eq!(stdout, qrlora::train::CSV_HEADER.join(",") + "\n");
}

#[test]
fn seed_flag_and_out_flag_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPECS);
    let other = dir.path().join("elsewhere");
    let (code, stdout, _) = run(&["run", "--config", &cfg, "--seed", "9", "--out", other.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.lines().skip(1).all(|l| l.split(',').nth(12) == Some("9")));
    assert!(other.join("results.csv").exists());
}

#[test]
fn sweeps_produce_their_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPECS);
    let rows = |axis: &str| -> Vec<Vec<String>> {
        let (code, stdout, stderr) = run(&["sweep", "--config", &cfg, "--axis", axis]);
        assert_eq!(code, 0, "{stderr}");
        stdout
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(String::from).collect())
            .collect()
    };
    let tau = rows("tau");
    assert_eq!(tau.len(), 3);
    let counts: Vec<usize> = tau.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(rows("size").len(), 8);
    let scope: Vec<(String, String)> = rows("scope").into_iter().map(|r| (r[4].clone(), r[5].clone())).collect();
    assert_eq!(scope.len(), 6);
    assert_eq!(scope[0], ("last:4".to_string(), "o".to_string()));
    assert_eq!(scope[1], ("last:4".to_string(), "q;v".to_string()));
    assert_eq!(scope[3], ("all".to_string(), "o".to_string()));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&[]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["--version"]).0, 0);
    assert_eq!(run(&["sweep", "--config", "x.toml", "--axis", "depth"]).0, 1);

    let missing = dir.path().join("missing.csv");
    assert_eq!(run(&["decompose", missing.to_str().unwrap()]).0, 2);
    let ragged = dir.path().join("ragged.csv");
    fs::write(&ragged, "1,2\n3\n").unwrap();
    assert_eq!(run(&["decompose", ragged.to_str().unwrap()]).0, 2);

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, config(dir.path(), SPECS) + "\nlearnig_rate = 0.1\n").unwrap();
    let (code, _, stderr) = run(&["run", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(stderr.contains("learnig_rate"));

    let schema = dir.path().join("schema.toml");
    fs::write(&schema, config(dir.path(), SPECS).replace("schema = 1", "schema = 2")).unwrap();
    assert_eq!(run(&["run", "--config", schema.to_str().unwrap()]).0, 2);

    let diverging = write_config(dir.path(), SPECS).replace("exp.toml", "div.toml");
    fs::write(
        &diverging,
        config(dir.path(), SPECS).replace("seed = 1\n\n[sweep]", "seed = 1\noptimizer = \"sgd\"\nlearning_rate = 1e300\nfull_ft_learning_rate = 1e300\nweight_decay = 1e300\n\n[sweep]"),
    )
    .unwrap();
    let (code, stdout, _) = run(&["run", "--config", &diverging]);
    assert_eq!(code, 3);
    assert_eq!(stdout.lines().count(), 5);
    assert!(stdout.contains("[error: "));
}

#[test]
fn config_parses_as_documented() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&config(dir.path(), SPECS)).unwrap();
    assert_eq!(cfg.specs.len(), 4);
    assert_eq!(cfg.specs[3].label(), "qr_lora:energy:0.5");
    let shipped = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/bag_separable.toml")).unwrap();
    assert_eq!(ExperimentConfig::parse(&shipped).unwrap().specs.len(), 4);
}
