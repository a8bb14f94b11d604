use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a test run
epochs_search = 2
epochs_train = 2
batch = 2
channels = 2
image_size = 8
n_train = 6
n_test = 6
k_nodes = 1
";

fn adnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adnas")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn search_train_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let g1 = dir.path().join("g1.json");
    let g2 = dir.path().join("g2.json");
    let hist = dir.path().join("h.json");

    let o = adnas(&["search", "--config", s(&cfg), "--seed", "7", "--out", s(&g1), "--history", s(&hist)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = adnas(&["search", "--config", s(&cfg), "--seed", "7", "--out", s(&g2)]);
    assert_eq!(code(&o), 0);
    let bytes = std::fs::read(&g1).unwrap();
    assert_eq!(bytes, std::fs::read(&g2).unwrap());
    let genotype: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    assert!(genotype["msm_middle"].is_object());
    let history: serde_json::Value = serde_json::from_slice(&std::fs::read(&hist).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 2);

    let model = dir.path().join("m.bin");
    let o = adnas(&["train", "--config", s(&cfg), "--seed", "7", "--genotype", s(&g1), "--out", s(&model)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let metrics = |name: &str| {
        let r = dir.path().join(name);
        assert_eq!(code(&adnas(&["eval", "--model", s(&model), "--report", s(&r)])), 0);
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(r).unwrap()).unwrap();
        ["i_auroc", "p_auroc", "aupro"].map(|k| v[k].to_string())
    };
    assert_eq!(metrics("r1.json"), metrics("r2.json"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&adnas(&["--bogus"])), 2);
    assert_eq!(code(&adnas(&["search"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let o = adnas(&["search", "--set", "nonsense=1", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert_eq!(code(&adnas(&["search", "--msms", "early,bogus", "--out", s(&out)])), 2);
    assert_eq!(code(&adnas(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r.json");
    let o = adnas(&["eval", "--model", "/nonexistent/model.bin", "--report", s(&r)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn dst_verify_writes_a_clean_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dst.json");
    let o = adnas(&["dst-verify", "--trials", "2000", "--seed", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["trials"], 2000);
    assert_eq!(v["prop1_violations"], 0);
    assert_eq!(v["bound_violations"], 0);
}

#[test]
fn ablate_and_fewshot_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let csv = dir.path().join("abl.csv");
    let o = adnas(&["ablate", "--config", s(&cfg), "--subsets", "early;early,late", "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "early,middle,late,i_auroc,p_auroc,aupro");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("1,0,1,"));

    let g = dir.path().join("g.json");
    assert_eq!(code(&adnas(&["search", "--config", s(&cfg), "--out", s(&g)])), 0);
    for k in ["3", "full"] {
        let r = dir.path().join(format!("few{k}.json"));
        let o = adnas(&["fewshot", "--config", s(&cfg), "--genotype", s(&g), "--k", k, "--report", s(&r)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let r = dir.path().join("bad.json");
    assert_eq!(code(&adnas(&["fewshot", "--config", s(&cfg), "--genotype", s(&g), "--k", "99", "--report", s(&r)])), 2);
}
