use std::path::Path;
use std::process::{Command, Output};

fn objtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objtrack"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set", "data.frames=4",
    "--set", "data.height=32",
    "--set", "data.width=32",
    "--set", "data.tracks=4",
    "--set", "data.radius_min=4.0",
    "--set", "data.radius_max=8.0",
    "--set", "tracker.window_len=4",
    "--set", "tracker.iters=2",
    "--set", "train.batch_size=1",
    "--set", "train.steps=3",
];

fn gen(dir: &Path, clips: usize) -> Output {
    let out = dir.to_str().unwrap();
    let n = clips.to_string();
    let mut args = vec!["gen-data", "--seed", "3", "--clips", &n, "--out", out];
    args.extend_from_slice(TINY);
    objtrack(&args)
}

#[test]
fn gen_data_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let o = gen(dir.path(), 5);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("verified 5 clips"));
    let o = objtrack(&["verify", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("verified 5 clips"));
}

#[test]
fn oracle_eval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(dir.path(), 3)), 0);
    let report = dir.path().join("oracle.txt");
    let o = objtrack(&["eval", "--oracle", "--data", dir.path().to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let kv = std::fs::read_to_string(report.with_extension("kv")).unwrap();
    let get = |k: &str| -> f64 {
        kv.lines()
            .find_map(|l| l.strip_prefix(&format!("{}=", k)))
            .unwrap_or_else(|| panic!("no {} in {}", k, kv))
            .parse()
            .unwrap()
    };
    assert_eq!(get("delta_avg"), 100.0);
    assert_eq!(get("mte"), 0.0);
    assert_eq!(get("survival"), 100.0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&objtrack(&[])), 1);
    assert_eq!(code(&objtrack(&["frobnicate"])), 1);
    assert_eq!(code(&objtrack(&["eval", "--data", "x", "--report", "y"])), 1);
    assert_eq!(code(&objtrack(&["gen-data", "--out", "x", "--size", "big"])), 1);
    assert_eq!(code(&objtrack(&["train", "--data", "x", "--out", "y", "--set", "train.steps"])), 1);
    assert_eq!(code(&objtrack(&["--help"])), 0);
}

#[test]
fn corrupted_or_missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(dir.path(), 2)), 0);
    let clip = dir.path().join("clip_00000.otc");
    let mut bytes = std::fs::read(&clip).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&clip, bytes).unwrap();
    let o = objtrack(&["verify", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(code(&objtrack(&["verify", "--data", empty.path().to_str().unwrap()])), 2);
}

#[test]
fn train_eval_and_track() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&gen(&data, 3)), 0);
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = objtrack(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("last.ckpt");
    assert!(ckpt.exists() && run.join("config.toml").exists() && run.join("loss.log").exists());
    assert_eq!(std::fs::read_to_string(run.join("loss.log")).unwrap().lines().count(), 3);

    let report = run.join("eval.txt");
    let o = objtrack(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(report.with_extension("kv")).unwrap().contains("survival="));

    let csv = run.join("tracks.csv");
    let queries = run.join("q.txt");
    std::fs::write(&queries, "# x,y\n5.5,7\n20,12.25\n").unwrap();
    let clip = data.join("clip_00000.otc");
    let o = objtrack(&[
        "track", "--ckpt", ckpt.to_str().unwrap(), "--clip", clip.to_str().unwrap(),
        "--queries", queries.to_str().unwrap(), "--out-csv", csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "frame,track_id,x,y");
    assert_eq!(lines.len(), 1 + 4 * 2);
    assert_eq!(lines[1], "0,0,5.5,7");
    assert_eq!(lines[2], "0,1,20,12.25");
    for l in &lines[1..] {
        let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    // a query outside the frame is a usage error; a malformed query file a format error
    std::fs::write(&queries, "40,3\n").unwrap();
    let bad = ["track", "--ckpt", ckpt.to_str().unwrap(), "--clip", clip.to_str().unwrap(), "--queries", queries.to_str().unwrap(), "--out-csv", csv.to_str().unwrap()];
    assert_ne!(code(&objtrack(&bad)), 0);
    std::fs::write(&queries, "1;2\n").unwrap();
    assert_eq!(code(&objtrack(&bad)), 2);

    // a checkpoint whose config no longer matches is refused
    let other = dir.path().join("other.toml");
    std::fs::write(&other, std::fs::read_to_string(run.join("config.toml")).unwrap().replace("iters = 2", "iters = 5")).unwrap();
    let o = objtrack(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--config", other.to_str().unwrap(), "--data", data.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}
