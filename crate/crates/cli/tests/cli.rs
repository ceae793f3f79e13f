use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn optin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optin"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run optin")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate(dir: &Path, sub: &str, extra: &[&str]) {
    let mut args = vec!["simulate", "--out-dir", sub, "--duration", "20", "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&optin(dir, &args));
}

#[test]
fn simulate_replay_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "scene", &["--people", "6"]);
    for f in ["uwb.jsonl", "tracklets.jsonl", "truth.jsonl", "scene.json"] {
        assert!(d.join("scene").join(f).exists(), "{f}");
    }
    let first = fs::read_to_string(d.join("scene/uwb.jsonl")).unwrap();
    assert!(first.lines().next().unwrap().starts_with("{\"tag_id\":\"0\",\"t\":"));

    ok(&optin(
        d,
        &[
            "replay",
            "--uwb", "scene/uwb.jsonl",
            "--tracklets", "scene/tracklets.jsonl",
            "--truth", "scene/truth.jsonl",
            "--out", "decisions.jsonl",
            "--metrics-out", "metrics.csv",
            "--scene-id", "demo",
        ],
    ));
    let csv = fs::read_to_string(d.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "scene_id,n_people,n_tags,c_th,u_th,recall,misid_rate,mean_latency_ms");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..5], &["demo", "6", "1", "1.5", "1.5"]);
    assert_eq!(fs::read_to_string(d.join("decisions.jsonl")).unwrap().lines().count(), 200);

    ok(&optin(
        d,
        &["evaluate", "--decisions", "decisions.jsonl", "--truth", "scene/truth.jsonl", "--metrics-out", "eval.csv", "--scene-id", "demo"],
    ));
    let replayed: Vec<String> = csv.lines().nth(1).unwrap().split(',').take(7).map(String::from).collect();
    let evaluated: Vec<String> = fs::read_to_string(d.join("eval.csv")).unwrap().lines().nth(1).unwrap().split(',').take(7).map(String::from).collect();
    assert_eq!(replayed, evaluated);
}

#[test]
fn replay_is_deterministic_and_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "scene", &[]);
    fs::write(d.join("cfg.json"), r#"{"c_th": 0.0, "window_s": 5.0}"#).unwrap();
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["replay", "--uwb", "scene/uwb.jsonl", "--tracklets", "scene/tracklets.jsonl", "--out", out, "--config", "cfg.json"];
        args.extend_from_slice(extra);
        ok(&optin(d, &args));
        fs::read_to_string(d.join(out)).unwrap()
    };
    let a = run("a.jsonl", &["--c-th", "5"]);
    let b = run("b.jsonl", &["--set", "c_th=5"]);
    assert_eq!(a, b);
    let none = run("c.jsonl", &[]);
    assert!(!none.contains("\"keep\":true"), "c_th = 0 keeps nothing");
    assert!(a.contains("\"keep\":true"));
}

#[test]
fn track_match_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "scene", &["--people", "4", "--tags", "2"]);
    ok(&optin(d, &["track", "--uwb", "scene/uwb.jsonl", "--out", "traj.jsonl"]));
    let traj = fs::read_to_string(d.join("traj.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), fs::read_to_string(d.join("scene/uwb.jsonl")).unwrap().lines().count());

    ok(&optin(d, &["match", "--uwb", "scene/uwb.jsonl", "--tracklets", "scene/tracklets.jsonl", "--out", "pairs.jsonl"]));
    for line in fs::read_to_string(d.join("pairs.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["cost"].as_f64().unwrap() <= 1.5);
    }

    ok(&optin(
        d,
        &[
            "sweep",
            "--uwb", "scene/uwb.jsonl",
            "--tracklets", "scene/tracklets.jsonl",
            "--truth", "scene/truth.jsonl",
            "--out", "sweep.csv",
            "--c-values", "0,1,2",
        ],
    ));
    let sweep = fs::read_to_string(d.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,0,0"), "{}", lines[1]);
}

#[test]
fn calibrate_then_replay_with_the_result() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&optin(d, &["simulate", "--calibration-walk", "--out-dir", "walk", "--duration", "30", "--seed", "1"]));
    ok(&optin(
        d,
        &[
            "calibrate",
            "--uwb", "walk/uwb.jsonl",
            "--tracklets", "walk/tracklets.jsonl",
            "--report", "report.json",
            "--config-out", "calibrated.json",
            "--detector-out", "detector.json",
        ],
    ));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert!(report["inlier_ratio"].as_f64().unwrap() > 0.5);
    assert!(report["r_los"].as_array().unwrap().len() == 3);

    simulate(d, "scene", &[]);
    ok(&optin(
        d,
        &["replay", "--config", "calibrated.json", "--uwb", "scene/uwb.jsonl", "--tracklets", "scene/tracklets.jsonl", "--out", "dec.jsonl"],
    ));

    ok(&optin(d, &["train-nlos", "--uwb", "walk/uwb.jsonl", "--tracklets", "walk/tracklets.jsonl", "--out", "det2.json"]));
    assert!(fs::read_to_string(d.join("det2.json")).unwrap().contains("\"version\": 1"));
}

#[test]
fn mask_copies_kept_boxes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ppm = |rgb: u8| {
        let mut b = b"P6\n4 2\n255\n".to_vec();
        b.extend(std::iter::repeat_n(rgb, 4 * 2 * 3));
        b
    };
    fs::write(d.join("frame.ppm"), ppm(200)).unwrap();
    fs::write(d.join("bg.ppm"), ppm(10)).unwrap();
    fs::write(
        d.join("dec.jsonl"),
        concat!(
            r#"{"t":0.0,"boxes":[{"tag_id":"0","tracklet_id":1,"u_px":1.0,"v_px":1.0,"w_px":2.0,"h_px":2.0,"keep":true}],"masked":[]}"#,
            "\n",
            r#"{"t":0.1,"boxes":[],"masked":[]}"#,
            "\n"
        ),
    )
    .unwrap();
    ok(&optin(d, &["mask", "--frame", "frame.ppm", "--background", "bg.ppm", "--decisions", "dec.jsonl", "--t", "0", "--out", "out.ppm"]));
    let out = fs::read(d.join("out.ppm")).unwrap();
    let pixels = &out[out.len() - 24..];
    let live = pixels.chunks(3).filter(|p| p[0] == 200).count();
    assert_eq!(live, 4);

    ok(&optin(d, &["mask", "--frame", "frame.ppm", "--background", "bg.ppm", "--decisions", "dec.jsonl", "--t", "0.1", "--out", "bg_out.ppm"]));
    assert_eq!(fs::read(d.join("bg_out.ppm")).unwrap(), ppm(10));
}

#[test]
fn schema_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "scene", &[]);
    fs::write(d.join("bad.jsonl"), "{\"tag_id\":\"0\",\"t\":0.0}\n").unwrap();
    let out = optin(d, &["replay", "--uwb", "bad.jsonl", "--tracklets", "scene/tracklets.jsonl", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = optin(d, &["replay", "--uwb", "scene/uwb.jsonl", "--tracklets", "scene/tracklets.jsonl", "--out", "x.jsonl", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(d.join("bad.ppm"), b"P3\n1 1\n255\n0 0 0\n").unwrap();
    let out = optin(d, &["mask", "--frame", "bad.ppm", "--background", "bad.ppm", "--decisions", "x.jsonl", "--t", "0", "--out", "o.ppm"]);
    assert_eq!(out.status.code(), Some(2));

    let out = optin(d, &["replay", "--uwb", "missing.jsonl", "--tracklets", "scene/tracklets.jsonl", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}
