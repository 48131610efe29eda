use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use safehumanoid::data;
use safehumanoid::perception::from_query_text;
use safehumanoid::sim::{analyze, check_modulation_direction, RunLog};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_safehumanoid"));
    c.env_remove("SAFEHUMANOID_STREAM_RATE")
        .env_remove("SAFEHUMANOID_STALENESS_TIMEOUT")
        .env_remove("SAFEHUMANOID_CONTROL_RATE");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_db_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["validate-db"]).status.code(), Some(0));

    let good = dir.path().join("good.csv");
    std::fs::write(&good, data::SEED_CSV).unwrap();
    assert_eq!(run(&["validate-db", path(&good)]).status.code(), Some(0));

    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        data::SEED_CSV.replacen(",49.3,0.55,", ",75.0,0.55,", 1),
    )
    .unwrap();
    let o = run(&["validate-db", path(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stdout(&o).contains("g1_01_pick_cube_from_table"),
        "{}",
        stdout(&o)
    );

    let missing = dir.path().join("missing.csv");
    assert_eq!(run(&["validate-db", path(&missing)]).status.code(), Some(2));
}

#[test]
fn query_self_description_of_record_3() {
    let db = data::seed_database();
    let rec = &db.records()[3];
    let descriptor = from_query_text(&rec.description).unwrap().to_descriptor();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("scene.json");
    std::fs::write(&file, descriptor.to_json()).unwrap();

    let o = run(&["query", "--descriptor", path(&file), "--explain"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(
        text.contains(&format!("scenario: {}", rec.scenario_id)),
        "{text}"
    );
    assert!(text.contains("reason: ok"));
    assert!(text.contains("distance: 0.000000"));
    let candidates: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("candidate "))
        .collect();
    assert_eq!(candidates.len(), 3);
    assert!(candidates[0].contains(&rec.scenario_id));
}

#[test]
fn duplicate_record_query_is_a_tie() {
    let mut lines: Vec<String> = data::SEED_CSV.lines().map(str::to_string).collect();
    let row = lines[4].clone();
    let (id, rest) = row.split_once(',').unwrap();
    lines.push(format!("{id}_copy,{rest}"));
    let dir = tempfile::tempdir().unwrap();
    let db_path = dir.path().join("dup.csv");
    std::fs::write(&db_path, lines.join("\n") + "\n").unwrap();

    let db = data::seed_database();
    let descriptor = from_query_text(&db.records()[3].description)
        .unwrap()
        .to_descriptor();
    let file = dir.path().join("scene.json");
    std::fs::write(&file, descriptor.to_json()).unwrap();

    let o = run(&["--db", path(&db_path), "query", "--descriptor", path(&file)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("scenario: fallback"), "{text}");
    assert!(text.contains("reason: tie"), "{text}");
    assert!(text.contains("speed: slow"));
}

#[test]
fn explain_prints_three_candidates() {
    let o = run(&["query", "--stub", "cube_with_hand", "--explain"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o)
            .lines()
            .filter(|l| l.starts_with("candidate "))
            .count(),
        3
    );
    let plain = run(&["query", "--stub", "cube_with_hand"]);
    assert_eq!(
        stdout(&plain)
            .lines()
            .filter(|l| l.starts_with("candidate "))
            .count(),
        0
    );
}

#[test]
fn unknown_stub_fails() {
    let o = run(&["query", "--stub", "no_such_scene"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_scene"));
    assert_eq!(
        run(&["describe", "--stub", "no_such_scene"]).status.code(),
        Some(1)
    );
}

#[test]
fn describe_prints_descriptor_json() {
    let o = run(&["describe", "--stub", "soy_handover"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let table: serde_json::Value = serde_json::from_str(data::MOCK_SCENES_JSON).unwrap();
    assert_eq!(v["human_presence"], table["soy_handover"]["human_presence"]);
    assert_eq!(v["task_type"], table["soy_handover"]["task_type"]);
    assert_eq!(v.as_object().unwrap().len(), 12);
}

#[test]
fn report_on_empty_log_fails() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.csv");
    std::fs::write(&log, RunLog::header().join(",") + "\n").unwrap();
    let o = run(&["report", path(&log)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("empty"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn bad_config_value_fails() {
    let o = bin()
        .args(["query", "--stub", "soy_pick"])
        .env("SAFEHUMANOID_STREAM_RATE", "5")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    // flags win over the environment
    let o = bin()
        .args(["--stream-rate", "2", "query", "--stub", "soy_pick"])
        .env("SAFEHUMANOID_STREAM_RATE", "5")
        .output()
        .unwrap();
    assert!(o.status.success());
}

fn simulate(dir: &Path, script: &str, extra: &[&str]) -> RunLog {
    let out = dir.join(format!("{script}.csv"));
    let mut args = vec!["simulate", script, "--out", path(&out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("missed ticks"));
    RunLog::load(&out).unwrap()
}

#[test]
fn simulated_wipe_logs_modulate_in_the_right_direction() {
    let dir = tempfile::tempdir().unwrap();
    let absent = simulate(dir.path(), "wipe_baseline", &[]);
    let present = simulate(dir.path(), "wipe_hand", &[]);
    assert_eq!(absent.records.len(), present.records.len());
    let hand: Vec<_> = present
        .records
        .iter()
        .zip(&absent.records)
        .filter(|(p, _)| p.scene == "wipe_with_hand")
        .collect();
    assert!(!hand.is_empty());
    for (p, a) in hand {
        check_modulation_direction(a, p).unwrap();
    }

    let o = run(&[
        "report",
        path(&dir.path().join("wipe_hand.csv")),
        "--out",
        path(&dir.path().join("phases.csv")),
    ]);
    assert!(o.status.success());
    let phases = std::fs::read_to_string(dir.path().join("phases.csv")).unwrap();
    assert_eq!(phases.lines().count(), 4);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server() -> (Server, String) {
    let mut child = bin()
        .args(["serve", "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .expect("address line")
        .to_string();
    (Server(child), addr)
}

#[test]
fn remote_simulation_matches_in_process_directions() {
    let (_server, addr) = start_server();
    let dir = tempfile::tempdir().unwrap();
    let remote = |script: &str| {
        simulate(
            dir.path(),
            script,
            &["--remote", &addr, "--time-scale", "0.25"],
        )
    };
    let local_dir = tempfile::tempdir().unwrap();
    for script in ["wipe_hand", "cube_hand"] {
        let local = analyze(&simulate(local_dir.path(), script, &[])).unwrap();
        let over_tcp = analyze(&remote(script)).unwrap();
        let scenes: Vec<_> = over_tcp.phases.iter().map(|p| p.scene.clone()).collect();
        assert_eq!(
            scenes,
            local
                .phases
                .iter()
                .map(|p| p.scene.clone())
                .collect::<Vec<_>>()
        );
        for (l, r) in local.phases.iter().zip(&over_tcp.phases) {
            assert_eq!(l.final_kp, r.final_kp, "{script} {}", l.scene);
            assert_eq!(l.final_kd, r.final_kd);
            assert_eq!(l.final_v, r.final_v);
        }
        let (before, during) = (&over_tcp.phases[0], &over_tcp.phases[1]);
        assert!(during
            .final_kp
            .iter()
            .zip(&before.final_kp)
            .all(|(p, a)| p <= a));
        assert!(during
            .final_kd
            .iter()
            .zip(&before.final_kd)
            .all(|(p, a)| p >= a));
        assert!(during.final_v <= before.final_v);
    }
}
