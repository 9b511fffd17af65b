use std::path::Path;
use std::process::{Command, Output};

fn aura(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aura"))
        .args(args)
        .env("AURA_HOME", home)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn enforced_suite_passes_the_gate() {
    let home = tempfile::tempdir().unwrap();
    let o = aura(home.path(), &["run", "--suite", "all", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reports: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 14);
    assert!(reports.iter().all(|r| r["met"] == true));
    assert!(stderr(&o).contains("TSR 8/8 ASR 0/6"));
}

#[test]
fn passthrough_attacks_fail_the_gate_with_an_asr_report() {
    let home = tempfile::tempdir().unwrap();
    let o = aura(home.path(), &["run", "--mode", "passthrough", "--suite", "attack"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ASR 6/6"), "{}", stderr(&o));
}

#[test]
fn same_seed_gives_the_same_report_stream() {
    let home = tempfile::tempdir().unwrap();
    let a = aura(home.path(), &["run", "--suite", "benign", "--seed", "9"]);
    let b = aura(home.path(), &["run", "--suite", "benign", "--seed", "9"]);
    assert_eq!(a.status.code(), b.status.code());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn usage_errors_exit_with_two() {
    let home = tempfile::tempdir().unwrap();
    let o = aura(home.path(), &["run", "--scenario", "/definitely/missing.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.toml"));
    assert_eq!(aura(home.path(), &["run", "--mode", "fortified"]).status.code(), Some(2));
    assert_eq!(aura(home.path(), &["run", "--tamper-stage", "firmware"]).status.code(), Some(2));
}

#[test]
fn tampered_boot_fails_closed() {
    let home = tempfile::tempdir().unwrap();
    let o = aura(home.path(), &["run", "--suite", "benign", "--tamper-stage", "os-image"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("kernel unavailable"));
}

#[test]
fn scripted_approvals_override_the_scenarios() {
    let home = tempfile::tempdir().unwrap();
    let script = home.path().join("deny.json");
    std::fs::write(&script, r#"{"default":"deny"}"#).unwrap();
    let o = aura(
        home.path(),
        &["run", "--scenario", concat!(env!("CARGO_MANIFEST_DIR"), "/../sim/scenarios/train_booking.toml"), "--approval", script.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    let r: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(r["met"], false);
}

#[test]
fn audit_commands_round_trip() {
    let home = tempfile::tempdir().unwrap();
    assert!(aura(home.path(), &["run", "--suite", "benign", "--seed", "4"]).status.success());
    let store = "send_message-enforced";

    let o = aura(home.path(), &["audit", "verify", store, "--seed", "4"]);
    assert_eq!(stdout(&o).trim(), "intact");

    let o = aura(home.path(), &["audit", "export", store, "--seed", "4"]);
    let ex: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(ex["merkle_root"].as_str().unwrap().len(), 64);
    assert_eq!(ex["signature"].as_str().unwrap().len(), 128);

    let shown = stdout(&aura(home.path(), &["audit", "show", store, "--seed", "4"]));
    let session = session_of_first_decision(&shown);
    let filtered = stdout(&aura(home.path(), &["audit", "show", store, "--seed", "4", "--session", &session]));
    assert!(filtered.lines().count() >= 2);
    assert!(filtered.lines().all(|l| l.contains(&session)));

    // Wrong device seed: payloads do not open and the store is rejected.
    let o = aura(home.path(), &["audit", "verify", store, "--seed", "5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn erase_leaves_an_intact_chain() {
    let home = tempfile::tempdir().unwrap();
    assert!(aura(home.path(), &["run", "--scenario", concat!(env!("CARGO_MANIFEST_DIR"), "/../sim/scenarios/set_alarm.toml")]).status.success());
    let store = "set_alarm-enforced";
    let before = stdout(&aura(home.path(), &["audit", "show", store]));
    assert!(!before.contains("[erased]"));
    let session = session_of_first_decision(&before);
    let o = aura(home.path(), &["audit", "erase", store, "--session", &session]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("erased "));
    let after = stdout(&aura(home.path(), &["audit", "show", store]));
    assert!(after.contains("[erased]") && after.contains("ERASURE"));
    assert_eq!(stdout(&aura(home.path(), &["audit", "verify", store])).trim(), "intact");
}

fn session_of_first_decision(listing: &str) -> String {
    listing
        .lines()
        .find(|l| l.contains(" DECISION "))
        .and_then(|l| l.split_whitespace().nth(3))
        .unwrap()
        .to_string()
}

#[test]
fn registry_vets_issues_and_revokes() {
    let home = tempfile::tempdir().unwrap();
    assert!(aura(home.path(), &["registry", "enroll", "acme"]).status.success());
    let o = aura(home.path(), &["registry", "issue", "--developer", "acme", "--app", "calc", "--category", "calculator", "--permission", "READ_CONTACTS"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("policy violation"));
    let o = aura(
        home.path(),
        &["registry", "issue", "--developer", "acme", "--app", "chat", "--category", "messaging", "--permission", "SEND_MESSAGE", "--permission", "NETWORK_EGRESS", "--domain", "Chat.Example.com"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("issued serial=1"));
    assert!(aura(home.path(), &["registry", "revoke", "1"]).status.success());
    let shown = stdout(&aura(home.path(), &["registry", "show"]));
    assert!(shown.contains("domains=[chat.example.com]") && shown.contains("REVOKED"));
    assert!(shown.contains("serials=[1]"));
    assert_eq!(aura(home.path(), &["registry", "revoke", "7"]).status.code(), Some(1));
}
