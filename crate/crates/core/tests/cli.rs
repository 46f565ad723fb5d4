use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = [
    "--set",
    "data.per_class=40",
    "--set",
    "pretrain.epochs=5",
    "--set",
    "blend.steps=5",
];

fn amulab(args: &[&str], extra: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_amulab"));
    cmd.args(args);
    for p in extra {
        cmd.arg(p);
    }
    cmd.output().unwrap()
}

fn with<'a>(cmd: &[&'a str]) -> Vec<&'a str> {
    [&SMALL[..], cmd].concat()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn subcommands_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);

    ok(&amulab(&with(&["gen-data", "--out"]), &[&p("d.ulab")]));
    let data = p("d.ulab");
    let data = data.to_str().unwrap();

    let stdout = ok(&amulab(&with(&["pretrain", "--data", data, "--out"]), &[&p("m.json")]));
    assert!(stdout.contains("mia_score"));
    ok(&amulab(&with(&["partition", "--data", data, "--out"]), &[&p("part.json")]));
    let part = p("part.json");
    ok(&amulab(
        &with(&["condense", "--data", data, "--partition", part.to_str().unwrap(), "--out"]),
        &[&p("cond.ulab")],
    ));
    assert!(p("cond.ulab").exists());

    let model = p("m.json");
    let model = model.to_str().unwrap();
    let stdout = ok(&amulab(
        &with(&["unlearn", "--csv", "--set", "unlearn.retain_source=reduced", "--data", data, "--model", model, "--out"]),
        &[&p("u.json")],
    ));
    let mut lines = stdout.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,retain_source,round,mia,retain_acc,forget_acc,test_acc,preprocess_s,unlearn_s,seed"
    );
    assert!(lines.next().unwrap().starts_with("a_cf,reduced,0,"));
    let stdout = ok(&amulab(&with(&["evaluate", "--data", data, "--model"]), &[&p("u.json")]));
    assert!(stdout.contains("forget_acc"));
}

#[test]
fn ablate_writes_seven_arms_and_rounds_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let mut args: Vec<&str> = vec!["ablate", "--set", "rounds=[{mode=\"uniform_fraction\",fraction=0.1}]"];
    args.extend_from_slice(&SMALL);
    args.push("--out");
    let stdout = ok(&amulab(&args, &[&out]));
    assert_eq!(stdout.lines().count(), 1 + 7);
    assert!(out.join("run_record.json").exists());

    let out3 = dir.path().join("rounds");
    let mut r: Vec<&str> = vec!["rounds", "--count", "3"];
    r.extend_from_slice(&SMALL);
    r.push("--out");
    let stdout = ok(&amulab(&r, &[&out3]));
    assert_eq!(stdout.lines().count(), 1 + 3);
}

#[test]
fn bad_override_is_reported() {
    let out = amulab(&["pipeline", "--set", "unlearn.method=scrub"], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn timings_are_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<&str> = vec!["pipeline", "--set", "output.record_timings=true"];
    args.extend_from_slice(&SMALL);
    args.push("--out");
    let stdout = ok(&amulab(&args, &[dir.path()]));
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split(',').collect();
    assert!(row[7].parse::<f64>().is_ok() && row[8].parse::<f64>().is_ok());
}
