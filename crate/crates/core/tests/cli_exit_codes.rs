use std::process::Command;

fn status(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_lanenum"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn usage_data_and_success_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let d = data.to_str().unwrap();
    assert_eq!(status(&["gen", "--out", d, "--count", "5"]), 2);
    assert_eq!(
        status(&["gen", "--out", d, "--count", "20", "--line-dropout", "1.5"]),
        2
    );
    assert_eq!(status(&["no-such-command"]), 2);
    assert_eq!(status(&["eval", "--data", d, "--heuristic"]), 3);
    assert_eq!(
        status(&["gen", "--out", d, "--count", "20", "--frames", "1"]),
        0
    );
    assert_eq!(status(&["heuristic", "--data", d]), 0);
    assert_eq!(
        status(&["train", "--data", d, "--variant", "B", "--out", "/dev/null"]),
        2
    );
    let model = dir.path().join("m.lnm");
    let m = model.to_str().unwrap();
    assert_eq!(
        status(&[
            "train",
            "--data",
            d,
            "--variant",
            "D",
            "--epochs",
            "1",
            "--out",
            m
        ]),
        3
    );
    assert_eq!(
        status(&[
            "train",
            "--data",
            d,
            "--variant",
            "C",
            "--epochs",
            "1",
            "--out",
            m
        ]),
        0
    );
    assert_eq!(
        status(&[
            "predict",
            "--data",
            d,
            "--index",
            "99",
            "--model",
            m,
            "--overlay",
            "/dev/null"
        ]),
        2
    );
    assert_eq!(
        status(&["flops", "--variant", "D3", "--scale", "desk", "--json"]),
        0
    );
}
