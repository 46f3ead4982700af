use std::path::Path;
use std::process::{Command, Output};

fn sepattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepattn"))
        .args(args)
        .env("SATT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for dir in ["clean", "distorted", "depth"] {
        let mut names: Vec<_> = std::fs::read_dir(root.join(dir))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for n in names {
            out.push((
                n.strip_prefix(root).unwrap().display().to_string(),
                std::fs::read(&n).unwrap(),
            ));
        }
    }
    out.push((
        "manifest.json".into(),
        std::fs::read(root.join("manifest.json")).unwrap(),
    ));
    out
}

const TINY: &str = r#"{"train": {
  "epochs": 1, "image_size": 16, "checkpoint_every": 0,
  "generator": {"depth": 2, "base_channels": 4},
  "discriminator": {"num_layers": 2, "base_channels": 4}
}}"#;

#[test]
fn generate_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = sepattn(&[
            "generate-data",
            "--count",
            "12",
            "--size",
            "16",
            "--seed",
            "7",
            "--out",
            p(d),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let ta = tree_bytes(&a);
    assert_eq!(ta.len(), 3 * 12 + 1);
    assert_eq!(ta, tree_bytes(&b));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = sepattn(&["generate-data", "--count", "0", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert_eq!(
        code(&sepattn(&[
            "generate-data",
            "--count",
            "x",
            "--out",
            p(dir.path())
        ])),
        2
    );
    assert_eq!(code(&sepattn(&["no-such-command"])), 2);
    let out = sepattn(&[
        "generate-data",
        "--count",
        "3",
        "--preset",
        "murky",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("murky"));
}

#[test]
fn train_rejects_out_of_range_mu() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&sepattn(&[
            "generate-data",
            "--count",
            "10",
            "--size",
            "16",
            "--out",
            p(&data)
        ])),
        0
    );
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"mu": 0, "image_size": 16, "generator": {"depth": 2}}}"#,
    )
    .unwrap();
    let out = sepattn(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("mu"));

    std::fs::write(&cfg, r#"{"train": {"mu": 7, "bogus": 1}}"#).unwrap();
    let out = sepattn(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_resume_enhance_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    assert_eq!(
        code(&sepattn(&[
            "generate-data",
            "--count",
            "20",
            "--size",
            "16",
            "--out",
            p(&data)
        ])),
        0
    );

    let out = sepattn(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = run.join("final.satt");
    let first = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(first.lines().count(), 1 + 4);

    let out = sepattn(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--resume",
        p(&ckpt),
        "--epochs",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let steps: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6", "7", "8"]);
    assert!(log.starts_with(&first));

    let enhanced = dir.path().join("one.ppm");
    let input = data.join("distorted/00000.ppm");
    let out = sepattn(&[
        "enhance",
        "--checkpoint",
        p(&ckpt),
        "--in",
        p(&input),
        "--out",
        p(&enhanced),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bytes = std::fs::read(&enhanced).unwrap();
    assert!(bytes.starts_with(b"P6\n16 16\n255\n"));

    let many = dir.path().join("many");
    let out = sepattn(&[
        "enhance",
        "--checkpoint",
        p(&ckpt),
        "--in",
        p(&data.join("distorted")),
        "--out",
        p(&many),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_dir(&many).unwrap().count(), 20);
    assert!(many.join("00019.ppm").is_file());

    let csv = dir.path().join("eval.csv");
    let out = sepattn(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--csv",
        p(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,psnr_db,ssim,uiqm");
    assert_eq!(lines.len(), 1 + 2 + 2);
    assert!(lines[3].starts_with("MEAN,") && lines[4].starts_with("STD,"));
    assert!(stderr(&out).contains("input"));
}

#[test]
fn eval_identity_baseline_and_metric_selection() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&sepattn(&[
            "generate-data",
            "--count",
            "20",
            "--size",
            "16",
            "--out",
            p(&data)
        ])),
        0
    );
    let out = sepattn(&[
        "eval",
        "--checkpoint",
        "identity",
        "--data",
        p(&data),
        "--metrics",
        "psnr",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert!(text.starts_with("id,psnr_db\n"));
    let err = stderr(&out);
    let model = err.lines().find(|l| l.starts_with("model")).unwrap();
    let input = err.lines().find(|l| l.starts_with("input")).unwrap();
    assert_eq!(model["model".len()..], input["input".len()..]);

    let out = sepattn(&[
        "eval",
        "--checkpoint",
        "identity",
        "--data",
        p(&data),
        "--metrics",
        "lpips",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.satt");
    let out = sepattn(&[
        "enhance",
        "--checkpoint",
        p(&missing),
        "--in",
        p(&missing),
        "--out",
        p(&missing),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.satt"));
}

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, px: &[u8]) {
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(px);
    std::fs::write(path, bytes).unwrap();
}

fn read_body(path: &Path, header_len: usize) -> Vec<u8> {
    std::fs::read(path).unwrap()[header_len..].to_vec()
}

#[test]
fn mask_preview_partitions_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.ppm");
    let px: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
    write_pnm(&img, "P6", 4, 4, &px);
    let header = "P6\n4 4\n255\n".len();

    let depth = dir.path().join("depth.pgm");
    let d: Vec<u8> = (0..16).map(|i| (i * 17) as u8).collect();
    write_pnm(&depth, "P5", 4, 4, &d);
    let out_dir = dir.path().join("out");
    let out = sepattn(&[
        "mask-preview",
        "--image",
        p(&img),
        "--depth",
        p(&depth),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fg = read_body(&out_dir.join("foreground.ppm"), header);
    let bg = read_body(&out_dir.join("background.ppm"), header);
    let sum: Vec<u8> = fg.iter().zip(&bg).map(|(a, b)| a + b).collect();
    assert_eq!(sum, px);

    write_pnm(&depth, "P5", 4, 4, &[255; 16]);
    assert_eq!(
        code(&sepattn(&[
            "mask-preview",
            "--image",
            p(&img),
            "--depth",
            p(&depth),
            "--out",
            p(&out_dir)
        ])),
        0
    );
    assert!(read_body(&out_dir.join("background.ppm"), header)
        .iter()
        .all(|&v| v == 0));
    assert_eq!(read_body(&out_dir.join("foreground.ppm"), header), px);

    write_pnm(&depth, "P5", 2, 2, &[0; 4]);
    let out = sepattn(&[
        "mask-preview",
        "--image",
        p(&img),
        "--depth",
        p(&depth),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn grad_check_reports_per_op() {
    let out = sepattn(&["grad-check", "--ops", "all", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 18);
    assert!(text.lines().all(|l| l.contains("max rel error")));

    let out = sepattn(&["grad-check", "--ops", "tanh,broken_fixture"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("broken_fixture"));
    assert_eq!(code(&sepattn(&["grad-check", "--ops", "nonsense"])), 2);
}
