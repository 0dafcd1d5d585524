use octolatent::codec::inspect;
use octolatent::metrics::Metrics;
use octolatent::ply::{load_ply, save_ply};
use octolatent::synthetic::voxel_sphere;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_octolatent"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FAST: [&str; 8] = [
    "--depth",
    "4",
    "--iterations",
    "40",
    "--vq-size",
    "32",
    "--levels",
    "3",
];

fn scene(dir: &Path) -> PathBuf {
    let p = dir.join("scene.ply");
    std::fs::write(&p, save_ply(&voxel_sphere(4, 2)).unwrap()).unwrap();
    p
}

fn encode(dir: &Path, attrs: &str) -> PathBuf {
    let input = scene(dir);
    let out = dir.join("scene.bin");
    let mut args = vec!["encode", s(&input), s(&out), "--attrs", attrs];
    args.extend(FAST);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn encode_decode_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stream = encode(dir.path(), "opacity,sh0");
    let metrics: Metrics =
        serde_json::from_slice(&std::fs::read(dir.path().join("scene.bin.json")).unwrap()).unwrap();
    assert_eq!(metrics.stream_bytes, Some(std::fs::metadata(&stream).unwrap().len() as usize));

    let decoded = dir.path().join("out.ply");
    let o = run(&["decode", s(&stream), s(&decoded)]);
    assert!(o.status.success());
    let m = load_ply(&std::fs::read(&decoded).unwrap()).unwrap();
    assert_eq!(m.len(), metrics.num_voxels);

    let o = run(&[
        "eval",
        s(&dir.path().join("scene.ply")),
        s(&decoded),
        "--depth",
        "4",
        "--stream",
        s(&stream),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e: Metrics = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(e, metrics);
    assert!(e.attribute(17).unwrap().psnr.is_some());

    let o = run(&["inspect", s(&stream)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("geometry") && text.contains("latents"));
}

#[test]
fn single_attribute_gives_one_net_and_latent_section() {
    let dir = tempfile::tempdir().unwrap();
    let stream = encode(dir.path(), "opacity");
    let info = inspect(&std::fs::read(stream).unwrap()).unwrap();
    let coded: Vec<_> = info
        .parts
        .iter()
        .filter_map(|p| p.attr_id.map(|a| (p.name.as_str(), a)))
        .collect();
    assert_eq!(coded, [("nets", 17), ("latents", 17)]);
    assert_eq!(info.header.attributes.len(), 1);
}

#[test]
fn corrupt_stream_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let stream = encode(dir.path(), "opacity");
    let mut bytes = std::fs::read(&stream).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, &bytes).unwrap();
    let out = dir.path().join("bad.ply");
    let o = run(&["decode", s(&bad), s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert!(!out.exists());
    let stray: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(stray.is_empty());
}

#[test]
fn missing_input_and_bad_flags_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["decode", s(&dir.path().join("nope.bin")), s(&dir.path().join("x.ply"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.bin"));

    let input = scene(dir.path());
    let out = dir.path().join("x.bin");
    let o = run(&["encode", s(&input), s(&out), "--attrs", "sh99"]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn sweep_writes_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let input = scene(dir.path());
    let csv = dir.path().join("rd.csv");
    let mut args = vec![
        "sweep",
        s(&input),
        "--lambdas",
        "1e-4,1e-2",
        "--out",
        s(&csv),
        "--attrs",
        "opacity",
    ];
    args.extend(FAST);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("schema,lambda,status,bytes,bpp,psnr_1,"));
    for l in &lines[1..] {
        assert!(l.starts_with("sweep-v1,"));
        assert!(l.contains(",ok,"));
        assert_eq!(l.split(',').count(), 25);
    }
}
