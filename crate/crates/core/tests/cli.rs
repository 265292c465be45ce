use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fodiff::nn::Checkpoint;
use fodiff::pipeline::fvol::{read_mask, read_volume};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fodiff-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn fodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fodiff")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn phantom_train_infer_eval_glyphs() {
    let dir = scratch("flow");
    let data = dir.join("data");
    ok(fodiff(&["phantom", "--out", s(&data), "--n", "2", "--dims", "16,16,16", "--seed", "3"]));
    let subj = data.join("subject_000");
    for f in ["har.fvol", "lar.fvol", "wm.fvol", "brain.fvol"] {
        assert!(subj.join(f).is_file(), "{f} missing");
    }

    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "# short run\niterations = 3\ndiffusion_steps = 4\ncheckpoint_every = 2\n").unwrap();
    let run_dir = dir.join("run");
    let model = ok(fodiff(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run_dir)]));
    assert_eq!(model.trim(), s(&run_dir.join("model.fdck")));
    for f in ["run.cfg", "loss.csv", "ckpt_000002.fdck", "ckpt_000003.fdck", "model.fdck"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("iteration,loss,lr,a,b\n"));
    let ck = Checkpoint::load(&run_dir.join("model.fdck")).unwrap();
    assert!(ck.config_text.contains("har_mean = "));

    let pred = dir.join("pred.fvol");
    let (lar, wm, brain, har) = (subj.join("lar.fvol"), subj.join("wm.fvol"), subj.join("brain.fvol"), subj.join("har.fvol"));
    let args = |out: &Path, seed: &'static str| {
        vec!["infer".to_string(), "--ckpt".into(), s(&run_dir.join("model.fdck")).into(), "--lar".into(), s(&lar).into(), "--wm".into(),
             s(&wm).into(), "--brain".into(), s(&brain).into(), "--out".into(), s(out).into(), "--seed".into(), seed.into()]
    };
    ok(Command::new(env!("CARGO_BIN_EXE_fodiff")).args(args(&pred, "1")).output().unwrap());
    let p = read_volume(&pred).unwrap();
    assert_eq!((p.dims(), p.channels()), ((16, 16, 16), 45));
    assert!(std::fs::read_to_string(dir.join("pred.fvol.run.cfg")).unwrap().contains("iterations = 3"));
    let again = dir.join("again.fvol");
    ok(Command::new(env!("CARGO_BIN_EXE_fodiff")).args(args(&again, "1")).output().unwrap());
    assert_eq!(std::fs::read(&pred).unwrap(), std::fs::read(&again).unwrap());
    let brain_mask = read_mask(&brain).unwrap();
    for (i, v) in brain_mask.data().iter().enumerate() {
        if *v == 0 {
            assert!((0..45).all(|c| p.data()[c * 4096 + i] == 0.0));
        }
    }

    let report = dir.join("report.txt");
    let text = ok(fodiff(&["eval", "--pred", s(&har), "--truth", s(&har), "--wm", s(&wm), "--brain", s(&brain), "--report", s(&report)]));
    assert!(text.starts_with("WM ACC 1.0000"), "{text}");
    assert_eq!(std::fs::read_to_string(&report).unwrap(), text);
    let csv = std::fs::read_to_string(dir.join("report.txt.csv")).unwrap();
    assert!(csv.starts_with("region,mean,std,counted_voxels,undefined_voxels,status\n"));

    let glyphs = dir.join("glyphs.csv");
    ok(fodiff(&["export-glyphs", "--fod", s(&har), "--voxels", "8,8,8;7,8,8", "--dirs", "12", "--out", s(&glyphs)]));
    let g = std::fs::read_to_string(&glyphs).unwrap();
    assert!(g.starts_with("x,y,z,dir_x,dir_y,dir_z,amplitude\n"));
    assert_eq!(g.lines().count(), 1 + 2 * 12);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn errors_exit_nonzero_with_class() {
    let dir = scratch("errors");
    let missing = dir.join("nope.fvol");
    let out = fodiff(&["export-glyphs", "--fod", s(&missing), "--voxels", "0,0,0", "--out", s(&dir.join("g.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));

    let short = dir.join("short.fvol");
    std::fs::write(&short, b"FVOL\x01\x00").unwrap();
    let out = fodiff(&["export-glyphs", "--fod", s(&short), "--voxels", "0,0,0", "--out", s(&dir.join("g.csv"))]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[header-short]"));

    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "patch = 8\nunknown_key = 1\n").unwrap();
    let out = fodiff(&["train", "--data", s(&dir), "--config", s(&cfg), "--out", s(&dir.join("run"))]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));
    assert!(!dir.join("run").exists());

    let bad = fodiff(&["phantom", "--out", s(&dir.join("p")), "--n", "1", "--dims", "16,16"]);
    assert!(!bad.status.success());

    // an empty WM mask leaves no voxel to score
    let data = dir.join("data");
    ok(fodiff(&["phantom", "--out", s(&data), "--n", "1", "--dims", "12,12,12"]));
    let subj = data.join("subject_000");
    let empty = dir.join("empty.fvol");
    let wm = read_mask(&subj.join("wm.fvol")).unwrap();
    let none = fodiff::volume::BinaryMask::filled(wm.dims(), false).unwrap();
    fodiff::pipeline::fvol::write_mask(&none, &empty).unwrap();
    let har = subj.join("har.fvol");
    let out = fodiff(&["eval", "--pred", s(&har), "--truth", s(&har), "--wm", s(&empty), "--brain", s(&subj.join("brain.fvol")), "--report", s(&dir.join("r.txt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[no-valid-voxels]"));
    std::fs::remove_dir_all(&dir).unwrap();
}
