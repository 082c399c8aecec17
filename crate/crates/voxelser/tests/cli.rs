//! Command-level tests driven through `run_from` with an in-memory writer:
//! golden output shapes, exit codes, and the synth -> train -> eval loop on
//! real files.

use voxelser::cli::run_from;
use voxelser::grid::VoxelGrid;
use voxelser::sfc::{self, CurveKind};

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run_from(args.iter().copied(), &mut out);
    (code, String::from_utf8(out).unwrap())
}

/// 2x2x2 scene with every voxel occupied by class 1.
fn tiny_scene(dir: &std::path::Path) -> std::path::PathBuf {
    let grid = VoxelGrid::new((2, 2, 2), 1, 1, vec![1; 8], vec![0.5; 8]).unwrap();
    let path = dir.join("tiny.vser");
    grid.write_vser(&path).unwrap();
    path
}

#[test]
fn dump_golden_on_full_cube() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(dir.path());
    let (code, out) = run(&["voxelser", "dump", scene.to_str().unwrap()]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "n=8 curve=zorder shift=0 group_size=8 groups=1");
    assert_eq!(lines[1], "group,pos,lin,x,y,z,key,label");
    assert_eq!(lines.len(), 10);
    for (i, line) in lines[2..].iter().enumerate() {
        let f: Vec<u64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (group, pos, lin, x, y, z, key, label) =
            (f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7]);
        assert_eq!(group, 0);
        assert_eq!(pos, i as u64);
        // All 8 voxels occupied => keys visit 0..8 in ascending order.
        assert_eq!(key, i as u64);
        assert_eq!(key, sfc::encode(CurveKind::ZOrder, 1, (x as u32, y as u32, z as u32)).unwrap());
        assert_eq!(lin, x + 2 * y + 4 * z);
        assert_eq!(label, 1);
    }
}

#[test]
fn dump_shift_rotates_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(dir.path());
    let (_, base) = run(&["voxelser", "dump", scene.to_str().unwrap()]);
    let (code, shifted) = run(&["voxelser", "dump", scene.to_str().unwrap(), "--shift", "3"]);
    assert_eq!(code, 0);
    let lin_at = |text: &str, pos: usize| -> u64 {
        text.lines().nth(2 + pos).unwrap().split(',').nth(2).unwrap().parse().unwrap()
    };
    for pos in 0..8 {
        assert_eq!(lin_at(&shifted, pos), lin_at(&base, (pos + 3) % 8));
    }
}

#[test]
fn gradcheck_numcore_reports_pass() {
    let (code, out) = run(&["voxelser", "gradcheck", "--module", "numcore"]);
    assert_eq!(code, 0);
    assert!(out.contains("numcore/softmax"));
    assert!(out.contains("numcore/layer_norm"));
    assert!(out.contains("numcore/conv3d"));
    assert_eq!(out.lines().last().unwrap(), "pass");
    let (code, _) = run(&["voxelser", "gradcheck", "--module", "no-such-module"]);
    assert_eq!(code, 1);
}

#[test]
fn bench_reports_exact_pair_count() {
    let (code, out) = run(&[
        "voxelser", "bench", "--attention", "grouped", "--n", "4096", "--g", "64",
    ]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "n,g,token_pairs,wall_ns");
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(f[0], "4096");
    assert_eq!(f[1], "64");
    // 64 groups of 64 tokens each: 4096/64 * 64^2.
    assert_eq!(f[2], "262144");
}

#[test]
fn synth_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scene.spec");
    std::fs::write(
        &spec,
        "dims=6x6x6\nclasses=2\nseed=3\nbox=1,0,0,0,5,5,0\nbox=2,1,1,1,4,4,3\n",
    )
    .unwrap();
    let scene = dir.path().join("scene.vser");
    let (code, out) = run(&[
        "voxelser", "synth", "--spec", spec.to_str().unwrap(), "--out", scene.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out.starts_with("dims=6x6x6 classes=2 occupied="), "got {out}");

    let weights = dir.path().join("w.vswt");
    let trace = dir.path().join("trace.csv");
    let (code, _) = run(&[
        "voxelser", "train-toy", "--scene", scene.to_str().unwrap(), "--steps", "40",
        "--seed", "1", "--out", weights.to_str().unwrap(), "--trace", trace.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let trace_text = std::fs::read_to_string(&trace).unwrap();
    assert!(trace_text.starts_with(voxelser::cli::TRACE_HEADER));
    assert_eq!(trace_text.lines().count(), 41);

    let (code, out) = run(&[
        "voxelser", "eval", "--scene", scene.to_str().unwrap(),
        "--weights", weights.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let acc_line = out.lines().find(|l| l.starts_with("accuracy=")).unwrap();
    let acc: f64 = acc_line.trim_start_matches("accuracy=").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.contains("sc_iou="));
    assert!(out.contains("class_1_iou="));
    assert!(out.contains("class_2_iou="));
}

#[test]
fn crpe_dump_has_one_row_per_occupied_voxel() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(dir.path());
    let (code, out) = run(&["voxelser", "crpe", "--dump", scene.to_str().unwrap()]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "x,y,z,delta_yaw,delta_pitch");
    assert_eq!(lines.len(), 9);
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 5);
    }
}

#[test]
fn exit_codes() {
    let (code, out) = run(&["voxelser", "--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("dump"));
    let (code, _) = run(&["voxelser", "no-such-command"]);
    assert_eq!(code, 1);
    let (code, _) = run(&["voxelser", "dump", "/nonexistent/scene.vser"]);
    assert_eq!(code, 2);
}
