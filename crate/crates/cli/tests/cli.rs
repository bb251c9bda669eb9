use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn planefit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planefit")).args(args).output().expect("spawn planefit")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pgm16_pixels(bytes: &[u8]) -> Vec<u16> {
    // P5 header: magic, width, height, maxval, each followed by one whitespace byte
    let mut fields = 0;
    let mut i = 0;
    while fields < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields += 1;
    }
    bytes[i + 1..].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
}

#[test]
fn synth_plane_without_noise_is_exact_millimetres() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("plane_z2.txt");
    fs::write(&scene, "0 0 1 -2\n").unwrap();
    let depth = dir.path().join("z2.pgm");
    let out = planefit(&["synth", "--scene", s(&scene), "--noise", "off", "--out", s(&depth)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let px = pgm16_pixels(&fs::read(&depth).unwrap());
    assert_eq!(px.len(), 640 * 480);
    assert!(px.iter().all(|&v| v == 2000));
    assert!(dir.path().join("z2.pgm.labels.pgm").exists());
}

#[test]
fn fit_recovers_plane_as_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("plane.txt");
    fs::write(&scene, "0 0 1 -2\n").unwrap();
    let depth = dir.path().join("z2.pgm");
    assert!(planefit(&["synth", "--scene", s(&scene), "--noise", "off", "--out", s(&depth)]).status.success());

    let expect = [0.0, 0.0, 1.0 / 5f64.sqrt(), -2.0 / 5f64.sqrt()];
    for backend in ["naive", "integral"] {
        let out = planefit(&[
            "fit",
            "--depth",
            s(&depth),
            "--formulation",
            "implicit-rgbd",
            "--backend",
            backend,
            "--rect",
            "0,0,50,50",
            "--header",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("formulation,backend,rect,a,b,c,d,lambda,rms,n_points"));
        let row = lines.next().unwrap();
        assert!(row.starts_with(&format!("implicit-rgbd,{backend},\"0,0,50,50\",")));
        let fields: Vec<&str> = row.rsplit_once('"').unwrap().1.trim_start_matches(',').split(',').collect();
        for (f, e) in fields[..4].iter().zip(expect) {
            assert!((f.parse::<f64>().unwrap() - e).abs() < 1e-9, "{row}");
        }
        assert_eq!(fields[6], "2500");
    }
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["fit", "--bogus"][..],
        &["fit", "--depth", "x.pgm", "--formulation", "sideways"],
        &["fit", "--depth", "x.pgm", "--formulation", "explicit-rgbd", "--rect", "5,5,1,1"],
        &["synth", "--out", "a.pgm", "--noise", "fixed:-1"],
        &["synth", "--out", "a.pgm", "--dropout", "1.5"],
        &["bench", "--reps", "2"],
        &["nosuchcommand"],
        &[],
    ] {
        let out = planefit(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(planefit(&["--help"]).status.code(), Some(0));
    assert_eq!(planefit(&["--version"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two_and_name_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.pgm");
    let out = planefit(&["fit", "--depth", s(&missing), "--formulation", "implicit-standard"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("missing.pgm"), "{err}");

    let garbage = dir.path().join("garbage.pgm");
    fs::write(&garbage, b"not an image").unwrap();
    let out = planefit(&["segment", "--depth", s(&garbage), "--out", s(&dir.path().join("o.ppm"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("garbage.pgm"));

    // image dimensions disagree with the camera
    let tof = dir.path().join("tof.pgm");
    assert!(planefit(&["synth", "--camera", "tof", "--out", s(&tof)]).status.success());
    let out = planefit(&["fit", "--depth", s(&tof), "--formulation", "implicit-standard"]);
    assert_eq!(out.status.code(), Some(2));

    let bad_intr = dir.path().join("cam.txt");
    fs::write(&bad_intr, "fx = 500\n").unwrap();
    let out = planefit(&["synth", "--intrinsics", s(&bad_intr), "--out", s(&dir.path().join("a.pgm"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("cam.txt"));
}

#[test]
fn segment_room_corner_finds_three_colours_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let depth = dir.path().join("room.pgm");
    let out = planefit(&["synth", "--camera", "tof", "--seed", "5", "--dropout", "0.01", "--out", s(&depth)]);
    assert!(out.status.success());

    let run = |name: &str| {
        let ppm = dir.path().join(name);
        let out = planefit(&["segment", "--camera", "tof", "--depth", s(&depth), "--k", "3", "--out", s(&ppm)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (fs::read(&ppm).unwrap(), fs::read_to_string(dir.path().join(format!("{name}.csv"))).unwrap())
    };
    let (ppm, csv) = run("a.ppm");
    let (ppm2, csv2) = run("b.ppm");
    assert_eq!(ppm, ppm2);
    assert_eq!(csv, csv2);

    assert!(ppm.starts_with(b"P6\n512 424\n255\n"));
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    for px in ppm[b"P6\n512 424\n255\n".len()..].chunks_exact(3) {
        *counts.entry([px[0], px[1], px[2]]).or_default() += 1;
    }
    let mut by_size: Vec<usize> = counts.values().copied().collect();
    by_size.sort_unstable_by(|a, b| b.cmp(a));
    let total = 512 * 424;
    assert!(by_size.len() >= 3);
    assert!(by_size[..3].iter().sum::<usize>() as f64 > 0.95 * total as f64, "{by_size:?}");
    assert!(by_size[2] as f64 > 0.1 * total as f64);

    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("rect,level,status,a,b,c,d,error,n_points,cluster"));
    let clusters: std::collections::BTreeSet<&str> =
        rows.filter(|r| r.contains(",fitted,")).map(|r| r.rsplit(',').next().unwrap()).collect();
    assert_eq!(clusters.len(), 3);
}

#[test]
fn bench_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let summary = dir.path().join("summary.txt");
    let out = planefit(&[
        "bench",
        "--plane-counts",
        "0,5",
        "--reps",
        "3",
        "--warmup",
        "1",
        "--formulations",
        "implicit-standard,implicit-rgbd",
        "--backends",
        "integral",
        "--out",
        s(&csv),
        "--summary",
        s(&summary),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,backend,phase,plane_count,rep,seconds"));
    // per method and rep: one build row, then fit and total rows per plane count
    assert_eq!(lines.count(), 2 * 3 * (1 + 2 * 2));
    assert!(fs::read_to_string(&summary).unwrap().starts_with('#'));
    assert!(String::from_utf8(out.stderr).unwrap().contains("build:implicit-rgbd/implicit-standard"));
}
