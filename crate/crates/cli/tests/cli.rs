use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evsurface::event_io::{write_event_file, EventFormat};
use evsurface::surface::read_srf1;
use evsurface::{Event, EventStream};

fn evsurface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evsurface"))
        .args(args)
        .env_remove("EVSURFACE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_stream(dir: &Path, name: &str, stream: &EventStream) -> String {
    let p = dir.join(name);
    write_event_file(stream, &p, EventFormat::from_path(&p)).unwrap();
    p.to_str().unwrap().to_owned()
}

fn sample_stream() -> EventStream {
    let ev = vec![
        Event::new(0, 0, 10.0, 1),
        Event::new(2, 1, 20.0, -1),
        Event::new(0, 0, 35.0, -1),
        Event::new(1, 2, 50.0, 1),
        Event::new(2, 1, 80.0, 1),
    ];
    EventStream::new(3, 3, ev).unwrap()
}

#[test]
fn validate_valid_binary() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_stream(dir.path(), "ok.evt", &sample_stream());
    let o = evsurface(&["validate", &f]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 violations"));
}

#[test]
fn validate_lists_violations() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "t,x,y,p\n1,0,0,1\n2,5,0,1\n3,0,9,-1\n").unwrap();
    let o = evsurface(&["validate", p.to_str().unwrap(), "--width", "4", "--height", "4"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("2 violations"), "{out}");
    assert_eq!(out.lines().filter(|l| l.contains("outside the sensor")).count(), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(evsurface(&["validate", "x.evt", "--bogus"]).status.code(), Some(2));
    assert_eq!(evsurface(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(evsurface(&["grad-check", "--seed", "seven"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let f = write_stream(dir.path(), "ok.evt", &sample_stream());
    let out = dir.path().join("s.srf");
    let o = evsurface(&["reconstruct", &f, "--kernel", "2", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = evsurface(&["reconstruct", &f, "--features", "nonsense", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_exits_1() {
    let o = evsurface(&["validate", "/definitely/not/here.evt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_seed_7() {
    let o = evsurface(&["grad-check", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("max relative error:")).unwrap();
    let v: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(v <= 1e-5, "{v}");
}

#[test]
fn equiv_check_passes() {
    let o = evsurface(&["equiv-check", "--seed", "3", "--instances", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("per-pixel"));
}

#[test]
fn reconstruct_empty_stream_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_stream(dir.path(), "empty.evt", &EventStream::empty(5, 4));
    let out = dir.path().join("s.srf");
    let o = evsurface(&["reconstruct", &f, "--channels", "3", "--bins", "2", "--se", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let s = read_srf1(&out).unwrap();
    assert_eq!((s.height, s.width, s.channels), (4, 5, 6));
    assert!(s.data.iter().all(|&v| v == 0.0));
}

#[test]
fn reconstruct_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_stream(dir.path(), "e.csv", &sample_stream());
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = evsurface(&[
            "reconstruct", &f, "--width", "3", "--height", "3", "--channels", "4", "--bins", "2",
            "--features", "polarity,ts_rel,coords", "--kernel", "3", "--stride", "2", "--se",
            "--seed", "9", "--threads", threads, "-o", out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    let a = run("a.srf", "1");
    assert_eq!(a, run("b.srf", "1"));
    assert_eq!(a, run("c.srf", "3"));
    assert_eq!(&a[..4], b"SRF1");
}

#[test]
fn reconstruct_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_stream(dir.path(), "ok.evt", &sample_stream());
    let out = dir.path().join("s.pgm");
    let o = evsurface(&["reconstruct", &f, "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let bytes = fs::read(out).unwrap();
    assert!(bytes.starts_with(b"P5\n3 3\n255\n"));
    assert_eq!(bytes.len(), 11 + 9);
}

#[test]
fn trained_checkpoint_feeds_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("toy.mlp");
    let o = evsurface(&["train-toy", "--epochs", "1", "--seed", "2", "-o", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().any(|l| l.trim_start().starts_with("1 ")));
    let se = dir.path().join("toy.mlp.se");
    assert!(se.exists());

    let f = write_stream(dir.path(), "ok.evt", &sample_stream());
    let out = dir.path().join("s.srf");
    let o = evsurface(&[
        "reconstruct", &f, "--channels", "3", "--features", "polarity,ts_abs", "--se",
        "--params", ckpt.to_str().unwrap(), "--se-params", se.to_str().unwrap(), "-o", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_srf1(&out).unwrap().data.iter().any(|&v| v != 0.0));

    let o = evsurface(&[
        "reconstruct", &f, "--channels", "5", "--params", ckpt.to_str().unwrap(), "-o", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let svg = dir.path().join("b.svg");
    let o = evsurface(&[
        "bench", "--height", "8", "--width", "8", "--densities", "0.1,1.0", "--batches", "1,2", "--channels", "2",
        "--events-per-pixel", "2", "--passes", "forward,backward", "--warmup", "0", "-o",
        csv.to_str().unwrap(), "--svg", svg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path,density,batch,channels,events_per_pixel,pass,time_ms,peak_elements"));
    assert_eq!(lines.count(), 12);
    assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));

    let o = evsurface(&["bench", "--densities", "1.5", "-o", dir.path().join("x.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn threads_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_stream(dir.path(), "ok.evt", &sample_stream());
    let o = Command::new(env!("CARGO_BIN_EXE_evsurface"))
        .args(["validate", &f])
        .env("EVSURFACE_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_evsurface"))
        .args(["validate", &f])
        .env("EVSURFACE_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
