//! Acceptance suite: one PASS/FAIL line per criterion, offline, against the
//! bundled replay fixtures. Runs without the libtest harness so the lines are
//! always shown.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use drivecot_core::backend::BackendMode;
use drivecot_core::config::{BackendModeSetting, RunConfig};
use drivecot_core::eval::NO_FORMULA_FLAG;
use drivecot_core::geometry::{within_tolerance, Correctness, DISTANCE_TOLERANCE_M};
use drivecot_core::memory::{MemoryLog, SceneSummary, TimeOfDay};
use drivecot_core::parse::{parse_decision, parse_objects, DecisionError};
use drivecot_core::prompt::{COT_TRIGGER, PERSONA, STAGE_HEADERS};
use drivecot_core::run::{run_config, RecordPolicy, RunOutcome, RunStatus};
use drivecot_core::scene::{CameraSet, ImageSource, SceneError};
use drivecot_core::{
    action_menu, build_prompt, load_manifest, merge_panorama, pythagorean_distance, DrivingAction, MemorySnapshot,
    ObjectCategory, ObjectRecord, Point2D, PromptStrategy, TaskKind,
};
use image::{Rgba, RgbaImage};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Signed};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn replay(config: &str, out: &Path) -> Result<RunOutcome, String> {
    let mut cfg =
        RunConfig::load(&fixtures().join("configs").join(format!("{config}.json"))).map_err(|e| e.to_string())?;
    ensure!(cfg.backend.mode == BackendModeSetting::Replay, "{config} is not a replay config");
    cfg.paths.out_dir = out.join(config);
    run_config(&cfg, RecordPolicy::Refuse).map_err(|e| format!("{config}: {e}"))
}

fn cells(outcome: &RunOutcome) -> Vec<String> {
    outcome.report.rows.iter().map(|r| r.accuracy.map_or("-".into(), |p| p.to_string())).collect()
}

fn within(started: Instant, limit: Duration, what: &str) -> Check {
    let took = started.elapsed();
    ensure!(took < limit, "{what} took {took:?}, limit {limit:?}");
    Ok(())
}

fn perception_tables() -> Check {
    let started = Instant::now();
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    for basis in ["", "-human"] {
        let a = replay(&format!("perception-set-a{basis}"), out.path())?;
        ensure!(
            cells(&a) == ["100.00%", "90.00%", "100.00%", "90.00%", "100.00%"],
            "set-a{basis} cells {:?}",
            cells(&a)
        );
        ensure!(
            a.report.overall.map(|p| p.to_string()).as_deref() == Some("96.00%"),
            "set-a{basis} overall {:?}",
            a.report.overall
        );
        let b = replay(&format!("perception-set-b{basis}"), out.path())?;
        ensure!(cells(&b) == ["100.00%", "77.78%", "55.56%", "66.67%", "66.67%"], "set-b{basis} cells {:?}", cells(&b));
        ensure!(
            b.report.overall.map(|p| p.to_string()).as_deref() == Some("73.34%"),
            "set-b{basis} overall {:?}",
            b.report.overall
        );
        let expected_basis = if basis.is_empty() { "exact-presence" } else { "human" };
        ensure!(
            a.report.meta.iter().any(|(k, v)| k == "basis" && v == expected_basis),
            "report does not name basis {expected_basis}"
        );
    }
    within(started, Duration::from_secs(5), "perception replay")
}

fn ablation_table() -> Check {
    let started = Instant::now();
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = replay("ablation", out.path())?;
    let rows: Vec<_> = run.report.rows.iter().map(|r| (r.group.as_str(), r.correct, r.total)).collect();
    ensure!(
        rows == [("zero-shot", 72, 100), ("role-playing", 88, 100), ("pkrd-cot", 94, 100)],
        "ablation rows {rows:?}"
    );
    ensure!(cells(&run) == ["72.00%", "88.00%", "94.00%"], "ablation cells {:?}", cells(&run));
    ensure!(run.status == RunStatus::Complete, "ablation run is partial");
    within(started, Duration::from_secs(10), "ablation replay")
}

fn math_table() -> Check {
    let started = Instant::now();
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (set, expected) in
        [("calc-a", "100.00%"), ("calc-b", "90.00%"), ("calc-c", "80.00%"), ("calc-d", "30.00%"), ("calc-e", "20.00%")]
    {
        let run = replay(&format!("math-{set}"), out.path())?;
        ensure!(cells(&run) == [expected], "{set}: {:?}", cells(&run));
        ensure!(run.report.rows[0].flags.is_empty(), "{set} flagged {:?}", run.report.rows[0].flags);
    }
    let none = replay("math-calc-none", out.path())?;
    ensure!(cells(&none) == ["0.00%"], "calc-none: {:?}", cells(&none));
    ensure!(
        none.report.rows[0].flags.iter().any(|f| f == NO_FORMULA_FLAG),
        "calc-none flags {:?}",
        none.report.rows[0].flags
    );
    within(started, Duration::from_secs(5), "math replay")
}

fn rational(v: f64) -> BigRational {
    BigRational::from_f64(v).expect("finite")
}

/// Checks `d` against the exact distance to 1e-9 relative error:
/// `(d(1-e))^2 <= s <= (d(1+e))^2` with `s` the exact squared distance.
fn agrees_with_exact(a: Point2D, b: Point2D, d: f64) -> bool {
    let dx = rational(b.x) - rational(a.x);
    let dy = rational(b.y) - rational(a.y);
    let s = &dx * &dx + &dy * &dy;
    if d == 0.0 {
        return s == BigRational::from_integer(BigInt::from(0));
    }
    let eps = BigRational::new(BigInt::from(1), BigInt::from(1_000_000_000));
    let one = BigRational::from_integer(BigInt::from(1));
    let dr = rational(d);
    let lo = &dr * (&one - &eps);
    let hi = &dr * (&one + &eps);
    (&lo * &lo) <= s && s <= (&hi * &hi)
}

fn geometry_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(4242);
    let point = |rng: &mut StdRng| {
        let scale = [1e-3, 1.0, 1e3, 1e6][rng.random_range(0..4)];
        Point2D { x: rng.random_range(-1.0..1.0) * scale, y: rng.random_range(-1.0..1.0) * scale }
    };
    let n = 100_000;
    for i in 0..n {
        let (a, b, c) = (point(&mut rng), point(&mut rng), point(&mut rng));
        let d = |p, q| pythagorean_distance(p, q).unwrap();
        let ab = d(a, b);
        ensure!(ab >= 0.0, "negative distance at case {i}");
        ensure!(ab == d(b, a), "asymmetric at case {i}: {a:?} {b:?}");
        ensure!(d(a, a) == 0.0, "nonzero self distance at case {i}");
        let slack = 1e-12 * (ab + d(b, c) + d(a, c)).max(1.0);
        ensure!(d(a, c) <= ab + d(b, c) + slack, "triangle inequality fails at case {i}");
        let t = Point2D { x: rng.random_range(-100.0..100.0), y: rng.random_range(-100.0..100.0) };
        let shifted = d(Point2D { x: a.x + t.x, y: a.y + t.y }, Point2D { x: b.x + t.x, y: b.y + t.y });
        let tol = 1e-9 * ab.max(1.0)
            + 4.0 * f64::EPSILON * (a.x.abs() + a.y.abs() + b.x.abs() + b.y.abs() + 2.0 * (t.x.abs() + t.y.abs()));
        ensure!((shifted - ab).abs() <= tol, "translation changed distance at case {i}: {ab} vs {shifted}");
        ensure!(agrees_with_exact(a, b, ab), "extended-precision mismatch at case {i}: {a:?} {b:?} -> {ab}");
    }
    let check = |claimed: f64, truth: f64, want: Correctness| -> Check {
        let got = within_tolerance(claimed, truth, DISTANCE_TOLERANCE_M);
        ensure!(got == want, "within_tolerance({claimed}, {truth}) = {got:?}, want {want:?}");
        Ok(())
    };
    check(10.5, 10.0, Correctness::Correct)?;
    check(9.5, 10.0, Correctness::Correct)?;
    check(10.0 + 0.5 + 1e-9, 10.0, Correctness::Incorrect)?;
    check(10.0 - 0.5 - 1e-9, 10.0, Correctness::Incorrect)?;
    check(6.1 + 0.4, 6.0, Correctness::Correct)?;
    let exact = pythagorean_distance(Point2D { x: 0.0, y: 0.0 }, Point2D { x: 3.0, y: 4.0 }).unwrap();
    ensure!(exact == 5.0, "3-4-5 gives {exact}");
    ensure!(rational(exact).abs() == rational(5.0), "3-4-5 exactness");
    Ok(())
}

fn panorama_invariants() -> Check {
    let mut rng = StdRng::seed_from_u64(77);
    for case in 0..300 {
        let height = rng.random_range(1..16u32);
        let widths: Vec<u32> = (0..6).map(|_| rng.random_range(1..24u32)).collect();
        let rasters: Vec<RgbaImage> = widths
            .iter()
            .map(|&w| {
                RgbaImage::from_fn(w, height, |_, _| Rgba([rng.random(), rng.random(), rng.random(), rng.random()]))
            })
            .collect();
        let src = |i: usize| ImageSource::from_raster(format!("{i}.png"), rasters[i].clone());
        let set = CameraSet {
            front: src(0),
            front_left: src(1),
            front_right: src(2),
            back: src(3),
            back_left: src(4),
            back_right: src(5),
        };
        let pair = merge_panorama(&set).map_err(|e| e.to_string())?;
        for (pano, order, seams) in [
            (&pair.front_panorama, [1usize, 0, 2], &pair.seam_offsets.front),
            (&pair.back_panorama, [4, 3, 5], &pair.seam_offsets.back),
        ] {
            ensure!(pano.height() == height, "case {case}: height {} != {height}", pano.height());
            let total: u32 = order.iter().map(|&i| widths[i]).sum();
            ensure!(pano.width() == total, "case {case}: width {} != {total}", pano.width());
            let mut x0 = 0;
            for (k, &i) in order.iter().enumerate() {
                ensure!(seams[k] == x0, "case {case}: seam {k} at {} not {x0}", seams[k]);
                for y in 0..height {
                    for x in 0..widths[i] {
                        ensure!(
                            pano.get_pixel(x0 + x, y) == rasters[i].get_pixel(x, y),
                            "case {case}: pixel ({x},{y}) of camera {i}"
                        );
                    }
                }
                x0 += widths[i];
            }
        }
        let mut bad = set.clone();
        bad.back_right = ImageSource::from_raster("tall.png", RgbaImage::new(3, height + 1));
        match merge_panorama(&bad) {
            Err(SceneError::HeightMismatch { camera, .. }) => {
                ensure!(camera.name() == "back_right", "mismatch blamed on {camera}")
            }
            other => return Err(format!("case {case}: mismatched heights accepted: {:?}", other.map(|_| ()))),
        }
    }
    Ok(())
}

fn prompt_structure() -> Check {
    let samples = load_manifest(&fixtures().join("episode/manifest.jsonl")).map_err(|e| e.to_string())?;
    let memory = MemorySnapshot {
        frame_id: "ep-00".into(),
        step_index: 0,
        scene: SceneSummary {
            description: "highway at dusk".into(),
            time_of_day: TimeOfDay::Night,
            weather: "fog".into(),
        },
        objects: vec![ObjectRecord {
            id: 1,
            category: ObjectCategory::Car,
            position: "front".into(),
            pixel_coordinates: Some((10, 4)),
            state: "braking".into(),
        }],
        decision: Some(DrivingAction::SpeedDown),
        rationale: Some("lead car braking".into()),
    };
    for task in [TaskKind::Decision, TaskKind::MathDistance] {
        let mut sample = samples[1].clone();
        if task == TaskKind::MathDistance {
            let sc = sample.scenario.as_mut().unwrap();
            sc.ego.coords = Some(Point2D { x: 0.0, y: 0.0 });
            sc.neighbors[0].coords = Some(Point2D { x: 3.0, y: 4.0 });
        }
        let cot = build_prompt(PromptStrategy::PkrdCot, &sample, std::slice::from_ref(&memory), task)
            .map_err(|e| e.to_string())?
            .user_text;
        let pos: Vec<_> = STAGE_HEADERS.iter().map(|h| cot.find(h)).collect();
        ensure!(pos.iter().all(Option::is_some) && pos.windows(2).all(|w| w[0] < w[1]), "stage headers {pos:?}");
        ensure!(cot.contains(COT_TRIGGER), "missing trigger phrase");
        for label in action_menu() {
            ensure!(cot.contains(label), "missing action {label}");
        }
        ensure!(cot.contains(&memory.to_json()), "memory json not injected verbatim");

        let zs = build_prompt(PromptStrategy::ZeroShot, &sample, &[], task).map_err(|e| e.to_string())?.user_text;
        ensure!(!zs.contains(PERSONA), "zero-shot has persona");
        ensure!(STAGE_HEADERS.iter().all(|h| !zs.contains(h)) && !zs.contains(COT_TRIGGER), "zero-shot has stages");
        let rp = build_prompt(PromptStrategy::RolePlaying, &sample, &[], task).map_err(|e| e.to_string())?.user_text;
        ensure!(rp.contains(PERSONA), "role-playing lacks persona");
        ensure!(STAGE_HEADERS.iter().all(|h| !rp.contains(h)) && !rp.contains(COT_TRIGGER), "role-playing has stages");
    }
    ensure!(
        build_prompt(PromptStrategy::ZeroShot, &samples[0], &[memory], TaskKind::Decision).is_err(),
        "memory accepted without the staged strategy"
    );
    Ok(())
}

fn random_snapshot(rng: &mut StdRng, step: u64) -> MemorySnapshot {
    let word = |rng: &mut StdRng| -> String {
        let pool = ["car", "lane", "é", "\"q\"", "back\\slash", "näher", "\n", "{x}", " ", "→"];
        (0..rng.random_range(0..5)).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    let objects = (0..rng.random_range(0..5))
        .map(|i| ObjectRecord {
            id: i + 1,
            category: ObjectCategory::ALL[rng.random_range(0..5)],
            position: word(rng),
            pixel_coordinates: if rng.random() {
                Some((rng.random_range(0..5000), rng.random_range(0..5000)))
            } else {
                None
            },
            state: word(rng),
        })
        .collect();
    MemorySnapshot {
        frame_id: format!("frame-{}", rng.random_range(0..1000)),
        step_index: step,
        scene: SceneSummary {
            description: word(rng),
            time_of_day: [TimeOfDay::Day, TimeOfDay::Night, TimeOfDay::Unknown][rng.random_range(0..3)],
            weather: word(rng),
        },
        objects,
        decision: if rng.random() { Some(DrivingAction::ALL[rng.random_range(0..5)]) } else { None },
        rationale: if rng.random() { Some(word(rng)) } else { None },
    }
}

fn memory_and_episode() -> Check {
    let mut rng = StdRng::seed_from_u64(99);
    let mut log = MemoryLog::new("acceptance");
    for step in 0..500 {
        let snap = random_snapshot(&mut rng, step);
        let back = MemorySnapshot::from_json(&snap.to_json()).map_err(|e| e.to_string())?;
        ensure!(back == snap, "round trip changed snapshot {step}");
        let before = log.clone();
        let stale = random_snapshot(&mut rng, step.saturating_sub(1));
        if step > 0 {
            ensure!(log.store(stale).is_err() && log == before, "stale step accepted at {step}");
        }
        log.store(snap).map_err(|e| e.to_string())?;
        ensure!(log.snapshots()[..before.len()] == *before.snapshots(), "store rewrote history at {step}");
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = log.save(dir.path()).map_err(|e| e.to_string())?;
    ensure!(MemoryLog::load(&path).map_err(|e| e.to_string())? == log, "log file round trip");

    // replay fixpoint over the bundled episode
    let a = replay("episode", dir.path())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = replay("episode", second.path())?;
    ensure!(a.status == RunStatus::Complete && b.status == RunStatus::Complete, "episode replay not complete");
    for file in ["episode.steps.jsonl", "episode.memory.jsonl"] {
        let x = fs::read(dir.path().join("episode").join(file)).map_err(|e| e.to_string())?;
        let y = fs::read(second.path().join("episode").join(file)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{file} differs between replays");
    }
    ensure!(a.report.warnings.is_empty(), "replay drift: {:?}", a.report.warnings);
    Ok(())
}

fn parser_conformance() -> Check {
    let mut rng = StdRng::seed_from_u64(5);
    for action in DrivingAction::ALL {
        for _ in 0..200 {
            let cased: String = action
                .label()
                .chars()
                .map(|c| if rng.random() { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
                .collect();
            let got = parse_decision(&format!("Final Decision: {cased}"));
            ensure!(got.as_ref().ok() == Some(&action), "{cased:?} parsed as {got:?}");
        }
    }
    let golden: &[(&str, Result<DrivingAction, ()>)] = &[
        ("Decision: accelerate", Ok(DrivingAction::SpeedUp)),
        ("Decision: slow down", Ok(DrivingAction::SpeedDown)),
        ("Decision: decelerate", Ok(DrivingAction::SpeedDown)),
        ("Decision: brake", Ok(DrivingAction::SpeedDown)),
        ("Decision: brake to a full stop", Ok(DrivingAction::Stop)),
        ("Decision: halt", Ok(DrivingAction::Stop)),
        ("Decision: maintain current speed", Ok(DrivingAction::KeepRemain)),
        ("Decision: keep remain", Ok(DrivingAction::KeepRemain)),
        ("Decision: change lanes to the left", Ok(DrivingAction::ChangeLane)),
        ("Decision: merge left", Ok(DrivingAction::ChangeLane)),
        ("I would slow down.\nFinal Decision: stop", Ok(DrivingAction::Stop)),
        ("First speed up, then on reflection speed down.", Ok(DrivingAction::SpeedDown)),
        ("Decision: stop or speed up", Err(())),
        ("I am not sure what to do.", Err(())),
    ];
    for (text, want) in golden {
        let got = parse_decision(text);
        let ok = match (want, &got) {
            (Ok(a), Ok(b)) => a == b,
            (Err(()), Err(DecisionError::Ambiguous(_) | DecisionError::NoDecision)) => true,
            _ => false,
        };
        ensure!(ok, "{text:?}: got {got:?}, want {want:?}");
    }
    let pieces = [
        "ID:",
        "id 3",
        "Category:",
        "car",
        "Traffic Light",
        "Position:",
        "Pixel-Coordinates:",
        "(1,",
        "2)",
        "State:",
        "```json",
        "```",
        "{",
        "}",
        "\"objects\":",
        "[",
        "]",
        "\n",
        "é",
        "null",
        "Decision:",
        "stop",
        "-",
        "9999999999999999999",
    ];
    let mut parsed_any = 0;
    for _ in 0..10_000 {
        let input: String = (0..rng.random_range(0..40))
            .map(|_| {
                if rng.random_range(0..4) == 0 {
                    char::from_u32(rng.random_range(0..0x3000)).unwrap_or('?').to_string()
                } else {
                    format!("{} ", pieces[rng.random_range(0..pieces.len())])
                }
            })
            .collect();
        let result = std::panic::catch_unwind(|| parse_objects(&input));
        match result {
            Ok(p) => parsed_any += !p.records.is_empty() as usize,
            Err(_) => return Err(format!("parse_objects panicked on {input:?}")),
        }
    }
    ensure!(parsed_any > 0, "fuzz inputs never produced a record");
    Ok(())
}

const ALL_CONFIGS: [&str; 12] = [
    "perception-set-a",
    "perception-set-a-human",
    "perception-set-b",
    "perception-set-b-human",
    "ablation",
    "math-calc-a",
    "math-calc-b",
    "math-calc-c",
    "math-calc-d",
    "math-calc-e",
    "math-calc-none",
    "episode",
];

fn offline_determinism() -> Check {
    let started = Instant::now();
    let listed: Vec<String> = fs::read_dir(fixtures().join("configs"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok()?.path().file_stem()?.to_str().map(String::from))
        .collect();
    ensure!(listed.len() == ALL_CONFIGS.len(), "fixture configs changed: {listed:?}");
    let mut csvs: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut run = BTreeMap::new();
        for name in ALL_CONFIGS {
            let outcome = replay(name, out.path())?;
            ensure!(
                outcome.report.meta.iter().any(|(k, v)| k == "backend" && v == &BackendMode::Replay.to_string()),
                "{name} not replayed"
            );
            for f in outcome.files.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")) {
                let key = format!("{name}/{}", f.file_name().unwrap().to_string_lossy());
                run.insert(key, fs::read(f).map_err(|e| e.to_string())?);
            }
        }
        csvs.push(run);
    }
    ensure!(!csvs[0].is_empty(), "no CSV reports written");
    for (k, v) in &csvs[0] {
        ensure!(csvs[1].get(k) == Some(v), "{k} differs between runs");
    }
    within(started, Duration::from_secs(60), "full fixture suite")
}

fn main() -> std::process::ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 perception table arithmetic", perception_tables),
        ("2 prompt ablation 72/88/94", ablation_table),
        ("3 distance table arithmetic", math_table),
        ("4 geometry oracle", geometry_oracle),
        ("5 panorama invariants", panorama_invariants),
        ("6 prompt structure", prompt_structure),
        ("7 memory and episode invariants", memory_and_episode),
        ("8 parser conformance", parser_conformance),
        ("9 offline determinism", offline_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(()) => println!("PASS criterion {name} ({:.2?})", started.elapsed()),
            Err(why) => {
                println!("FAIL criterion {name}: {why}");
                failed += 1;
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}
