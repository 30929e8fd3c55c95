//! Regenerates the bundled replay fixtures.
//!
//!     cargo run -p drivecot-core --example gen_fixtures -- fixtures
//!
//! Responses are scripted per transcript key and recorded through the real
//! prompt path, so every stored request digest matches what a replay run
//! sends. Output is deterministic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use drivecot_core::backend::{BackendError, BackendMode, ChatRequest, ChatResponse, ModelBackend, RecordingBackend};
use drivecot_core::config::RunConfig;
use drivecot_core::memory::{SceneSummary, TimeOfDay};
use drivecot_core::scene::{
    write_manifest, write_png, CameraSet, GroundTruth, HighwayScenario, ImageSource, PanoramaImages, SceneImages,
    SeamOffsets, VehicleState,
};
use drivecot_core::{
    derive_key, execute, pythagorean_distance, DrivingAction, MemorySnapshot, ObjectCategory, ObjectRecord, Point2D,
    PromptStrategy, SceneSample, TaskKind,
};
use image::{Rgba, RgbaImage};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};

const CAMERA_W: u32 = 8;
const CAMERA_H: u32 = 6;

/// Answers from a fixed key → text table.
struct Script(HashMap<String, String>);

impl ModelBackend for Script {
    fn send(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let text = self.0.get(key).ok_or_else(|| BackendError::MissingTranscript(key.to_string()))?;
        Ok(ChatResponse::text_only(request.model_id.clone(), text.clone()))
    }

    fn mode(&self) -> BackendMode {
        BackendMode::Replay
    }
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    fs::create_dir_all(root.join("configs")).unwrap();
    perception_set(&root, "set-a", 10, &SET_A_ERRORS, true);
    perception_set(&root, "set-b", 9, &SET_B_ERRORS, false);
    ablation(&root);
    math(&root);
    episode(&root);
}

fn write_config(root: &Path, name: &str, json: serde_json::Value) -> PathBuf {
    let path = root.join("configs").join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&json).unwrap() + "\n").unwrap();
    path
}

/// Runs `config_path` against the script and records the transcripts.
fn record(config_path: &Path, script: HashMap<String, String>) {
    let mut config = RunConfig::load(config_path).unwrap();
    let transcripts = config.paths.transcripts.clone().unwrap();
    let _ = fs::remove_file(&transcripts);
    let scratch = tempfile::tempdir().unwrap();
    config.paths.out_dir = scratch.path().to_path_buf();
    // one worker so transcript lines keep manifest order
    config.backend.max_concurrent = 1;
    let backend = RecordingBackend::new(Script(script), &transcripts, false).unwrap();
    let outcome = execute(&config, &backend).unwrap();
    let csv = outcome.report.to_csv();
    println!("{}\n{csv}", config_path.display());
}

fn solid(color: [u8; 3]) -> RgbaImage {
    RgbaImage::from_fn(CAMERA_W, CAMERA_H, |x, y| {
        let shade = ((x + y) % 2) as u8 * 16;
        Rgba([color[0].saturating_add(shade), color[1], color[2], 255])
    })
}

fn camera_color(sample: usize, camera: usize) -> [u8; 3] {
    [(40 * camera as u32 % 256) as u8, (23 * sample as u32 % 256) as u8, 128]
}

// ---------------------------------------------------------------- perception

/// Per-category sample indices (0-based) whose answer is wrong.
struct Errors {
    people: &'static [usize],
    traffic_light: &'static [usize],
    crossing: &'static [usize],
    scene: &'static [usize],
}

// 10 samples: 10, 9, 10, 9, 10 correct
const SET_A_ERRORS: Errors = Errors { people: &[2], traffic_light: &[], crossing: &[6], scene: &[] };
// 9 samples: 9, 7, 5, 6, 6 correct
const SET_B_ERRORS: Errors =
    Errors { people: &[1, 4], traffic_light: &[0, 2, 5, 7], crossing: &[1, 3, 8], scene: &[2, 5, 8] };

fn presence(i: usize) -> BTreeMap<ObjectCategory, bool> {
    use ObjectCategory::*;
    BTreeMap::from([
        (Car, true),
        (People, i.is_multiple_of(2)),
        (TrafficLight, i < 5),
        (PedestrianCrossing, i % 3 != 1),
        (CurrentScene, true),
    ])
}

fn object(id: u32, category: ObjectCategory, x: u32) -> ObjectRecord {
    let (position, state) = match category {
        ObjectCategory::Car => ("front-left", "moving"),
        ObjectCategory::People => ("front-right", "walking on the sidewalk"),
        ObjectCategory::TrafficLight => ("front", "red"),
        ObjectCategory::PedestrianCrossing => ("front", "empty"),
        ObjectCategory::CurrentScene => ("surrounding", "urban street, daytime, clear"),
    };
    ObjectRecord { id, category, position: position.into(), pixel_coordinates: Some((x, 3)), state: state.into() }
}

fn perception_answer(sample_id: &str, records: &[ObjectRecord], json_block: bool) -> String {
    let mut text = String::from(
        "Step 1 - Observe: An urban street in daylight with dry roads and light traffic.\n\n\
         Step 2 - Identify:\n",
    );
    if json_block {
        text.push_str("The objects are listed in the memory block below.\n\n");
    } else {
        for r in records {
            let (x, y) = r.pixel_coordinates.unwrap();
            text.push_str(&format!(
                "ID: {}\nCategory: {}\nPosition: {}\nPixel-Coordinates: ({x}, {y})\nState: {}\n\n",
                r.id,
                r.category.display_name(),
                r.position,
                r.state
            ));
        }
    }
    text.push_str("Step 3 - Memory:\n");
    if json_block {
        let snap = MemorySnapshot {
            frame_id: sample_id.into(),
            step_index: 0,
            scene: SceneSummary {
                description: "Urban street with light traffic".into(),
                time_of_day: TimeOfDay::Day,
                weather: "clear".into(),
            },
            objects: records.to_vec(),
            decision: Some(DrivingAction::SpeedDown),
            rationale: Some("objects ahead near the crossing".into()),
        };
        text.push_str(&format!("```json\n{}\n```\n\n", snap.to_json()));
    } else {
        text.push_str("Nothing further to store beyond the list above.\n\n");
    }
    text.push_str("Step 4 - Decide: Traffic ahead calls for caution.\nFinal Decision: speed down\n");
    text
}

fn perception_set(root: &Path, name: &str, n: usize, errors: &Errors, cameras: bool) {
    let dir = root.join("perception").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(dir.join("images")).unwrap();
    let mut samples = Vec::new();
    let mut script = HashMap::new();
    let mut verdicts = String::new();
    for i in 0..n {
        let sample_id = format!("{name}-{:02}", i + 1);
        let img_dir = dir.join("images").join(&sample_id);
        fs::create_dir_all(&img_dir).unwrap();
        let rel = |file: &str| format!("images/{sample_id}/{file}");
        let images = if cameras {
            let mut src = Vec::new();
            for (c, cam) in ["front", "front_left", "front_right", "back", "back_left", "back_right"].iter().enumerate()
            {
                let raster = solid(camera_color(i, c));
                write_png(&img_dir.join(format!("{cam}.png")), &raster).unwrap();
                src.push(ImageSource::from_raster(rel(&format!("{cam}.png")), raster));
            }
            let mut it = src.into_iter();
            let mut next = || it.next().unwrap();
            SceneImages::Cameras(CameraSet {
                front: next(),
                front_left: next(),
                front_right: next(),
                back: next(),
                back_left: next(),
                back_right: next(),
            })
        } else {
            let pano = |offset: usize| {
                RgbaImage::from_fn(CAMERA_W * 3, CAMERA_H, |x, _| {
                    let c = camera_color(i, offset + (x / CAMERA_W) as usize);
                    Rgba([c[0], c[1], c[2], 255])
                })
            };
            let (front, back) = (pano(0), pano(3));
            write_png(&img_dir.join("front.png"), &front).unwrap();
            write_png(&img_dir.join("back.png"), &back).unwrap();
            let seams = SeamOffsets { front: vec![0, CAMERA_W, 2 * CAMERA_W], back: vec![0, CAMERA_W, 2 * CAMERA_W] };
            fs::write(img_dir.join("seams.json"), serde_json::to_string(&seams).unwrap()).unwrap();
            SceneImages::Panoramas(PanoramaImages {
                front: ImageSource::from_raster(rel("front.png"), front),
                back: ImageSource::from_raster(rel("back.png"), back),
                seams_path: Some(rel("seams.json")),
                seam_offsets: seams,
            })
        };
        let truth_presence = presence(i);
        let mut truth_objects = Vec::new();
        let mut reported = Vec::new();
        let mut next_truth_id = 1;
        let mut next_reported_id = 1;
        for cat in ObjectCategory::ALL {
            let wrong_at: &[usize] = match cat {
                ObjectCategory::Car => &[],
                ObjectCategory::People => errors.people,
                ObjectCategory::TrafficLight => errors.traffic_light,
                ObjectCategory::PedestrianCrossing => errors.crossing,
                ObjectCategory::CurrentScene => errors.scene,
            };
            let present = truth_presence[&cat];
            let wrong = wrong_at.contains(&i);
            let x = 2 + 4 * next_truth_id;
            if present {
                truth_objects.push(object(next_truth_id, cat, x));
                next_truth_id += 1;
            }
            if present != wrong {
                reported.push(object(next_reported_id, cat, 2 + 4 * next_reported_id));
                next_reported_id += 1;
            }
            verdicts.push_str(&format!(
                "{{\"sample_id\":\"{sample_id}\",\"category\":\"{}\",\"correct\":{},\"basis\":\"human\"}}\n",
                cat.key(),
                !wrong
            ));
        }
        let key = derive_key(&sample_id, PromptStrategy::PkrdCot, TaskKind::Perception, 0).unwrap();
        script.insert(key, perception_answer(&sample_id, &reported, i % 2 == 0));
        samples.push(SceneSample {
            sample_id,
            images: Some(images),
            ground_truth: GroundTruth {
                objects: truth_objects,
                expected_decision: None,
                true_distance_m: None,
                category_presence: truth_presence,
            },
            scenario: None,
            scene_tags: BTreeSet::from(["daytime".to_string(), "urban".to_string()]),
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &samples).unwrap();
    fs::write(dir.join("verdicts.jsonl"), verdicts).unwrap();
    let mut config = serde_json::json!({
        "backend": {"mode": "replay", "model_id": format!("vlm-{name}")},
        "task": {"kind": "perception", "strategy": "pkrd-cot"},
        "paths": {
            "manifest": format!("../perception/{name}/manifest.jsonl"),
            "transcripts": format!("../perception/{name}/transcripts.jsonl"),
            "out_dir": format!("../../target/fixture-runs/perception-{name}")
        }
    });
    let path = write_config(root, &format!("perception-{name}"), config.clone());
    record(&path, script);
    config["paths"]["verdicts"] = format!("../perception/{name}/verdicts.jsonl").into();
    config["paths"]["out_dir"] = format!("../../target/fixture-runs/perception-{name}-human").into();
    write_config(root, &format!("perception-{name}-human"), config);
}

// ------------------------------------------------------------------ ablation

fn vehicle(id: &str, lane: i64, pos: f64, speed: f64) -> VehicleState {
    VehicleState { vehicle_id: id.into(), lane, longitudinal_pos_m: pos, speed_mps: speed, coords: None }
}

fn random_scenario(rng: &mut StdRng, idx: usize) -> HighwayScenario {
    let lane_count = 3;
    let ego_lane = rng.random_range(0..lane_count as i64);
    let ego_speed = (rng.random_range(150..320) as f64) / 10.0;
    let mut neighbors = Vec::new();
    for n in 0..rng.random_range(2..6) {
        let lane = rng.random_range(0..lane_count as i64);
        let pos = (rng.random_range(-300..500) as f64) / 10.0;
        let speed = (rng.random_range(120..340) as f64) / 10.0;
        neighbors.push(vehicle(&format!("veh{}", idx * 10 + n), lane, pos, speed));
    }
    HighwayScenario { ego: vehicle("ego", ego_lane, 0.0, ego_speed), neighbors, lane_count }
}

/// Reference decision: a simple gap rule over the vehicle ahead in the ego lane.
fn reference_decision(s: &HighwayScenario) -> DrivingAction {
    let ahead = s
        .neighbors
        .iter()
        .filter(|v| v.lane == s.ego.lane && v.longitudinal_pos_m > 0.0)
        .min_by(|a, b| a.longitudinal_pos_m.total_cmp(&b.longitudinal_pos_m));
    let lane_free = |lane: i64| {
        lane >= 0
            && lane < s.lane_count as i64
            && !s.neighbors.iter().any(|v| v.lane == lane && v.longitudinal_pos_m.abs() < 25.0)
    };
    match ahead {
        Some(v) if v.longitudinal_pos_m < 10.0 => DrivingAction::Stop,
        Some(v) if v.longitudinal_pos_m < 35.0 && v.speed_mps < s.ego.speed_mps => {
            if lane_free(s.ego.lane - 1) || lane_free(s.ego.lane + 1) {
                DrivingAction::ChangeLane
            } else {
                DrivingAction::SpeedDown
            }
        }
        None if s.ego.speed_mps < 25.0 => DrivingAction::SpeedUp,
        Some(v) if v.longitudinal_pos_m > 60.0 && s.ego.speed_mps < 25.0 => DrivingAction::SpeedUp,
        _ => DrivingAction::KeepRemain,
    }
}

fn phrase(action: DrivingAction, variant: usize) -> &'static str {
    use DrivingAction::*;
    match (action, variant % 2) {
        (SpeedUp, 0) => "speed up",
        (SpeedUp, _) => "accelerate",
        (SpeedDown, 0) => "slow down",
        (SpeedDown, _) => "Speed Down",
        (Stop, 0) => "stop",
        (Stop, _) => "Stop",
        (KeepRemain, 0) => "keep remain",
        (KeepRemain, _) => "maintain the current speed",
        (ChangeLane, 0) => "change lane",
        (ChangeLane, _) => "Change Lane",
    }
}

fn wrong_action(a: DrivingAction) -> DrivingAction {
    let all = DrivingAction::ALL;
    let i = all.iter().position(|&x| x == a).unwrap();
    all[(i + 2) % all.len()]
}

fn decision_answer(strategy: PromptStrategy, sample_id: &str, step: u64, action: DrivingAction, v: usize) -> String {
    let p = phrase(action, v);
    match strategy {
        PromptStrategy::ZeroShot => format!("Looking at the surrounding vehicles, the best option is to {p}.\nDecision: {p}\n"),
        PromptStrategy::RolePlaying => format!(
            "As the driver of this self-driving car I checked the gaps around the ego vehicle.\nDecision: {p}. This keeps a safe distance.\n"
        ),
        PromptStrategy::PkrdCot => {
            let snap = MemorySnapshot {
                frame_id: sample_id.into(),
                step_index: step,
                scene: SceneSummary {
                    description: "Multi-lane highway".into(),
                    time_of_day: TimeOfDay::Day,
                    weather: "clear".into(),
                },
                objects: vec![ObjectRecord {
                    id: 1,
                    category: ObjectCategory::Car,
                    position: "ahead in the ego lane".into(),
                    pixel_coordinates: None,
                    state: "moving".into(),
                }],
                decision: Some(action),
                rationale: Some("gap to the vehicle ahead".into()),
            };
            format!(
                "Step 1 - Observe: A multi-lane highway with moderate traffic.\n\n\
                 Step 2 - Identify:\nID: 1\nCategory: car\nPosition: ahead in the ego lane\nState: moving\n\n\
                 Step 3 - Memory:\n```json\n{}\n```\n\n\
                 Step 4 - Decide: Given the gap ahead and the adjacent lanes, I will {p}.\nFinal Decision: {p}\n",
                snap.to_json()
            )
        }
    }
}

const ABLATION_CORRECT: [(PromptStrategy, usize); 3] =
    [(PromptStrategy::ZeroShot, 72), (PromptStrategy::RolePlaying, 88), (PromptStrategy::PkrdCot, 94)];

fn ablation(root: &Path) {
    let dir = root.join("ablation");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let mut rng = StdRng::seed_from_u64(0x5eed_ab1a);
    let mut samples = Vec::new();
    for i in 0..100 {
        let scenario = random_scenario(&mut rng, i);
        samples.push(SceneSample {
            sample_id: format!("hw-{:03}", i + 1),
            images: None,
            ground_truth: GroundTruth { expected_decision: Some(reference_decision(&scenario)), ..Default::default() },
            scenario: Some(scenario),
            scene_tags: BTreeSet::from(["highway".to_string()]),
        });
    }
    let mut script = HashMap::new();
    for (strategy, correct) in ABLATION_CORRECT {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let wrong: BTreeSet<usize> = order[correct..].iter().copied().collect();
        for (i, s) in samples.iter().enumerate() {
            let expected = s.ground_truth.expected_decision.unwrap();
            let action = if wrong.contains(&i) { wrong_action(expected) } else { expected };
            let key = derive_key(&s.sample_id, strategy, TaskKind::Decision, 0).unwrap();
            script.insert(key, decision_answer(strategy, &s.sample_id, 0, action, i));
        }
    }
    write_manifest(&dir.join("manifest.jsonl"), &samples).unwrap();
    let path = write_config(
        root,
        "ablation",
        serde_json::json!({
            "backend": {"mode": "replay", "model_id": "vlm-highway"},
            "task": {"kind": "ablation", "strategy": ["zero-shot", "role-playing", "pkrd-cot"]},
            "paths": {
                "manifest": "../ablation/manifest.jsonl",
                "transcripts": "../ablation/transcripts.jsonl",
                "out_dir": "../../target/fixture-runs/ablation"
            }
        }),
    );
    record(&path, script);
}

// ---------------------------------------------------------------------- math

const MATH_SETS: [(&str, usize); 6] =
    [("calc-a", 10), ("calc-b", 9), ("calc-c", 8), ("calc-d", 3), ("calc-e", 2), ("calc-none", 0)];

fn math(root: &Path) {
    let dir = root.join("math");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(dir.join("transcripts")).unwrap();
    let mut rng = StdRng::seed_from_u64(0x5eed_0a7d);
    let mut samples = Vec::new();
    for i in 0..10 {
        let ego = Point2D { x: rng.random_range(-200..200) as f64 / 10.0, y: rng.random_range(-50..50) as f64 / 10.0 };
        let target = Point2D {
            x: ego.x + rng.random_range(30..400) as f64 / 10.0,
            y: ego.y + rng.random_range(20..120) as f64 / 10.0 * if i % 2 == 0 { 1.0 } else { -1.0 },
        };
        let mut e = vehicle("ego", 1, 0.0, 20.0);
        e.coords = Some(ego);
        let mut t = vehicle(&format!("car{}", i + 1), 0, target.x - ego.x, 18.0);
        t.coords = Some(target);
        samples.push(SceneSample {
            sample_id: format!("mt-{:02}", i + 1),
            images: None,
            ground_truth: GroundTruth {
                true_distance_m: Some(pythagorean_distance(ego, target).unwrap()),
                ..Default::default()
            },
            scenario: Some(HighwayScenario { ego: e, neighbors: vec![t], lane_count: 3 }),
            scene_tags: BTreeSet::new(),
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &samples).unwrap();
    for (model, correct) in MATH_SETS {
        let mut script = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            let sc = s.scenario.as_ref().unwrap();
            let (a, b) = (sc.ego.coords.unwrap(), sc.neighbors[0].coords.unwrap());
            let (dx, dy) = ((b.x - a.x).abs(), (b.y - a.y).abs());
            let truth = s.ground_truth.true_distance_m.unwrap();
            let text = if model == "calc-none" {
                "The distance depends on the road geometry, so I cannot give an exact value here.".to_string()
            } else if i < correct {
                // the last correct case rounds coarsely and stays inside the tolerance
                let claim = if i + 1 == correct { format!("{:.0}", truth) } else { format!("{truth:.2}") };
                format!(
                    "The offsets are dx = {dx:.1} m and dy = {dy:.1} m.\nBy the Pythagorean theorem, d = sqrt({dx:.1}^2 + {dy:.1}^2) = {claim} m.\n"
                )
            } else {
                format!("Adding the offsets {dx:.1} m and {dy:.1} m gives a distance of {:.2} meters.\n", dx + dy)
            };
            let key = derive_key(&s.sample_id, PromptStrategy::ZeroShot, TaskKind::MathDistance, 0).unwrap();
            script.insert(key, text);
        }
        let path = write_config(
            root,
            &format!("math-{model}"),
            serde_json::json!({
                "backend": {"mode": "replay", "model_id": model},
                "task": {"kind": "math", "strategy": "zero-shot"},
                "paths": {
                    "manifest": "../math/manifest.jsonl",
                    "transcripts": format!("../math/transcripts/{model}.jsonl"),
                    "out_dir": format!("../../target/fixture-runs/math-{model}")
                }
            }),
        );
        record(&path, script);
    }
}

// ------------------------------------------------------------------- episode

fn episode(root: &Path) {
    let dir = root.join("episode");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let mut samples = Vec::new();
    let mut script = HashMap::new();
    // a slower car ahead closes in over five frames
    for step in 0..5u64 {
        let gap = 60.0 - 12.0 * step as f64;
        let scenario = HighwayScenario {
            ego: vehicle("ego", 1, 0.0, 25.0),
            neighbors: vec![
                vehicle("lead", 1, gap, 18.0),
                vehicle("left", 0, -15.0 + 2.0 * step as f64, 24.0),
                vehicle("right", 2, 5.0, 25.0),
            ],
            lane_count: 3,
        };
        let expected = reference_decision(&scenario);
        let sample_id = format!("ep-{step:02}");
        let key = derive_key(&sample_id, PromptStrategy::PkrdCot, TaskKind::Decision, step).unwrap();
        script.insert(key, decision_answer(PromptStrategy::PkrdCot, &sample_id, step, expected, step as usize));
        samples.push(SceneSample {
            sample_id,
            images: None,
            ground_truth: GroundTruth { expected_decision: Some(expected), ..Default::default() },
            scenario: Some(scenario),
            scene_tags: BTreeSet::from(["daytime".to_string(), "highway".to_string()]),
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &samples).unwrap();
    let path = write_config(
        root,
        "episode",
        serde_json::json!({
            "backend": {"mode": "replay", "model_id": "vlm-highway"},
            "task": {"kind": "decision", "strategy": "pkrd-cot", "episode": true, "episode_id": "episode", "memory_k": 3},
            "paths": {
                "manifest": "../episode/manifest.jsonl",
                "transcripts": "../episode/transcripts.jsonl",
                "out_dir": "../../target/fixture-runs/episode"
            }
        }),
    );
    record(&path, script);
}
