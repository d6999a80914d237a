//! Acceptance suite.
//!
//! One test per criterion; each prints an `ACCEPTANCE <name>: PASS` line when
//! it holds. Independent oracles (pixel-grid IoU, pixel-scan mask bbox) live
//! here, apart from the implementation paths they check.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iadkit::backend::{DeterministicCotBackend, ScriptedMockBackend};
use iadkit::bbox::Bbox;
use iadkit::grpo::{
    clipped_surrogate, filter_zero_advantage, group_advantages, kl_penalty, GroupEpisode,
    RolloutGroup, TokenScore,
};
use iadkit::protocol::{self, parse_assistant_turn, render_tool_call, ToolCall, ToolMode};
use iadkit::rewards::{
    accuracy_reward, behavior_reward, iou, iou_reward, total_reward, type_reward, DiversityForm,
    EpisodeSummary, GroupStats, RewardBreakdown, RewardCoefficients, StepStat,
};
use iadkit::rollout::{run_episode, BackendConfig, RolloutContext, Termination};
use iadkit::sample::{Dataset, Label, SampleRecord};
use iadkit::synthetic;
use iadkit::tools::ExemplarIndex;
use iadkit::trajectory::{
    mask_file_to_bbox, masked_sft_loss, validate_trajectory, RetryPolicy, Taxonomy,
    TrajectoryBuilder,
};

const TOL: f64 = 1e-9;

fn assert_close(actual: f64, expected: f64, what: &str) {
    assert!(
        (actual - expected).abs() < TOL,
        "{what}: got {actual}, want {expected}"
    );
}

fn sample(label: Label, c_gt: &str, gt_bbox: Option<Bbox>) -> SampleRecord {
    SampleRecord {
        id: "acc".into(),
        dataset: Dataset::Synthetic,
        class_name: "widget".into(),
        image_path: "unused.png".into(),
        y_gt: label,
        c_gt: (label == Label::Anomalous).then(|| c_gt.to_string()),
        mask_path: None,
        gt_bbox,
    }
}

fn answered_summary(answer: protocol::FinalAnswer, pred: Option<Bbox>) -> EpisodeSummary {
    EpisodeSummary {
        steps: vec![StepStat {
            n_tool_calls: 1,
            emitted_answer: Some(true),
        }],
        final_answer: Some(answer),
        pred_bbox: pred,
        format_valid: true,
    }
}

// ── criterion: reward exactness ───────────────────────────────────────────────

#[test]
fn acceptance_reward_exactness() {
    let start = Instant::now();
    let coeffs = RewardCoefficients::default();
    let unit = Bbox::new(0.0, 0.0, 1.0, 1.0);

    // IoU worked examples.
    let a = Bbox::new(0.1, 0.2, 0.6, 0.8);
    assert_close(iou(&a, &a), 1.0, "identical boxes");
    assert_close(
        iou(&Bbox::new(0.0, 0.0, 0.4, 0.4), &Bbox::new(0.5, 0.5, 1.0, 1.0)),
        0.0,
        "disjoint boxes",
    );
    assert_close(
        iou(
            &Bbox::new(0.0, 0.0, 0.5, 0.5),
            &Bbox::new(0.25, 0.25, 0.75, 0.75),
        ),
        0.0625 / 0.4375,
        "partial overlap",
    );

    // Accuracy gating.
    let gt_anomalous = sample(Label::Anomalous, "scratch", Some(unit));
    let good = answered_summary(
        protocol::FinalAnswer::anomalous("scratch", vec!["mark".into()]),
        None,
    );
    assert_close(accuracy_reward(&good, &gt_anomalous), 1.0, "valid + correct");
    let wrong = answered_summary(protocol::FinalAnswer::normal(), None);
    assert_close(accuracy_reward(&wrong, &gt_anomalous), 0.0, "valid + wrong");
    let mut invalid = good.clone();
    invalid.format_valid = false;
    assert_close(
        accuracy_reward(&invalid, &gt_anomalous),
        0.0,
        "invalid format gates",
    );

    // Spatial reward branches at IoU 0.3 / 0.5 / 0.6.
    for (height, expected) in [(0.6, 1.0), (0.3, 0.3), (0.5, 0.5)] {
        let pred = Bbox::new(0.0, 0.0, 1.0, height);
        assert_close(
            iou_reward(Some(&pred), Some(&unit), &coeffs),
            expected,
            &format!("iou branch at {height}"),
        );
    }
    assert_close(iou_reward(None, Some(&unit), &coeffs), 0.0, "missing pred");
    assert_close(
        iou_reward(Some(&unit), None, &coeffs),
        0.0,
        "missing gt (normal sample)",
    );

    // Type bonuses.
    assert_close(
        type_reward(&good, &gt_anomalous, &coeffs),
        0.3,
        "type match earns lambda_type",
    );
    let gt_normal = sample(Label::Normal, "", None);
    assert_close(
        type_reward(&wrong, &gt_normal, &coeffs),
        0.0,
        "normal gt earns nothing",
    );
    let mismatch = answered_summary(
        protocol::FinalAnswer::anomalous("dent", vec!["d".into()]),
        None,
    );
    assert_close(
        type_reward(&mismatch, &gt_anomalous, &coeffs),
        0.0,
        "type mismatch",
    );

    // Behavior hand cases.
    let step = |n, ans| StepStat {
        n_tool_calls: n,
        emitted_answer: ans,
    };
    assert_close(
        behavior_reward(&[step(1, Some(true))], 1.0, &coeffs),
        1.0,
        "K=1 correct n=1 q=1",
    );
    assert_close(
        behavior_reward(&[step(3, Some(true))], 1.0, &coeffs),
        0.9,
        "K=1 correct n=3 q=1",
    );
    assert_close(
        behavior_reward(&[step(1, Some(false))], 0.0, &coeffs),
        -0.5,
        "K=1 wrong n=1 q=0",
    );

    // Total assembly.
    let zero = EpisodeSummary {
        steps: vec![step(0, None)],
        final_answer: None,
        pred_bbox: None,
        format_valid: false,
    };
    let b = total_reward(&zero, &gt_normal, &GroupStats { query_rate: 1.0 }, &coeffs);
    assert_close(b.total, 0.0, "all-zero components");

    let full = answered_summary(
        protocol::FinalAnswer::anomalous("scratch", vec!["mark".into()]),
        Some(unit),
    );
    let b = total_reward(
        &full,
        &gt_anomalous,
        &GroupStats { query_rate: 1.0 },
        &coeffs,
    );
    assert_close(b.total, 3.3, "alpha=beta=1 total");
    let scaled = RewardCoefficients {
        alpha: 2.0,
        ..coeffs
    };
    let b = total_reward(
        &full,
        &gt_anomalous,
        &GroupStats { query_rate: 1.0 },
        &scaled,
    );
    assert_close(b.total, 5.6, "alpha=2 linearity");

    // Decomposition identity over 10,000 randomized episodes.
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for _ in 0..10_000 {
        let anomalous = rng.random_bool(0.5);
        let label = if anomalous { Label::Anomalous } else { Label::Normal };
        let gt = sample(
            label,
            "scratch",
            anomalous.then(|| random_box(&mut rng)),
        );
        let summary = EpisodeSummary {
            steps: (0..rng.random_range(1..5))
                .map(|_| StepStat {
                    n_tool_calls: rng.random_range(0..4),
                    emitted_answer: if rng.random_bool(0.4) {
                        Some(rng.random_bool(0.5))
                    } else {
                        None
                    },
                })
                .collect(),
            final_answer: rng.random_bool(0.8).then(|| {
                if rng.random_bool(0.5) {
                    protocol::FinalAnswer::anomalous("scratch", vec![])
                } else {
                    protocol::FinalAnswer::normal()
                }
            }),
            pred_bbox: rng.random_bool(0.7).then(|| random_box(&mut rng)),
            format_valid: rng.random_bool(0.9),
        };
        let coeffs = RewardCoefficients {
            alpha: rng.random_range(0.0..2.0),
            beta_beh: rng.random_range(0.0..2.0),
            lambda_type: rng.random_range(0.0..1.0),
            ..RewardCoefficients::default()
        };
        let q = rng.random_range(0.0..=1.0);
        let b = total_reward(&summary, &gt, &GroupStats { query_rate: q }, &coeffs);
        assert!(
            (b.r_perc - (b.r_acc + b.r_iou + b.r_type)).abs() < TOL,
            "perception decomposition"
        );
        assert!(
            (b.total - (coeffs.alpha * b.r_perc + coeffs.beta_beh * b.r_beh)).abs() < TOL,
            "total decomposition"
        );
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(5),
        "reward exactness took {elapsed:?}, budget 5s"
    );
    println!("ACCEPTANCE reward_exactness: PASS ({elapsed:?})");
}

fn random_box(rng: &mut ChaCha8Rng) -> Bbox {
    let x1: f64 = rng.random_range(0.0..0.9);
    let y1: f64 = rng.random_range(0.0..0.9);
    Bbox::new(
        x1,
        y1,
        rng.random_range(x1..1.0),
        rng.random_range(y1..1.0),
    )
}

// ── criterion: IoU pixel-grid oracle ──────────────────────────────────────────

const GRID: usize = 1000;
const WORDS: usize = GRID / 64 + 1;

/// Cell-center occupancy of one box over a GRID×GRID lattice, one bitset row
/// per grid row.
struct GridBox {
    cols: [u64; WORDS],
    row_in: Vec<bool>,
}

impl GridBox {
    fn new(b: &Bbox) -> Self {
        let mut cols = [0u64; WORDS];
        for c in 0..GRID {
            let x = (c as f64 + 0.5) / GRID as f64;
            if x >= b.x1 && x <= b.x2 {
                cols[c / 64] |= 1 << (c % 64);
            }
        }
        let row_in = (0..GRID)
            .map(|r| {
                let y = (r as f64 + 0.5) / GRID as f64;
                y >= b.y1 && y <= b.y2
            })
            .collect();
        Self { cols, row_in }
    }

    fn count(cols: &[u64; WORDS]) -> u64 {
        cols.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Brute-force IoU by counting lattice cells inside each box.
fn grid_iou(a: &Bbox, b: &Bbox) -> f64 {
    let ga = GridBox::new(a);
    let gb = GridBox::new(b);
    let a_cols = GridBox::count(&ga.cols);
    let b_cols = GridBox::count(&gb.cols);
    let mut both_cols = [0u64; WORDS];
    let mut either_cols = [0u64; WORDS];
    for i in 0..WORDS {
        both_cols[i] = ga.cols[i] & gb.cols[i];
        either_cols[i] = ga.cols[i] | gb.cols[i];
    }
    let both = GridBox::count(&both_cols);
    let either = GridBox::count(&either_cols);

    let mut inter = 0u64;
    let mut union = 0u64;
    for r in 0..GRID {
        match (ga.row_in[r], gb.row_in[r]) {
            (true, true) => {
                inter += both;
                union += either;
            }
            (true, false) => union += a_cols,
            (false, true) => union += b_cols,
            (false, false) => {}
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn acceptance_iou_oracle() {
    // Grid-aligned coordinates keep the lattice oracle free of edge effects,
    // so the 1e-3 tolerance tests the analytic formula, not the sampling.
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut random_aligned_box = || {
        let mut coord = || rng.random_range(0..=GRID as u32) as f64 / GRID as f64;
        let (x1, x2) = {
            let (a, b) = (coord(), coord());
            (a.min(b), a.max(b))
        };
        let (y1, y2) = {
            let (a, b) = (coord(), coord());
            (a.min(b), a.max(b))
        };
        Bbox::new(x1, y1, x2, y2)
    };
    for case in 0..1000 {
        let a = random_aligned_box();
        let b = random_aligned_box();
        let analytic = iou(&a, &b);
        let brute = grid_iou(&a, &b);
        assert!(
            (analytic - brute).abs() < 1e-3,
            "case {case}: analytic {analytic} vs grid {brute} for {:?} {:?}",
            a.as_array(),
            b.as_array()
        );
        // Symmetry and identity hold exactly.
        assert_eq!(iou(&a, &b).to_bits(), iou(&b, &a).to_bits(), "symmetry");
        if a.area() > 0.0 {
            assert_eq!(iou(&a, &a), 1.0, "identity");
        }
    }
    // The worked example agrees with the grid too.
    let a = Bbox::new(0.0, 0.0, 0.5, 0.5);
    let b = Bbox::new(0.25, 0.25, 0.75, 0.75);
    assert!((grid_iou(&a, &b) - 0.0625 / 0.4375).abs() < 1e-3);
    println!("ACCEPTANCE iou_oracle: PASS");
}

// ── criterion: GRPO math ──────────────────────────────────────────────────────

fn reward_only_episode(total: f64) -> GroupEpisode {
    GroupEpisode {
        summary: EpisodeSummary {
            steps: vec![],
            final_answer: None,
            pred_bbox: None,
            format_valid: true,
        },
        reward: RewardBreakdown {
            total,
            ..RewardBreakdown::zero()
        },
        tokens: vec![],
    }
}

#[test]
fn acceptance_grpo_math() {
    let mut rng = ChaCha8Rng::seed_from_u64(3003);

    // Advantages sum to ~0 on 1,000 random groups.
    for _ in 0..1000 {
        let size = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..size).map(|_| rng.random_range(-2.0..4.0)).collect();
        let adv = group_advantages(&rewards, rng.random_bool(0.5));
        let raw = group_advantages(&rewards, false);
        assert!(raw.iter().sum::<f64>().abs() < 1e-9, "advantage zero-sum");
        assert_eq!(adv.len(), rewards.len());
    }

    // Clipped-surrogate hand cases.
    assert_close(
        clipped_surrogate(&[1.5], &[1.0], 0.2).unwrap(),
        1.2,
        "rho 1.5 clips to 1.2",
    );
    assert_close(
        clipped_surrogate(&[1.0], &[2.5], 0.2).unwrap(),
        2.5,
        "rho 1.0 is identity",
    );
    assert_close(
        clipped_surrogate(&[0.5], &[-1.0], 0.2).unwrap(),
        -0.8,
        "negative advantage branch",
    );

    // KL estimator: nonnegative on 10,000 random pairs, zero on identical.
    for _ in 0..10_000 {
        let lp_policy = rng.random_range(-8.0..0.0);
        let lp_ref = rng.random_range(-8.0..0.0);
        let kl = kl_penalty(&[TokenScore {
            logp_policy: lp_policy,
            logp_ref: lp_ref,
            supervised: true,
        }]);
        assert!(kl >= 0.0, "kl must be nonnegative, got {kl}");
    }
    let same: Vec<TokenScore> = (0..100)
        .map(|i| {
            let lp = -0.01 * f64::from(i) - 0.1;
            TokenScore {
                logp_policy: lp,
                logp_ref: lp,
                supervised: true,
            }
        })
        .collect();
    assert_eq!(kl_penalty(&same), 0.0, "identical policies give zero KL");

    // All-equal-reward groups are filtered.
    let equal = RolloutGroup::from_episodes(
        vec![
            reward_only_episode(1.3),
            reward_only_episode(1.3),
            reward_only_episode(1.3),
        ],
        0.0,
        false,
    );
    assert!(filter_zero_advantage(equal).is_none(), "constant group filtered");
    let mixed = RolloutGroup::from_episodes(
        vec![reward_only_episode(1.0), reward_only_episode(0.0)],
        0.0,
        false,
    );
    assert!(filter_zero_advantage(mixed).is_some(), "mixed group kept");

    println!("ACCEPTANCE grpo_math: PASS");
}

// ── criterion: diversity-form equivalence ─────────────────────────────────────

#[test]
fn acceptance_diversity_form_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    for group_index in 0..100 {
        let size = rng.random_range(2..=8);
        let query_rate = f64::from(rng.random_range(0..=size)) / f64::from(size);
        let gt = sample(Label::Anomalous, "scratch", Some(random_box(&mut rng)));

        let summaries: Vec<EpisodeSummary> = (0..size)
            .map(|_| EpisodeSummary {
                steps: (0..rng.random_range(1..4))
                    .map(|_| StepStat {
                        n_tool_calls: rng.random_range(0..3),
                        emitted_answer: rng.random_bool(0.5).then(|| rng.random_bool(0.5)),
                    })
                    .collect(),
                final_answer: Some(if rng.random_bool(0.5) {
                    protocol::FinalAnswer::anomalous("scratch", vec![])
                } else {
                    protocol::FinalAnswer::normal()
                }),
                pred_bbox: rng.random_bool(0.5).then(|| random_box(&mut rng)),
                format_valid: true,
            })
            .collect();

        let totals = |form: DiversityForm| -> Vec<f64> {
            let coeffs = RewardCoefficients {
                diversity_form: form,
                ..RewardCoefficients::default()
            };
            summaries
                .iter()
                .map(|s| {
                    total_reward(s, &gt, &GroupStats { query_rate }, &coeffs).total
                })
                .collect()
        };
        let centered = group_advantages(&totals(DiversityForm::Centered), false);
        let raw = group_advantages(&totals(DiversityForm::Raw), false);
        for (i, (c, r)) in centered.iter().zip(&raw).enumerate() {
            assert!(
                (c - r).abs() < 1e-12,
                "group {group_index} episode {i}: centered {c} vs raw {r}"
            );
        }
    }
    println!("ACCEPTANCE diversity_form_equivalence: PASS");
}

// ── criterion: protocol round-trip ────────────────────────────────────────────

#[test]
fn acceptance_protocol_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    for case in 0..1000 {
        let call = if rng.random_bool(0.8) {
            ToolCall::Crop {
                bbox: random_box(&mut rng),
                target_image: rng.random_range(1..=9),
            }
        } else {
            ToolCall::QueryImage
        };
        let wire = render_tool_call(&call).unwrap();
        let turn = parse_assistant_turn(&wire);
        assert!(turn.format_valid, "case {case}: {:?}", turn.diagnostics);
        assert_eq!(turn.tool_calls, vec![call], "case {case}");
    }

    // The documented wire examples parse to the documented structures.
    let crop_example = r#"<think>zoom</think><tool_call>{"name":"crop_image_normalized","arguments":{"bbox_2d":[0.2,0.3,0.6,0.7],"target_image":1}}</tool_call>"#;
    let turn = parse_assistant_turn(crop_example);
    assert!(turn.format_valid);
    assert_eq!(turn.think_texts, vec!["zoom".to_string()]);
    assert_eq!(
        turn.tool_calls,
        vec![ToolCall::Crop {
            bbox: Bbox::new(0.2, 0.3, 0.6, 0.7),
            target_image: 1
        }]
    );
    assert!(turn.answer.is_none());

    let answer_example = r#"<think>ok</think><answer>{"anomaly_present": false, "top_anomaly": "none", "visual_descriptions": []}</answer>"#;
    let turn = parse_assistant_turn(answer_example);
    assert!(turn.format_valid);
    assert_eq!(turn.answer, Some(protocol::FinalAnswer::normal()));

    let truncated = r#"<answer>{"anomaly_present": tru"#;
    let turn = parse_assistant_turn(truncated);
    assert!(!turn.format_valid);
    assert!(turn
        .diagnostics
        .iter()
        .any(|d| d.contains("unterminated answer JSON")));

    println!("ACCEPTANCE protocol_round_trip: PASS");
}

// ── criterion: trajectory suite ───────────────────────────────────────────────

/// Independent pixel-scan oracle: collect every positive coordinate, then take
/// extrema.
fn pixel_scan_bbox(mask_path: &Path) -> Option<Bbox> {
    let mask = image::open(mask_path).unwrap().to_luma8();
    let (w, h) = mask.dimensions();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get_pixel(x, y).0[0] > 127 {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    let (min_x, max_x) = (xs.iter().min()?, xs.iter().max()?);
    let (min_y, max_y) = (ys.iter().min()?, ys.iter().max()?);
    Some(Bbox::new(
        f64::from(*min_x) / f64::from(w),
        f64::from(*min_y) / f64::from(h),
        f64::from(max_x + 1) / f64::from(w),
        f64::from(max_y + 1) / f64::from(h),
    ))
}

#[test]
fn acceptance_trajectory_suite() {
    let dir = tempfile::TempDir::new().unwrap();
    let set = synthetic::generate(&dir.path().join("data"), 17).unwrap();
    assert_eq!(set.samples.len(), 12);
    assert_eq!(
        set.samples.iter().filter(|s| s.y_gt == Label::Normal).count(),
        6
    );

    // mask_to_bbox agrees with the pixel-scan oracle on every mask.
    for s in &set.samples {
        if let Some(mask) = &s.mask_path {
            let implementation = mask_file_to_bbox(mask).unwrap();
            let oracle = pixel_scan_bbox(mask).unwrap();
            assert_eq!(implementation, oracle, "mask bbox for {}", s.id);
        }
    }

    // Build both taxonomies with the deterministic endpoint and check every
    // structural invariant.
    let exemplars =
        iadkit::tools::build_exemplar_index(&set.exemplars_path, 7).unwrap();
    let labels = iadkit::sample::candidate_labels(&set.samples);
    let builder = TrajectoryBuilder {
        backend: &DeterministicCotBackend,
        exemplars: &exemplars,
        labels: &labels,
        workdir: dir.path(),
        retry: RetryPolicy {
            attempts: 1,
            base_delay: Duration::from_millis(1),
        },
    };
    for s in &set.samples {
        for taxonomy in [Taxonomy::Pz, Taxonomy::PzCr] {
            let t = builder.build(s, taxonomy).unwrap();
            validate_trajectory(&t)
                .unwrap_or_else(|e| panic!("{} {taxonomy:?}: {e}", s.id));
            let expected_turns = match taxonomy {
                Taxonomy::Pz => 5,
                Taxonomy::PzCr => 7,
            };
            assert_eq!(t.turns.len(), expected_turns, "{} {taxonomy:?}", s.id);
            assert_eq!(
                t.turns.iter().filter(|t| t.supervised).count(),
                2,
                "supervision placement for {}",
                s.id
            );
        }
    }

    // Masked loss hand cases.
    let token = |lp: f64, supervised: bool| TokenScore {
        logp_policy: lp,
        logp_ref: lp,
        supervised,
    };
    assert_close(
        masked_sft_loss(&[token(-1.0, false), token(-2.0, false)]),
        0.0,
        "all mask bits zero",
    );
    assert_close(
        masked_sft_loss(&[token(-1.0, false), token(-2.0, true), token(-3.0, true)]),
        5.0,
        "mask (0,1,1)",
    );
    assert_close(
        masked_sft_loss(&[token(-1.0, true), token(-2.0, true), token(-3.0, true)]),
        6.0,
        "full supervision is total NLL",
    );

    println!("ACCEPTANCE trajectory_suite: PASS");
}

// ── criterion: end-to-end determinism ─────────────────────────────────────────

fn run_cli(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_iadkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn require_ok(output: &std::process::Output, what: &str) {
    assert!(
        output.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn acceptance_end_to_end_determinism() {
    let start = Instant::now();
    let dir = tempfile::TempDir::new().unwrap();
    let data = dir.path().join("data");
    let str_of = |p: &Path| p.to_str().unwrap().to_string();

    require_ok(
        &run_cli(&["synth", "--out", &str_of(&data), "--seed", "17"]),
        "synth",
    );
    let manifest = data.join("manifest.jsonl");
    let script = format!("mock:{}", str_of(&data.join("mock_script.json")));

    let groups = dir.path().join("groups.jsonl");
    require_ok(
        &run_cli(&[
            "rollout",
            "--manifest",
            &str_of(&manifest),
            "--mode",
            "pz_only",
            "--group-size",
            "2",
            "--backend",
            &script,
            "--out",
            &str_of(&groups),
            "--workdir",
            &str_of(&dir.path().join("work")),
        ]),
        "rollout",
    );

    let scores = dir.path().join("scores.jsonl");
    require_ok(
        &run_cli(&[
            "score",
            "--episodes",
            &str_of(&groups),
            "--out",
            &str_of(&scores),
        ]),
        "score",
    );

    // Scored breakdowns match the frozen oracle byte-for-byte.
    let oracle: BTreeMap<String, RewardBreakdown> = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic_reward_oracle.json"),
        )
        .unwrap(),
    )
    .unwrap();
    let episodes = iadkit::rollout::load_episodes(&groups).unwrap();
    assert_eq!(episodes.len(), 24, "12 samples x group of 2");
    for episode in &episodes {
        let key = match episode.sample.y_gt {
            Label::Anomalous => "anomalous",
            Label::Normal => "normal",
        };
        let expected = &oracle[key];
        assert_eq!(
            serde_json::to_string(&episode.reward).unwrap(),
            serde_json::to_string(expected).unwrap(),
            "stored breakdown for {}",
            episode.episode_id
        );
    }
    // The score subcommand reproduces the same bytes.
    let score_text = std::fs::read_to_string(&scores).unwrap();
    for (line, episode) in score_text.lines().zip(&episodes) {
        let key = match episode.sample.y_gt {
            Label::Anomalous => "anomalous",
            Label::Normal => "normal",
        };
        let expected = format!(
            "{{\"episode_id\":\"{}\",{}}}",
            episode.episode_id,
            serde_json::to_string(&oracle[key])
                .unwrap()
                .trim_start_matches('{')
                .trim_end_matches('}')
        );
        assert_eq!(line, expected, "score line byte-for-byte");
    }

    // Evaluation reports 100.0 for the always-correct script.
    let report_dir = dir.path().join("report");
    require_ok(
        &run_cli(&[
            "eval",
            "--manifest",
            &str_of(&manifest),
            "--mode",
            "pz_only",
            "--backend",
            &script,
            "--report",
            &str_of(&report_dir),
            "--workdir",
            &str_of(&dir.path().join("work-eval")),
        ]),
        "eval",
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["overall_pct"], serde_json::json!(100.0));
    assert_eq!(report["total_correct"], serde_json::json!(12));

    // Replay of the evaluation output reports zero divergences.
    let replay_out = run_cli(&[
        "replay",
        "--episodes",
        &str_of(&report_dir.join("episodes.jsonl")),
        "--workdir",
        &str_of(&dir.path().join("replay")),
    ]);
    require_ok(&replay_out, "replay");
    let replay_report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&replay_out.stdout)).unwrap();
    assert_eq!(replay_report["divergences"], serde_json::json!([]));
    assert_eq!(replay_report["failures"], serde_json::json!([]));

    // Replay of the rollout store is clean too.
    let replay_groups = run_cli(&[
        "replay",
        "--episodes",
        &str_of(&groups),
        "--workdir",
        &str_of(&dir.path().join("replay-groups")),
    ]);
    require_ok(&replay_groups, "replay groups");

    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(30),
        "end-to-end took {elapsed:?}, budget 30s"
    );
    println!("ACCEPTANCE end_to_end_determinism: PASS ({elapsed:?})");
}

// ── criterion: mode safety ────────────────────────────────────────────────────

#[test]
fn acceptance_mode_safety() {
    let dir = tempfile::TempDir::new().unwrap();
    let set = synthetic::generate(&dir.path().join("data"), 17).unwrap();
    let script = synthetic::query_probe_script(&set.samples).unwrap();
    let backend = ScriptedMockBackend::from_entries(script);
    let config = BackendConfig {
        retry_attempts: 1,
        retry_base_delay_ms: 1,
        temperature: 0.0,
        ..Default::default()
    };
    let coeffs = RewardCoefficients::default();
    let exemplars = ExemplarIndex::empty(7);
    let ctx = RolloutContext {
        backend: &backend,
        exemplars: &exemplars,
        workdir: dir.path(),
        config: &config,
        coeffs: &coeffs,
        normalize_std: false,
    };
    let labels = iadkit::sample::candidate_labels(&set.samples);

    let mut executed_query_calls = 0usize;
    let mut injected_errors = 0usize;
    for episode_index in 0..100 {
        let s = &set.samples[episode_index % set.samples.len()];
        let class_labels = labels[&s.class_name].clone();
        let prompts =
            protocol::build_prompts(&s.class_name, &class_labels, ToolMode::PzOnly).unwrap();
        let record = run_episode(&ctx, s, &prompts, &format!("safety-{episode_index}"));
        assert_eq!(record.termination, Termination::Answered);
        executed_query_calls += usize::from(record.executed_query());
        injected_errors += record
            .turns
            .iter()
            .filter(|t| {
                t.role == iadkit::backend::Role::Tool
                    && t.joined_text()
                        .contains(iadkit::rollout::TOOL_UNAVAILABLE)
            })
            .count();
    }
    assert_eq!(executed_query_calls, 0, "no reference tool ever executes");
    assert_eq!(injected_errors, 100, "every attempt injects a tool error");
    println!("ACCEPTANCE mode_safety: PASS");
}

// ── criterion: live smoke (optional, config-gated) ────────────────────────────

#[test]
fn acceptance_live_smoke_optional() {
    let Ok(url) = std::env::var("IADKIT_SMOKE_URL") else {
        println!("ACCEPTANCE live_smoke: SKIP (set IADKIT_SMOKE_URL to enable)");
        return;
    };
    let model = std::env::var("IADKIT_SMOKE_MODEL").unwrap_or_else(|_| "default".to_string());
    let auth_env = std::env::var("IADKIT_SMOKE_AUTH_ENV").ok();

    let dir = tempfile::TempDir::new().unwrap();
    let set = synthetic::generate(&dir.path().join("data"), 17).unwrap();
    let backend = iadkit::backend::OpenAiCompatBackend::new(
        url,
        model,
        auth_env.as_deref(),
        Duration::from_secs(120),
    );
    let config = BackendConfig::default();
    let coeffs = RewardCoefficients::default();
    let exemplars = ExemplarIndex::empty(7);
    let ctx = RolloutContext {
        backend: &backend,
        exemplars: &exemplars,
        workdir: dir.path(),
        config: &config,
        coeffs: &coeffs,
        normalize_std: false,
    };
    let s = &set.samples[0];
    let prompts = protocol::build_prompts(
        &s.class_name,
        &["scratch".to_string(), "dent".to_string()],
        ToolMode::PzOnly,
    )
    .unwrap();
    let record = run_episode(&ctx, s, &prompts, "live-smoke");
    assert_eq!(
        record.termination,
        Termination::Answered,
        "live episode must answer; transcript: {:?}",
        record.turns
    );
    println!("ACCEPTANCE live_smoke: PASS");
}
