//! Acceptance criteria, one test each. Every test prints a single
//! `criterion NN ... PASS|FAIL` line before asserting.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tipsynth::eval::{accel_ratio, key_contact_f1, mean_joint_error, EvalConfig, PressEvent};
use tipsynth::gradsuite::gradient_suite;
use tipsynth::keyboard::KeyboardGeometry;
use tipsynth::nn::{Graph, ParamStore, Tensor};
use tipsynth::pipeline::stitch::{stitch_weights, seams};
use tipsynth::pipeline::{
    build_priors, evaluate_pieces, generate_synthetic_corpus, stitch_windows, train_all, Corpus, CorpusReport,
    CorpusSpec, Models, PipelineConfig, PipelineOutput, Split, Stage, StitchConfig,
};
use tipsynth::pose::{
    build_hand_graph, joint, pose_loss, pose_loss_terms, rig_pose, BoneTable, HandPose, PoseLossWeights, PoseNet,
    ANCHORS, NUM_JOINTS, TIPS,
};
use tipsynth::prior::PriorBuilder;
use tipsynth::score::{finger_code, make_windows, FingeringGrid, FrameGrid, NoteEvent, WINDOW_STRIDE};
use tipsynth::types::{FingertipTrajectory, Hand, Vec3, WristTrajectory, NUM_FINGERS, NUM_KEYS};

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {n:02} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n:02} {name} failed: {detail}");
}

fn geom() -> KeyboardGeometry {
    KeyboardGeometry::default()
}

struct Trained {
    cfg: PipelineConfig,
    corpus: Corpus,
    models: Models,
    train_secs: f64,
}

/// Models trained once on the default corpus and shared by the closed-loop
/// criteria.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train_default(PipelineConfig::default()))
}

fn train_default(cfg: PipelineConfig) -> Trained {
    let g = geom();
    let corpus = generate_synthetic_corpus(&CorpusSpec::default(), &g).unwrap();
    let start = Instant::now();
    let (models, _) = train_all(&cfg, &corpus.split(Split::Train), &g, Stage::S4).unwrap();
    Trained { cfg, corpus, models, train_secs: start.elapsed().as_secs_f64() }
}

fn full_run(t: &Trained) -> (CorpusReport, Vec<PipelineOutput>) {
    evaluate_pieces(&t.cfg, &t.models, &t.corpus.split(Split::Test), &geom(), Stage::S4, Stage::S2_2).unwrap()
}

/// Test-split evaluation through the whole cascade with the shared models.
fn test_run() -> &'static (CorpusReport, Vec<PipelineOutput>) {
    static CELL: OnceLock<(CorpusReport, Vec<PipelineOutput>)> = OnceLock::new();
    CELL.get_or_init(|| full_run(trained()))
}

fn stage1_run(corpus: &Corpus) -> (CorpusReport, Vec<PipelineOutput>) {
    let cfg = PipelineConfig::default();
    let all: Vec<_> = corpus.pieces.iter().collect();
    let models = build_priors(&cfg, &all, &geom()).unwrap();
    evaluate_pieces(&cfg, &models, &all, &geom(), Stage::S1, Stage::S1).unwrap()
}

#[test]
fn criterion_01_prior_recovery() {
    let start = Instant::now();
    let sigma = [16.3, 11.4, 7.7];
    let centre = [40.0, 1000.0, -6.0];
    let normals: Vec<Normal<f64>> = sigma.iter().map(|&s| Normal::new(0.0, s).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut builder = PriorBuilder::new();
    let slots: Vec<(Hand, usize, usize)> = Hand::BOTH
        .iter()
        .flat_map(|&h| (0..NUM_FINGERS).map(move |f| (h, f, 20 + 10 * f + 15 * h.index())))
        .collect();
    for &(h, f, k) in &slots {
        for _ in 0..1000 {
            let p = std::array::from_fn(|a| centre[a] + normals[a].sample(&mut rng));
            builder.observe(h, f, k, p);
        }
    }
    let prior = builder.finish(10);
    let mut worst_sigma = 0.0f64;
    let mut worst_median = 0.0f64;
    let mut medians_within = 0;
    for &(h, f, k) in &slots {
        let e = prior.get(h, f, k).expect("slot populated");
        for a in 0..3 {
            worst_sigma = worst_sigma.max((e.std[a] - sigma[a]).abs() / sigma[a]);
            worst_median = worst_median.max((e.p50[a] - centre[a]).abs());
            medians_within += usize::from((e.p50[a] - centre[a]).abs() < 1.0);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "prior recovery",
        worst_sigma < 0.1 && worst_median < 1.0 && secs < 10.0,
        format!(
            "{} slots, worst sigma rel err {worst_sigma:.4}, worst median err {worst_median:.3} mm, {medians_within}/{} slot axes within 1 mm, {secs:.2} s",
            slots.len(),
            3 * slots.len()
        ),
    );
}

#[test]
fn criterion_02_stage1_contact() {
    let start = Instant::now();
    let corpus = generate_synthetic_corpus(&CorpusSpec::default(), &geom()).unwrap();
    let (report, _) = stage1_run(&corpus);
    let secs = start.elapsed().as_secs_f64();
    let c = &report.contact;
    verdict(
        2,
        "stage-1 contact",
        c.recall >= 0.98 && c.precision >= 0.95 && secs < 120.0,
        format!("{} pieces, recall {:.4}, precision {:.4}, {secs:.1} s", corpus.pieces.len(), c.recall, c.precision),
    );
}

fn pressed_yz_identical(out: &PipelineOutput, fingering: &FingeringGrid) -> (usize, usize) {
    let s1 = &out.tips[&Stage::S1];
    let mut checked = 0;
    let mut differing = 0;
    for stage in [Stage::S2_1, Stage::S2_2, Stage::S2_3] {
        let later = &out.tips[&stage];
        for h in Hand::BOTH {
            for t in 0..out.frames {
                for (_, f) in fingering.presses(t, h) {
                    for axis in [1, 2] {
                        checked += 1;
                        let a = s1[h.index()].frames[t][f][axis];
                        let b = later[h.index()].frames[t][f][axis];
                        if a.to_bits() != b.to_bits() {
                            differing += 1;
                        }
                    }
                }
            }
        }
    }
    (checked, differing)
}

fn ablation_recall(mask_y: bool) -> f64 {
    let g = geom();
    let spec = CorpusSpec { jitter_mm: 1.0, ..CorpusSpec::default() };
    let corpus = generate_synthetic_corpus(&spec, &g).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.refiner.mask_y = mask_y;
    let (models, _) = train_all(&cfg, &corpus.split(Split::Train), &g, Stage::S2_2).unwrap();
    let (report, _) = evaluate_pieces(&cfg, &models, &corpus.split(Split::Test), &g, Stage::S2_2, Stage::S2_2).unwrap();
    report.contact.recall
}

#[test]
fn criterion_03_masking_invariance() {
    let t = trained();
    let (_, outputs) = test_run();
    let mut checked = 0;
    let mut differing = 0;
    for (p, out) in t.corpus.split(Split::Test).iter().zip(outputs) {
        let (c, d) = pressed_yz_identical(out, &p.fingering);
        checked += c;
        differing += d;
    }
    let masked = ablation_recall(true);
    let unmasked = ablation_recall(false);
    let delta = unmasked - masked;
    verdict(
        3,
        "masking invariance",
        checked > 0 && differing == 0 && delta <= 0.0,
        format!(
            "{checked} pressed Y/Z values compared, {differing} differ; noisy-corpus recall {masked:.4} masked vs {unmasked:.4} unmasked, delta {delta:+.4}"
        ),
    );
}

#[test]
fn criterion_04_clamp_bounds() {
    let (report, _) = test_run();
    verdict(
        4,
        "clamp bounds",
        report.clamp_violations == 0 && report.max_tip_residual_mm <= 80.0 && report.max_wrist_residual_mm <= 50.0,
        format!(
            "max fingertip residual {:.3} mm, max wrist residual {:.3} mm, {} violations",
            report.max_tip_residual_mm, report.max_wrist_residual_mm, report.clamp_violations
        ),
    );
}

#[test]
fn criterion_05_gradient_checks() {
    let start = Instant::now();
    let checks = gradient_suite(5, 12).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| format!("{} {:.2e}", c.block, c.max_rel_err)).collect();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    verdict(
        5,
        "gradient checks",
        failed.is_empty() && checks.iter().all(|c| c.checked > 0 && c.tolerance <= 1e-3) && secs < 300.0,
        format!("{} blocks, worst rel err {worst:.2e}, failing {failed:?}, {secs:.1} s", checks.len()),
    );
}

fn random_track(rng: &mut ChaCha8Rng, t_len: usize, base: Vec3) -> Vec<Vec3> {
    let mut p = base;
    (0..t_len)
        .map(|_| {
            for v in p.iter_mut() {
                *v += rng.random_range(-2.0..2.0);
            }
            p
        })
        .collect()
}

#[test]
fn criterion_06_anchor_preservation() {
    let g = geom();
    let cfg = PipelineConfig::default();
    let net = PoseNet::new("s4.net", cfg.pose.clone()).unwrap();
    let mut store = ParamStore::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    net.init(&mut store, &mut rng).unwrap();
    // move every parameter so the network output is far from the rig
    for name in store.names().cloned().collect::<Vec<_>>() {
        for v in store.get_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let mut mismatches = 0usize;
    let mut anchors = 0usize;
    for i in 0..100 {
        let hand = Hand::BOTH[i % 2];
        let t_len = rng.random_range(1..=480);
        let y0 = rng.random_range(300.0..1000.0f32);
        let wrist = random_track(&mut rng, t_len, [-90.0, y0, 50.0]);
        let tracks: Vec<Vec<Vec3>> =
            (0..NUM_FINGERS).map(|f| random_track(&mut rng, t_len, [30.0, y0 + 22.0 * f as f32, 5.0])).collect();
        let tips = FingertipTrajectory { hand, frames: (0..t_len).map(|t| std::array::from_fn(|f| tracks[f][t])).collect() };
        let wrist = WristTrajectory { hand, frames: wrist };
        let mut fing = FingeringGrid::new(t_len);
        for t in 0..t_len {
            if rng.random_bool(0.3) {
                fing.set(t, rng.random_range(0..NUM_KEYS), finger_code(hand, rng.random_range(0..NUM_FINGERS)));
            }
        }
        let out = net.synthesize(&store, &wrist, &tips, &fing, &g).unwrap();
        for t in 0..t_len {
            for &j in &ANCHORS {
                anchors += 1;
                let want = if j == 0 { wrist.frames[t] } else { tips.frames[t][TIPS.iter().position(|&x| x == j).unwrap()] };
                if out.frames[t][j].map(f32::to_bits) != want.map(f32::to_bits) {
                    mismatches += 1;
                }
            }
        }
    }
    verdict(6, "anchor preservation", mismatches == 0, format!("100 windows, {anchors} anchor positions, {mismatches} mismatches"));
}

fn loss_of(pred: &HandPose, gt: &HandPose, bones: &BoneTable) -> (f64, f64) {
    let graph = build_hand_graph();
    let mut g = Graph::<f64>::new();
    let to = |p: &HandPose| Tensor::new(&[p.len(), NUM_JOINTS * 3], p.to_flat().iter().map(|&v| v as f64).collect()).unwrap();
    let a = g.constant(to(pred));
    let b = g.constant(to(gt));
    let total = pose_loss(&mut g, a, b, &graph, bones, PoseLossWeights::default()).unwrap();
    let terms = pose_loss_terms(&mut g, a, b, &graph, bones).unwrap();
    (g.value(total).item(), g.value(terms.bone).item())
}

#[test]
fn criterion_07_pose_loss_identities() {
    let graph = build_hand_graph();
    let x = HandPose {
        hand: Hand::Right,
        frames: (0..8)
            .map(|t| {
                let d = 3.0 * t as f32;
                let tips = std::array::from_fn(|f| [30.0 + d, 950.0 + 22.0 * f as f32, 0.0]);
                rig_pose([-60.0 + d, 990.0, 45.0], &tips, &[25.0; NUM_FINGERS])
            })
            .collect(),
    };
    let bones = BoneTable::from_poses(&graph, &[&x]).unwrap();
    let (identity, _) = loss_of(&x, &x, &bones);

    // a straight hand whose index distal bone is stretched by exactly 1 mm
    let mut y = HandPose { hand: Hand::Right, frames: vec![[[0.0; 3]; NUM_JOINTS]; 4] };
    for fr in &mut y.frames {
        for f in 0..NUM_FINGERS {
            for s in 0..4 {
                fr[joint(f, s)] = [16.0 * (s + 1) as f32, 20.0 * f as f32, 0.0];
            }
        }
    }
    let bones = BoneTable::from_poses(&graph, &[&y]).unwrap();
    let mut z = y.clone();
    for fr in &mut z.frames {
        fr[joint(1, 3)][0] += 1.0;
    }
    let (_, bone) = loss_of(&z, &y, &bones);
    let err = (bone - 1.0 / 20.0).abs();
    verdict(
        7,
        "pose-loss identities",
        identity == 0.0 && err < 1e-9,
        format!("loss(x, x) = {identity:e}, single-bone L_bone = {bone:.12} (err {err:.1e})"),
    );
}

/// Exhaustive maximum matching between predicted and reference onsets.
fn brute_matching(pairs_ok: &dyn Fn(usize, usize) -> bool, np: usize, ng: usize) -> usize {
    fn go(i: usize, np: usize, ng: usize, used: &mut Vec<bool>, ok: &dyn Fn(usize, usize) -> bool) -> usize {
        if i == np {
            return 0;
        }
        let mut best = go(i + 1, np, ng, used, ok);
        for j in 0..ng {
            if !used[j] && ok(i, j) {
                used[j] = true;
                best = best.max(1 + go(i + 1, np, ng, used, ok));
                used[j] = false;
            }
        }
        best
    }
    go(0, np, ng, &mut vec![false; ng], pairs_ok)
}

fn random_joints<const J: usize>(rng: &mut ChaCha8Rng, t_len: usize) -> Vec<[Vec3; J]> {
    (0..t_len).map(|_| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-50.0..50.0f32)))).collect()
}

#[test]
fn criterion_08_evaluator_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tol_ms = EvalConfig::default().onset_tol_ms;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let total = rng.random_range(0..=8usize);
        let np = rng.random_range(0..=total);
        let keys = [39usize, 40, 41];
        let pred: Vec<PressEvent> = (0..np)
            .map(|_| {
                let s = rng.random_range(0..40);
                PressEvent { key: keys[rng.random_range(0..3)], start_frame: s, end_frame: s + 3, finger: None }
            })
            .collect();
        let gt: Vec<NoteEvent> = (0..total - np)
            .map(|_| NoteEvent {
                onset: rng.random_range(0.0..0.7),
                key: keys[rng.random_range(0..3)] as u8,
                velocity: 64,
                duration: 0.1,
            })
            .collect();
        let ok = |i: usize, j: usize| {
            pred[i].key == gt[j].key as usize && (FrameGrid::frame_start(pred[i].start_frame) - gt[j].onset).abs() <= tol_ms / 1000.0
        };
        if key_contact_f1(&pred, &gt, tol_ms).matched != brute_matching(&ok, pred.len(), gt.len()) {
            mismatches += 1;
        }
    }

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let t_len = rng.random_range(3..40);
        let a = random_joints::<21>(&mut rng, t_len);
        let b = random_joints::<21>(&mut rng, t_len);
        let joints: Vec<usize> = (0..21).collect();
        let d = |p: Vec3, q: Vec3| (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>().sqrt();
        let mut s = 0.0;
        for t in 0..t_len {
            for j in 0..21 {
                s += d(a[t][j], b[t][j]);
            }
        }
        let mpjpe_oracle = s / (t_len * 21) as f64;
        worst = worst.max((mean_joint_error(&a, &b, &joints).unwrap() - mpjpe_oracle).abs());

        let acc = |x: &[[Vec3; 21]]| {
            let mut s = 0.0;
            for t in 1..t_len - 1 {
                for j in 0..21 {
                    let mut q = 0.0f64;
                    for k in 0..3 {
                        let v = x[t + 1][j][k] as f64 - 2.0 * x[t][j][k] as f64 + x[t - 1][j][k] as f64;
                        q += v * v;
                    }
                    s += q.sqrt();
                }
            }
            s / ((t_len - 2) * 21) as f64
        };
        let ratio_oracle = acc(&a) / acc(&b);
        worst = worst.max((accel_ratio(&a, &b, &joints).unwrap().unwrap() - ratio_oracle).abs());
    }
    verdict(
        8,
        "evaluator oracles",
        mismatches == 0 && worst < 1e-6,
        format!("1000 matching instances, {mismatches} mismatches; worst MPJPE/accel deviation {worst:.2e}"),
    );
}

#[test]
fn criterion_09_stitching() {
    let mut worst_sum = 0.0f64;
    for frames in [481usize, 720, 960, 1201, 2400, 3337] {
        let ws = make_windows(frames).unwrap();
        let mut sum = vec![0.0; frames];
        for (w, wt) in ws.iter().zip(stitch_weights(&ws, frames)) {
            for i in 0..w.valid {
                sum[w.start + i] += wt[i];
            }
        }
        worst_sum = sum.iter().fold(worst_sum, |m, s| m.max((s - 1.0).abs()));
    }

    // two windows that disagree by 10 mm
    let frames = 720;
    let ws = make_windows(frames).unwrap();
    let outs: Vec<Vec<f32>> = ws.iter().enumerate().map(|(i, w)| vec![100.0 + 10.0 * i as f32; w.valid]).collect();
    let out = stitch_windows(&outs, &ws, 1, frames, WINDOW_STRIDE, &StitchConfig::default(), None).unwrap();
    let jump = out.windows(2).map(|p| (p[1] - p[0]).abs()).fold(0.0f32, f32::max);
    let seam = seams(&ws)[0];

    let short = make_windows(300).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f32> = (0..300 * 15).map(|_| rng.random_range(-500.0..500.0)).collect();
    let single = stitch_windows(&[data.clone()], &short, 15, 300, WINDOW_STRIDE, &StitchConfig::default(), None).unwrap();
    let exact = single.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        9,
        "stitching",
        worst_sum <= 1e-6 && jump < 5.0 && exact,
        format!("worst weight-sum error {worst_sum:.1e}; 10 mm seam at frame {seam} -> max step {jump:.3} mm/frame; single window bit-exact {exact}"),
    );
}

#[test]
fn criterion_10_end_to_end() {
    let t = trained();
    let (report, _) = test_run();
    let f1 = report.contact.f1;
    let mpjpe = report.mpjpe_mm.unwrap_or(f64::INFINITY);
    verdict(
        10,
        "end-to-end closed loop",
        t.train_secs < 1800.0 && f1 >= 0.90 && mpjpe < 15.0,
        format!(
            "trained in {:.0} s on {} pieces; test F1 {f1:.4} (P {:.4}, R {:.4}) at {}; MPJPE {mpjpe:.2} mm",
            t.train_secs,
            t.corpus.split(Split::Train).len(),
            report.contact.precision,
            report.contact.recall,
            report.tap
        ),
    );
}

fn file_bytes(outputs: &[PipelineOutput]) -> Vec<(String, Vec<u8>)> {
    outputs.iter().enumerate().flat_map(|(i, o)| o.files().into_iter().map(move |(n, f)| (format!("{i}/{n}"), f.to_bytes()))).collect()
}

#[test]
fn criterion_11_determinism() {
    let corpus_a = generate_synthetic_corpus(&CorpusSpec::default(), &geom()).unwrap();
    let corpus_b = generate_synthetic_corpus(&CorpusSpec::default(), &geom()).unwrap();
    let (r1a, o1a) = stage1_run(&corpus_a);
    let (r1b, o1b) = stage1_run(&corpus_b);
    let stage1_same = serde_json::to_string(&r1a).unwrap() == serde_json::to_string(&r1b).unwrap() && file_bytes(&o1a) == file_bytes(&o1b);

    let (r10a, o10a) = test_run();
    let again = train_default(PipelineConfig::default());
    let (r10b, o10b) = full_run(&again);
    let files_a = file_bytes(o10a);
    let full_same = serde_json::to_string(r10a).unwrap() == serde_json::to_string(&r10b).unwrap() && files_a == file_bytes(&o10b);
    verdict(
        11,
        "determinism",
        stage1_same && full_same,
        format!("stage-1 rerun identical {stage1_same}; retrain + full rerun identical {full_same} ({} files)", files_a.len()),
    );
}
