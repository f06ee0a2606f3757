//! Whole-cascade behaviour with tiny networks and a few training steps.

use tipsynth::keyboard::KeyboardGeometry;
use tipsynth::pipeline::trajfile::TrajectoryFile;
use tipsynth::pipeline::{
    generate_synthetic_corpus, run_pipeline, run_pipeline_partial, train_all, Corpus, CorpusSpec, Models,
    PipelineConfig, Split, Stage,
};
use tipsynth::score::{make_windows, FingeringGrid};

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.refiner.dim = 8;
    cfg.refiner.depth = 1;
    cfg.refiner.heads = 2;
    cfg.refiner.film_hidden = 8;
    cfg.smoother.dim = 8;
    cfg.smoother.blocks = 1;
    cfg.wrist.dim = 8;
    cfg.wrist.blocks = 1;
    cfg.wrist.film_hidden = 8;
    cfg.pose.channels = vec![8, 8];
    cfg.pose.blocks_per_level = 1;
    cfg.pose.film_hidden = 8;
    cfg.pose_refiner.dim = 8;
    cfg.pose_refiner.blocks = 1;
    cfg.pose_refiner.film_hidden = 8;
    let t = &mut cfg.train;
    t.steps_s2_1 = 3;
    t.steps_s2_2 = 3;
    t.steps_s2_3 = 3;
    t.steps_s3 = 3;
    t.steps_s4 = 3;
    t.steps_s4_refine = 3;
    cfg
}

fn setup() -> (PipelineConfig, Corpus, Models) {
    let geom = KeyboardGeometry::default();
    let spec = CorpusSpec { seed: 4, pieces: 5, seconds: [8.0, 9.0], split: [0.6, 0.2, 0.2], ..CorpusSpec::default() };
    let corpus = generate_synthetic_corpus(&spec, &geom).unwrap();
    let cfg = tiny_config();
    let (models, reports) = train_all(&cfg, &corpus.split(Split::Train), &geom, Stage::S4).unwrap();
    assert!(reports.iter().all(|r| r.final_loss.is_finite()));
    (cfg, corpus, models)
}

#[test]
fn full_run_on_a_twenty_second_piece() {
    let geom = KeyboardGeometry::default();
    let (cfg, corpus, models) = setup();
    let piece = &corpus.pieces[0];
    // 1200 frames: the piece's fingering followed by silence
    let fingering: FingeringGrid = piece.fingering.slice_padded(0, 1200);
    let starts: Vec<usize> = make_windows(1200).unwrap().iter().map(|w| w.start).collect();
    assert_eq!(starts, vec![0, 240, 480, 720]);

    let out = run_pipeline(&cfg, &models, &piece.notes, &fingering, &geom, Stage::S4).unwrap();
    assert_eq!(out.diagnostics.windows, 4);
    assert_eq!(out.last_stage(), Some(Stage::S4));
    for tips in out.tips.values() {
        assert!(tips.iter().all(|t| t.len() == 1200 && t.is_finite()));
    }
    assert!(out.poses.as_ref().unwrap().iter().all(|p| p.len() == 1200));
    assert_eq!(out.diagnostics.clamp_violations, 0);

    let names: Vec<String> = out.files().into_iter().map(|(n, _)| n).collect();
    for tag in ["S1", "S2.1", "S2.2", "S2.3", "S3", "S4"] {
        assert!(names.contains(&format!("{tag}.L.tptj")) && names.contains(&format!("{tag}.R.tptj")), "{names:?}");
    }

    // identical inputs, identical bytes
    let again = run_pipeline(&cfg, &models, &piece.notes, &fingering, &geom, Stage::S4).unwrap();
    let bytes = |o: &tipsynth::pipeline::PipelineOutput| o.files().into_iter().map(|(n, f)| (n, f.to_bytes())).collect::<Vec<_>>();
    assert_eq!(bytes(&out), bytes(&again));
}

#[test]
fn stage_one_only_and_partial_outputs() {
    let geom = KeyboardGeometry::default();
    let (cfg, corpus, mut models) = setup();
    let piece = &corpus.pieces[1];
    let out = run_pipeline(&cfg, &models, &piece.notes, &piece.fingering, &geom, Stage::S1).unwrap();
    let files = out.files();
    assert_eq!(files.len(), 2);
    for (name, f) in &files {
        assert!(name.starts_with("S1."));
        assert_eq!((f.stage.as_str(), f.joints), ("S1", 5));
        assert_eq!(TrajectoryFile::from_bytes(&f.to_bytes()).unwrap(), *f);
    }

    models.s3 = None;
    let (partial, res) = run_pipeline_partial(&cfg, &models, &piece.notes, &piece.fingering, &geom, Stage::S4);
    let err = res.unwrap_err().to_string();
    assert!(err.contains("S3"), "{err}");
    assert_eq!(partial.last_stage(), Some(Stage::S2_3));
    assert!(partial.wrists.is_none() && partial.poses.is_none());

    // without a learned smoother the moving-average fallback runs
    models.s2_3 = None;
    let out = run_pipeline(&cfg, &models, &piece.notes, &piece.fingering, &geom, Stage::S2_3).unwrap();
    assert!(out.tips_at(Stage::S2_3).is_some());
}
