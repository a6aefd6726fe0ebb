use promptfed::encoder::Encoder;
use promptfed::exec::Execution;
use promptfed::federation::evaluate_global;
use promptfed::generator::GeneratorParams;
use promptfed::harness::{run_experiment_in, run_unlearning_in, ExperimentConfig, RunOptions, World};

fn small(out: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.rounds = 3;
    c.checkpoint_every = 1;
    c.out_dir = out.to_path_buf();
    c.data.vocab_size = 60;
    c.data.signal_per_class = 4;
    c.data.seq_len_min = 5;
    c.data.seq_len_max = 8;
    c.data.train_size = 120;
    c.data.test_size = 60;
    c.backbone.steps = 10;
    c.backbone.pretext_size = 80;
    c.backbone.shared_signal = 1;
    c.encoder.d_e = 8;
    c.encoder.layers = 1;
    c.encoder.heads = 2;
    c.encoder.d_ff = 16;
    c.encoder.max_len = 24;
    c.generator.hidden = 4;
    c.generator.prompt_len = 2;
    c.federation.num_clients = 10;
    c.federation.selection_ratio = 0.3;
    c.unlearn.rounds_before = 3;
    c.unlearn.prompt_len = 3;
    c.unlearn.sampled_clients = 2;
    c
}

#[test]
fn saved_artifacts_reproduce_the_reported_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let world = World::build(&cfg).unwrap();
    let out = run_experiment_in(&cfg, &world, RunOptions { keep_trajectory: true }).unwrap();
    let dir = out.run_dir.clone().unwrap();

    let encoder = Encoder::load(&dir.join("encoder.bin")).unwrap();
    assert_eq!(encoder.digest(), world.encoder.digest());
    let last = GeneratorParams::load(&dir.join("final.bin")).unwrap();
    assert!(last.bit_eq(&out.final_generator));
    let acc = evaluate_global(&last, &world.test, &encoder, Execution::Sequential).unwrap();
    assert_eq!(acc.to_bits(), out.final_accuracy.to_bits());

    for (round, expected) in out.trajectory.iter().enumerate() {
        let path = dir.join("checkpoints").join(format!("round-{:04}.bin", round + 1));
        assert!(GeneratorParams::load(&path).unwrap().bit_eq(expected), "{}", path.display());
    }
}

#[test]
fn early_stopped_unlearning_still_replaces_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.unlearn.early_stop = true;
    cfg.unlearn.epochs = 500;
    cfg.unlearn.lr = 0.05;
    let world = World::build(&cfg).unwrap();
    let report = run_unlearning_in(&cfg, &world, true).unwrap();
    assert!(report.global_replaced_exactly);
    assert_eq!(report.unlearned_digest, report.global_digest_after);
    assert_eq!(report.epochs_run, report.unlearn_losses.len());
    if report.epochs_run < 500 {
        assert!(report.forget_accuracy_after < report.forget_accuracy_before);
    }
}
