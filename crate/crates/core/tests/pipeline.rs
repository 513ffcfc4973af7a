use std::fs;
use std::path::Path;

use cwseg_core::ablation::component_row;
use cwseg_core::config::{BccMode, ExperimentConfig, PseudoSelection};
use cwseg_core::data::{generate_synthetic, partition, Splits};
use cwseg_core::trainer::{run_experiment, RunOptions, TrainLog, TrainState, Trainer};

fn tiny(row: &str) -> ExperimentConfig {
    let text = r#"
seed = 5

[data]
n_images = 40
height = 32
width = 32
val_size = 6
test_size = 6
labeled_fraction = "1/4"

[model]
hidden_units = 4

[geometry]
crop_size = 16

[schedule]
stage1_epochs = 3
stage2_max_epochs = 3

[selection]
patience = 1
"#;
    let mut cfg = ExperimentConfig::from_toml_with_overrides(text, &[]).unwrap();
    cfg.components = component_row(row).unwrap();
    cfg
}

fn splits(cfg: &ExperimentConfig) -> Splits {
    partition(&generate_synthetic(&cfg.data.synth(), cfg.seed).unwrap(), &cfg.protocol()).unwrap()
}

fn train(cfg: &ExperimentConfig) -> (TrainState, TrainLog) {
    let sp = splits(cfg);
    let mut trainer = Trainer::new(cfg, &sp);
    let mut state = TrainState::init(cfg).unwrap();
    trainer.run(&mut state, None).unwrap();
    (state, trainer.log)
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    fs::read(dir.join(f)).unwrap()
}

#[test]
fn zero_consistency_weight_reproduces_suponly_bytes() {
    let sup = tiny("SupOnly");
    let mut zero = tiny("II");
    zero.loss.lambda_bcc = 0.0;
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("sup"), tmp.path().join("zero"));
    run_experiment(&sup, &a, &RunOptions::default()).unwrap();
    run_experiment(&zero, &b, &RunOptions::default()).unwrap();
    for f in ["metrics.csv", "steps.csv", "checkpoints/last.ckpt", "checkpoints/epoch_0003.ckpt"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
}

#[test]
fn components_off_match_the_suponly_row() {
    let mut off = tiny("Ours");
    off.components.bcc = BccMode::Off;
    off.components.selection = PseudoSelection::None;
    off.components.dynamic_bank = false;
    assert_eq!(off, tiny("SupOnly"));
    let (s1, l1) = train(&off);
    let (s2, l2) = train(&tiny("SupOnly"));
    assert_eq!(s1.params, s2.params);
    assert_eq!(l1.steps, l2.steps);
}

#[test]
fn context_free_model_stage1_matches_suponly() {
    let with_rf1 = |row| {
        let mut cfg = tiny(row);
        cfg.model.receptive_field = 1;
        cfg
    };
    let (ours, sup) = (with_rf1("Ours"), with_rf1("SupOnly"));
    let stage1 = |cfg: &ExperimentConfig| {
        let sp = splits(cfg);
        let mut trainer = Trainer::new(cfg, &sp);
        let mut state = TrainState::init(cfg).unwrap();
        trainer.train_stage1(&mut state).unwrap();
        (state.params, trainer.log.steps)
    };
    let (p_ours, steps_ours) = stage1(&ours);
    let (p_sup, steps_sup) = stage1(&sup);
    assert!(steps_ours.iter().all(|s| s.loss_bcc == 0.0));
    let totals = |s: &[cwseg_core::trainer::StepRecord]| s.iter().map(|r| (r.loss_sup, r.loss_total, r.lr)).collect::<Vec<_>>();
    assert_eq!(totals(&steps_ours), totals(&steps_sup));
    assert_eq!(p_ours, p_sup);
}

#[test]
fn all_unlabeled_mode_pseudo_labels_every_image() {
    let cfg = tiny("V");
    let n = splits(&cfg).unlabeled.len();
    let (state, log) = train(&cfg);
    let bank = state.bank.unwrap();
    assert_eq!(bank.len(), n);
    assert!(log.updates.iter().all(|u| u.bank_size == n));
    let m = splits(&cfg).labeled.len();
    let stage2_steps = log.steps.iter().filter(|s| s.stage == 2).count();
    assert_eq!(stage2_steps, cfg.schedule.stage2_max_epochs * (m + n).div_ceil(cfg.optim.batch_stage2));
}

#[test]
fn stage2_without_a_bank_never_uses_pseudo_labels() {
    let (state, log) = train(&tiny("II"));
    assert!(state.bank.is_none());
    assert!(log.updates.is_empty());
    let stage2: Vec<_> = log.steps.iter().filter(|s| s.stage == 2).collect();
    assert!(!stage2.is_empty());
    assert!(stage2.iter().all(|s| s.loss_dpm == 0.0 && s.loss_bcc == 0.0));
}

#[test]
fn static_bank_is_built_once() {
    let (_, log) = train(&tiny("IV"));
    assert_eq!(log.updates.len(), 1);
    let (_, log) = train(&tiny("Ours"));
    assert!(log.updates.len() > 1);
}
