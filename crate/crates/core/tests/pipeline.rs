use qcmm::data::{load_dataset, save_manifest, synth_generate, SynthSpec};
use qcmm::exec::Exec;
use qcmm::harness::{evaluate, read_checkpoint, train, write_checkpoint, TrainConfig};
use qcmm::model::AblationMode;

fn bundle() -> qcmm::data::DatasetBundle {
    let spec = SynthSpec {
        n_per_class: 12,
        d: 4,
        ..SynthSpec::default()
    };
    synth_generate(&spec, 41).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        d: 4,
        hidden: 6,
        blocks: 1,
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn manifest_round_trip_reproduces_the_bundle() {
    let b = bundle();
    let dir = tempfile::tempdir().unwrap();
    let path = save_manifest(&b, dir.path()).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.split, b.split);
    assert_eq!(back.len(), b.len());
    for (x, y) in back.samples.iter().zip(&b.samples) {
        assert_eq!(x.label, y.label);
        for (p, q) in x.x_h.iter().chain(&x.x_l).zip(y.x_h.iter().chain(&y.x_l)) {
            assert_eq!(*p, *q as f32 as f64);
        }
    }
}

#[test]
fn train_checkpoint_eval_agree() {
    let b = bundle();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&config(), &b).unwrap();
    assert_eq!(out.history.len(), 2);
    let direct = evaluate(&out.store, &b, Exec::default()).unwrap();
    let path = dir.path().join("checkpoint.qcmm");
    write_checkpoint(&path, &out.store, &config()).unwrap();
    let ck = read_checkpoint(&path).unwrap();
    assert_eq!(ck.header.config, config());
    assert_eq!(evaluate(&ck.store, &b, Exec::default()).unwrap(), direct);
}

#[test]
fn every_mode_trains_end_to_end() {
    let b = bundle();
    for mode in AblationMode::ALL {
        let c = TrainConfig {
            ablation_mode: mode,
            epochs: 1,
            ..config()
        };
        let out = train(&c, &b).unwrap_or_else(|e| panic!("{mode}: {e}"));
        let r = evaluate(&out.store, &b, Exec::default()).unwrap();
        assert!(out.history[0].mean_loss.is_finite(), "{mode}");
        assert!((0.0..=1.0).contains(&r.oa), "{mode}");
    }
}

#[test]
fn sequential_and_parallel_agree() {
    let b = bundle();
    let seq = train(&TrainConfig { exec: Exec::Sequential, ..config() }, &b).unwrap();
    let par = train(&TrainConfig { exec: Exec::Parallel, ..config() }, &b).unwrap();
    assert_eq!(seq.history, par.history);
    assert_eq!(seq.store.flatten(), par.store.flatten());
}
