mod common;

use common::*;
use vaeloop::config::{Mode, ModelConfig};
use vaeloop::training::{evaluate, train, TrainConfig};

#[test]
fn small_set_is_overfit() {
    let data = small_corpus(5, 8);
    let base = small_train(Mode::BaselineNoZ, 1000, 2);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 1,
        stf_noise_scale: 0.0,
        model: ModelConfig { hidden: 32, ..base.model.clone() },
        ..base
    };
    let out = train(cfg, &data, &data).unwrap();
    let rec = evaluate(&out.last.model, &data, 0.0, 5, 0).unwrap().rec_error;
    assert!(rec < 0.05, "rec {rec}");
}

#[test]
fn identical_runs_agree() {
    let data = small_corpus(20, 5);
    let (tr, va) = data.split_at(16);
    let a = train(small_train(Mode::VaeLoop, 2, 4), tr, va).unwrap();
    let b = train(small_train(Mode::VaeLoop, 2, 4), tr, va).unwrap();
    assert_eq!(a.last, b.last);
    assert_eq!(a.log, b.log);
}

#[test]
fn loss_falls_over_ten_epochs() {
    let data = small_corpus(40, 6);
    let (tr, va) = data.split_at(32);
    let out = train(small_train(Mode::VaeLoop, 11, 1), tr, va).unwrap();
    let val: Vec<f64> = out
        .log
        .iter()
        .filter(|r| r.split == vaeloop::objective::Split::Validation)
        .map(|r| r.loss.total)
        .collect();
    assert!(val[10] < val[0], "{val:?}");
}
