//! Cross-module properties on short real runs.

use std::path::Path;

use proptest::prelude::*;

use remoe_lab::cli::{resolve, RunManifest};
use remoe_lab::model::{Checkpoint, MoEConfig};
use remoe_lab::routing::RouterKind;
use remoe_lab::training::{DataConfig, RunOptions, TrainConfig, Trainer};

fn tiny(router: RouterKind, seed: u64, steps: usize) -> (MoEConfig, TrainConfig, DataConfig) {
    let model = MoEConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        n_groups: 1,
        d_ffn: Some(32),
        n_experts: 4,
        top_k: 1,
        context_len: 8,
        router,
        seed,
        ..MoEConfig::default()
    };
    let train = TrainConfig {
        steps,
        batch_size: 4,
        lr_peak: 3e-3,
        eval_every: 5,
        eval_batches: 1,
        seed,
        ..TrainConfig::default()
    };
    let data = DataConfig {
        synthetic_bytes: 6000,
        ..DataConfig::default()
    };
    (model, train, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn records_are_self_consistent(seed in 0u64..1000, relu in any::<bool>()) {
        let router = if relu { RouterKind::Relu } else { RouterKind::Topk };
        let (m, t, d) = tiny(router, seed, 8);
        let mut trainer = Trainer::new(&m, &t, &d).unwrap();
        let run = trainer.run(&RunOptions::default()).unwrap();
        prop_assert_eq!(run.records.len(), 8);
        let mut prev_stage = None;
        for (i, r) in run.records.iter().enumerate() {
            prop_assert_eq!(r.step, i);
            prop_assert!(r.is_finite());
            let layer_mean = r.s_per_layer.iter().sum::<f64>() / r.s_per_layer.len() as f64;
            prop_assert!((layer_mean - r.s_overall).abs() < 1e-12);
            prop_assert!((r.mean_active - 4.0 * (1.0 - r.s_overall)).abs() < 1e-9);
            if !relu {
                prop_assert!((r.s_overall - 0.75).abs() < 1e-12);
            }
            prop_assert!(prev_stage.is_none_or(|p| p <= r.stage));
            prev_stage = Some(r.stage);
        }
        if relu {
            // λ moves by exactly one factor of α per step unless S hits the target.
            for w in run.records.windows(2) {
                let ratio = w[1].lambda / w[0].lambda;
                let expected = if w[0].s_overall < 0.75 { t.alpha } else if w[0].s_overall > 0.75 { 1.0 / t.alpha } else { 1.0 };
                prop_assert!((ratio - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_after_training(seed in 0u64..1000) {
        let (m, t, d) = tiny(RouterKind::Relu, seed, 3);
        let mut trainer = Trainer::new(&m, &t, &d).unwrap();
        trainer.run(&RunOptions::default()).unwrap();
        let ck = trainer.checkpoint();
        let back = Checkpoint::decode(&ck.encode().unwrap(), Path::new("memory")).unwrap();
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn config_resolution_is_pure(steps in 1usize..500, lr in 1e-5f64..1e-2, topk in any::<bool>()) {
        let overrides = vec![
            format!("train.steps={steps}"),
            format!("train.lr_peak={lr:e}"),
            format!("model.router={}", if topk { "topk" } else { "relu" }),
        ];
        let a = resolve(None, &overrides).unwrap();
        let b = resolve(None, &overrides).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.train.steps, steps);
        prop_assert_eq!(a.train.lr_peak, lr);
        let (ma, mb) = (RunManifest::new("train", &a), RunManifest::new("train", &b));
        prop_assert_eq!(ma.config, mb.config);
        prop_assert_eq!(ma.fidelity, mb.fidelity);
    }
}
