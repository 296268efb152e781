//! Backbone contract tests: staged forward, injection plumbing, pretraining
//! behavior, and parameter freezing.

use promma_core::backbone::{
    clamp_prediction, dataset_l1_loss, pretrain, train_backbone, BackboneConfig, BackboneParams,
    Injection, TrainSettings,
};
use promma_core::dataset::{generate_synthetic, ModalDims, SyntheticSpec};
use promma_core::gradcheck::{max_rel_err, DEFAULT_STEP};
use promma_core::graph::Graph;
use promma_core::metrics::metrics;
use promma_core::missing::ModalBundle;
use promma_core::nn::{checksum, Bindings};
use promma_core::rng::seeded;
use promma_core::tensor::Tensor;

fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        d_model: 8,
        n_heads: 2,
        n_cross_layers: 1,
        n_self_layers: 1,
        ffn_hidden: 16,
        d_in: [3, 4, 5],
        seq_len: [4, 5, 6],
    }
}

fn tiny_bundle(seed: u64, label: f64) -> ModalBundle {
    let mut rng = seeded(seed, "bundle");
    let cfg = tiny_config();
    let feats = [0, 1, 2].map(|m| {
        Tensor::randn(&mut rng, vec![cfg.seq_len[m], cfg.d_in[m]], 1.0)
    });
    ModalBundle::complete(feats, label)
}

fn tiny_spec(n: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_samples: n,
        seq_len: [4, 5, 6],
        feat_dim: [3, 4, 5],
        latent_dim: 3,
        noise: [0.1, 0.1, 0.1],
        label_noise: 0.05,
        label_scale: 2.0,
    }
}

#[test]
fn zero_inputs_predict_zero() {
    let cfg = tiny_config();
    let params = BackboneParams::init(&cfg, 1, "t").unwrap();
    let feats = [0, 1, 2].map(|m| Tensor::zeros(vec![cfg.seq_len[m], cfg.d_in[m]]));
    let bundle = ModalBundle::complete(feats, 0.0);
    let mut g = Graph::new();
    let mut reg = Bindings::new();
    let bb = params.bind(&mut g, &mut reg);
    let trace = bb.forward(&mut g, &bundle, &Injection::None);
    assert_eq!(g.value(trace.prediction).item(), 0.0);
}

#[test]
fn masked_injection_is_exactly_do_nothing() {
    let cfg = tiny_config();
    let params = BackboneParams::init(&cfg, 2, "t").unwrap();
    let bundle = tiny_bundle(3, 0.5);

    let mut g = Graph::new();
    let mut reg = Bindings::new();
    let bb = params.bind(&mut g, &mut reg);
    let plain = bb.forward(&mut g, &bundle, &Injection::None);

    let mut rng = seeded(9, "tokens");
    let tokens = [0, 1, 2].map(|_| {
        let t = Tensor::randn(&mut rng, vec![3, cfg.d_model], 1.0);
        Some(g.input(&t))
    });
    let masked = bb.forward(&mut g, &bundle, &Injection::Masked(tokens));

    // Bit-exact equality: injected-but-masked tokens change nothing.
    assert_eq!(
        g.value(plain.prediction).item().to_bits(),
        g.value(masked.prediction).item().to_bits()
    );
}

#[test]
fn unmasked_zero_injection_changes_sequence_length_only_at_self_stage() {
    let cfg = tiny_config();
    let params = BackboneParams::init(&cfg, 2, "t").unwrap();
    let bundle = tiny_bundle(4, 0.0);
    let mut g = Graph::new();
    let mut reg = Bindings::new();
    let bb = params.bind(&mut g, &mut reg);
    let zero_tokens = [0, 1, 2].map(|_| Some(g.input(&Tensor::zeros(vec![2, cfg.d_model]))));
    let trace = bb.forward(&mut g, &bundle, &Injection::Tokens(zero_tokens));
    for m in 0..3 {
        assert_eq!(g.value(trace.self_in[m]).rows(), cfg.seq_len[m] + 2);
        assert_eq!(g.value(trace.cross_out[m]).rows(), cfg.seq_len[m]);
    }
}

#[test]
fn full_forward_gradcheck_wrt_projection() {
    let cfg = tiny_config();
    let params = BackboneParams::init(&cfg, 5, "t").unwrap();
    let bundle = tiny_bundle(6, 1.0);
    let w0 = params.proj[0].w.clone();
    let err = max_rel_err(
        &|g, vars| {
            let mut reg = Bindings::new();
            let mut bb = params.bind(g, &mut reg);
            bb.proj[0].w = vars[0];
            let trace = bb.forward(g, &bundle, &Injection::None);
            let label = g.scalar(bundle.label);
            let diff = g.sub(trace.prediction, label);
            let diff2 = g.mul(diff, diff);
            g.sum_all(diff2)
        },
        &[w0],
        DEFAULT_STEP,
    );
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn permuting_batch_permutes_predictions() {
    let cfg = tiny_config();
    let params = BackboneParams::init(&cfg, 7, "t").unwrap();
    let bundles: Vec<ModalBundle> = (0..4).map(|i| tiny_bundle(i, 0.0)).collect();
    let preds = promma_core::backbone::predict_batch(&params, &bundles);
    let permuted: Vec<ModalBundle> = [2usize, 0, 3, 1].iter().map(|&i| bundles[i].clone()).collect();
    let preds_p = promma_core::backbone::predict_batch(&params, &permuted);
    for (j, &i) in [2usize, 0, 3, 1].iter().enumerate() {
        assert_eq!(preds[i].to_bits(), preds_p[j].to_bits());
    }
}

#[test]
fn overfits_single_sample() {
    let cfg = tiny_config();
    let mut params = BackboneParams::init(&cfg, 8, "t").unwrap();
    let bundle = tiny_bundle(11, 1.5);
    let ds = promma_core::dataset::Dataset {
        bundles: vec![bundle],
        dims: ModalDims { len: cfg.seq_len, dim: cfg.d_in },
    };
    let opts = TrainSettings { epochs: 200, batch_size: 1, lr: 5e-3, momentum: 0.9 };
    train_backbone(&mut params, &ds, &opts, 1, None).unwrap();
    let loss = dataset_l1_loss(&params, &ds);
    assert!(loss < 0.05, "single-sample L1 {loss}");
}

#[test]
fn zero_learning_rate_leaves_params_bit_identical() {
    let cfg = tiny_config();
    let mut params = BackboneParams::init(&cfg, 9, "t").unwrap();
    let before = checksum(&params);
    let ds = promma_core::dataset::Dataset {
        bundles: vec![tiny_bundle(1, 0.3), tiny_bundle(2, -0.7)],
        dims: ModalDims { len: cfg.seq_len, dim: cfg.d_in },
    };
    let opts = TrainSettings { epochs: 2, batch_size: 2, lr: 0.0, momentum: 0.9 };
    train_backbone(&mut params, &ds, &opts, 1, None).unwrap();
    assert_eq!(checksum(&params), before);
}

#[test]
fn incomplete_bundle_rejected_for_pretraining() {
    let cfg = tiny_config();
    let mut params = BackboneParams::init(&cfg, 10, "t").unwrap();
    let mut b = tiny_bundle(1, 0.0);
    b.present[1] = false;
    b.features[1] = Tensor::zeros(vec![cfg.seq_len[1], cfg.d_in[1]]);
    let ds = promma_core::dataset::Dataset {
        bundles: vec![b],
        dims: ModalDims { len: cfg.seq_len, dim: cfg.d_in },
    };
    let opts = TrainSettings { epochs: 1, batch_size: 1, lr: 1e-3, momentum: 0.9 };
    let err = train_backbone(&mut params, &ds, &opts, 1, None).unwrap_err().to_string();
    assert!(err.contains("missing modalities"), "{err}");
}

#[test]
fn loss_decreases_over_first_epoch_and_training_separates_synthetic_data() {
    let data = generate_synthetic(&tiny_spec(300), 21);
    let (train, test) = data.split(0.2);
    let cfg = BackboneConfig {
        d_model: 16,
        n_heads: 4,
        n_cross_layers: 1,
        n_self_layers: 1,
        ffn_hidden: 32,
        d_in: train.dims.dim,
        seq_len: train.dims.len,
    };
    let mut params = BackboneParams::init(&cfg, 33, "t").unwrap();
    let before = dataset_l1_loss(&params, &train);
    let opts = TrainSettings { epochs: 30, batch_size: 32, lr: 2e-3, momentum: 0.9 };
    let losses = train_backbone(&mut params, &train, &opts, 33, None).unwrap();
    assert!(
        losses[0] < before,
        "first-epoch loss {} did not improve on initial {before}",
        losses[0]
    );
    params.freeze();

    let preds: Vec<f64> = promma_core::backbone::predict_batch(&params, &test.bundles)
        .into_iter()
        .map(|p| clamp_prediction(p, 6.0))
        .collect();
    let labels: Vec<f64> = test.bundles.iter().map(|b| b.label).collect();
    let m = metrics(&preds, &labels).unwrap();
    assert!(m.acc >= 90.0, "complete-data accuracy {}", m.acc);
}

#[test]
fn frozen_backbone_checksum_survives_training_attempt() {
    let cfg = tiny_config();
    let ds = promma_core::dataset::Dataset {
        bundles: vec![tiny_bundle(1, 0.3), tiny_bundle(2, -0.7)],
        dims: ModalDims { len: cfg.seq_len, dim: cfg.d_in },
    };
    let opts = TrainSettings { epochs: 1, batch_size: 2, lr: 1e-2, momentum: 0.9 };
    let (params, _) = pretrain(&cfg, &ds, &opts, 4, None).unwrap();
    assert!(params.frozen);
    let before = checksum(&params);
    let mut clone = params.clone();
    assert!(train_backbone(&mut clone, &ds, &opts, 5, None).is_err());
    assert_eq!(checksum(&clone), before);
}
