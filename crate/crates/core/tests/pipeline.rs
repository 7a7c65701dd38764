//! Synthetic data through the full model, training and checkpointing.

use ftpose::attention::attention_weights;
use ftpose::checkpoint;
use ftpose::model::{self, ModelConfig, ModelParams, Variant};
use ftpose::synth::{synthetic_batch, SynthScene};
use ftpose::tensor::{mac_count, reset_mac_count};
use ftpose::{cost, Var};

#[test]
fn synthetic_sample_runs_at_default_size() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let sample = model_sample(&cfg, 4);
    reset_mac_count();
    let h = model::forward_full(&sample.triplet, &cfg, &params).unwrap();
    assert_eq!(mac_count(), cost::forward_macs(&cfg, Variant::MultiGrained).total());
    assert_eq!(h.maps.shape(), sample.target.maps.shape());
    assert!(h.maps.is_finite());
}

fn model_sample(cfg: &ModelConfig, seed: u64) -> model::Sample {
    ftpose::synth::make_sample(&SynthScene::new(seed, cfg.joints), 1, cfg).unwrap()
}

#[test]
fn checkpoint_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let cfg = ModelConfig::tiny();
    let batch = synthetic_batch(&cfg, 3, 2).unwrap();
    let (_, trained) = model::train_loop(&batch, &cfg, ModelParams::init(&cfg, 1).unwrap(), 0.05, 5).unwrap();
    checkpoint::save(&path, &cfg, &trained).unwrap();
    let (cfg2, loaded) = checkpoint::load(&path).unwrap();
    let a = model::forward_full(&batch[0].triplet, &cfg, &trained).unwrap();
    let b = model::forward_full(&batch[0].triplet, &cfg2, &loaded).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fusion_weights_are_distributions() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 2).unwrap();
    let sample = model_sample(&cfg, 0);
    let out = model::forward_graph(&sample.triplet, &cfg, &params.constants(), Variant::MultiGrained, None).unwrap();
    let frames = model::patch_embed_backbone(&sample.triplet, &cfg, &params.constants()).unwrap();
    let c = params.constants();
    let (fine, _, _) = model::high_res_branch(&frames[1], &cfg, c.hr_blocks(), c.hr_pos_embed.as_ref(), out.selections.hr.as_ref()).unwrap();
    let (coarse, _, _) =
        model::low_res_branch(&frames, &cfg, c.lr_blocks(), &c.st_block, &c.frame_embed, Some(&out.selections.lr)).unwrap();
    let w = attention_weights(fine.value(), coarse.value(), &params.fusion).unwrap();
    assert_eq!(w.len(), cfg.fusion_heads);
    for head in &w {
        assert_eq!(head.shape(), &[fine.shape()[0], coarse.shape()[0]]);
        for r in 0..head.rows() {
            assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn baseline_and_full_model_disagree() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 2).unwrap().constants();
    let sample = model_sample(&cfg, 0);
    let full = model::forward_graph(&sample.triplet, &cfg, &params, Variant::MultiGrained, None).unwrap();
    let base = model::forward_graph(&sample.triplet, &cfg, &params, Variant::LowResOnly, None).unwrap();
    assert_eq!(full.heatmap.shape(), base.heatmap.shape());
    assert!(base.selections.hr.is_none());
    assert!(full.heatmap.value().max_abs_diff(base.heatmap.value()) > 0.0);
    let target = Var::constant(sample.target.maps.clone());
    assert!(model::heatmap_loss(&base.heatmap, &target).unwrap().value().item().is_finite());
}
