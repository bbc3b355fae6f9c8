// Temporary diagnostic harness; removed before release.

use ctxseg::checkpoint;
use ctxseg::dataset::Dataset;
use ctxseg::model::{build_model, ModelConfig};
use ctxseg::synthetic::{band_mask, generate, image_seed, masked_accuracy, SyntheticTaskConfig};

fn claim_model_config(context: bool) -> ModelConfig {
    ModelConfig {
        patch_size: 32,
        in_channels: 1,
        encoder_channels: vec![8, 16, 16],
        encoder_strides: vec![2, 2, 1],
        num_classes: 3,
        context_enabled: context,
        softmax_temperature: 1.0,
        detach_target_slab: false,
        seed: 101,
    }
}

fn task() -> SyntheticTaskConfig {
    SyntheticTaskConfig {
        image_size: 256,
        patch_size: 32,
        num_classes: 3,
        context_radius: 4,
        noise_level: 0.02,
        seed: 999,
    }
}

#[test]
#[ignore]
fn diagnose_trained_context_model() {
    let model = build_model::<f64>(&claim_model_config(true)).unwrap();
    checkpoint::restore(model.params(), std::path::Path::new("/tmp/claim/model.ckpt")).unwrap();

    let cfg = task();
    let mask = band_mask(&cfg).unwrap();
    let mut ctx_acc = Vec::new();
    for i in 0..3 {
        let mut icfg = cfg.clone();
        icfg.seed = image_seed(cfg.seed, i);
        let (image, truth) = generate(&icfg).unwrap();
        let pred = model.predict_full_image(&image, true).unwrap();
        ctx_acc.push(masked_accuracy(&pred, &truth, &mask).unwrap());
    }
    println!("context band accuracy per image: {ctx_acc:?}");

    // Attention statistics on one interior patch.
    let mut icfg = cfg.clone();
    icfg.seed = image_seed(cfg.seed, 0);
    let (image, _) = generate(&icfg).unwrap();
    let ds = Dataset::from_pairs(
        vec![(image.clone(), generate(&icfg).unwrap().1)],
        32,
        255,
    )
    .unwrap();
    // Patch (3, 3): interior.
    let idx = 3 * 8 + 3;
    let sample = ds.sample(idx).unwrap();
    let ns = ds.neighbors(idx).unwrap();
    let (_logits, state) = model
        .forward_with_state(sample.patch, Some(&ns), true)
        .unwrap();
    let state = state.unwrap();

    // Row entropy of W_c per slab, averaged over band vs interior rows.
    let hw = 64;
    let w_c = state.w_c.data();
    let feat_band = |j: usize| {
        let (r, c) = (j / 8, j % 8);
        r == 0 || r == 7 || c == 0 || c == 7
    };
    for k in 0..9 {
        let mut h_band = 0.0;
        let mut n_band = 0;
        let mut h_int = 0.0;
        let mut n_int = 0;
        for j in 0..hw {
            let row = &w_c[(k * hw + j) * hw..(k * hw + j + 1) * hw];
            let h: f64 = -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            if feat_band(j) {
                h_band += h;
                n_band += 1;
            } else {
                h_int += h;
                n_int += 1;
            }
        }
        println!(
            "slab {k}: mean row entropy band {:.3} interior {:.3} (uniform = {:.3})",
            h_band / n_band as f64,
            h_int / n_int as f64,
            (hw as f64).ln()
        );
    }

    // Context magnitude vs I_e magnitude at band vs interior positions.
    let ctx = state.n_w.sum_axis0().unwrap();
    let i_e = &state.i_e;
    let c_ch = 16;
    let mut mag = |t: &[f64], band: bool| -> f64 {
        let mut acc = 0.0;
        let mut n = 0;
        for ch in 0..c_ch {
            for j in 0..hw {
                if feat_band(j) == band {
                    acc += t[ch * hw + j].abs();
                    n += 1;
                }
            }
        }
        acc / n as f64
    };
    println!(
        "|ctx| band {:.4} interior {:.4}; |I_e| band {:.4} interior {:.4}",
        mag(ctx.data(), true),
        mag(ctx.data(), false),
        mag(i_e.data(), true),
        mag(i_e.data(), false)
    );
}
