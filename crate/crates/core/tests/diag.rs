//! Scratch diagnostics for the stage-2 learning recipe. Not part of the
//! acceptance gate; run with `cargo test --test diag -- --nocapture --ignored`.

use sodiff_core::config::TrainConfig;
use sodiff_core::data::{synthetic_caption, synthetic_corpus};
use sodiff_core::eval::{evaluate, mse, psnr, Restorer};
use sodiff_core::image::ImageTensor;
use sodiff_core::pipeline::RestorationPipeline;
use sodiff_core::text::{CaptionRecord, HashTextProvider, PromptProvider};
use sodiff_core::train::{run_autoencoder, run_stage1, run_stage2};
use std::collections::BTreeMap;

fn shrink_modules(cfg: &mut TrainConfig) {
    cfg.batch = 2;
    cfg.crop = 16;
    cfg.ckpt_every = 10_000;
    cfg.freeze_check_every = 5;
    cfg.saipe.c_f = 8;
    cfg.saipe.rstb_count = 1;
    cfg.saipe.stl_per_rstb = 1;
    cfg.saipe.query_count = 4;
    cfg.saipe.embed_dim = 8;
    cfg.saipe.heads = 2;
    cfg.saipe.embed_heads = 2;
    cfg.saipe.linear_features = 8;
    cfg.ae.width = 16;
    cfg.unet.channels = vec![8, 8];
    cfg.unet.prompt_dim = 8;
    cfg.unet.heads = 2;
    cfg.unet.t_emb_dim = 8;
    cfg.disc.channels = vec![8, 8];
    cfg.disc.t_emb_dim = 8;
    cfg.disc.prompt_dim = 8;
    cfg.predictor.width = 8;
    cfg.lora.rank = 4;
}

fn captions_for(
    corpus: &[(String, ImageTensor)],
    cfg: &TrainConfig,
) -> BTreeMap<String, CaptionRecord> {
    let provider = HashTextProvider::new(cfg.saipe.query_count, cfg.saipe.embed_dim, cfg.seed);
    corpus
        .iter()
        .map(|(id, _)| {
            let caption = synthetic_caption(id, cfg.seed);
            let embedding = provider.embed(id, &caption).unwrap();
            (
                id.clone(),
                CaptionRecord {
                    image_id: id.clone(),
                    caption,
                    embedding,
                },
            )
        })
        .collect()
}

#[test]
#[ignore]
fn stage2_recipe_diagnostics() {
    let corpus = synthetic_corpus(8, 24, 24, 606);

    let mut ae_cfg = TrainConfig::autoencoder();
    shrink_modules(&mut ae_cfg);
    ae_cfg.iters = 800;
    ae_cfg.lr = 1e-3;
    ae_cfg.batch = 4;
    let ae_dir = tempfile::tempdir().unwrap();
    let ae_run = run_autoencoder(&ae_cfg, &corpus, ae_dir.path(), None).unwrap();
    for row in ae_run.rows.iter().step_by(100) {
        println!("ae step {} total {:.5} mse {:.5} kl {:.3}", row.step, row.total, row.mse, row.kl);
    }

    // AE roundtrip ceiling on the clean corpus.
    {
        use rand::SeedableRng;
        let ckpt = sodiff_core::ckpt::load_checkpoint(&ae_run.ckpt_path).unwrap();
        let mut store = sodiff_core::nn::ParamStore::new();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
        let ae = sodiff_core::diffusion::Autoencoder::new(&mut store, &ae_cfg.ae, &mut rng).unwrap();
        store.load_state(&ckpt.params).unwrap();
        store.set_all_trainable(false);
        let mut acc = 0.0;
        for (_, img) in &corpus {
            store.begin_step();
            let x = sodiff_core::tensor::Tensor::constant(sodiff_core::image::image_to_nchw(img));
            let z = ae.encode(&x).unwrap();
            let out = ae.decode(&z).unwrap();
            let rec = sodiff_core::image::nchw_to_image(out.value());
            acc += psnr(mse(&rec, img).unwrap());
        }
        println!("AE roundtrip mean PSNR {:.2} dB", acc / corpus.len() as f64);
    }

    let mut s1_cfg = TrainConfig::stage1();
    shrink_modules(&mut s1_cfg);
    s1_cfg.iters = 400;
    s1_cfg.lr = 1e-3;
    let captions = captions_for(&corpus, &s1_cfg);
    let s1_dir = tempfile::tempdir().unwrap();
    let s1_run = run_stage1(&s1_cfg, &corpus, &captions, s1_dir.path(), None).unwrap();
    println!(
        "saipe first rec {:.4} last rec {:.4}",
        s1_run.rows[0].rec,
        s1_run.rows.last().unwrap().rec
    );

    let mut s2_cfg = TrainConfig::stage2();
    shrink_modules(&mut s2_cfg);
    s2_cfg.iters = 1000;
    s2_cfg.lr = 3e-4;
    s2_cfg.batch = 4;
    s2_cfg.qf_range = [10, 10];
    let s2_dir = tempfile::tempdir().unwrap();
    let s2_run = run_stage2(
        &s2_cfg,
        &corpus,
        &s1_run.ckpt_path,
        &ae_run.ckpt_path,
        s2_dir.path(),
        None,
    )
    .unwrap();
    for row in s2_run.rows.iter().step_by(100) {
        println!(
            "s2 step {} total {:.5} recon {:.5} adv {:.4} qf {:.3} disc {:.4}",
            row.step, row.total, row.recon, row.adv, row.qf, row.disc
        );
    }
    let last = s2_run.rows.last().unwrap();
    println!(
        "s2 final total {:.5} recon {:.5} qf {:.3}",
        last.total, last.recon, last.qf
    );

    let pipe = RestorationPipeline::from_checkpoints(
        &s1_run.ckpt_path,
        &ae_run.ckpt_path,
        &s2_run.ckpt_path,
    )
    .unwrap();
    for (id, img) in corpus.iter().take(3) {
        let lq = sodiff_core::jpeg::degrade(img, 10, sodiff_core::jpeg::Subsample::S420).unwrap();
        let (qf, tau) = pipe.predict_qf(&lq).unwrap();
        let restored = pipe.restore(id, &lq, 10).unwrap();
        println!(
            "{id}: qf_pred {qf:.2} tau {tau:.1} | lq {:.2} dB restored {:.2} dB",
            psnr(mse(&lq, img).unwrap()),
            psnr(mse(&restored, img).unwrap())
        );
    }
    let report = evaluate(&pipe, &corpus, &[10]).unwrap();
    println!(
        "eval: degraded {:.2} dB restored {:.2} dB",
        report.overall.psnr_lq, report.overall.psnr
    );
}
