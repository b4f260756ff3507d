//! Stage-1 training: the semantic prompt extractor learns to restore
//! compressed crops while its guidance embedding tracks text embeddings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::ckpt::{config_hash, load_checkpoint, save_checkpoint};
use crate::config::{Stage, TrainConfig};
use crate::data::CropSampler;
use crate::image::{images_to_nchw, ImageTensor};
use crate::jpeg::{degrade, Subsample};
use crate::nn::ParamStore;
use crate::saipe::{saipe_loss, Saipe};
use crate::tensor::{Arr, Tensor};
use crate::text::CaptionRecord;
use crate::train::{step_rng, Optimizer};
use crate::{Error, Result};

use rand::SeedableRng;

/// One logged training step. Values are exact f64s so two runs can be
/// compared for bitwise equality through the Display form.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub total: f64,
    pub rec: f64,
    pub align: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.total, self.rec, self.align)
    }
}

/// What a finished (or resumed-and-finished) run hands back.
#[derive(Debug)]
pub struct StageReport {
    pub ckpt_path: PathBuf,
    pub log_path: PathBuf,
    /// Steps executed in this invocation (resume runs count only new ones).
    pub steps_run: u64,
    pub rows: Vec<LogRow>,
}

pub(crate) fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("step,total,rec,align\n");
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Every image id must come with a caption before training starts;
/// discovering a hole mid-run would waste the whole run.
fn check_captions(
    images: &[(String, ImageTensor)],
    captions: &BTreeMap<String, CaptionRecord>,
    l: usize,
    d: usize,
) -> Result<()> {
    let missing: Vec<&str> = images
        .iter()
        .filter(|(id, _)| !captions.contains_key(id))
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Domain(format!(
            "{} image(s) have no caption: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    for (id, rec) in captions {
        let shape = rec.embedding.shape();
        if shape != [l, d] {
            return Err(Error::Shape(format!(
                "caption embedding for {id:?} is {shape:?}, model expects [{l}, {d}]"
            )));
        }
    }
    Ok(())
}

struct Batch {
    x_h: Tensor,
    x_l: Tensor,
    e_text: Tensor,
}

/// Draw a batch of aligned (clean crop, degraded crop, text embedding)
/// triples. All randomness comes from `rng` so a step is reproducible
/// from (seed, step) alone.
fn sample_batch(
    cfg: &TrainConfig,
    images: &[(String, ImageTensor)],
    captions: &BTreeMap<String, CaptionRecord>,
    sampler: &CropSampler,
    rng: &mut ChaCha20Rng,
) -> Result<Batch> {
    let (l, d) = (cfg.saipe.query_count, cfg.saipe.embed_dim);
    let mut clean = Vec::with_capacity(cfg.batch);
    let mut degraded = Vec::with_capacity(cfg.batch);
    let mut e_text = Arr::zeros(ndarray::IxDyn(&[cfg.batch, l, d]));
    for b in 0..cfg.batch {
        let idx = rng.gen_range(0..images.len());
        let (id, img) = &images[idx];
        let crop = sampler.sample(img, rng)?;
        let qf = rng.gen_range(u32::from(cfg.qf_range[0])..=u32::from(cfg.qf_range[1]));
        degraded.push(degrade(&crop, qf, Subsample::S420)?);
        clean.push(crop);
        let emb = &captions[id].embedding;
        for i in 0..l {
            for j in 0..d {
                e_text[[b, i, j]] = emb[[i, j]];
            }
        }
    }
    Ok(Batch {
        x_h: Tensor::constant(images_to_nchw(&clean)),
        x_l: Tensor::constant(images_to_nchw(&degraded)),
        e_text: Tensor::constant(e_text),
    })
}

fn ckpt_meta_step(ckpt: &crate::ckpt::Checkpoint) -> Result<u64> {
    ckpt.meta
        .get("step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("checkpoint meta lacks a step count".into()))
}

/// Train the prompt extractor. `resume` continues from one of this
/// function's own checkpoints; steps, optimizer moments and parameters
/// all restore exactly, so an interrupted run and a straight-through
/// run log identical rows past the restore point.
pub fn run_stage1(
    cfg: &TrainConfig,
    images: &[(String, ImageTensor)],
    captions: &BTreeMap<String, CaptionRecord>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<StageReport> {
    if cfg.stage != Stage::Saipe {
        return Err(Error::Domain(format!(
            "stage-1 runner got a {:?} config",
            cfg.stage
        )));
    }
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Domain("no training images".into()));
    }
    check_captions(images, captions, cfg.saipe.query_count, cfg.saipe.embed_dim)?;
    std::fs::create_dir_all(out_dir)?;

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let model = Saipe::new(&mut store, &cfg.saipe, &mut init_rng)?;
    let mut opt = Optimizer::new(cfg.opt_config())?;

    let mut start_step = 0u64;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        ckpt.expect_kind("saipe")?;
        ckpt.expect_config_hash(&config_hash(&cfg.saipe)?, "resume")?;
        store.load_state(&ckpt.params)?;
        opt.load_state(&ckpt.extras)?;
        start_step = ckpt_meta_step(&ckpt)?;
    }

    let sampler = CropSampler::new(cfg.crop, cfg.flips);
    let lambda = if cfg.ablation.no_align {
        0.0
    } else {
        cfg.lambda_align
    };
    let trainable: Vec<Rc<crate::nn::Param>> = store.trainable();
    let ckpt_path = out_dir.join("saipe.ckpt");
    let log_path = out_dir.join("stage1_log.csv");

    let mut rows = Vec::new();
    let mut steps_run = 0u64;
    for step in start_step..cfg.iters {
        let mut rng = step_rng(cfg.seed, step, "stage1");
        let batch = sample_batch(cfg, images, captions, &sampler, &mut rng)?;

        store.begin_step();
        let f = model.encode(&batch.x_l)?;
        let rec = model.decode(&f)?;
        let e_img = model.embed_guidance(&f)?;
        let parts = saipe_loss(&rec, &batch.x_h, &e_img, &batch.e_text, lambda)?;
        let grads = parts.total.backward();
        opt.step(&trainable, &grads);

        rows.push(LogRow {
            step,
            total: parts.total.value()[[]],
            rec: parts.rec.value()[[]],
            align: parts.align.value()[[]],
        });
        steps_run += 1;

        let last = step + 1 == cfg.iters;
        if last || (step + 1) % cfg.ckpt_every == 0 {
            save_checkpoint(
                &ckpt_path,
                "saipe",
                &cfg.saipe,
                json!({ "step": step + 1, "seed": cfg.seed }),
                &store.state(),
                &opt.state(),
            )?;
        }
    }
    write_log(&log_path, &rows)?;

    Ok(StageReport {
        ckpt_path,
        log_path,
        steps_run,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_caption, synthetic_corpus};
    use crate::text::{load_caption_file, HashTextProvider, PromptProvider};

    fn tiny_cfg(iters: u64) -> TrainConfig {
        let mut cfg = TrainConfig::stage1();
        cfg.iters = iters;
        cfg.batch = 2;
        cfg.crop = 16;
        cfg.ckpt_every = 4;
        cfg
    }

    fn caption_map(
        corpus: &[(String, ImageTensor)],
        cfg: &TrainConfig,
    ) -> BTreeMap<String, CaptionRecord> {
        let provider = HashTextProvider::new(cfg.saipe.query_count, cfg.saipe.embed_dim, 7);
        corpus
            .iter()
            .map(|(id, _)| {
                let caption = synthetic_caption(id, 7);
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
    fn loss_decreases_on_tiny_corpus() {
        let cfg = tiny_cfg(8);
        let corpus = synthetic_corpus(2, 24, 24, 11);
        let captions = caption_map(&corpus, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let report = run_stage1(&cfg, &corpus, &captions, dir.path(), None).unwrap();
        assert_eq!(report.steps_run, 8);
        assert_eq!(report.rows.len(), 8);
        let first = report.rows.first().unwrap().total;
        let last = report.rows.last().unwrap().total;
        assert!(
            last < first,
            "loss should drop: first {first}, last {last}"
        );
        assert!(report.ckpt_path.is_file());
        let log = std::fs::read_to_string(&report.log_path).unwrap();
        assert!(log.starts_with("step,total,rec,align\n"));
        assert_eq!(log.lines().count(), 9);
    }

    #[test]
    fn missing_caption_fails_fast_with_ids() {
        let cfg = tiny_cfg(4);
        let corpus = synthetic_corpus(3, 24, 24, 5);
        let mut captions = caption_map(&corpus, &cfg);
        captions.remove("img_00001");
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage1(&cfg, &corpus, &captions, dir.path(), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("img_00001"), "unhelpful error: {msg}");
        assert!(msg.contains("1 image(s)"), "unhelpful error: {msg}");
    }

    #[test]
    fn wrong_embedding_shape_rejected() {
        let cfg = tiny_cfg(4);
        let corpus = synthetic_corpus(1, 24, 24, 5);
        let mut captions = caption_map(&corpus, &cfg);
        captions.get_mut("img_00000").unwrap().embedding =
            Arr::zeros(ndarray::IxDyn(&[3, cfg.saipe.embed_dim]));
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage1(&cfg, &corpus, &captions, dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("img_00000"));
    }

    #[test]
    fn no_align_zeroes_align_contribution_and_freezes_embedder() {
        let mut cfg = tiny_cfg(3);
        cfg.ablation.no_align = true;
        let corpus = synthetic_corpus(1, 24, 24, 9);
        let captions = caption_map(&corpus, &cfg);

        // Snapshot embedder params at init by rebuilding the same model.
        let mut probe_store = ParamStore::new();
        let mut probe_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        Saipe::new(&mut probe_store, &cfg.saipe, &mut probe_rng).unwrap();
        let init_emb: Vec<(String, Arr)> = probe_store
            .state()
            .into_iter()
            .filter(|(n, _)| n.starts_with("emb."))
            .collect();

        let dir = tempfile::tempdir().unwrap();
        let report = run_stage1(&cfg, &corpus, &captions, dir.path(), None).unwrap();
        for row in &report.rows {
            assert_eq!(row.total, row.rec, "align leaked into total at no_align");
        }

        let ckpt = load_checkpoint(&report.ckpt_path).unwrap();
        let trained: BTreeMap<String, Arr> = ckpt.params.into_iter().collect();
        for (name, init_val) in init_emb {
            let now = &trained[&name];
            assert_eq!(
                now, &init_val,
                "embedder param {name} moved despite a zeroed align term"
            );
        }
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let cfg = tiny_cfg(6);
        let corpus = synthetic_corpus(2, 24, 24, 3);
        let captions = caption_map(&corpus, &cfg);

        let full_dir = tempfile::tempdir().unwrap();
        let full = run_stage1(&cfg, &corpus, &captions, full_dir.path(), None).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.iters = 4;
        let half_dir = tempfile::tempdir().unwrap();
        let half = run_stage1(&half_cfg, &corpus, &captions, half_dir.path(), None).unwrap();

        let resumed_dir = tempfile::tempdir().unwrap();
        let resumed = run_stage1(
            &cfg,
            &corpus,
            &captions,
            resumed_dir.path(),
            Some(&half.ckpt_path),
        )
        .unwrap();
        assert_eq!(resumed.steps_run, 2);
        let tail: Vec<String> = full.rows[4..].iter().map(LogRow::to_csv).collect();
        let resumed_rows: Vec<String> = resumed.rows.iter().map(LogRow::to_csv).collect();
        assert_eq!(tail, resumed_rows, "resumed run diverged from straight run");
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let cfg = tiny_cfg(2);
        let corpus = synthetic_corpus(1, 24, 24, 3);
        let captions = caption_map(&corpus, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let report = run_stage1(&cfg, &corpus, &captions, dir.path(), None).unwrap();

        let mut other = cfg.clone();
        other.saipe.query_count = 4;
        let captions2 = caption_map(&corpus, &other);
        let dir2 = tempfile::tempdir().unwrap();
        let err = run_stage1(
            &other,
            &corpus,
            &captions2,
            dir2.path(),
            Some(&report.ckpt_path),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err}");
    }

    #[test]
    fn caption_file_roundtrip_feeds_training() {
        let cfg = tiny_cfg(2);
        let corpus = synthetic_corpus(2, 24, 24, 13);
        let dir = tempfile::tempdir().unwrap();
        let cap_path = dir.path().join("captions.tsv");
        let mut content = String::new();
        for (id, _) in &corpus {
            content.push_str(&format!("{id}\t{}\n", synthetic_caption(id, 7)));
        }
        std::fs::write(&cap_path, content).unwrap();
        let provider = HashTextProvider::new(cfg.saipe.query_count, cfg.saipe.embed_dim, 7);
        let captions = load_caption_file(&cap_path, &provider).unwrap();
        let report = run_stage1(&cfg, &corpus, &captions, dir.path(), None).unwrap();
        assert_eq!(report.rows.len(), 2);
    }
}
