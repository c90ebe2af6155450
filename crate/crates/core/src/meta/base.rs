//! Supervised pretraining on seen categories and support-labelmap
//! generation for episodic training.

use std::path::Path;

use fewmark_autodiff::{grad, ops, seed_chain, sgd_step, ParamSet, Rng, Tape, Tensor};

use crate::data::{render_sample, Category, Labelmap, Registry, RenderConfig, Sample};
use crate::error::{Error, Result};
use crate::model::{
    detector_heatmaps, encode, heatmap_loss, init_detector_rows, init_encoder, paramset_bytes,
    paramset_from_bytes, ModelConfig,
};

/// Where pooled support features take their landmark labelmaps from during
/// episodic training: the base model's own predictions, or ground truth.
/// Evaluation always uses ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelmapSource {
    Predicted,
    GroundTruth,
}

impl LabelmapSource {
    pub fn parse(s: &str) -> Result<LabelmapSource> {
        match s {
            "predicted" => Ok(LabelmapSource::Predicted),
            "ground_truth" => Ok(LabelmapSource::GroundTruth),
            other => Err(Error::usage(format!(
                "unknown labelmap source {other:?} (expected predicted or ground_truth)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LabelmapSource::Predicted => "predicted",
            LabelmapSource::GroundTruth => "ground_truth",
        }
    }
}

/// Contiguous detector-row block owned by one category in the base model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub category_id: usize,
    pub offset: usize,
    pub len: usize,
}

/// Jointly pretrained encoder and all-category detector matrix. Seen
/// categories own fixed contiguous row blocks, in ascending id order.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub encoder: ParamSet,
    pub detectors: Tensor,
    pub blocks: Vec<Block>,
}

impl BaseModel {
    pub fn total_landmarks(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    pub fn block(&self, category_id: usize) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.category_id == category_id)
            .ok_or_else(|| {
                Error::data(format!(
                    "category {category_id} has no detector block in the base model"
                ))
            })
    }

    /// The category's detector rows as an `(n, feat_dim)` matrix.
    pub fn category_detectors(&self, category_id: usize) -> Result<Tensor> {
        let b = self.block(category_id)?;
        let rows: Vec<usize> = (b.offset..b.offset + b.len).collect();
        Ok(ops::gather_rows(&self.detectors, &rows)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = ParamSet::new();
        for (name, t) in self.encoder.iter() {
            out.insert(&format!("enc.{name}"), t.detach())?;
        }
        out.insert("detectors", self.detectors.detach())?;
        let seen: Vec<f64> = self.blocks.iter().map(|b| b.category_id as f64).collect();
        out.insert("seen", Tensor::from_vec(&[seen.len()], seen)?)?;
        Ok(paramset_bytes(&out))
    }

    pub fn from_bytes(bytes: &[u8], registry: &Registry) -> Result<BaseModel> {
        let stored = paramset_from_bytes(bytes)?;
        let mut encoder = ParamSet::new();
        for (name, t) in stored.iter() {
            if let Some(rest) = name.strip_prefix("enc.") {
                encoder.insert(rest, t.clone())?;
            }
        }
        let detectors = stored.expect("detectors")?.clone();
        let seen: Vec<usize> = stored
            .expect("seen")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let blocks = category_blocks(registry, &seen)?;
        let total: usize = blocks.iter().map(|b| b.len).sum();
        if detectors.rank() != 2 || detectors.dims()[0] != total {
            return Err(Error::data(format!(
                "base checkpoint: detector matrix {:?} does not cover {total} landmarks",
                detectors.dims()
            )));
        }
        Ok(BaseModel {
            encoder,
            detectors,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path, registry: &Registry) -> Result<BaseModel> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        BaseModel::from_bytes(&bytes, registry)
    }
}

/// Assigns each seen category a contiguous block of detector rows, ascending
/// by id.
pub fn category_blocks(registry: &Registry, seen: &[usize]) -> Result<Vec<Block>> {
    if seen.is_empty() {
        return Err(Error::data("seen category list is empty"));
    }
    let mut ids = seen.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != seen.len() {
        return Err(Error::data("seen category list has duplicates"));
    }
    let mut blocks = Vec::with_capacity(ids.len());
    let mut offset = 0;
    for id in ids {
        let len = registry.get(id)?.landmark_count();
        blocks.push(Block {
            category_id: id,
            offset,
            len,
        });
        offset += len;
    }
    Ok(blocks)
}

/// Base-pretraining schedule.
#[derive(Clone, Copy, Debug)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Rendered samples per SGD step.
    pub batch: usize,
    /// Early stop once the smoothed batch loss drops below this; 0 disables.
    pub loss_threshold: f64,
}

impl BaseTrainConfig {
    pub fn standard() -> BaseTrainConfig {
        BaseTrainConfig {
            steps: 600,
            lr: 0.1,
            batch: 4,
            loss_threshold: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::usage(format!("base lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::usage("base batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate with tenfold drops at the halfway and three-quarter marks.
fn staged_lr(base: f64, step: usize, total: usize) -> f64 {
    let mut lr = base;
    if total > 0 && step >= total / 2 {
        lr *= 0.1;
    }
    if total > 0 && step >= total * 3 / 4 {
        lr *= 0.1;
    }
    lr
}

/// Pretrains the encoder and one detector row per landmark of every seen
/// category, minimizing heatmap cross-entropy on each sample's own block.
/// Returns the model and the per-step batch losses.
pub fn train_base(
    cfg: &ModelConfig,
    rc: &RenderConfig,
    registry: &Registry,
    seen: &[usize],
    tc: &BaseTrainConfig,
    seed: u64,
) -> Result<(BaseModel, Vec<f64>)> {
    cfg.validate()?;
    tc.validate()?;
    if rc.geom != cfg.geom {
        return Err(Error::data(
            "render geometry does not match the model geometry",
        ));
    }
    let blocks = category_blocks(registry, seen)?;
    for b in &blocks {
        if b.len > cfg.grid_cells() {
            return Err(Error::data(format!(
                "category {} has {} landmarks but labelmaps only address {} cells",
                b.category_id,
                b.len,
                cfg.grid_cells()
            )));
        }
    }
    let total: usize = blocks.iter().map(|b| b.len).sum();

    let mut init_rng = Rng::derive(seed, &[1]);
    let mut state = init_encoder(cfg, &mut init_rng)?;
    state.insert(
        "detectors",
        init_detector_rows(total, cfg.feat_dim, &mut init_rng)?,
    )?;

    let mut losses = Vec::with_capacity(tc.steps);
    let mut smoothed = f64::INFINITY;
    for step in 0..tc.steps {
        let mut pick_rng = Rng::derive(seed, &[2, step as u64]);
        let batch: Vec<(Block, Sample)> = (0..tc.batch)
            .map(|b| {
                let block = *pick_rng.pick(&blocks);
                let sample_seed = seed_chain(&[seed, 3, step as u64, b as u64]);
                let sample = render_sample(registry.get(block.category_id)?, rc, sample_seed)?;
                Ok((block, sample))
            })
            .collect::<Result<_>>()?;

        let tape = Tape::new();
        let watched = tape.watch_params(&state);
        let detectors = watched.expect("detectors")?;
        let mut acc: Option<Tensor> = None;
        for (block, sample) in &batch {
            let rows: Vec<usize> = (block.offset..block.offset + block.len).collect();
            let own = ops::gather_rows(detectors, &rows)?;
            let features = encode(cfg, &watched, &sample.image_tensor()?)?;
            let heatmaps = detector_heatmaps(&own, &features)?;
            let loss = heatmap_loss(&heatmaps, &sample.labelmap)?;
            acc = Some(match acc {
                Some(prev) => ops::add(&prev, &loss)?,
                None => loss,
            });
        }
        let loss = ops::scale(&acc.unwrap(), 1.0 / tc.batch as f64)?;
        let loss_value = loss.item()?;
        losses.push(loss_value);

        let grads = grad(&loss, &watched, false)?;
        state = sgd_step(&state, &grads, staged_lr(tc.lr, step, tc.steps))?;

        smoothed = if step == 0 {
            loss_value
        } else {
            0.9 * smoothed + 0.1 * loss_value
        };
        if tc.loss_threshold > 0.0 && step >= 20 && smoothed < tc.loss_threshold {
            break;
        }
    }

    let mut encoder = ParamSet::new();
    let mut detectors = None;
    for (name, t) in state.iter() {
        if name == "detectors" {
            detectors = Some(t.clone());
        } else {
            encoder.insert(name, t.clone())?;
        }
    }
    Ok((
        BaseModel {
            encoder,
            detectors: detectors.expect("inserted above"),
            blocks,
        },
        losses,
    ))
}

/// One-hot cell per heatmap channel at its argmax (ties: lowest row-major).
fn argmax_cells(heatmaps: &Tensor) -> Vec<(usize, usize)> {
    let (n, h, w) = (heatmaps.dims()[0], heatmaps.dims()[1], heatmaps.dims()[2]);
    let data = heatmaps.data();
    (0..n)
        .map(|ch| {
            let grid = &data[ch * h * w..(ch + 1) * h * w];
            let mut best = 0usize;
            for (i, &v) in grid.iter().enumerate() {
                if v > grid[best] {
                    best = i;
                }
            }
            (best / w, best % w)
        })
        .collect()
}

/// Support labelmaps for pooling: either each sample's ground truth, or the
/// base model's own detections for the category's block.
pub fn make_labelmaps(
    source: LabelmapSource,
    cfg: &ModelConfig,
    base: &BaseModel,
    category: &Category,
    samples: &[Sample],
) -> Result<Vec<Labelmap>> {
    for s in samples {
        if s.category_id != category.id {
            return Err(Error::data(format!(
                "sample from category {} mixed into a category-{} batch",
                s.category_id, category.id
            )));
        }
    }
    match source {
        LabelmapSource::GroundTruth => Ok(samples.iter().map(|s| s.labelmap.clone()).collect()),
        LabelmapSource::Predicted => {
            let rows = base.category_detectors(category.id)?;
            samples
                .iter()
                .map(|s| {
                    let features = encode(cfg, &base.encoder, &s.image_tensor()?)?;
                    let heatmaps = detector_heatmaps(&rows, &features)?;
                    Ok(Labelmap {
                        feat_h: cfg.geom.feat_h,
                        feat_w: cfg.geom.feat_w,
                        cells: argmax_cells(&heatmaps),
                    })
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::testutil::{tiny_base, tiny_model, tiny_render, tiny_seen, TINY_SEED};

    #[test]
    fn blocks_are_contiguous_and_ascending() {
        let reg = Registry::standard();
        let blocks = category_blocks(&reg, &[8, 6]).unwrap();
        assert_eq!(
            blocks,
            vec![
                Block { category_id: 6, offset: 0, len: 10 },
                Block { category_id: 8, offset: 10, len: 8 },
            ]
        );
        assert_eq!(blocks.iter().map(|b| b.len).sum::<usize>(), 18);
    }

    #[test]
    fn duplicate_or_empty_seen_rejected() {
        let reg = Registry::standard();
        assert!(category_blocks(&reg, &[]).is_err());
        assert!(category_blocks(&reg, &[6, 6]).is_err());
    }

    #[test]
    fn base_model_shapes_and_block_lookup() {
        let (base, _) = tiny_base();
        assert_eq!(base.total_landmarks(), 18);
        assert_eq!(base.detectors.dims(), &[18, tiny_model().feat_dim]);
        assert_eq!(base.category_detectors(8).unwrap().dims(), &[8, 4]);
        assert!(base.block(7).is_err());
    }

    #[test]
    fn training_loss_decreases() {
        let (_, losses) = tiny_base();
        let q = losses.len() / 4;
        let head: f64 = losses[..q].iter().sum::<f64>() / q as f64;
        let tail: f64 = losses[losses.len() - q..].iter().sum::<f64>() / q as f64;
        assert!(
            tail < head,
            "loss did not decrease: first-quarter mean {head:.4}, last-quarter mean {tail:.4}"
        );
    }

    #[test]
    fn same_seed_reproduces_checkpoint_bytes() {
        let cfg = tiny_model();
        let rc = tiny_render();
        let reg = Registry::standard();
        let tc = BaseTrainConfig { steps: 5, ..BaseTrainConfig::standard() };
        let run = |seed| train_base(&cfg, &rc, &reg, &tiny_seen(), &tc, seed).unwrap().0;
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb, pc) = (
            dir.path().join("a.fmps"),
            dir.path().join("b.fmps"),
            dir.path().join("c.fmps"),
        );
        run(TINY_SEED).save(&pa).unwrap();
        run(TINY_SEED).save(&pb).unwrap();
        run(TINY_SEED + 1).save(&pc).unwrap();
        let bytes = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(bytes(&pa), bytes(&pb));
        assert_ne!(bytes(&pa), bytes(&pc));
    }

    #[test]
    fn save_load_roundtrip() {
        let (base, _) = tiny_base();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.fmps");
        base.save(&path).unwrap();
        let back = BaseModel::load(&path, &Registry::standard()).unwrap();
        assert!(back.encoder.bit_eq(&base.encoder));
        assert!(back.detectors.bit_eq(&base.detectors));
        assert_eq!(back.blocks, base.blocks);
    }

    #[test]
    fn ground_truth_labelmaps_are_the_samples_own() {
        let (base, _) = tiny_base();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(8).unwrap();
        let s = render_sample(cat, &tiny_render(), 5).unwrap();
        let lms =
            make_labelmaps(LabelmapSource::GroundTruth, &cfg, &base, cat, &[s.clone()]).unwrap();
        assert_eq!(lms, vec![s.labelmap]);
    }

    #[test]
    fn predicted_labelmaps_are_one_hot_in_grid() {
        let (base, _) = tiny_base();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(6).unwrap();
        let samples: Vec<Sample> = (0..3)
            .map(|i| render_sample(cat, &tiny_render(), 50 + i).unwrap())
            .collect();
        let lms = make_labelmaps(LabelmapSource::Predicted, &cfg, &base, cat, &samples).unwrap();
        assert_eq!(lms.len(), 3);
        for lm in &lms {
            assert_eq!(lm.channels(), cat.landmark_count());
            for &(r, c) in &lm.cells {
                assert!(r < cfg.geom.feat_h && c < cfg.geom.feat_w);
            }
            lm.to_tensor().unwrap();
        }
    }

    #[test]
    fn unknown_category_block_rejected() {
        let (base, _) = tiny_base();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(7).unwrap();
        let s = render_sample(cat, &tiny_render(), 6).unwrap();
        assert!(
            make_labelmaps(LabelmapSource::Predicted, &cfg, &base, cat, &[s]).is_err()
        );
    }

    #[test]
    fn mixed_category_samples_rejected() {
        let (base, _) = tiny_base();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let skirt = reg.get(8).unwrap();
        let shorts_sample = render_sample(reg.get(6).unwrap(), &tiny_render(), 7).unwrap();
        assert!(make_labelmaps(
            LabelmapSource::GroundTruth,
            &cfg,
            &base,
            skirt,
            &[shorts_sample]
        )
        .is_err());
    }

    #[test]
    fn overfit_one_sample_makes_predictions_match_ground_truth() {
        // Drive the base stack onto a single noiseless sample; its own
        // detections must then reproduce the ground-truth labelmap. Runs at
        // the 32x32 geometry, where skirt landmarks occupy well-separated
        // cells of the 8x8 grid.
        let cfg = ModelConfig {
            geom: crate::data::Geometry::standard(),
            feat_dim: 8,
            predictor_hidden: 8,
            conv_channels: vec![4, 8],
        };
        let mut rc = RenderConfig::standard();
        rc.noise_sigma = 0.0;
        let reg = Registry::standard();
        let cat = reg.get(8).unwrap();
        let sample = render_sample(cat, &rc, 41).unwrap();

        let mut rng = Rng::derive(97, &[1]);
        let mut state = init_encoder(&cfg, &mut rng).unwrap();
        state
            .insert("detectors", init_detector_rows(8, cfg.feat_dim, &mut rng).unwrap())
            .unwrap();
        for _ in 0..600 {
            let tape = Tape::new();
            let watched = tape.watch_params(&state);
            let features = encode(&cfg, &watched, &sample.image_tensor().unwrap()).unwrap();
            let heatmaps =
                detector_heatmaps(watched.expect("detectors").unwrap(), &features).unwrap();
            let loss = heatmap_loss(&heatmaps, &sample.labelmap).unwrap();
            let grads = grad(&loss, &watched, false).unwrap();
            state = sgd_step(&state, &grads, 0.05).unwrap();
        }

        let mut encoder = ParamSet::new();
        for (name, t) in state.iter() {
            if name != "detectors" {
                encoder.insert(name, t.clone()).unwrap();
            }
        }
        let base = BaseModel {
            encoder,
            detectors: state.expect("detectors").unwrap().clone(),
            blocks: vec![Block { category_id: 8, offset: 0, len: 8 }],
        };
        let lms = make_labelmaps(LabelmapSource::Predicted, &cfg, &base, cat, &[sample.clone()])
            .unwrap();
        assert_eq!(lms[0], sample.labelmap);
    }

    #[test]
    fn capacity_overflow_rejected() {
        // Scheme-2 seen categories need far more rows than a 4x4 grid holds.
        let cfg = tiny_model();
        let rc = tiny_render();
        let reg = Registry::standard();
        let err = train_base(
            &cfg,
            &rc,
            &reg,
            &[0, 1, 2, 3, 4, 5],
            &BaseTrainConfig { steps: 1, ..BaseTrainConfig::standard() },
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn staged_lr_drops_twice() {
        assert_eq!(staged_lr(0.01, 0, 100), 0.01);
        assert_eq!(staged_lr(0.01, 50, 100), 0.001);
        assert!((staged_lr(0.01, 75, 100) - 0.0001).abs() < 1e-12);
    }
}
