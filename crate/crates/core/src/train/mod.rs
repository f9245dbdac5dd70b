//! Optimisation loop and run artifacts.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/config.txt            canonical run config
//! <out>/manifest.json         seed, config hash, version, status
//! <out>/metrics.csv           one row per epoch
//! <out>/steps.csv             loss of every optimiser step
//! <out>/checkpoints/last.ckpt most recent checkpoint
//! <out>/checkpoints/best.ckpt best validation DSC so far
//! ```

mod config;
mod optim;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{RunConfig, DEFAULT_LR_DECAY_FACTOR};
pub use optim::{adamw_step, clip_global_norm, gamma_for, lr_schedule, AdamState, AdamWConfig};

use crate::data::{apply_stats, augment, foreground_stats, resample, sliding_window_infer, AugmentConfig, Segmenter, Dataset, IntensityStats, SegSample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::loss::total_loss;
use crate::metrics::{evaluate_case, mean_dsc, summarize, MetricRecord};
use crate::model::{save_checkpoint, Model};
use crate::tensor::{no_grad, Float, Tensor};

/// Downsampling factor of the auxiliary head.
pub const AUX_STRIDE: usize = 4;
/// Run artifacts are single threaded; recorded for reproducibility.
pub const WORKERS: usize = 1;

pub fn version_string() -> String {
    match option_env!("MEDFORMER_GIT_DESCRIBE") {
        Some(d) => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Spacing and intensity statistics fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocess {
    pub target_spacing: (f64, f64),
    pub stats: IntensityStats,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl Preprocess {
    /// Median spacing per axis, then pooled foreground statistics of the
    /// training cases resampled to it.
    pub fn fit(train: &[SegSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("no training cases".into()));
        }
        let target_spacing = (
            median(train.iter().map(|s| s.spacing.0).collect()),
            median(train.iter().map(|s| s.spacing.1).collect()),
        );
        let resampled = train.iter().map(|s| resample(s, target_spacing)).collect::<Result<Vec<_>>>()?;
        Ok(Preprocess {
            target_spacing,
            stats: foreground_stats(&resampled),
        })
    }

    pub fn apply(&self, s: &SegSample) -> Result<SegSample> {
        Ok(apply_stats(&resample(s, self.target_spacing)?, self.stats))
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("spacing_y".to_string(), self.target_spacing.0.to_string()),
            ("spacing_x".to_string(), self.target_spacing.1.to_string()),
            ("norm_mean".to_string(), self.stats.mean.to_string()),
            ("norm_std".to_string(), self.stats.std.to_string()),
        ])
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            let raw = meta.get(k).ok_or_else(|| Error::config(k, "missing from checkpoint metadata"))?;
            raw.parse().map_err(|e| Error::config(k, format!("`{raw}`: {e}")))
        };
        Ok(Preprocess {
            target_spacing: (get("spacing_y")?, get("spacing_x")?),
            stats: IntensityStats {
                mean: get("norm_mean")?,
                std: get("norm_std")?,
            },
        })
    }
}

/// Loss of one sample with its two weighted parts.
#[derive(Clone, Debug)]
pub struct SampleLoss<T: Float> {
    pub main: Tensor<T>,
    pub aux: Tensor<T>,
    pub total: Tensor<T>,
}

/// `total_loss(main) + w · total_loss(aux)` with the label downsampled by
/// [`AUX_STRIDE`] for the auxiliary head.
pub fn sample_loss<T: Float>(model: &Model<T>, image: &Tensor<T>, label: &LabelMap) -> Result<SampleLoss<T>> {
    let out = model.forward(image)?;
    let main = total_loss(&out.logits.softmax(0)?, label)?;
    let aux = total_loss(&out.aux_logits.softmax(0)?, &label.downsample_nearest(AUX_STRIDE)?)?;
    let w = T::of(model.cfg.aux_loss_weight);
    let total = main.add(&aux.scale(w))?;
    if total.item() != main.item() + aux.item() * w {
        return Err(Error::Contract("loss parts do not sum to the optimised loss".into()));
    }
    Ok(SampleLoss { main, aux, total })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    pub val_dsc: Option<f64>,
    pub val_hd95: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss,main_loss,aux_loss,grad_norm,val_dsc,val_hd95";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.loss,
            r.main_loss,
            r.aux_loss,
            r.grad_norm,
            opt(r.val_dsc),
            opt(r.val_hd95)
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_val_dsc(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|e| e.val_dsc)
    }
}

/// Hard prediction for one preprocessed sample.
pub fn predict<T: Float, S: Segmenter<T>>(model: &S, sample: &SegSample, window: Option<(usize, usize)>) -> Result<LabelMap> {
    let win = window.unwrap_or((sample.height(), sample.width()));
    let probs = sliding_window_infer(model, &sample.image_tensor::<T>(), win, true)?;
    LabelMap::argmax(&probs)
}

/// Per-case, per-foreground-class metrics on preprocessed samples.
pub fn evaluate<T: Float, S: Segmenter<T>>(model: &S, samples: &[SegSample], window: Option<(usize, usize)>) -> Result<Vec<MetricRecord>> {
    let _g = no_grad();
    let mut out = Vec::new();
    for s in samples {
        let pred = predict(model, s, window)?;
        out.extend(evaluate_case(&s.id, &pred, &s.label, model.num_classes(), s.spacing)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub workers: usize,
    pub status: String,
    pub epochs_run: usize,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        let ck = root.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        let d = RunDir { root: root.to_path_buf() };
        d.write("config.txt", &cfg.to_text())?;
        Ok(d)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.root.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    fn manifest(&self, cfg: &RunConfig, status: &str, report: &TrainReport) -> Result<()> {
        let m = RunManifest {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            version: version_string(),
            workers: WORKERS,
            status: status.to_string(),
            epochs_run: report.history.len(),
            best_val_dsc: report.best_val_dsc,
            best_epoch: report.best_epoch,
            stopped_early: report.stopped_early,
        };
        self.write("manifest.json", &serde_json::to_string_pretty(&m)?)
    }
}

fn steps_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// Trains `model` in place on preprocessed samples. With `out` set, writes
/// the run directory; on an abort the manifest records the failure and the
/// last checkpoint is left as it was.
pub fn train<T: Float>(
    model: &Model<T>,
    train_set: &[SegSample],
    val_set: &[SegSample],
    cfg: &RunConfig,
    pre: &Preprocess,
    out: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("no training cases".into()));
    }
    if model.cfg != cfg.model {
        return Err(Error::Contract("model was built from a different config".into()));
    }
    let dir = out.map(|p| RunDir::create(p, cfg)).transpose()?;
    let mut report = TrainReport {
        history: Vec::new(),
        step_losses: Vec::new(),
        best_val_dsc: None,
        best_epoch: None,
        stopped_early: false,
    };
    if let Some(d) = &dir {
        d.manifest(cfg, "running", &report)?;
    }
    let result = train_loop(model, train_set, val_set, cfg, pre, dir.as_ref(), &mut report);
    if let Some(d) = &dir {
        let status = match &result {
            Ok(()) => "completed".to_string(),
            Err(e) => format!("aborted: {e}"),
        };
        d.write("metrics.csv", &metrics_csv(&report.history))?;
        d.write("steps.csv", &steps_csv(&report.step_losses))?;
        d.manifest(cfg, &status, &report)?;
    }
    result.map(|()| report)
}

fn train_loop<T: Float>(
    model: &Model<T>,
    train_set: &[SegSample],
    val_set: &[SegSample],
    cfg: &RunConfig,
    pre: &Preprocess,
    dir: Option<&RunDir>,
    report: &mut TrainReport,
) -> Result<()> {
    let params: Vec<(String, Tensor<T>)> = model.named_parameters().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let mut state = AdamState::new(&params);
    // data order and augmentation use their own stream so they do not depend
    // on how many draws model initialisation took
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let aug = AugmentConfig {
        crop: cfg.crop,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.lr, cfg.lr_gamma, epoch);
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_main, mut sum_aux, mut sum_norm) = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = if cfg.augment {
                    augment(&train_set[i], &aug, &mut rng)?
                } else if let Some((h, w)) = cfg.crop {
                    crate::data::crop(&train_set[i], 0, 0, h, w)?
                } else {
                    train_set[i].clone()
                };
                let l = sample_loss(model, &s.image_tensor::<T>(), &s.label)?;
                let total = l.total.item().as_f64();
                if !total.is_finite() {
                    return Err(Error::NonFinite(format!("loss at epoch {epoch}, case {}", s.id)));
                }
                let g = l.total.backward()?;
                let scale = 1.0 / batch.len() as f64;
                for ((_, t), acc) in params.iter().zip(grads.iter_mut()) {
                    if let Some(gv) = g.get(t) {
                        acc.iter_mut().zip(gv).for_each(|(a, &b)| *a += b.as_f64() * scale);
                    }
                }
                batch_loss += total * scale;
                sum_total += total;
                sum_main += l.main.item().as_f64();
                sum_aux += l.aux.item().as_f64();
            }
            if cfg.clip_norm > 0.0 {
                sum_norm += clip_global_norm(&mut grads, cfg.clip_norm);
            } else {
                sum_norm += grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            }
            adamw_step(&params, &grads, &mut state, lr, &cfg.adam)?;
            report.step_losses.push(batch_loss);
            steps += 1;
        }
        let n = train_set.len() as f64;
        let is_last = epoch + 1 == cfg.epochs;
        let mut row = EpochMetrics {
            epoch,
            lr,
            loss: sum_total / n,
            main_loss: sum_main / n,
            aux_loss: sum_aux / n,
            grad_norm: sum_norm / steps as f64,
            val_dsc: None,
            val_hd95: None,
        };
        let mut improved = false;
        if !val_set.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || is_last) {
            let recs = evaluate(model, val_set, cfg.window)?;
            let dsc = mean_dsc(&recs);
            let hd: Vec<f64> = summarize(&recs).iter().map(|s| s.mean_hd95).collect();
            row.val_dsc = Some(dsc);
            row.val_hd95 = Some(hd.iter().sum::<f64>() / hd.len() as f64);
            if report.best_val_dsc.is_none_or(|b| dsc > b) {
                report.best_val_dsc = Some(dsc);
                report.best_epoch = Some(epoch);
                improved = true;
            }
        }
        report.history.push(row);
        let stop = cfg.early_stop_dsc.is_some_and(|t| report.history.last().and_then(|r| r.val_dsc).is_some_and(|d| d >= t));
        if let Some(d) = dir {
            let mut meta = pre.to_meta();
            meta.insert("epoch".into(), epoch.to_string());
            meta.insert("config_hash".into(), cfg.hash());
            if (epoch + 1) % cfg.checkpoint_every == 0 || is_last || stop {
                save_checkpoint(&d.checkpoint("last.ckpt"), model, &meta)?;
            }
            if improved {
                save_checkpoint(&d.checkpoint("best.ckpt"), model, &meta)?;
            }
            d.write("metrics.csv", &metrics_csv(&report.history))?;
        }
        if stop {
            report.stopped_early = true;
            break;
        }
    }
    Ok(())
}

/// Loads the `train` and `val` splits of `dataset`, fits preprocessing on
/// `train`, builds the model from `cfg.seed` and trains it.
pub fn run_training(cfg: &RunConfig, dataset: &Dataset, out: &Path) -> Result<(Model<f32>, TrainReport)> {
    if cfg.model.num_classes != dataset.num_classes() {
        return Err(Error::config(
            "num_classes",
            format!("config has {}, dataset has {}", cfg.model.num_classes, dataset.num_classes()),
        ));
    }
    let raw_train = dataset.load_split("train")?;
    let raw_val = if dataset.entries("val").is_empty() {
        Vec::new()
    } else {
        dataset.load_split("val")?
    };
    let pre = Preprocess::fit(&raw_train)?;
    let tr = raw_train.iter().map(|s| pre.apply(s)).collect::<Result<Vec<_>>>()?;
    let va = raw_val.iter().map(|s| pre.apply(s)).collect::<Result<Vec<_>>>()?;
    let model = Model::build(&cfg.model, cfg.seed)?;
    let report = train(&model, &tr, &va, cfg, &pre, Some(out))?;
    Ok((model, report))
}
