//! Ratio-controlled batch sampling, the training loop with validation-based
//! model selection, and evaluation metrics.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{io_err, stream_rng, DatasetError, DatasetManifest, Label, Split};
use crate::imaging::{self, GrayImage};
use crate::nn::{lr_schedule, sgd_momentum_step, Model, ModelSpec, NnError, Tensor, TrainConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{split} split has no {label} records")]
    EmptyClass { split: &'static str, label: &'static str },
    #[error("image {path}: {msg}")]
    BadImage { path: String, msg: String },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn label_name(label: Label) -> &'static str {
    match label {
        Label::Same => "same-family",
        Label::Different => "different-family",
    }
}

/// Per-class and average class accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc_diff: f64,
    pub acc_same: f64,
    pub avg: f64,
}

impl Metrics {
    /// From correct/total counts per class. `avg` is the single correctly
    /// rounded value of the exact rational mean, so it equals
    /// `(acc_diff + acc_same) / 2` to within one ulp and is exact whenever the
    /// mean is representable.
    pub fn from_counts(correct_diff: usize, n_diff: usize, correct_same: usize, n_same: usize) -> Option<Self> {
        if n_diff == 0 || n_same == 0 || correct_diff > n_diff || correct_same > n_same {
            return None;
        }
        let (cd, nd, cs, ns) = (correct_diff as u128, n_diff as u128, correct_same as u128, n_same as u128);
        Some(Self {
            acc_diff: correct_diff as f64 / n_diff as f64,
            acc_same: correct_same as f64 / n_same as f64,
            avg: ratio_to_f64(cd * ns + cs * nd, 2 * nd * ns),
        })
    }

    /// From true labels and predictions.
    pub fn from_predictions(labels: &[Label], predicted: &[Label]) -> Option<Self> {
        assert_eq!(labels.len(), predicted.len());
        let mut counts = [[0usize; 2]; 2];
        for (&t, &p) in labels.iter().zip(predicted) {
            counts[t.class()][usize::from(t == p)] += 1;
        }
        let total = |c: [usize; 2]| c[0] + c[1];
        Self::from_counts(counts[0][1], total(counts[0]), counts[1][1], total(counts[1]))
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "acc_diff {} acc_same {} avg {}", self.acc_diff, self.acc_same, self.avg)
    }
}

/// Correctly rounded `num / den` for integers that may exceed 2^53.
fn ratio_to_f64(num: u128, den: u128) -> f64 {
    const EXACT: u128 = 1 << 53;
    if num < EXACT && den < EXACT {
        return num as f64 / den as f64;
    }
    let g = gcd(num, den);
    let (num, den) = (num / g, den / g);
    if num < EXACT && den < EXACT {
        return num as f64 / den as f64;
    }
    // long division to 64 significant bits, then one rounding
    let int = num / den;
    let mut rem = num % den;
    let mut bits: u128 = int;
    let mut shift = 0i32;
    while bits < (1u128 << 64) {
        rem <<= 1;
        bits = (bits << 1) | u128::from(rem >= den);
        if rem >= den {
            rem -= den;
        }
        shift += 1;
    }
    let sticky = u128::from(rem != 0);
    ((bits | sticky) as f64) * 2f64.powi(-shift)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Arithmetic mean of the two per-class accuracies.
pub fn avg_class_accuracy(acc_diff: f64, acc_same: f64) -> f64 {
    (acc_diff + acc_same) / 2.0
}

/// The images and labels of one split, held as 8-bit pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub split: Split,
    side: usize,
    labels: Vec<Label>,
    pixels: Vec<u8>,
}

impl SplitData {
    pub fn from_images(split: Split, images: &[GrayImage], labels: Vec<Label>) -> Result<Self, PipelineError> {
        if images.len() != labels.len() {
            return Err(PipelineError::Mismatch(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let side = images.first().map_or(0, GrayImage::side);
        let mut pixels = Vec::with_capacity(images.len() * side * side);
        for img in images {
            if img.side() != side {
                return Err(PipelineError::Mismatch(format!("image sides {} and {side} differ", img.side())));
            }
            pixels.extend(img.pixels().iter().map(|&v| imaging::quantize(v)));
        }
        Ok(Self {
            split,
            side,
            labels,
            pixels,
        })
    }

    /// Loads every record of `split` from a materialized dataset directory.
    /// The manifest is checked for label consistency and family-disjoint
    /// split tags first.
    pub fn load(data_dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Self, PipelineError> {
        manifest.check()?;
        let side = manifest.header.image_side;
        let records: Vec<_> = manifest.records_in(split).collect();
        let images = records
            .par_iter()
            .map(|r| {
                let path = data_dir.join(&r.image_path);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let bad = |msg: String| PipelineError::BadImage {
                    path: r.image_path.clone(),
                    msg,
                };
                let img = imaging::read_pgm(&bytes).map_err(|e| bad(e.to_string()))?;
                if img.side() != side {
                    return Err(bad(format!("side {} but manifest says {side}", img.side())));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let mut data = Self::from_images(split, &images, records.iter().map(|r| r.label).collect())?;
        data.side = side;
        Ok(data)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.side * self.side;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Stacks the chosen images into an `(n, 1, side, side)` tensor scaled to
    /// `[0, 1]`.
    pub fn tensor(&self, indices: &[usize]) -> Tensor {
        let data = indices
            .iter()
            .flat_map(|&i| self.image(i).iter().map(|&p| f64::from(p) / 255.0))
            .collect();
        Tensor::from_vec(&[indices.len(), 1, self.side, self.side], data).expect("shape matches data")
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let same = self.labels.iter().filter(|&&l| l == Label::Same).count();
        (self.len() - same, same)
    }
}

/// Draws `batch * d / (d + s)` different-class and `batch * s / (d + s)`
/// same-class indices uniformly with replacement, then shuffles them.
pub fn sample_batch(
    labels: &[Label],
    batch: usize,
    ratio: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Vec<usize>, PipelineError> {
    let parts = ratio.0 + ratio.1;
    if parts == 0 || !batch.is_multiple_of(parts) {
        return Err(NnError::Config(format!("batch {batch} is not divisible by ratio sum {parts}")).into());
    }
    let pool = |label| -> Result<Vec<usize>, PipelineError> {
        let p: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if p.is_empty() {
            return Err(PipelineError::EmptyClass {
                split: "training",
                label: label_name(label),
            });
        }
        Ok(p)
    };
    let (diff, same) = (pool(Label::Different)?, pool(Label::Same)?);
    let n_diff = batch / parts * ratio.0;
    let n_same = batch / parts * ratio.1;
    let mut out: Vec<usize> = (0..n_diff).map(|_| diff[rng.random_range(0..diff.len())]).collect();
    out.extend((0..n_same).map(|_| same[rng.random_range(0..same.len())]));
    out.shuffle(rng);
    Ok(out)
}

const EVAL_CHUNK: usize = 64;

/// Argmax predictions on every record of `data`, scored per class.
pub fn evaluate(model: &Model, data: &SplitData) -> Result<Metrics, PipelineError> {
    let (n_diff, n_same) = data.class_counts();
    for (n, label) in [(n_diff, Label::Different), (n_same, Label::Same)] {
        if n == 0 {
            return Err(PipelineError::EmptyClass {
                split: data.split.as_str(),
                label: label_name(label),
            });
        }
    }
    let mut predicted = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        predicted.extend(model.predict(&data.tensor(chunk))?.into_iter().map(Label::from_class));
    }
    Ok(Metrics::from_predictions(data.labels(), &predicted).expect("both classes present"))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best validation average (or the final model when no
    /// validation ran).
    pub best: Model,
    /// Iteration count after which `best` was taken (0 = initialization).
    pub best_iter: usize,
    pub best_val: Option<Metrics>,
    /// Tab-separated step log; see [`LOG_HEADER`].
    pub log: String,
}

pub const LOG_HEADER: &str = "iter\tlr\tloss\tval_acc_diff\tval_acc_same\tval_avg";

/// Momentum SGD on ratio-controlled batches from `train_data`, validating on
/// `val` after every `cfg.validate_every` steps and keeping the model with the
/// best validation average class accuracy (ties keep the earliest).
///
/// Log rows are written once per step; floats use Rust's shortest
/// round-trip formatting, so logged metrics can be compared exactly.
pub fn train(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_data: &SplitData,
    val: Option<&SplitData>,
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    spec.validate()?;
    if train_data.split != Split::Train {
        return Err(PipelineError::Mismatch(format!("training on the {} split", train_data.split.as_str())));
    }
    if let Some(v) = val {
        if v.split != Split::Val {
            return Err(PipelineError::Mismatch(format!("validating on the {} split", v.split.as_str())));
        }
    }
    for d in std::iter::once(train_data).chain(val) {
        if !d.is_empty() && d.side() != spec.side {
            return Err(PipelineError::Mismatch(format!(
                "model side {} but {} images are {}",
                spec.side,
                d.split.as_str(),
                d.side()
            )));
        }
    }
    let val = val.filter(|v| {
        let (d, s) = v.class_counts();
        d > 0 && s > 0
    });

    let mut model = Model::init(spec, cfg.seed)?;
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut best: Option<(Model, usize, Metrics)> = None;
    let mut log = String::from(LOG_HEADER);
    log.push('\n');

    for iter in 0..cfg.iterations {
        let lr = lr_schedule(iter, cfg);
        let idx = sample_batch(
            train_data.labels(),
            cfg.batch,
            cfg.ratio,
            &mut stream_rng(cfg.seed, "batch", &[iter as u64]),
        )?;
        let labels: Vec<usize> = idx.iter().map(|&i| train_data.labels()[i].class()).collect();
        let (loss, grads) = model.loss_and_grads(&train_data.tensor(&idx), &labels)?;
        sgd_momentum_step(&mut model.params_mut(), &grads, &mut velocity, lr, cfg.momentum);

        let step = iter + 1;
        log.push_str(&format!("{step}\t{lr}\t{loss}"));
        match val {
            Some(v) if step % cfg.validate_every == 0 => {
                let m = evaluate(&model, v)?;
                log.push_str(&format!("\t{}\t{}\t{}\n", m.acc_diff, m.acc_same, m.avg));
                if best.as_ref().is_none_or(|(_, _, b)| m.avg > b.avg) {
                    best = Some((model.clone(), step, m));
                }
            }
            _ => log.push_str("\t-\t-\t-\n"),
        }
    }

    Ok(match best {
        Some((m, step, metrics)) => TrainOutcome {
            best: m,
            best_iter: step,
            best_val: Some(metrics),
            log,
        },
        None => TrainOutcome {
            best: model,
            best_iter: cfg.iterations,
            best_val: None,
            log,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::stream_rng;

    #[test]
    fn metric_examples() {
        assert_eq!(Metrics::from_counts(89, 100, 81, 100).unwrap().avg, 0.85);
        assert_eq!(avg_class_accuracy(0.84, 0.84), 0.84);
        assert_eq!(avg_class_accuracy(0.80, 0.85), 0.825);
        assert_eq!(avg_class_accuracy(1.0, 0.0), 0.5);
        let perfect = Metrics::from_counts(7, 7, 3, 3).unwrap();
        assert_eq!((perfect.acc_diff, perfect.acc_same, perfect.avg), (1.0, 1.0, 1.0));
        let constant = Metrics::from_counts(90, 90, 0, 10).unwrap();
        assert_eq!((constant.acc_diff, constant.acc_same, constant.avg), (1.0, 0.0, 0.5));
        assert!(Metrics::from_counts(0, 0, 1, 1).is_none());
    }

    #[test]
    fn constant_predictor_is_half_under_any_imbalance() {
        for (nd, ns) in [(1, 1), (290_400, 435), (3, 1_000_000), (999_983, 7)] {
            let labels: Vec<Label> = (0..nd).map(|_| Label::Different).chain((0..ns).map(|_| Label::Same)).collect();
            for guess in [Label::Different, Label::Same] {
                let m = Metrics::from_predictions(&labels, &vec![guess; labels.len()]).unwrap();
                assert_eq!(m.avg, 0.5);
            }
        }
    }

    #[test]
    fn avg_is_within_one_ulp_of_halved_sum() {
        let mut rng = stream_rng(3, "metrics", &[]);
        for _ in 0..20_000 {
            let nd = rng.random_range(1..5000usize);
            let ns = rng.random_range(1..5000usize);
            let m = Metrics::from_counts(rng.random_range(0..=nd), nd, rng.random_range(0..=ns), ns).unwrap();
            let halved = avg_class_accuracy(m.acc_diff, m.acc_same);
            let ulp = f64::EPSILON * halved.max(f64::MIN_POSITIVE);
            assert!((m.avg - halved).abs() <= ulp, "{m:?} vs {halved}");
            assert!((0.0..=1.0).contains(&m.avg));
        }
    }

    #[test]
    fn large_count_ratio_is_correctly_rounded() {
        // 2^60 + 1 over 2^61: the exact value rounds to 0.5
        assert_eq!(ratio_to_f64((1u128 << 60) + 1, 1u128 << 61), 0.5);
        assert_eq!(ratio_to_f64(1u128 << 70, 3u128 << 70), 1.0 / 3.0);
        let (a, b) = ((1u128 << 62) / 3, 1u128 << 62);
        assert_eq!(ratio_to_f64(a, b), a as f64 / b as f64);
    }

    #[test]
    fn batch_composition() {
        let labels: Vec<Label> = (0..50).map(|i| if i % 5 == 0 { Label::Same } else { Label::Different }).collect();
        let mut rng = stream_rng(1, "b", &[]);
        for (batch, ratio, want) in [(320, (4, 1), (256, 64)), (320, (1, 1), (160, 160)), (6, (2, 1), (4, 2))] {
            let idx = sample_batch(&labels, batch, ratio, &mut rng).unwrap();
            let same = idx.iter().filter(|&&i| labels[i] == Label::Same).count();
            assert_eq!((idx.len() - same, same), want);
        }
        assert!(sample_batch(&labels, 32, (4, 1), &mut rng).is_err());
        let only_diff = vec![Label::Different; 4];
        assert!(matches!(
            sample_batch(&only_diff, 4, (1, 1), &mut rng),
            Err(PipelineError::EmptyClass { .. })
        ));
    }

    #[test]
    fn batches_are_shuffled() {
        let labels = vec![Label::Different, Label::Same];
        let idx = sample_batch(&labels, 64, (1, 1), &mut stream_rng(2, "b", &[])).unwrap();
        assert!(idx[..32].contains(&1));
    }

    fn toy_split(split: Split, n: usize, seed: u64) -> SplitData {
        // same = symmetric noise, different = independent triangles
        let mut rng = stream_rng(seed, "toy", &[]);
        let side = 4;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let same = i % 2 == 0;
            let mut img = GrayImage::zeros(side);
            for r in 0..side {
                for c in r + 1..side {
                    let v = rng.random::<f64>();
                    img.set(r, c, v);
                    img.set(c, r, if same { v } else { rng.random::<f64>() });
                }
            }
            images.push(img);
            labels.push(if same { Label::Same } else { Label::Different });
        }
        SplitData::from_images(split, &images, labels).unwrap()
    }

    fn toy_cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            batch: 8,
            iterations,
            validate_every: 5,
            decay_every: 10,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_returns_init_model() {
        let spec = ModelSpec::linear(4);
        let out = train(&spec, &toy_cfg(0), &toy_split(Split::Train, 8, 1), None).unwrap();
        assert_eq!(out.log, format!("{LOG_HEADER}\n"));
        assert_eq!(out.best.save(), Model::init(&spec, 7).unwrap().save());
        assert!(out.best_val.is_none());
    }

    #[test]
    fn training_is_deterministic_and_log_replays() {
        let spec = ModelSpec::linear(4);
        let (tr, va) = (toy_split(Split::Train, 16, 1), toy_split(Split::Val, 10, 2));
        let a = train(&spec, &toy_cfg(20), &tr, Some(&va)).unwrap();
        let b = train(&spec, &toy_cfg(20), &tr, Some(&va)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best.save(), b.best.save());
        assert_eq!(a.log.lines().count(), 21);

        let best = a.best_val.unwrap();
        assert_eq!(evaluate(&a.best, &va).unwrap(), best);
        let logged: Vec<f64> = a.log.lines().nth(a.best_iter).unwrap().split('\t').skip(3).map(|v| v.parse().unwrap()).collect();
        assert_eq!(logged, vec![best.acc_diff, best.acc_same, best.avg]);
        // best is the first maximum among validated rows
        let avgs: Vec<f64> = a.log.lines().skip(1).filter_map(|l| l.split('\t').nth(5)?.parse().ok()).collect();
        let first_max = avgs.iter().position(|&v| v == best.avg).unwrap();
        assert!(avgs.iter().all(|&v| v <= best.avg));
        assert_eq!((first_max + 1) * 5, a.best_iter);
    }

    #[test]
    fn no_validation_keeps_final_model() {
        let spec = ModelSpec::linear(4);
        let out = train(&spec, &toy_cfg(3), &toy_split(Split::Train, 8, 1), Some(&toy_split(Split::Val, 4, 2))).unwrap();
        assert_eq!(out.best_iter, 3);
        assert!(out.best_val.is_none());
    }

    #[test]
    fn split_tags_are_enforced() {
        let spec = ModelSpec::linear(4);
        let test = toy_split(Split::Test, 8, 1);
        assert!(train(&spec, &toy_cfg(1), &test, None).is_err());
        let tr = toy_split(Split::Train, 8, 1);
        assert!(train(&spec, &toy_cfg(1), &tr, Some(&test)).is_err());
    }

    #[test]
    fn evaluate_rejects_single_class_split() {
        let model = Model::init(&ModelSpec::linear(4), 1).unwrap();
        let img = GrayImage::zeros(4);
        let data = SplitData::from_images(Split::Test, &[img.clone(), img], vec![Label::Same; 2]).unwrap();
        assert!(matches!(evaluate(&model, &data), Err(PipelineError::EmptyClass { .. })));
    }

    #[test]
    fn tensor_scales_pixels() {
        let img = GrayImage::filled(2, 1.0);
        let data = SplitData::from_images(Split::Train, &[GrayImage::zeros(2), img], vec![Label::Same, Label::Different]).unwrap();
        let t = data.tensor(&[1, 0]);
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(&t.data()[..4], &[1.0; 4]);
        assert_eq!(&t.data()[4..], &[0.0; 4]);
    }
}
