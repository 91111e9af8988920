//! Segmentation metrics: per-class Dice, average Hausdorff and HD95 over
//! 4-adjacency boundaries, and per-class reports over a dataset.
//!
//! A metric that is undefined for a sample (Dice with both masks empty, a
//! Hausdorff statistic with either mask empty) is `None` and is skipped when
//! averaging; absent classes never count as perfect.

mod distance;
mod report;

pub use distance::{average_hausdorff, boundary, boundary_distances, hausdorff, hd95, squared_distance_transform};
pub use report::{ClassSummary, EvalReport};

use crate::data::{stack, Sample};
use crate::kernels::{map_indexed, Exec};
use crate::model::Model;
use crate::{Error, Result, Scalar};

/// Dice of every class `0..k`: `2|P∩T| / (|P| + |T|)`, `None` when the
/// class is absent from both maps.
pub fn dice_per_class(pred: &[u8], truth: &[u8], k: usize) -> Result<Vec<Option<f64>>> {
    check_maps(pred, truth, k)?;
    let (mut inter, mut p, mut t) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&a, &b) in pred.iter().zip(truth) {
        p[a as usize] += 1;
        t[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
    }
    Ok((0..k)
        .map(|c| {
            let denom = p[c] + t[c];
            (denom > 0).then(|| 2.0 * inter[c] as f64 / denom as f64)
        })
        .collect())
}

fn check_maps(pred: &[u8], truth: &[u8], k: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c as usize >= k) {
        return Err(Error::invalid("metrics", format!("class index {c} not below {k}")));
    }
    Ok(())
}

/// Metrics of one class on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub dice: Option<f64>,
    pub ahd: Option<f64>,
    pub hd95: Option<f64>,
}

/// Per-class metrics of one `[h, w]` prediction against its truth, for
/// classes `0..k`.
pub fn sample_metrics(pred: &[u8], truth: &[u8], height: usize, width: usize, k: usize) -> Result<Vec<ClassMetrics>> {
    if pred.len() != height * width {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![height, width],
            rhs: vec![pred.len()],
        });
    }
    let dice = dice_per_class(pred, truth, k)?;
    Ok((0..k)
        .map(|c| {
            let a: Vec<bool> = pred.iter().map(|&v| v as usize == c).collect();
            let b: Vec<bool> = truth.iter().map(|&v| v as usize == c).collect();
            let distances = boundary_distances(&a, &b, height, width);
            ClassMetrics {
                dice: dice[c],
                ahd: distances
                    .as_ref()
                    .map(|(ab, ba)| distance::mean(ab).max(distance::mean(ba))),
                hd95: distances.map(|(ab, ba)| distance::percentile_95(ab.into_iter().chain(ba).collect())),
            }
        })
        .collect())
}

/// Scores predicted maps against the truth masks of `samples`, in sample
/// order. Per-sample work runs in parallel; the reduction is ordered.
pub fn evaluate_predictions(preds: &[Vec<u8>], samples: &[Sample], k: usize, exec: Exec) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if preds.len() != samples.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} predictions for {} samples", preds.len(), samples.len()),
        ));
    }
    let per_sample = map_indexed(exec, samples.len(), |i| {
        let s = &samples[i];
        sample_metrics(&preds[i], &s.mask, s.height(), s.width(), k)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(&per_sample))
}

/// Runs `model` in inference mode over `samples` in batches of
/// `batch_size` and scores the argmax predictions.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    let preds = predict_all(model, samples, batch_size)?;
    evaluate_predictions(&preds, samples, model.config().num_classes, Exec::default())
}

/// Argmax maps of every sample, in order.
pub fn predict_all<T: Scalar>(model: &Model<T>, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(batch_size) {
        let batch = stack(samples, chunk)?;
        let maps = model.predict(&batch.images.cast())?;
        let plane = maps.len() / chunk.len();
        out.extend(maps.chunks(plane).map(<[u8]>::to_vec));
    }
    Ok(out)
}
