use std::time::Instant;

use serde::Serialize;

use super::block_match::block_match;
use super::ssim::ssim;
use crate::data::{batched, interior_columns, Dataset, StereoSample};
use crate::error::{Error, Result};
use crate::net::{Arch, NetworkParams};
use crate::parallel;
use crate::tensor::Tensor;
use crate::warp::warp_horizontal;

/// Where the evaluated disparity comes from.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    /// A trained network. The Siamese variant also predicts the right map
    /// and is scored on both reconstructions.
    Model {
        params: &'a NetworkParams<f32>,
        arch: Arch,
    },
    /// SAD block matching over `[0, max_disp]` with a square window.
    BlockMatch { max_disp: usize, window: usize },
    /// The ground-truth disparity; an upper bound for the pipeline.
    Oracle,
    /// Zero disparity everywhere.
    Zero,
}

impl Method<'_> {
    pub fn tag(&self) -> String {
        match self {
            Method::Model { arch, .. } => arch.to_string(),
            Method::BlockMatch { .. } => "block-match".into(),
            Method::Oracle => "oracle".into(),
            Method::Zero => "zero".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleScore {
    pub id: String,
    /// Reported score in `[0, 1]`: the clipped left SSIM, averaged with the
    /// clipped right SSIM when a right map exists.
    pub ssim: f64,
    pub ssim_left: f64,
    pub ssim_right: Option<f64>,
    /// Mean `|D − D_gt|` over interior columns, when ground truth exists.
    pub abs_disp_err_px: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkippedSample {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub n: usize,
    pub mean_ssim: f64,
    /// Population standard deviation of the per-sample scores.
    pub std_ssim: f64,
    pub mean_abs_disp_err_px: Option<f64>,
    pub per_sample: Vec<SampleScore>,
    /// Wall time per image, only when requested (it varies run to run).
    pub runtime_ms_per_image: Option<f64>,
    pub skipped: Vec<SkippedSample>,
}

/// Left-view reconstruction `warp(right, D_l)`, shaped like the view.
pub fn reconstruct_left(sample: &StereoSample, disp: &Tensor<f32>) -> Result<Tensor<f32>> {
    warp_horizontal(
        &batched(&sample.right),
        &as_batched(disp)?,
        sample.disp_sign.value(),
    )?
    .reshape(sample.right.shape())
}

/// Right-view reconstruction `warp(left, D_r)` with the opposite sign.
pub fn reconstruct_right(sample: &StereoSample, disp: &Tensor<f32>) -> Result<Tensor<f32>> {
    warp_horizontal(
        &batched(&sample.left),
        &as_batched(disp)?,
        sample.disp_sign.flipped().value(),
    )?
    .reshape(sample.left.shape())
}

fn as_batched(d: &Tensor<f32>) -> Result<Tensor<f32>> {
    match d.rank() {
        3 => Ok(batched(d)),
        4 => Ok(d.clone()),
        _ => Err(Error::InvalidShape {
            op: "disparity",
            msg: format!("expected [1, H, W], got {:?}", d.shape()),
        }),
    }
}

/// Mean absolute disparity error over the interior columns of every row.
pub fn interior_abs_error(pred: &Tensor<f32>, gt: &Tensor<f32>, d_max: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("disparity error", pred.shape(), gt.shape()));
    }
    let w = *gt.shape().last().unwrap_or(&0);
    let cols = interior_columns(w, d_max);
    if cols.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no interior columns at width {w} and d_max {d_max}"
        )));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (p, g) in pred.data().chunks_exact(w).zip(gt.data().chunks_exact(w)) {
        for x in cols.clone() {
            sum += (p[x] as f64 - g[x] as f64).abs();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

fn left_disparity(method: &Method, s: &StereoSample) -> Result<Tensor<f32>> {
    let (h, w) = (s.height(), s.width());
    match method {
        Method::Model { params, .. } => params.predict(&s.left)?.reshape([1, h, w]),
        Method::BlockMatch { max_disp, window } => block_match(s, *max_disp, *window),
        Method::Oracle => s
            .gt_disparity
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: oracle needs ground truth", s.id))),
        Method::Zero => Ok(Tensor::zeros([1, h, w])),
    }
}

/// Scores one sample. `d_max` sets the interior margin for the disparity
/// error.
pub fn score_sample(method: &Method, s: &StereoSample, d_max: f64) -> Result<SampleScore> {
    let d_l = left_disparity(method, s)?;
    let left_recon = reconstruct_left(s, &d_l)?;
    let ssim_left = ssim(&s.left, &left_recon)?;
    let ssim_right = match method {
        Method::Model {
            params,
            arch: Arch::Siamese,
        } => {
            let d_r = params.predict(&s.right)?;
            Some(ssim(&s.right, &reconstruct_right(s, &d_r)?)?)
        }
        _ => None,
    };
    let clip = |v: f64| v.clamp(0.0, 1.0);
    let score = match ssim_right {
        Some(r) => 0.5 * (clip(ssim_left) + clip(r)),
        None => clip(ssim_left),
    };
    let abs_disp_err_px = match &s.gt_disparity {
        Some(gt) => Some(interior_abs_error(&d_l, gt, d_max)?),
        None => None,
    };
    Ok(SampleScore {
        id: s.id.clone(),
        ssim: score,
        ssim_left,
        ssim_right,
        abs_disp_err_px,
    })
}

fn assemble(
    method: &Method,
    results: Vec<(String, Result<SampleScore>)>,
    elapsed_ms: Option<f64>,
) -> Result<EvalReport> {
    let mut per_sample = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(s) => per_sample.push(s),
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped.push(SkippedSample {
                    id,
                    error: e.to_string(),
                });
            }
        }
    }
    per_sample.sort_by(|a, b| a.id.cmp(&b.id));
    skipped.sort_by(|a, b| a.id.cmp(&b.id));
    let n = per_sample.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "no samples could be evaluated ({} skipped)",
            skipped.len()
        )));
    }
    let mean_ssim = per_sample.iter().map(|s| s.ssim).sum::<f64>() / n as f64;
    let var = per_sample
        .iter()
        .map(|s| (s.ssim - mean_ssim).powi(2))
        .sum::<f64>()
        / n as f64;
    let errs: Vec<f64> = per_sample
        .iter()
        .filter_map(|s| s.abs_disp_err_px)
        .collect();
    let mean_abs_disp_err_px =
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
    Ok(EvalReport {
        method: method.tag(),
        n,
        mean_ssim,
        std_ssim: var.sqrt(),
        mean_abs_disp_err_px,
        per_sample,
        runtime_ms_per_image: elapsed_ms.map(|ms| ms / n as f64),
        skipped,
    })
}

/// Scores in-memory samples, in parallel across samples.
pub fn evaluate_samples(
    method: &Method,
    samples: &[StereoSample],
    d_max: f64,
    timing: bool,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let start = Instant::now();
    let results = parallel::map_indices(samples.len(), |k| {
        (
            samples[k].id.clone(),
            score_sample(method, &samples[k], d_max),
        )
    });
    let elapsed = timing.then(|| start.elapsed().as_secs_f64() * 1e3);
    assemble(method, results, elapsed)
}

/// Scores every sample of a dataset directory. Samples that fail to load or
/// score are listed in [`EvalReport::skipped`].
pub fn evaluate(method: &Method, dataset: &Dataset, timing: bool) -> Result<EvalReport> {
    let ids = &dataset.manifest.ids;
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if let Method::Model { params, .. } = method {
        if (params.d_max - dataset.manifest.d_max).abs() > 1e-9 {
            log::warn!(
                "network d_max {} differs from dataset d_max {}",
                params.d_max,
                dataset.manifest.d_max
            );
        }
    }
    let d_max = dataset.manifest.d_max;
    let start = Instant::now();
    let results = parallel::map_indices(ids.len(), |k| {
        let r = dataset
            .load_sample(&ids[k])
            .and_then(|s| score_sample(method, &s, d_max));
        (ids[k].clone(), r)
    });
    let elapsed = timing.then(|| start.elapsed().as_secs_f64() * 1e3);
    assemble(method, results, elapsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSpec, SynthParams};

    fn samples(kind: &str, n: usize) -> Vec<StereoSample> {
        DatasetSpec {
            params: SynthParams {
                width: 64,
                height: 32,
                ..SynthParams::default()
            },
            kind: kind.parse().unwrap(),
            count: n,
            seed: 5,
            split: "test".into(),
        }
        .samples()
        .unwrap()
    }

    #[test]
    fn oracle_beats_zero() {
        let s = samples("constant:4", 4);
        let oracle = evaluate_samples(&Method::Oracle, &s, 12.0, false).unwrap();
        let zero = evaluate_samples(&Method::Zero, &s, 12.0, false).unwrap();
        assert!(oracle.mean_ssim > 0.95, "{}", oracle.mean_ssim);
        assert!(zero.mean_ssim < oracle.mean_ssim);
        assert_eq!(oracle.mean_abs_disp_err_px, Some(0.0));
        assert_eq!(zero.mean_abs_disp_err_px, Some(4.0));
    }

    #[test]
    fn report_is_consistent() {
        let s = samples("mixed", 6);
        let r = evaluate_samples(
            &Method::BlockMatch {
                max_disp: 11,
                window: 9,
            },
            &s,
            12.0,
            false,
        )
        .unwrap();
        assert_eq!(r.n, 6);
        let mean = r.per_sample.iter().map(|p| p.ssim).sum::<f64>() / 6.0;
        assert!((mean - r.mean_ssim).abs() < 1e-12);
        assert!(r.per_sample.windows(2).all(|w| w[0].id < w[1].id));
        assert!(r.runtime_ms_per_image.is_none());
        assert_eq!(r.method, "block-match");
    }

    #[test]
    fn empty_is_an_error() {
        assert!(evaluate_samples(&Method::Zero, &[], 12.0, false).is_err());
    }

    #[test]
    fn block_match_on_constant_four() {
        let s = samples("constant:4", 3);
        let r = evaluate_samples(
            &Method::BlockMatch {
                max_disp: 11,
                window: 9,
            },
            &s,
            12.0,
            false,
        )
        .unwrap();
        assert!(r.mean_abs_disp_err_px.unwrap() < 0.1);
    }

    #[test]
    fn siamese_scores_both_views() {
        let net = NetworkParams::<f32>::build(0.0625, 12.0, 3).unwrap();
        let s = samples("constant:2", 2);
        let m = Method::Model {
            params: &net,
            arch: Arch::Siamese,
        };
        let r = evaluate_samples(&m, &s, 12.0, false).unwrap();
        assert!(r.per_sample.iter().all(|p| p.ssim_right.is_some()));
        let b = Method::Model {
            params: &net,
            arch: Arch::Basic,
        };
        let rb = evaluate_samples(&b, &s, 12.0, false).unwrap();
        assert!(rb.per_sample.iter().all(|p| p.ssim_right.is_none()));
        assert_eq!(rb.per_sample[0].ssim_left, r.per_sample[0].ssim_left);
    }
}
