use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::{cue_masks, TrainOutcome};
use crate::data::{resize_bilinear, Dataset};
use crate::error::{ensure, Result};
use crate::model::{GuidedNet, ModelConfig};
use crate::objectives::{EvalSample, MetricsReport};
use crate::tensor::Tensor;

/// Score every sample in inference mode; positives carry their cue masks.
pub fn score_dataset(net: &GuidedNet, ds: &Dataset, batch_size: usize) -> Result<Vec<EvalSample>> {
    ensure!(
        ds.input_size == net.config().input_size,
        "dataset images are {0}x{0} but the model expects {1}x{1}",
        ds.input_size,
        net.config().input_size
    );
    let feat = net.feature_size();
    let cues = cue_masks(ds, feat)?;
    let plane = feat * feat;
    let mut out = Vec::with_capacity(ds.len());
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let parts: Vec<Tensor> = chunk.iter().map(|&i| ds.samples[i].tensor()).collect();
        let pred = net.predict(&Tensor::stack(&parts)?)?;
        for (k, &i) in chunk.iter().enumerate() {
            out.push(EvalSample {
                score: pred.y_pred[k],
                label: ds.samples[i].label,
                activation: pred.activation.data()[k * plane..(k + 1) * plane].to_vec(),
                cue_mask: cues[i].as_ref().map(|m| m.to_f64()),
            });
        }
    }
    Ok(out)
}

/// AUROC, operating point and AIR of `net` on `ds`.
pub fn evaluate(net: &GuidedNet, ds: &Dataset) -> Result<MetricsReport> {
    let samples = score_dataset(net, ds, 64)?;
    let report = MetricsReport::compute(&samples);
    if report.auroc.is_none() {
        log::warn!("test set has a single class; AUROC and the operating point are undefined");
    }
    Ok(report)
}

/// Guided (lambda as configured, at least 1 when zero) versus unguided
/// (lambda = 0) results for one finding, laid out as `With` / `Without`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub finding: String,
    pub lambda: f64,
    pub seed: u64,
    pub with_guidance: MetricsReport,
    pub without_guidance: MetricsReport,
    pub best_epoch_with: usize,
    pub best_epoch_without: usize,
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plain-text table: metrics as column pairs, one row for the finding.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let (w, o) = (&self.with_guidance, &self.without_guidance);
        let mut s = String::new();
        s.push_str(&format!(
            "{:<28} {:^17} {:^17} {:^17} {:^17} {:^17}\n",
            "", "AUROC", "Sensitivity", "Specificity", "AIR (TP)", "AIR (FN)"
        ));
        s.push_str(&format!(
            "{:<28}{}\n",
            "Finding",
            " With     Without ".repeat(5)
        ));
        s.push_str(&format!(
            "{:<28} {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            self.finding,
            f(w.auroc),
            f(o.auroc),
            f(w.sensitivity),
            f(o.sensitivity),
            f(w.specificity),
            f(o.specificity),
            f(w.air_tp),
            f(o.air_tp),
            f(w.air_fn),
            f(o.air_fn),
        ));
        s
    }
}

pub struct CompareOutcome {
    pub report: CompareReport,
    pub guided: TrainOutcome,
    pub unguided: TrainOutcome,
}

/// Train the same architecture from the same seed twice, differing only in
/// lambda, and evaluate both on `test`.
pub fn compare_guided_unguided(
    model: &ModelConfig,
    config: &TrainConfig,
    derivation: &Dataset,
    validation: &Dataset,
    test: &Dataset,
) -> Result<CompareOutcome> {
    ensure!(config.lambda > 0.0, "the guided run needs lambda > 0");
    let guided_cfg = config.clone();
    let unguided_cfg = TrainConfig {
        lambda: 0.0,
        ..config.clone()
    };
    let guided = super::trainer::train(model, &guided_cfg, derivation, validation)?;
    let unguided = super::trainer::train(model, &unguided_cfg, derivation, validation)?;
    let report = CompareReport {
        finding: test.finding.clone(),
        lambda: config.lambda,
        seed: config.seed,
        with_guidance: evaluate(&guided.net, test)?,
        without_guidance: evaluate(&unguided.net, test)?,
        best_epoch_with: guided.history.best_epoch,
        best_epoch_without: unguided.history.best_epoch,
    };
    Ok(CompareOutcome {
        report,
        guided,
        unguided,
    })
}

pub const BLUR_KERNEL: usize = 32;
pub const BLUR_SIGMA: f64 = 8.0;
pub const OVERLAY_OPACITY: f64 = 0.5;

/// Symmetric weights for a 32-tap Gaussian whose taps sit at half-pixel
/// offsets, folded onto the 33 integer offsets `-16..=16` by linear
/// interpolation.
fn blur_weights() -> Vec<f64> {
    let half = BLUR_KERNEL as f64 / 2.0;
    let mut w = vec![0.0; BLUR_KERNEL + 1];
    for k in 0..BLUR_KERNEL {
        let o = k as f64 - half + 0.5;
        let g = (-o * o / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
        let lo = (o - 0.5 + half) as usize;
        w[lo] += 0.5 * g;
        w[lo + 1] += 0.5 * g;
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

fn blur_axis(src: &[f64], w: usize, h: usize, horizontal: bool, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let d = j as isize - r;
                let (sx, sy) = if horizontal {
                    ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                };
                acc += kv * src[sy * w + sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Heat map of an activation map at image resolution, in `[0,1]`: bilinear
/// upscale, Gaussian blur, min-max normalization. A constant map yields
/// all zeros.
pub fn activation_heat(activation: &Tensor, width: usize, height: usize) -> Result<Vec<f64>> {
    let (fh, fw) = match *activation.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
        ref s => {
            return Err(crate::Error::contract(format!(
                "activation map must be [F,F], [1,F,F] or [1,1,F,F], got {s:?}"
            )))
        }
    };
    ensure!(
        activation.data().iter().all(|&a| a > 0.0 && a < 1.0),
        "activation values must lie in (0, 1)"
    );
    let a = Tensor::new(vec![1, fh, fw], activation.data().to_vec())?;
    let up = resize_bilinear(&a, height, width)?;
    let k = blur_weights();
    let blurred = blur_axis(&blur_axis(up.data(), width, height, true, &k), width, height, false, &k);
    let lo = blurred.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        log::warn!("constant activation map; rendering uniform zero heat");
        return Ok(vec![0.0; width * height]);
    }
    Ok(blurred.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

/// Blue-to-red colour ramp.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Overlay the activation heat map on `image` at 50% opacity.
pub fn render_activation(image: &RgbImage, activation: &Tensor) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let heat = activation_heat(activation, w, h)?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let base = image.get_pixel(x, y);
        let c = heat_color(heat[y as usize * w + x as usize]);
        Rgb(std::array::from_fn(|i| {
            let v = (1.0 - OVERLAY_OPACITY) * base[i] as f64 / 255.0 + OVERLAY_OPACITY * c[i];
            (v * 255.0).round() as u8
        }))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_weights_symmetric_and_normalized() {
        let w = blur_weights();
        assert_eq!(w.len(), 33);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..w.len() {
            assert!((w[i] - w[w.len() - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_map_renders_uniform() {
        let a = Tensor::full(vec![1, 1, 8, 8], 0.3);
        let heat = activation_heat(&a, 64, 64).unwrap();
        assert!(heat.iter().all(|&v| v == 0.0));
        let img = RgbImage::from_pixel(64, 64, Rgb([100, 50, 20]));
        let out = render_activation(&img, &a).unwrap();
        let first = *out.get_pixel(0, 0);
        assert!(out.pixels().all(|p| *p == first));
    }

    #[test]
    fn normalized_heat_spans_unit_interval() {
        let a = Tensor::from_fn(vec![32, 32], |i| 0.1 + 0.8 * ((i * 37 % 101) as f64 / 101.0));
        let heat = activation_heat(&a, 512, 512).unwrap();
        assert_eq!(heat.len(), 512 * 512);
        let lo = heat.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = heat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        let img = RgbImage::new(512, 512);
        assert_eq!(render_activation(&img, &a).unwrap().dimensions(), (512, 512));
    }

    #[test]
    fn out_of_range_activation_rejected() {
        let a = Tensor::full(vec![4, 4], 1.0);
        assert!(activation_heat(&a, 8, 8).is_err());
    }
}
