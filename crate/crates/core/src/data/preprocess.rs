use crate::error::Result;
use crate::nn::kernels::{bilinear_resize, nearest_taps};
use crate::tensor::Tensor;

use super::Sample;

const MIN_CHANNEL_MEAN: f64 = 1e-6;

/// Gray-world colour constancy: every channel is scaled so its mean equals
/// the mean of the channel means, then clipped to `[0, 1]`. Channels that are
/// essentially black are left alone.
pub fn gray_world_normalize(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let mut out = image.clone();
    for n in 0..s.batch {
        let means: Vec<f64> = (0..s.channels)
            .map(|c| image.channel_plane(n, c).iter().map(|&v| v as f64).sum::<f64>() / s.plane() as f64)
            .collect();
        let gray = means.iter().sum::<f64>() / means.len() as f64;
        for (c, &m) in means.iter().enumerate() {
            if m < MIN_CHANNEL_MEAN {
                log::warn!("gray world: channel {c} mean {m:e} too small, left unscaled");
                continue;
            }
            let k = gray / m;
            let off = out.offset(n, c, 0, 0);
            for v in &mut out.data_mut()[off..off + s.plane()] {
                *v = ((*v as f64 * k).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    out
}

/// Resizes to `target x target`: bilinear for the image, nearest for the mask.
pub fn resize(sample: &Sample, target: usize) -> Result<Sample> {
    let (h, w) = sample.size();
    if (h, w) == (target, target) {
        return Ok(sample.clone());
    }
    let image = bilinear_resize(&sample.image, target, target).map(|v| v.clamp(0.0, 1.0));
    let ty = nearest_taps(h, target);
    let tx = nearest_taps(w, target);
    let mask = Tensor::from_fn(sample.mask.shape().with_spatial(target, target), |[n, c, y, x]| {
        sample.mask.at(n, c, ty[y], tx[x])
    });
    Sample::new(sample.id.clone(), image, mask)
}

/// The fixed input pipeline: gray world, then resize.
pub fn preprocess(sample: &Sample, target: usize) -> Result<Sample> {
    let normalized = Sample {
        image: gray_world_normalize(&sample.image),
        ..sample.clone()
    };
    resize(&normalized, target)
}
