use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit rendering of one probability plane: `round(255 p)`.
pub fn probability_to_gray8<T: Scalar>(prob: &Tensor<T>, n: usize) -> Vec<u8> {
    prob.channel_plane(n, 0)
        .iter()
        .map(|&p| (p.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Binary mask of one probability plane: 255 where `p >= 0.5`, else 0.
pub fn mask_to_gray8<T: Scalar>(prob: &Tensor<T>, n: usize) -> Vec<u8> {
    let half = T::from_f64_lossy(0.5);
    prob.channel_plane(n, 0)
        .iter()
        .map(|&p| if p >= half { 255 } else { 0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn rounding_and_threshold() {
        let p = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 0.5, 0.499, 1.0]).unwrap();
        assert_eq!(probability_to_gray8(&p, 0), [0, 128, 127, 255]);
        assert_eq!(mask_to_gray8(&p, 0), [0, 255, 0, 255]);
    }
}
