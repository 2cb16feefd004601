//! Self-supervised rotation label augmentation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_ROTATIONS: usize = 4;

/// Rotates one `h×h` plane by 90° counter-clockwise, `turns` times.
fn rotate_plane(src: &[f64], side: usize, turns: usize, dst: &mut [f64]) {
    for i in 0..side {
        for j in 0..side {
            let (si, sj) = match turns % 4 {
                0 => (i, j),
                1 => (j, side - 1 - i),
                2 => (side - 1 - i, side - 1 - j),
                _ => (side - 1 - j, i),
            };
            dst[i * side + j] = src[si * side + sj];
        }
    }
}

/// Rotates every image of `[B, C, H, W]` by `turns` quarter turns.
pub fn rotate_batch(images: &Tensor, turns: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Config(format!("rotation needs square images, got {s:?}")));
    }
    let side = s[2];
    let plane = side * side;
    let mut out = Tensor::zeros(s);
    for (src, dst) in images.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        rotate_plane(src, side, turns, dst);
    }
    Ok(out)
}

/// Expands a batch to `4B` samples laid out as four rotation blocks
/// `[rot0 ×B | rot90 ×B | rot180 ×B | rot270 ×B]`; the copy of sample `y`
/// rotated `r` times gets label `4·y + r`.
pub fn label_augment(images: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    if images.shape().len() != 4 {
        return Err(Error::Config("label augmentation is only defined for image batches".into()));
    }
    if images.rows() != labels.len() {
        return Err(Error::Shape(format!("{} images vs {} labels", images.rows(), labels.len())));
    }
    let mut shape = images.shape().to_vec();
    shape[0] *= NUM_ROTATIONS;
    let mut data = Vec::with_capacity(images.len() * NUM_ROTATIONS);
    let mut out_labels = Vec::with_capacity(labels.len() * NUM_ROTATIONS);
    for r in 0..NUM_ROTATIONS {
        data.extend_from_slice(rotate_batch(images, r)?.data());
        out_labels.extend(labels.iter().map(|y| NUM_ROTATIONS * y + r));
    }
    Ok((Tensor::from_vec(&shape, data)?, out_labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::uniform_tensor;
    use crate::rng::stream;

    #[test]
    fn rotation_zero_is_identity_with_scaled_label() {
        let x = uniform_tensor(&[2, 3, 5, 5], 0.0, 1.0, &mut stream(1, "rot", &[]));
        let (aug, labels) = label_augment(&x, &[7, 2]).unwrap();
        assert_eq!(aug.shape(), &[8, 3, 5, 5]);
        assert_eq!(aug.gather_rows(&[0, 1]), x);
        assert_eq!(&labels[..2], &[28, 8]);
    }

    #[test]
    fn label_multiset() {
        let x = Tensor::zeros(&[3, 1, 2, 2]);
        let (_, mut labels) = label_augment(&x, &[0, 1, 5]).unwrap();
        labels.sort_unstable();
        let mut expect: Vec<usize> = [0usize, 1, 5].iter().flat_map(|y| (0..4).map(move |r| 4 * y + r)).collect();
        expect.sort_unstable();
        assert_eq!(labels, expect);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let x = uniform_tensor(&[1, 2, 6, 6], 0.0, 1.0, &mut stream(2, "rot", &[]));
        let mut y = x.clone();
        for _ in 0..4 {
            y = rotate_batch(&y, 1).unwrap();
        }
        assert_eq!(x, y);
        assert_ne!(rotate_batch(&x, 1).unwrap(), x);
    }

    #[test]
    fn quarter_turn_moves_corner() {
        // [[a, b], [c, d]] counter-clockwise → [[b, d], [a, c]]
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rotate_batch(&x, 1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn vector_data_is_a_config_error() {
        let x = Tensor::zeros(&[2, 5]);
        assert!(matches!(label_augment(&x, &[0, 1]), Err(Error::Config(_))));
    }
}
