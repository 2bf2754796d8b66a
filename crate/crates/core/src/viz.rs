//! Attention mask dumps as 8-bit greyscale PGM images.

use crate::model::{Mode, MtanModel};
use crate::tensor::{Result, Tensor, TensorError};

/// Binary (P5) PGM of an `h x w` map, min-max rescaled to 0..=255.
/// A constant map renders as mid grey.
pub fn to_pgm(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(values.len(), height * width, "map size");
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    out
}

/// One channel of a `[1, C, H, W]` tensor as a PGM.
fn channel_pgm(t: &Tensor, c: usize) -> Vec<u8> {
    let (h, w) = (t.dims()[2], t.dims()[3]);
    to_pgm(&t.data()[c * h * w..(c + 1) * h * w], h, w)
}

/// Named PGM images of the first attention block for a single `[3, H, W]`
/// image: the shared features, then each task's mask and attended features,
/// for the first `channels` channels.
pub fn first_block_images(model: &MtanModel, image: &Tensor, channels: usize) -> Result<Vec<(String, Vec<u8>)>> {
    let input = Tensor::stack(std::slice::from_ref(image))?;
    let mut session = model.session(Mode::Eval);
    let out = session.forward(&input)?;
    if out.attention.iter().all(Vec::is_empty) {
        return Err(TensorError::invalid(
            "dump_masks",
            format!("the {} variant has no attention masks", model.config().variant),
        ));
    }
    let tape = session.tape();
    let shared = tape.value(out.taps[0].p);
    let n = channels.min(shared.dims()[1]);
    let mut images = Vec::new();
    for c in 0..n {
        images.push((format!("shared_c{c}.pgm"), channel_pgm(shared, c)));
    }
    for (k, blocks) in out.attention.iter().enumerate() {
        let task = &model.config().tasks[k].name;
        let first = &blocks[0];
        for c in 0..n {
            images.push((format!("task{k}_{task}_mask_c{c}.pgm"), channel_pgm(tape.value(first.mask), c)));
            images.push((
                format!("task{k}_{task}_attended_c{c}.pgm"),
                channel_pgm(tape.value(first.attended), c),
            ));
        }
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, Variant};
    use crate::tasks::TaskSpec;

    #[test]
    fn pgm_rescales_to_full_range() {
        let img = to_pgm(&[1.0, 2.0, 3.0, 5.0], 2, 2);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(&img[header.len()..], &[0, 64, 128, 255]);
        assert_eq!(&to_pgm(&[0.3; 3], 1, 3)[b"P5\n3 1\n255\n".len()..], &[128, 128, 128]);
    }

    fn model(variant: Variant) -> MtanModel {
        let config = ModelConfig {
            variant,
            widths: vec![4, 6],
            input_channels: 3,
            tasks: vec![TaskSpec::segmentation(3), TaskSpec::depth()],
        };
        build_model(&config, 1).unwrap()
    }

    #[test]
    fn one_image_per_task_and_channel() {
        let image = Tensor::full(&[3, 8, 8], 0.5).unwrap();
        let images = first_block_images(&model(Variant::Mtan), &image, 2).unwrap();
        assert_eq!(images.len(), 2 + 2 * 2 * 2);
        assert!(images.iter().all(|(_, b)| b.len() == b"P5\n8 8\n255\n".len() + 64));
        assert_eq!(images[2].0, "task0_segmentation_mask_c0.pgm");
    }

    #[test]
    fn variants_without_masks_are_rejected() {
        let image = Tensor::full(&[3, 8, 8], 0.5).unwrap();
        assert!(first_block_images(&model(Variant::Split), &image, 2).is_err());
    }
}
