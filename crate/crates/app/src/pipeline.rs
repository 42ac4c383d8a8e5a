//! Inference on 8-bit images. The CLI and the HTTP service both go through
//! these functions, so they produce identical pixels for identical inputs.

use std::collections::BTreeMap;

use stylebank::analysis::{kmeans_segment, masks_from_labels};
use stylebank::{reduce_labels, Error, ImageBuffer, Result, StyleBankModel, Tensor, FEATURE_STRIDE};

/// Reflection padding in the first layer needs sides above 4 pixels.
const MIN_SIDE: usize = 2 * FEATURE_STRIDE;

/// Image sides are padded up to a multiple of the feature stride (and at
/// least `MIN_SIDE`) by edge replication; results are cropped back.
fn padded_len(n: usize) -> usize {
    (n.div_ceil(FEATURE_STRIDE) * FEATURE_STRIDE).max(MIN_SIDE)
}

fn to_padded_tensor(img: &ImageBuffer) -> Tensor<f32> {
    let t = img.to_tensor();
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (padded_len(h), padded_len(w));
    if (ph, pw) == (h, w) {
        return t;
    }
    Tensor::from_fn([1, 3, ph, pw], |_, c, y, x| t.at(0, c, y.min(h - 1), x.min(w - 1)))
}

fn crop_to_image(t: &Tensor<f32>, height: usize, width: usize) -> Result<ImageBuffer> {
    let cropped = Tensor::from_fn([1, 3, height, width], |_, c, y, x| t.at(0, c, y, x));
    ImageBuffer::from_tensor(&cropped)
}

pub fn stylize(model: &StyleBankModel, img: &ImageBuffer, style: &str) -> Result<ImageBuffer> {
    let out = model.stylize(&to_padded_tensor(img), style)?;
    crop_to_image(&out, img.height(), img.width())
}

pub fn autoencode(model: &StyleBankModel, img: &ImageBuffer) -> Result<ImageBuffer> {
    let out = model.autoencode(&to_padded_tensor(img))?;
    crop_to_image(&out, img.height(), img.width())
}

/// Linear blend of banks. Returns the image and the normalized weights.
pub fn fuse(model: &StyleBankModel, img: &ImageBuffer, weights: &[(String, f32)]) -> Result<(ImageBuffer, Vec<(String, f32)>)> {
    let fused = model.fuse_linear(weights)?;
    let out = model.stylize_with(&to_padded_tensor(img), &fused.bank)?;
    let normalized = weights.iter().map(|(n, _)| n.clone()).zip(fused.weights).collect();
    Ok((crop_to_image(&out, img.height(), img.width())?, normalized))
}

/// Image-resolution label map from k-means on the encoder features.
pub struct Segmentation {
    pub labels: Vec<usize>,
    pub width: usize,
    pub height: usize,
    pub k: usize,
}

pub fn segment(model: &StyleBankModel, img: &ImageBuffer, k: usize, seed: u64) -> Result<Segmentation> {
    let features = model.encode(&to_padded_tensor(img))?;
    let clusters = kmeans_segment(&features, k, seed)?;
    let (h, w) = (img.height(), img.width());
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            labels.push(clusters.labels[(y / FEATURE_STRIDE) * clusters.width + x / FEATURE_STRIDE]);
        }
    }
    Ok(Segmentation {
        labels,
        width: w,
        height: h,
        k,
    })
}

/// Region fusion from an image-resolution label map. The map is reduced to
/// feature resolution by majority vote; every label present must be assigned.
pub fn fuse_regions(
    model: &StyleBankModel,
    img: &ImageBuffer,
    labels: &[usize],
    label_width: usize,
    label_height: usize,
    assignment: &BTreeMap<usize, String>,
) -> Result<ImageBuffer> {
    let (h, w) = (img.height(), img.width());
    if (label_width, label_height) != (w, h) || labels.len() != w * h {
        return Err(Error::Mask(format!("label map is {label_width}x{label_height}, image is {w}x{h}")));
    }
    if let Some(l) = labels.iter().find(|l| !assignment.contains_key(l)) {
        return Err(Error::Mask(format!("label {l} has no assigned style")));
    }
    let (ph, pw) = (padded_len(h), padded_len(w));
    let padded: Vec<usize> = (0..ph * pw)
        .map(|i| labels[(i / pw).min(h - 1) * w + (i % pw).min(w - 1)])
        .collect();
    let (reduced, fh, fw) = reduce_labels(&padded, ph, pw)?;
    let masks = masks_from_labels(&reduced, fh, fw, assignment)?;
    let out = model.stylize_regions(&to_padded_tensor(img), &masks)?;
    crop_to_image(&out, h, w)
}

/// Parses one `name=weight` pair.
pub fn parse_weight(pair: &str) -> std::result::Result<(String, f32), String> {
    let (name, w) = pair.split_once('=').ok_or_else(|| format!("expected name=weight, got `{pair}`"))?;
    let w: f32 = w.trim().parse().map_err(|_| format!("bad weight in `{pair}`"))?;
    Ok((name.trim().to_string(), w))
}
