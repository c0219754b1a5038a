//! Batched inference to label masks.

use ymwml_core::data::{collate, Sample};
use ymwml_core::mask::LabelMask;
use ymwml_core::model::YmWml;
use ymwml_core::params::ParameterStore;
use ymwml_core::{Result, Tensor};

/// Per-pixel argmax over the class axis of `[N, K, H, W]` logits. Ties go
/// to the lower class index.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<LabelMask>> {
    let &[n, k, h, w] = logits.shape() else {
        return Err(ymwml_core::Error::InvalidShape(logits.shape().to_vec()));
    };
    let hw = h * w;
    let d = logits.data();
    (0..n)
        .map(|ni| {
            let labels = (0..hw)
                .map(|px| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[ni * k * hw + c * hw + px] > d[ni * k * hw + best * hw + px] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(h, w, labels)
        })
        .collect()
}

pub fn predict_masks(
    model: &YmWml,
    store: &ParameterStore,
    samples: &[Sample],
    batch: usize,
) -> Result<Vec<LabelMask>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(batch.max(1)) {
        let b = collate(samples, chunk)?;
        out.extend(argmax_masks(&model.predict(store, &b.images)?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 5.0, 2.0]).unwrap();
        let m = argmax_masks(&t).unwrap();
        assert_eq!(m[0].labels(), &[2, 1]);
    }
}
