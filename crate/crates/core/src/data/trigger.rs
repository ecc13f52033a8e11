use crate::error::{config, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// Offsets are measured inward from `corner` to the nearest pattern edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub corner: Corner,
    pub row_offset: usize,
    pub col_offset: usize,
}

/// Trigger pattern `[h, w, c]` with a mask of the pixels it overwrites.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSpec {
    pub pattern: Tensor,
    pub mask: Vec<bool>,
    pub anchor: Anchor,
}

impl TriggerSpec {
    /// Solid square of `value`, fully masked.
    pub fn square(size: usize, channels: usize, value: f64, anchor: Anchor) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return config(format!("trigger value {value} outside [0, 1]"));
        }
        let pattern = Tensor::filled(vec![size, size, channels], value);
        let mask = vec![true; pattern.len()];
        Ok(TriggerSpec { pattern, mask, anchor })
    }

    /// 4x4 white square, bottom-right, 1-pixel margin.
    pub fn mnist_default() -> Self {
        let anchor = Anchor { corner: Corner::BottomRight, row_offset: 1, col_offset: 1 };
        TriggerSpec::square(4, 1, 1.0, anchor).unwrap()
    }

    /// Top-left `(row, col)` of the pattern inside an `[H, W, C]` image.
    pub fn origin(&self, image_shape: &[usize]) -> Result<(usize, usize)> {
        let ps = self.pattern.shape();
        if ps.len() != 3 || self.mask.len() != self.pattern.len() {
            return config("trigger pattern must be [h, w, c] with a mask of equal size");
        }
        let [h, w, c] = image_shape else {
            return config(format!("image must be [H, W, C], got {image_shape:?}"));
        };
        if ps[2] != *c {
            return config(format!("trigger has {} channels, image has {c}", ps[2]));
        }
        let a = self.anchor;
        let fit = |extent: usize, size: usize, off: usize, from_end: bool| -> Option<usize> {
            let end = off.checked_add(size)?;
            if end > extent {
                return None;
            }
            Some(if from_end { extent - end } else { off })
        };
        let from_bottom = matches!(a.corner, Corner::BottomLeft | Corner::BottomRight);
        let from_right = matches!(a.corner, Corner::TopRight | Corner::BottomRight);
        match (fit(*h, ps[0], a.row_offset, from_bottom), fit(*w, ps[1], a.col_offset, from_right)) {
            (Some(r), Some(col)) => Ok((r, col)),
            _ => config(format!(
                "trigger {:?} at {:?} exceeds image bounds {image_shape:?}",
                &ps[..2],
                self.anchor
            )),
        }
    }

    fn validate_values(&self) -> Result<()> {
        if self.pattern.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return config("trigger pattern values must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Overwrites the masked pixels of one `[H, W, C]` image.
pub fn stamp_trigger(image: &Tensor, trigger: &TriggerSpec) -> Result<Tensor> {
    let mut out = image.clone();
    stamp_in_place(out.data_mut(), image.shape(), trigger)?;
    Ok(out)
}

/// Stamps every image of an `[N, H, W, C]` batch.
pub fn stamp_batch(images: &Tensor, trigger: &TriggerSpec) -> Result<Tensor> {
    let mut out = images.clone();
    let shape = images.sample_shape().to_vec();
    for i in 0..images.batch() {
        stamp_in_place(out.sample_mut(i), &shape, trigger)?;
    }
    Ok(out)
}

pub(crate) fn stamp_in_place(image: &mut [f64], shape: &[usize], trigger: &TriggerSpec) -> Result<()> {
    trigger.validate_values()?;
    let (r0, c0) = trigger.origin(shape)?;
    let (w, c) = (shape[1], shape[2]);
    let ps = trigger.pattern.shape();
    for y in 0..ps[0] {
        for x in 0..ps[1] {
            for ch in 0..c {
                let p = (y * ps[1] + x) * c + ch;
                if trigger.mask[p] {
                    image[((r0 + y) * w + c0 + x) * c + ch] = trigger.pattern.data()[p];
                }
            }
        }
    }
    Ok(())
}
