use serde::{Deserialize, Serialize};

use crate::tensor::Backward;
use crate::{Error, Result, Scalar, Tensor, Var};

/// Interpolation used for spatial upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    /// Bilinear with the align-corners=false convention.
    #[default]
    Bilinear,
    Nearest,
}

/// Source taps for one output coordinate: `(1 − w)·x[i0] + w·x[i1]`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w: f64,
}

fn taps(extent: usize, factor: usize, mode: UpsampleMode) -> Vec<Tap> {
    (0..extent * factor)
        .map(|o| match mode {
            UpsampleMode::Nearest => {
                let i = o / factor;
                Tap { i0: i, i1: i, w: 0.0 }
            }
            UpsampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(extent - 1);
                let i1 = (i0 + 1).min(extent - 1);
                Tap { i0, i1, w: src - i0 as f64 }
            }
        })
        .collect()
}

struct UpsampleOp {
    planes: usize,
    h: usize,
    w: usize,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl<T: Scalar> Backward<T> for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (ho, wo) = (self.rows.len(), self.cols.len());
        let mut gx = vec![T::zero(); self.planes * self.h * self.w];
        for p in 0..self.planes {
            let plane = &mut gx[p * self.h * self.w..(p + 1) * self.h * self.w];
            for (oy, ry) in self.rows.iter().enumerate() {
                let (wy1, wy0) = (T::of(ry.w), T::of(1.0 - ry.w));
                for (ox, rx) in self.cols.iter().enumerate() {
                    let g = grad[(p * ho + oy) * wo + ox];
                    let (wx1, wx0) = (T::of(rx.w), T::of(1.0 - rx.w));
                    plane[ry.i0 * self.w + rx.i0] = plane[ry.i0 * self.w + rx.i0] + g * wy0 * wx0;
                    plane[ry.i0 * self.w + rx.i1] = plane[ry.i0 * self.w + rx.i1] + g * wy0 * wx1;
                    plane[ry.i1 * self.w + rx.i0] = plane[ry.i1 * self.w + rx.i0] + g * wy1 * wx0;
                    plane[ry.i1 * self.w + rx.i1] = plane[ry.i1 * self.w + rx.i1] + g * wy1 * wx1;
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Upsamples `[B, C, H, W]` by an integer `factor` in both spatial axes.
    pub fn upsample(self, factor: usize, mode: UpsampleMode) -> Result<Var<'g, T>> {
        let xv = self.value();
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::invalid("upsample", format!("expected [B, C, H, W], got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::invalid("upsample", "factor must be positive"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let rows = taps(h, factor, mode);
        let cols = taps(w, factor, mode);
        let (ho, wo) = (rows.len(), cols.len());
        let x = xv.data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for ry in &rows {
                let wy = T::of(ry.w);
                let (r0, r1) = (&plane[ry.i0 * w..(ry.i0 + 1) * w], &plane[ry.i1 * w..(ry.i1 + 1) * w]);
                for rx in &cols {
                    // lerp form keeps constant regions exact
                    let wx = T::of(rx.w);
                    let top = r0[rx.i0] + wx * (r0[rx.i1] - r0[rx.i0]);
                    let bottom = r1[rx.i0] + wx * (r1[rx.i1] - r1[rx.i0]);
                    out.push(top + wy * (bottom - top));
                }
            }
        }
        let out = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        self.graph().push(out, &[self], UpsampleOp { planes, h, w, rows, cols })
    }

    pub fn upsample_bilinear2x(self) -> Result<Var<'g, T>> {
        self.upsample(2, UpsampleMode::Bilinear)
    }
}
