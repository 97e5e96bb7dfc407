use super::Array;
use crate::error::{shape_err, Result};

/// Bilinear resampling of `image[H×W×C]` at `grid[h'×w'×2]`.
///
/// Grid entries are `(x, y)` in pixel units where pixel `(r, c)` sits at
/// `x = c, y = r`. Samples outside the image clamp to the edge.
pub fn bilinear_sample(image: &Array, grid: &Array) -> Result<Array> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(shape_err!("image must be H×W×C, got {s:?}")),
    };
    let (gh, gw) = match grid.shape() {
        [gh, gw, 2] => (*gh, *gw),
        s => return Err(shape_err!("grid must be h×w×2, got {s:?}")),
    };
    if gh == 0 || gw == 0 {
        return Err(shape_err!("empty sampling grid"));
    }
    let mut out = vec![0.0; gh * gw * c];
    bilinear_sample_into(image.data(), h, w, c, grid.data(), &mut out);
    Array::new(vec![gh, gw, c], out)
}

/// Slice form of [`bilinear_sample`]: `grid` holds `n` `(x, y)` pairs and
/// `out` receives `n×C` values.
pub fn bilinear_sample_into(
    image: &[f32],
    h: usize,
    w: usize,
    c: usize,
    grid: &[f32],
    out: &mut [f32],
) {
    let xmax = (w - 1) as f32;
    let ymax = (h - 1) as f32;
    for (g, o) in grid.chunks_exact(2).zip(out.chunks_exact_mut(c)) {
        let x = g[0].clamp(0.0, xmax);
        let y = g[1].clamp(0.0, ymax);
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let x0 = x0f as usize;
        let y0 = y0f as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let p00 = &image[(y0 * w + x0) * c..][..c];
        let p01 = &image[(y0 * w + x1) * c..][..c];
        let p10 = &image[(y1 * w + x0) * c..][..c];
        let p11 = &image[(y1 * w + x1) * c..][..c];
        for ch in 0..c {
            o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
        }
    }
}
