//! Attention heat-map overlays.

use anyhow::{bail, Result};

use cptr_core::data::attn_dump::AttentionDump;
use cptr_core::model::Stack;
use cptr_core::vision::RawImage;

/// Colormap stops: heat value and RGB.
pub const RAMP: [(f32, [u8; 3]); 5] = [
    (0.0, [0, 0, 255]),
    (0.25, [0, 255, 255]),
    (0.5, [0, 255, 0]),
    (0.75, [255, 255, 0]),
    (1.0, [255, 0, 0]),
];

/// Weight of the heat color in the blend.
pub const ALPHA: f32 = 0.5;

pub const MARKER: [u8; 3] = [255, 0, 0];

/// Piecewise-linear interpolation along [`RAMP`]; input clamped to [0, 1].
pub fn heat_color(t: f32) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    for w in RAMP.windows(2) {
        let ((t0, c0), (t1, c1)) = (w[0], w[1]);
        if t <= t1 {
            let f = (t - t0) / (t1 - t0);
            let mut out = [0u8; 3];
            for k in 0..3 {
                out[k] = (c0[k] as f32 + f * (c1[k] as f32 - c0[k] as f32)).round() as u8;
            }
            return out;
        }
    }
    RAMP[RAMP.len() - 1].1
}

/// Min-max scale to [0, 1]. A constant row maps to all zeros.
pub fn normalize(row: &[f32]) -> Vec<f32> {
    let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0.0; row.len()];
    }
    row.iter().map(|v| (v - lo) / span).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selector {
    pub stack: Stack,
    pub layer: usize,
    pub head: usize,
    /// Query patch (encoder-self) or caption position (decoder-cross).
    pub query: usize,
}

/// Blend `image` with the heat map of one attention row.
pub fn render(dump: &AttentionDump, image: &RawImage, sel: &Selector) -> Result<RawImage> {
    if sel.stack == Stack::DecoderSelf {
        bail!("decoder-self attention is over caption tokens, not image patches; choose encoder-self or decoder-cross");
    }
    let map = match dump.find(sel.stack, sel.layer, sel.head) {
        Some(m) => m,
        None => {
            let layers = dump.maps.iter().filter(|m| m.stack == sel.stack).map(|m| m.layer + 1).max().unwrap_or(0);
            let heads = dump.maps.iter().filter(|m| m.stack == sel.stack).map(|m| m.head + 1).max().unwrap_or(0);
            bail!(
                "no {} map for layer {} head {} (dump has {layers} layers × {heads} heads)",
                sel.stack,
                sel.layer,
                sel.head
            );
        }
    };
    if sel.query >= map.n_queries {
        bail!("query {} out of range: the map has {} queries", sel.query, map.n_queries);
    }
    let (gr, gc, p) = (dump.grid_rows, dump.grid_cols, dump.patch_size);
    if map.n_keys != gr * gc {
        bail!("map has {} keys but the patch grid is {gr}×{gc}", map.n_keys);
    }
    if image.height() != gr * p || image.width() != gc * p {
        bail!(
            "image is {}×{} but the dump covers {}×{} ({gr}×{gc} patches of {p})",
            image.height(),
            image.width(),
            gr * p,
            gc * p
        );
    }
    let heat = normalize(map.row(sel.query));
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let c = heat_color(heat[(y / p) * gc + x / p]);
            let px = image.pixel(y, x);
            let mut blended = [0u8; 3];
            for k in 0..3 {
                blended[k] = ((1.0 - ALPHA) * px[k] as f32 + ALPHA * c[k] as f32).round() as u8;
            }
            out.set_pixel(y, x, blended);
        }
    }
    if sel.stack == Stack::EncoderSelf {
        mark(&mut out, sel.query / gc, sel.query % gc, p);
    }
    Ok(out)
}

/// Solid square of side ⌈P/4⌉ at the center of patch `(row, col)`.
fn mark(img: &mut RawImage, row: usize, col: usize, p: usize) {
    let side = p.div_ceil(4);
    let start = (p - side) / 2;
    for y in 0..side {
        for x in 0..side {
            img.set_pixel(row * p + start + y, col * p + start + x, MARKER);
        }
    }
}
