//! Image → patch sequence front end.
//!
//! Pixels are resized bilinearly (half-pixel centers, edge clamped), scaled
//! to `[-1, 1]` via `(v/255 − 0.5)/0.5`, and cut into non-overlapping `P×P`
//! patches. Patches are ordered row-major over the patch grid; inside a
//! patch the values are row-major over pixels with the three channels
//! interleaved fastest, i.e. index `(py·P + px)·3 + c`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const CHANNELS: usize = 3;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image", "zero-sized image"));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::invalid(
                "image",
                format!("{height}x{width} RGB needs {} bytes, got {}", height * width * CHANNELS, pixels.len()),
            ));
        }
        Ok(RawImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(height * width * CHANNELS).collect();
        RawImage::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Bilinear resize to exactly `height × width`.
pub fn resize(img: &RawImage, height: usize, width: usize) -> Result<RawImage> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize", format!("zero-sized target {height}x{width}")));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    // Source coordinate of output index `o` along an axis, with its two taps.
    let taps = |o: usize, out_len: usize, in_len: usize| -> (usize, usize, f64) {
        let scale = in_len as f64 / out_len as f64;
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = vec![0u8; height * width * CHANNELS];
    for y in 0..height {
        let (y0, y1, fy) = taps(y, height, img.height);
        for x in 0..width {
            let (x0, x1, fx) = taps(x, width, img.width);
            let (p00, p01) = (img.pixel(y0, x0), img.pixel(y0, x1));
            let (p10, p11) = (img.pixel(y1, x0), img.pixel(y1, x1));
            for c in 0..CHANNELS {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[(y * width + x) * CHANNELS + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RawImage::new(height, width, out)
}

/// Channels-last float image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn normalize(img: &RawImage) -> FloatImage {
    FloatImage {
        height: img.height,
        width: img.width,
        data: img.pixels.iter().map(|&v| (v as f32 / 255.0 - 0.5) / 0.5).collect(),
    }
}

/// Number of patches for an `height × width` image with patch size `patch`.
pub fn patch_count(height: usize, width: usize, patch: usize) -> Result<usize> {
    if patch == 0 || height == 0 || width == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::invalid(
            "patchify",
            format!("patch size {patch} must divide image height {height} and width {width}"),
        ));
    }
    Ok((height / patch) * (width / patch))
}

/// Flattened patches `X_p`, one row of `P²·3` values per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub data: Vec<f32>,
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn to_tensor<F: Element>(&self) -> Tensor<F> {
        Tensor::new(
            vec![self.n_patches(), self.patch_dim()],
            self.data.iter().map(|&v| F::of(v as f64)).collect(),
        )
        .expect("patch sequence dims are consistent")
    }
}

pub fn patchify(img: &FloatImage, patch: usize) -> Result<PatchSequence> {
    patch_count(img.height, img.width, patch)?;
    let (rows, cols) = (img.height / patch, img.width / patch);
    let mut data = Vec::with_capacity(img.data.len());
    for gr in 0..rows {
        for gc in 0..cols {
            for py in 0..patch {
                let y = gr * patch + py;
                let start = (y * img.width + gc * patch) * CHANNELS;
                data.extend_from_slice(&img.data[start..start + patch * CHANNELS]);
            }
        }
    }
    Ok(PatchSequence {
        patch_size: patch,
        grid_rows: rows,
        grid_cols: cols,
        data,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(seq: &PatchSequence) -> FloatImage {
    let p = seq.patch_size;
    let (height, width) = (seq.grid_rows * p, seq.grid_cols * p);
    let mut data = vec![0.0; height * width * CHANNELS];
    let mut src = seq.data.chunks_exact(p * CHANNELS);
    for gr in 0..seq.grid_rows {
        for gc in 0..seq.grid_cols {
            for py in 0..p {
                let y = gr * p + py;
                let start = (y * width + gc * p) * CHANNELS;
                data[start..start + p * CHANNELS].copy_from_slice(src.next().unwrap());
            }
        }
    }
    FloatImage { height, width, data }
}

/// Resize, normalize and patchify in one step.
pub fn prepare(img: &RawImage, height: usize, width: usize, patch: usize) -> Result<PatchSequence> {
    patch_count(height, width, patch)?;
    let resized = resize(img, height, width)?;
    patchify(&normalize(&resized), patch)
}

/// Tape handles for the patch embedding parameters.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedding {
    /// `[P²·3, d]`
    pub projection: Var,
    /// `[d]`
    pub bias: Var,
    /// `[N, d]`, learnable 1-D positions.
    pub positions: Var,
}

/// `P_a = X_p·W + b + positions` for patches shaped `[N, P²·3]` or `[B, N, P²·3]`.
pub fn embed<F: Element>(tape: &mut Tape<F>, patches: Var, emb: &PatchEmbedding) -> Result<Var> {
    let pd = tape.value(patches).dims().to_vec();
    let proj = tape.value(emb.projection).dims().to_vec();
    let pos = tape.value(emb.positions).dims().to_vec();
    if pd.len() < 2 || pd[pd.len() - 1] != proj[0] {
        return Err(Error::shape("embed", &pd, &proj));
    }
    let n = pd[pd.len() - 2];
    if n != pos[0] {
        return Err(Error::Config(format!(
            "image gives {n} patches but the position table has {} entries; resolution or patch size changed",
            pos[0]
        )));
    }
    let x = tape.linear(patches, emb.projection, Some(emb.bias))?;
    tape.add(x, emb.positions)
}
