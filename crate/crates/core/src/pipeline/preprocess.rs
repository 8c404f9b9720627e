//! Image preprocessing: aspect-preserving resize with background padding,
//! illumination compensation against a median-filtered background estimate,
//! and slant removal by projection-sharpness search over shear angles.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<RawImage> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Image(format!(
                "invalid raw image: {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        Ok(RawImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> RawImage {
        RawImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// `1×H×W` tensor in [0,1]; `invert` flips dark-on-light corpora.
    pub fn to_tensor(&self, invert: bool) -> Tensor {
        let data: Vec<f64> = self
            .pixels
            .iter()
            .map(|&p| {
                let v = f64::from(p) / 255.0;
                if invert {
                    1.0 - v
                } else {
                    v
                }
            })
            .collect();
        Tensor::from_parts(&[1, self.height, self.width], data)
    }

    /// Median intensity of the one-pixel border, used as the padding and
    /// shear fill value.
    pub fn border_median(&self) -> u8 {
        let mut border = Vec::with_capacity(2 * (self.width + self.height));
        for x in 0..self.width {
            border.push(self.get(x, 0));
            border.push(self.get(x, self.height - 1));
        }
        for y in 0..self.height {
            border.push(self.get(0, y));
            border.push(self.get(self.width - 1, y));
        }
        border.sort_unstable();
        border[border.len() / 2]
    }
}

/// Bilinear sample with clamped coordinates, returning a real value.
fn sample_bilinear(img: &RawImage, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (img.width - 1) as f64);
    let yc = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let p00 = f64::from(img.get(x0, y0));
    let p10 = f64::from(img.get(x1, y0));
    let p01 = f64::from(img.get(x0, y1));
    let p11 = f64::from(img.get(x1, y1));
    p00 * (1.0 - fx) * (1.0 - fy) + p10 * fx * (1.0 - fy) + p01 * (1.0 - fx) * fy + p11 * fx * fy
}

/// Aspect-preserving scale into `target_w × target_h`, content anchored
/// left and vertically centered, remainder filled with the border median.
pub fn resize_with_padding(img: &RawImage, target_w: usize, target_h: usize) -> RawImage {
    let scale = (target_w as f64 / img.width as f64).min(target_h as f64 / img.height as f64);
    let nw = ((img.width as f64 * scale).round() as usize).clamp(1, target_w);
    let nh = ((img.height as f64 * scale).round() as usize).clamp(1, target_h);

    let scaled = if nw == img.width && nh == img.height {
        img.clone()
    } else {
        let mut out = RawImage::filled(nw, nh, 0);
        let sx = img.width as f64 / nw as f64;
        let sy = img.height as f64 / nh as f64;
        for y in 0..nh {
            for x in 0..nw {
                let v = sample_bilinear(
                    img,
                    (x as f64 + 0.5) * sx - 0.5,
                    (y as f64 + 0.5) * sy - 0.5,
                );
                out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    };

    if nw == target_w && nh == target_h {
        return scaled;
    }
    let mut canvas = RawImage::filled(target_w, target_h, img.border_median());
    let y0 = (target_h - nh) / 2;
    for y in 0..nh {
        let dst = (y0 + y) * target_w;
        let src = y * nw;
        canvas.pixels[dst..dst + nw].copy_from_slice(&scaled.pixels[src..src + nw]);
    }
    canvas
}

/// Background estimate: median over a (clamped) `window × window`
/// neighborhood, computed with sliding 256-bin histograms.
fn median_background(img: &RawImage, window: usize) -> Vec<u8> {
    let r = window / 2;
    let (w, h) = (img.width, img.height);
    let mut out = vec![0u8; w * h];

    // per-column histograms over the current row window
    let mut col_hist = vec![[0u32; 256]; w];
    let mut lo = 0usize;
    let mut hi = r.min(h - 1);
    for y in 0..=hi {
        for x in 0..w {
            col_hist[x][img.get(x, y) as usize] += 1;
        }
    }

    for y in 0..h {
        let want_lo = y.saturating_sub(r);
        let want_hi = (y + r).min(h - 1);
        while lo < want_lo {
            for x in 0..w {
                col_hist[x][img.get(x, lo) as usize] -= 1;
            }
            lo += 1;
        }
        while hi < want_hi {
            hi += 1;
            for x in 0..w {
                col_hist[x][img.get(x, hi) as usize] += 1;
            }
        }

        let mut hist = [0u32; 256];
        let mut count: u32 = 0;
        let x_hi0 = r.min(w - 1);
        for x in 0..=x_hi0 {
            for b in 0..256 {
                hist[b] += col_hist[x][b];
            }
        }
        count += (x_hi0 + 1) as u32 * (want_hi - want_lo + 1) as u32;

        let mut xl = 0usize;
        let mut xr = x_hi0;
        for x in 0..w {
            let want_xl = x.saturating_sub(r);
            let want_xr = (x + r).min(w - 1);
            while xl < want_xl {
                for b in 0..256 {
                    hist[b] -= col_hist[xl][b];
                }
                count -= (want_hi - want_lo + 1) as u32;
                xl += 1;
            }
            while xr < want_xr {
                xr += 1;
                for b in 0..256 {
                    hist[b] += col_hist[xr][b];
                }
                count += (want_hi - want_lo + 1) as u32;
            }
            // lower median
            let target = count / 2;
            let mut acc = 0u32;
            let mut med = 0u8;
            for (b, &c) in hist.iter().enumerate() {
                acc += c;
                if acc > target {
                    med = b as u8;
                    break;
                }
            }
            out[y * w + x] = med;
        }
    }
    out
}

/// Divide out a median-filtered background estimate:
/// `out = clamp(255 · pixel / max(background, 1))`.
pub fn illumination_compensate(img: &RawImage) -> RawImage {
    let bg = median_background(img, 31);
    let pixels = img
        .pixels
        .iter()
        .zip(&bg)
        .map(|(&p, &b)| {
            let denom = f64::from(b.max(1));
            (255.0 * f64::from(p) / denom).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    RawImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Otsu threshold: pixels strictly below it form the dark class. `None`
/// when the histogram cannot be split into two non-empty classes.
pub fn otsu_threshold(img: &RawImage) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let total = img.pixels.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (0.0, None);
    for t in 0..255usize {
        w0 += hist[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            // dark class is values <= t, so the threshold is t + 1
            best = (between, Some((t + 1) as u8));
        }
    }
    best.1
}

const SLANT_STEP_DEG: f64 = 3.0;
const SLANT_MAX_DEG: f64 = 45.0;

/// Horizontal shear by `deg` degrees: row y shifts by `tan(deg)·(H−1−y)`,
/// the canvas widens to keep all content, gaps fill with the border median.
pub fn shear(img: &RawImage, deg: f64) -> RawImage {
    let t = deg.to_radians().tan();
    if t == 0.0 {
        return img.clone();
    }
    let span = t * (img.height - 1) as f64;
    let min_off = span.min(0.0);
    let new_w = img.width + span.abs().ceil() as usize;
    let fill = f64::from(img.border_median());
    let mut out = RawImage::filled(new_w, img.height, 0);
    for y in 0..img.height {
        let off = t * (img.height - 1 - y) as f64 - min_off;
        for x in 0..new_w {
            let src_x = x as f64 - off;
            let v = if src_x < -0.5 || src_x > img.width as f64 - 0.5 {
                fill
            } else {
                // 1-D linear interpolation along the row
                let x0 = src_x.floor();
                let fx = src_x - x0;
                let p0 = if x0 < 0.0 {
                    fill
                } else {
                    f64::from(img.get(x0 as usize, y))
                };
                let x1 = x0 + 1.0;
                let p1 = if x1 > (img.width - 1) as f64 {
                    fill
                } else {
                    f64::from(img.get(x1 as usize, y))
                };
                p0 * (1.0 - fx) + p1 * fx
            };
            out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Slant estimate in degrees: the shear angle maximizing the sum of squared
/// vertical-projection counts of the binarized image. `None` when the image
/// has no binarizable content. Ties prefer the smallest |angle|.
pub fn estimate_slant(img: &RawImage) -> Option<f64> {
    let threshold = otsu_threshold(img)?;
    let fg: Vec<(usize, usize)> = (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (x, y)))
        .filter(|&(x, y)| img.get(x, y) < threshold)
        .collect();
    if fg.is_empty() || fg.len() == img.pixels.len() {
        return None;
    }

    let mut candidates = vec![0.0];
    let mut a = SLANT_STEP_DEG;
    while a <= SLANT_MAX_DEG + 1e-9 {
        candidates.push(a);
        candidates.push(-a);
        a += SLANT_STEP_DEG;
    }

    let mut best = (f64::NEG_INFINITY, 0.0);
    for &deg in &candidates {
        let t = deg.to_radians().tan();
        let span = t * (img.height - 1) as f64;
        let min_off = span.min(0.0);
        let new_w = img.width + span.abs().ceil() as usize + 1;
        let mut hist = vec![0u64; new_w];
        for &(x, y) in &fg {
            let off = t * (img.height - 1 - y) as f64 - min_off;
            let col = (x as f64 + off).round() as usize;
            hist[col.min(new_w - 1)] += 1;
        }
        let score: f64 = hist.iter().map(|&c| (c * c) as f64).sum();
        if score > best.0 {
            best = (score, deg);
        }
    }
    Some(best.1)
}

/// Remove cursive slant; degenerate images pass through unchanged.
pub fn deslant(img: &RawImage) -> RawImage {
    match estimate_slant(img) {
        Some(deg) if deg != 0.0 => shear(img, deg),
        _ => img.clone(),
    }
}

/// The full preprocessing chain applied identically at bundle-build time and
/// at single-image transcription: illumination compensation, deslanting,
/// then resize-with-padding (last, so the output shape is exact).
pub fn preprocess(img: &RawImage, target_w: usize, target_h: usize) -> RawImage {
    let lit = illumination_compensate(img);
    let straight = deslant(&lit);
    resize_with_padding(&straight, target_w, target_h)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Upright dark bars on a white background.
    fn bar_glyphs() -> RawImage {
        let mut img = RawImage::filled(120, 40, 255);
        for bar in 0..6 {
            let x0 = 8 + bar * 18;
            for y in 5..35 {
                for x in x0..x0 + 3 {
                    img.set(x, y, 20);
                }
            }
        }
        img
    }

    #[test]
    fn resize_exact_aspect_needs_no_padding() {
        let img = RawImage::filled(512, 64, 100);
        let out = resize_with_padding(&img, 1024, 128);
        assert_eq!((out.width, out.height), (1024, 128));
        assert!(out.pixels.iter().all(|&p| p == 100));
    }

    #[test]
    fn resize_identity_when_already_target() {
        let mut img = RawImage::filled(1024, 128, 200);
        img.set(10, 10, 3);
        let out = resize_with_padding(&img, 1024, 128);
        assert_eq!(out, img);
    }

    #[test]
    fn resize_square_pads_right() {
        let img = RawImage::filled(100, 100, 50);
        let out = resize_with_padding(&img, 1024, 128);
        assert_eq!((out.width, out.height), (1024, 128));
        // scaled to 128×128, anchored left: columns ≥ 128 are padding
        assert_eq!(out.get(0, 64), 50);
        assert_eq!(out.get(127, 64), 50);
        assert_eq!(out.get(128, 64), 50); // border median of a flat image
        let img2 = {
            let mut i = RawImage::filled(100, 100, 50);
            // make the border median distinguishable from the content mean
            for y in 40..60 {
                for x in 40..60 {
                    i.set(x, y, 0);
                }
            }
            i
        };
        let out2 = resize_with_padding(&img2, 1024, 128);
        assert_eq!(out2.get(500, 64), 50);
    }

    #[test]
    fn resize_is_idempotent() {
        let img = bar_glyphs();
        let once = resize_with_padding(&img, 1024, 128);
        let twice = resize_with_padding(&once, 1024, 128);
        assert_eq!(once, twice);
        assert_eq!((once.width, once.height), (1024, 128));
    }

    #[test]
    fn illumination_fixed_points() {
        let white = RawImage::filled(40, 30, 255);
        assert_eq!(illumination_compensate(&white), white);
        let black = RawImage::filled(40, 30, 0);
        assert_eq!(illumination_compensate(&black), black);
    }

    #[test]
    fn illumination_removes_shading_ramp() {
        // clean text × linear shading ramp; away from strokes the output
        // must sit within ±8 levels of the clean image
        let clean = bar_glyphs();
        let mut shaded = clean.clone();
        for y in 0..shaded.height {
            for x in 0..shaded.width {
                let ramp = 0.7 + 0.3 * (x as f64 / (shaded.width - 1) as f64);
                let v = f64::from(clean.get(x, y)) * ramp;
                shaded.set(x, y, v.round() as u8);
            }
        }
        let restored = illumination_compensate(&shaded);
        for y in 0..clean.height {
            for x in 0..clean.width {
                if clean.get(x, y) == 255 {
                    let diff = (f64::from(restored.get(x, y)) - 255.0).abs();
                    assert!(diff <= 8.0, "at ({x},{y}): {}", restored.get(x, y));
                }
            }
        }
    }

    #[test]
    fn upright_glyphs_estimate_zero_slant() {
        let img = bar_glyphs();
        assert_eq!(estimate_slant(&img), Some(0.0));
        assert_eq!(deslant(&img), img);
    }

    #[test]
    fn shear_roundtrip_recovers_angle() {
        let img = bar_glyphs();
        for &deg in &[-30.0, -15.0, -9.0, 9.0, 15.0, 30.0] {
            let slanted = shear(&img, deg);
            let est = estimate_slant(&slanted).unwrap();
            assert!(
                (est + deg).abs() <= 3.0 + 1e-9,
                "sheared by {deg}, estimated {est}"
            );
        }
    }

    #[test]
    fn blank_image_passes_through() {
        let img = RawImage::filled(64, 32, 255);
        assert_eq!(deslant(&img), img);
    }

    #[test]
    fn tensor_conversion_and_inversion() {
        let mut img = RawImage::filled(2, 1, 255);
        img.set(1, 0, 0);
        let t = img.to_tensor(false);
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0]);
        let ti = img.to_tensor(true);
        assert_eq!(ti.data(), &[0.0, 1.0]);
    }

    #[test]
    fn otsu_splits_bimodal() {
        let img = bar_glyphs();
        let t = otsu_threshold(&img).unwrap();
        assert!(t > 20);
        assert_eq!(otsu_threshold(&RawImage::filled(8, 8, 77)), None);
    }
}
