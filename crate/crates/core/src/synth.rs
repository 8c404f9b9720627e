//! Procedurally rendered word images: a 12-symbol stroke alphabet drawn onto
//! white canvases with seeded jitter and noise. Used by the toy end-to-end
//! experiment and as a quick way to produce a demo corpus.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pipeline::{save_png, RawImage};

/// The rendered alphabet: 'a' through 'l'.
pub fn alphabet() -> Vec<char> {
    ('a'..='l').collect()
}

/// Stroke endpoints in unit glyph coordinates.
fn strokes(c: char) -> &'static [((f64, f64), (f64, f64))] {
    match c {
        'a' => &[((0.0, 0.0), (1.0, 1.0)), ((1.0, 0.0), (0.0, 1.0))],
        'b' => &[((0.15, 0.0), (0.15, 1.0)), ((0.85, 0.0), (0.85, 1.0))],
        'c' => &[((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))],
        'd' => &[((0.0, 0.0), (1.0, 0.0)), ((1.0, 0.0), (1.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))],
        'e' => &[((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.5), (1.0, 0.5)), ((0.0, 1.0), (1.0, 1.0))],
        'f' => &[((0.1, 0.0), (0.1, 1.0)), ((0.1, 0.0), (1.0, 0.0))],
        'g' => &[((0.1, 0.0), (0.1, 1.0)), ((0.1, 1.0), (1.0, 1.0)), ((0.5, 0.5), (1.0, 0.5))],
        'h' => &[((0.1, 0.0), (0.1, 1.0)), ((0.9, 0.0), (0.9, 1.0)), ((0.1, 0.5), (0.9, 0.5))],
        'i' => &[((0.5, 0.0), (0.5, 1.0))],
        'j' => &[((0.9, 0.0), (0.9, 1.0)), ((0.1, 1.0), (0.9, 1.0))],
        'k' => &[((0.1, 0.0), (0.1, 1.0)), ((0.1, 0.5), (1.0, 0.0)), ((0.1, 0.5), (1.0, 1.0))],
        'l' => &[((0.1, 0.0), (0.1, 1.0)), ((0.1, 1.0), (1.0, 1.0))],
        _ => &[],
    }
}

fn stamp(img: &mut RawImage, x: f64, y: f64, ink: u8, radius: f64) {
    let r = radius.ceil() as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    for dy in -r..=r {
        for dx in -r..=r {
            let px = x.round() as isize + dx;
            let py = y.round() as isize + dy;
            if px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let dist = ((px as f64 - x).powi(2) + (py as f64 - y).powi(2)).sqrt();
            if dist <= radius {
                let cur = img.get(px as usize, py as usize);
                img.set(px as usize, py as usize, cur.min(ink));
            }
        }
    }
}

fn draw_stroke(
    img: &mut RawImage,
    (x0, y0): (f64, f64),
    (x1, y1): (f64, f64),
    ink: u8,
    radius: f64,
) {
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        stamp(img, x0 + t * (x1 - x0), y0 + t * (y1 - y0), ink, radius);
    }
}

/// Render one word onto a white canvas with per-glyph jitter and light
/// pixel noise, all drawn from `rng`.
pub fn render_word(text: &str, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Result<RawImage> {
    let mut img = RawImage::filled(width, height, 255);
    let glyph_h = (height as f64 * 0.62).round();
    let glyph_w = glyph_h * 0.62;
    // wide spacing so a word spreads across the time axis even after the
    // encoder's stride reductions
    let advance = glyph_w + 20.0;
    let base_y = (height as f64 - glyph_h) / 2.0;
    let mut x = 4.0;
    for c in text.chars() {
        let segs = strokes(c);
        if segs.is_empty() {
            return Err(Error::Usage(format!("no glyph for character {c:?}")));
        }
        let jx = rng.random_range(-1.5..1.5);
        let jy = rng.random_range(-1.5..1.5);
        let ink = rng.random_range(10..60) as u8;
        let radius = rng.random_range(0.8..1.4);
        if x + glyph_w + 2.0 >= width as f64 {
            return Err(Error::Usage(format!(
                "word {text:?} does not fit a {width}x{height} canvas"
            )));
        }
        for &((ax, ay), (bx, by)) in segs {
            draw_stroke(
                &mut img,
                (x + jx + ax * glyph_w, base_y + jy + ay * glyph_h),
                (x + jx + bx * glyph_w, base_y + jy + by * glyph_h),
                ink,
                radius,
            );
        }
        x += advance + rng.random_range(-1.0..1.0);
    }
    // light background noise
    for p in img.pixels.iter_mut() {
        let n: i16 = rng.random_range(-6..=6);
        *p = (*p as i16 + n).clamp(0, 255) as u8;
    }
    Ok(img)
}

/// Write a corpus directory (`labels.tsv` + one PNG per sample) of random
/// words over the stroke alphabet.
pub fn generate_corpus(
    dir: &Path,
    samples: usize,
    min_len: usize,
    max_len: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<()> {
    if min_len == 0 || max_len < min_len {
        return Err(Error::Usage(format!("bad word length range {min_len}..={max_len}")));
    }
    std::fs::create_dir_all(dir)?;
    let letters = alphabet();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tsv = String::new();
    for i in 0..samples {
        let len = rng.random_range(min_len..=max_len);
        let word: String = (0..len)
            .map(|_| letters[rng.random_range(0..letters.len())])
            .collect();
        let id = format!("w{i:05}");
        let img = render_word(&word, width, height, &mut rng)?;
        save_png(&img, &dir.join(format!("{id}.png")))?;
        tsv.push_str(&format!("{id}\t{word}\n"));
    }
    std::fs::write(dir.join("labels.tsv"), tsv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_letter_has_a_distinct_glyph() {
        let letters = alphabet();
        assert_eq!(letters.len(), 12);
        for &c in &letters {
            assert!(!strokes(c).is_empty());
        }
        // render each and require pairwise different ink footprints
        let mut renders = Vec::new();
        for &c in &letters {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let img = render_word(&c.to_string(), 64, 32, &mut rng).unwrap();
            renders.push(img.pixels);
        }
        for i in 0..renders.len() {
            for j in 0..i {
                assert_ne!(renders[i], renders[j], "glyphs {i} and {j} collide");
            }
        }
    }

    #[test]
    fn rendering_is_seeded_and_has_ink() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = render_word("abcde", 256, 32, &mut r1).unwrap();
        let b = render_word("abcde", 256, 32, &mut r2).unwrap();
        assert_eq!(a, b);
        let dark = a.pixels.iter().filter(|&&p| p < 100).count();
        assert!(dark > 100, "expected ink, found {dark} dark pixels");
    }

    #[test]
    fn corpus_generation_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(dir.path(), 5, 1, 5, 256, 32, 3).unwrap();
        let tsv = std::fs::read_to_string(dir.path().join("labels.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 5);
        for line in tsv.lines() {
            let id = line.split('\t').next().unwrap();
            assert!(dir.path().join(format!("{id}.png")).exists());
        }
    }

    #[test]
    fn oversized_words_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(render_word("aaaaaaaaaaaaaaaaaaaa", 64, 32, &mut rng).is_err());
    }
}
