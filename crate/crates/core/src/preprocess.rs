//! Signature image preprocessing: Otsu background removal, brightness
//! inversion, bilinear resize to the network input, and PGM (P5) I/O.

use std::fs;
use std::path::Path;

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major, 0 = black, 255 = white.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{}x{} image with {} pixels",
                width,
                height,
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage { width, height, pixels: vec![value; width * height] }
    }
}

/// Between-class variance of a threshold, as the exact fraction
/// (n*s0 - S*c0)^2 / (c0*c1); the constant 1/n^2 factor is dropped. A
/// threshold with an empty class scores zero.
#[derive(Debug, Clone, Copy)]
pub(crate) struct OtsuScore {
    num: u128,
    den: u128,
}

impl OtsuScore {
    pub(crate) fn zero() -> Self {
        OtsuScore { num: 0, den: 1 }
    }

    /// From class-0 count/sum and the image totals.
    pub(crate) fn from_split(c0: u64, s0: u64, n: u64, s: u64) -> Self {
        let c1 = n - c0;
        if c0 == 0 || c1 == 0 {
            return OtsuScore::zero();
        }
        let d = (n as i128) * (s0 as i128) - (s as i128) * (c0 as i128);
        let d = d.unsigned_abs();
        OtsuScore { num: d * d, den: (c0 as u128) * (c1 as u128) }
    }

    /// Exact comparison via cross multiplication; falls back to f64 ratios
    /// only when the u128 products would overflow (images beyond ~5e5 px).
    pub(crate) fn gt(&self, other: &OtsuScore) -> bool {
        match (self.num.checked_mul(other.den), other.num.checked_mul(self.den)) {
            (Some(a), Some(b)) => a > b,
            _ => (self.num as f64) / (self.den as f64) > (other.num as f64) / (other.den as f64),
        }
    }
}

fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    hist
}

/// Threshold maximizing between-class variance over the 256-bin histogram;
/// ties break to the smallest threshold. A constant image returns its own
/// value.
pub fn otsu_threshold(img: &GrayImage) -> u8 {
    let hist = histogram(img);
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(v, c)| v as u64 * c).sum();

    let occupied: Vec<usize> = (0..256).filter(|&v| hist[v] > 0).collect();
    if occupied.len() == 1 {
        return occupied[0] as u8;
    }

    let mut best_t = 0u8;
    let mut best = OtsuScore::zero();
    let mut c0 = 0u64;
    let mut s0 = 0u64;
    for t in 0..256usize {
        c0 += hist[t];
        s0 += t as u64 * hist[t];
        let score = OtsuScore::from_split(c0, s0, n, s);
        if score.gt(&best) {
            best = score;
            best_t = t as u8;
        }
    }
    best_t
}

/// Background (above threshold) goes to 0; ink inverts to bright-on-black.
pub fn binarize_invert(img: &GrayImage, t: u8) -> GrayImage {
    let pixels = img
        .pixels
        .iter()
        .map(|&p| if p > t { 0 } else { 255 - p })
        .collect();
    GrayImage { width: img.width, height: img.height, pixels }
}

/// Bilinear resize with half-pixel-centered sampling; values round half-up.
pub fn resize_gray(img: &GrayImage, target_w: usize, target_h: usize) -> GrayImage {
    assert!(target_w > 0 && target_h > 0, "resize targets must be positive");
    if target_w == img.width && target_h == img.height {
        return img.clone();
    }
    let sx = img.width as f64 / target_w as f64;
    let sy = img.height as f64 / target_h as f64;
    let mut pixels = Vec::with_capacity(target_w * target_h);
    for y in 0..target_h {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = src_y - y0 as f64;
        for x in 0..target_w {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = src_x - x0 as f64;

            let at = |xx: usize, yy: usize| img.pixels[yy * img.width + xx] as f64;
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            let value = top * (1.0 - fy) + bottom * fy;
            pixels.push((value + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage { width: target_w, height: target_h, pixels }
}

/// Full pipeline: Otsu threshold, binarize+invert, resize, scale to [0,1].
/// Returns a (1, h, w) tensor with background 0 and bright strokes.
pub fn preprocess_image(img: &GrayImage, input_h: usize, input_w: usize) -> Tensor<f32> {
    let t = otsu_threshold(img);
    let inverted = binarize_invert(img, t);
    let resized = resize_gray(&inverted, input_w, input_h);
    let data = resized.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::from_vec(&[1, input_h, input_w], data)
}

/// Reads a binary 8-bit PGM ("P5", maxval 255).
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|msg| Error::Parse(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;

    // Tokens are separated by whitespace; '#' starts a comment to end of line.
    let mut next_token = |bytes: &[u8]| -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if next_token(bytes)? != "P5" {
        return Err("not a P5 PGM".into());
    }
    let width: usize = next_token(bytes)?.parse().map_err(|_| "bad width")?;
    let height: usize = next_token(bytes)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = next_token(bytes)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if pos > bytes.len() || bytes.len() - pos < width * height {
        return Err("truncated pixel data".into());
    }
    let pixels = bytes[pos..pos + width * height].to_vec();
    GrayImage::new(width, height, pixels).map_err(|e| e.to_string())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: recompute class counts and sums from scratch for
    /// each of the 256 thresholds and take the first maximum.
    fn otsu_naive(img: &GrayImage) -> u8 {
        let hist = histogram(img);
        let n: u64 = hist.iter().sum();
        let s: u64 = hist.iter().enumerate().map(|(v, c)| v as u64 * c).sum();
        let occupied: Vec<usize> = (0..256).filter(|&v| hist[v] > 0).collect();
        if occupied.len() == 1 {
            return occupied[0] as u8;
        }
        let mut best_t = 0u8;
        let mut best = OtsuScore::zero();
        for t in 0..256usize {
            let mut c0 = 0u64;
            let mut s0 = 0u64;
            for v in 0..=t {
                c0 += hist[v];
                s0 += v as u64 * hist[v];
            }
            let score = OtsuScore::from_split(c0, s0, n, s);
            if score.gt(&best) {
                best = score;
                best_t = t as u8;
            }
        }
        best_t
    }

    fn random_image(rng: &mut ChaCha8Rng) -> GrayImage {
        let w = rng.gen_range(1..24);
        let h = rng.gen_range(1..24);
        let pixels = (0..w * h).map(|_| rng.gen::<u8>()).collect();
        GrayImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn half_black_half_white_thresholds_at_zero() {
        let mut pixels = vec![0u8; 50];
        pixels.extend(vec![255u8; 50]);
        let img = GrayImage::new(10, 10, pixels).unwrap();
        assert_eq!(otsu_threshold(&img), 0);
    }

    #[test]
    fn constant_image_returns_its_value() {
        let img = GrayImage::filled(4, 4, 137);
        assert_eq!(otsu_threshold(&img), 137);
        assert_eq!(otsu_threshold(&GrayImage::filled(2, 2, 0)), 0);
    }

    #[test]
    fn otsu_matches_naive_oracle_on_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let img = random_image(&mut rng);
            assert_eq!(otsu_threshold(&img), otsu_naive(&img), "image {:?}", img.pixels);
        }
    }

    #[test]
    fn otsu_matches_naive_on_adversarial_images() {
        let cases = vec![
            GrayImage::filled(3, 3, 0),
            GrayImage::filled(3, 3, 255),
            GrayImage::filled(1, 1, 7),
            GrayImage::new(2, 1, vec![0, 255]).unwrap(),
            GrayImage::new(4, 1, vec![10, 10, 200, 200]).unwrap(),
            GrayImage::new(3, 1, vec![100, 101, 102]).unwrap(),
        ];
        for img in cases {
            assert_eq!(otsu_threshold(&img), otsu_naive(&img), "image {:?}", img.pixels);
        }
    }

    #[test]
    fn binarize_invert_maps_background_and_ink() {
        let img = GrayImage::new(3, 1, vec![255, 0, 100]).unwrap();
        let out = binarize_invert(&img, 120);
        assert_eq!(out.pixels, vec![0, 255, 155]);

        // Background fraction equals the fraction of pixels above threshold.
        let above = img.pixels.iter().filter(|&&p| p > 120).count();
        let zeros = out.pixels.iter().filter(|&&p| p == 0).count();
        assert_eq!(above, zeros);
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng);
        assert_eq!(resize_gray(&img, img.width, img.height), img);

        let flat = GrayImage::filled(5, 7, 99);
        let out = resize_gray(&flat, 13, 3);
        assert!(out.pixels.iter().all(|&p| p == 99));
    }

    #[test]
    fn two_by_two_downsample_rounds_half_up() {
        let img = GrayImage::new(2, 2, vec![0, 255, 0, 255]).unwrap();
        let out = resize_gray(&img, 1, 1);
        assert_eq!(out.pixels, vec![128]); // round(127.5) half-up
    }

    #[test]
    fn blank_white_page_preprocesses_to_zero_tensor() {
        let img = GrayImage::filled(20, 20, 255);
        let t = preprocess_image(&img, 8, 8);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preprocess_output_stays_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let img = random_image(&mut rng);
            let t = preprocess_image(&img, 8, 8);
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn preprocess_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng);
        assert_eq!(
            preprocess_image(&img, 16, 16).data(),
            preprocess_image(&img, 16, 16).data()
        );
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng);
        let dir = std::env::temp_dir().join(format!("mlse-pgm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);

        fs::write(&path, b"P6\n1 1\n255\nx").unwrap();
        assert!(read_pgm(&path).is_err());
        fs::write(&path, b"P5\n4 4\n255\nxy").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x10\x20";
        let img = parse_pgm(bytes).unwrap();
        assert_eq!(img.pixels, vec![0x10, 0x20]);
    }
}
