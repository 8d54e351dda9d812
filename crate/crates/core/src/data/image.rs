//! Planar floating-point images and the geometric preprocessing steps:
//! bilinear resize, white fill, random crop and five-crop.

use rand::Rng;

use super::ppm::RgbImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Three channel planes of samples in `[0, 1]`, each `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Top-left corner of a crop, in `(row, col)` order.
pub type Offset = (usize, usize);

impl PlanarImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(plane * 3);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let plane = img.width * img.height;
        let mut data = vec![0.0; plane * 3];
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f64::from(px[c]) / 255.0;
            }
        }
        Self { width: img.width, height: img.height, data }
    }

    /// Quantizes to 8 bits, rounding to nearest and clamping to `[0, 255]`.
    pub fn to_rgb(&self) -> RgbImage {
        let plane = self.width * self.height;
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                data.push((self.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        RgbImage { width: self.width, height: self.height, data }
    }

    pub fn crop(&self, (top, left): Offset, size: usize) -> Result<Self> {
        if size == 0 || top + size > self.height || left + size > self.width {
            return Err(Error::invalid(format!(
                "crop {size}x{size} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(size, size, |c, y, x| self.at(c, top + y, left + x)))
    }

    /// `[1, 3, H, W]` tensor of `(v - mean[c]) / std[c]`.
    pub fn to_tensor<T: Scalar>(&self, mean: [f64; 3], std: [f64; 3]) -> Tensor<T> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            let c = i / plane;
            T::lit((self.data[i] - mean[c]) / std[c])
        })
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &PlanarImage, width: usize, height: usize) -> PlanarImage {
    if width == img.width && height == img.height {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let coord = |o: usize, scale: f64, extent: usize| {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, s - i0 as f64)
    };
    let rows: Vec<_> = (0..height).map(|y| coord(y, sy, img.height)).collect();
    let cols: Vec<_> = (0..width).map(|x| coord(x, sx, img.width)).collect();
    PlanarImage::from_fn(width, height, |c, y, x| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
        let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Scales so the shorter side equals `target`, preserving aspect ratio; the
/// longer side is rounded to the nearest integer.
pub fn resize_min_dim(img: &PlanarImage, target: usize) -> Result<PlanarImage> {
    if target == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let short = img.width.min(img.height);
    if short == target {
        return Ok(img.clone());
    }
    let scale = target as f64 / short as f64;
    let (w, h) = if img.width <= img.height {
        (target, ((img.height as f64 * scale).round() as usize).max(target))
    } else {
        (((img.width as f64 * scale).round() as usize).max(target), target)
    };
    Ok(resize_bilinear(img, w, h))
}

/// Centers the image on a white `height x width` canvas, first shrinking it
/// (aspect preserved) when it does not fit.
pub fn white_fill(img: &PlanarImage, height: usize, width: usize) -> Result<PlanarImage> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("white fill canvas must be non-empty"));
    }
    let fitted = if img.height > height || img.width > width {
        let scale = (height as f64 / img.height as f64).min(width as f64 / img.width as f64);
        let h = ((img.height as f64 * scale).round() as usize).clamp(1, height);
        let w = ((img.width as f64 * scale).round() as usize).clamp(1, width);
        resize_bilinear(img, w, h)
    } else {
        img.clone()
    };
    let top = (height - fitted.height) / 2;
    let left = (width - fitted.width) / 2;
    let mut out = PlanarImage::filled(width, height, [1.0; 3]);
    for c in 0..3 {
        for y in 0..fitted.height {
            for x in 0..fitted.width {
                *out.at_mut(c, top + y, left + x) = fitted.at(c, y, x);
            }
        }
    }
    Ok(out)
}

fn check_crop(img: &PlanarImage, size: usize) -> Result<()> {
    if size == 0 || size > img.height || size > img.width {
        return Err(Error::invalid(format!(
            "crop size {size} does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    Ok(())
}

/// Uniformly random square crop.
pub fn random_crop(img: &PlanarImage, size: usize, rng: &mut impl Rng) -> Result<(PlanarImage, Offset)> {
    check_crop(img, size)?;
    let top = rng.random_range(0..=img.height - size);
    let left = rng.random_range(0..=img.width - size);
    Ok((img.crop((top, left), size)?, (top, left)))
}

/// Offsets of the four corner crops followed by the center crop. Odd
/// remainders put the center crop at the floor offset.
pub fn five_crop_offsets(height: usize, width: usize, size: usize) -> [Offset; 5] {
    let (dy, dx) = (height - size, width - size);
    [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)]
}

pub fn five_crop(img: &PlanarImage, size: usize) -> Result<[PlanarImage; 5]> {
    check_crop(img, size)?;
    let offs = five_crop_offsets(img.height, img.width, size);
    Ok([
        img.crop(offs[0], size)?,
        img.crop(offs[1], size)?,
        img.crop(offs[2], size)?,
        img.crop(offs[3], size)?,
        img.crop(offs[4], size)?,
    ])
}

/// Mean of the five crop scores.
pub fn score_aggregate(scores: &[f64]) -> Result<f64> {
    if scores.len() != 5 {
        return Err(Error::invalid(format!("five-crop aggregation needs 5 scores, got {}", scores.len())));
    }
    Ok(scores.iter().sum::<f64>() / 5.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gradient(w: usize, h: usize) -> PlanarImage {
        PlanarImage::from_fn(w, h, |c, y, x| (c as f64 * 0.1 + y as f64 * 0.01 + x as f64 * 0.003) % 1.0)
    }

    #[test]
    fn resize_min_dim_cases() {
        let a = gradient(760, 380);
        let r = resize_min_dim(&a, 380).unwrap();
        assert_eq!((r.height, r.width), (380, 760));
        assert_eq!(r, a);

        let b = gradient(380, 190);
        let r = resize_min_dim(&b, 380).unwrap();
        assert_eq!((r.height, r.width), (380, 760));

        let c = PlanarImage::filled(37, 23, [0.2, 0.6, 0.9]);
        let r = resize_min_dim(&c, 50).unwrap();
        assert_eq!(r.height, 50);
        assert_eq!(r.width, 80);
        for (i, v) in r.data.iter().enumerate() {
            let expected = [0.2, 0.6, 0.9][i / (50 * 80)];
            assert!((v - expected).abs() < 1e-12);
        }
        assert!(resize_min_dim(&c, 0).is_err());
    }

    #[test]
    fn white_fill_cases() {
        let same = gradient(340, 340);
        assert_eq!(white_fill(&same, 340, 340).unwrap(), same);

        let band = PlanarImage::filled(340, 100, [0.0; 3]);
        let out = white_fill(&band, 340, 340).unwrap();
        for y in 0..340 {
            let expected = if (120..220).contains(&y) { 0.0 } else { 1.0 };
            assert_eq!(out.at(1, y, 17), expected, "row {y}");
        }

        let small = PlanarImage::filled(7, 5, [0.0; 3]);
        let out = white_fill(&small, 16, 16).unwrap();
        for (y, x) in [(0, 0), (0, 15), (15, 0), (15, 15)] {
            for c in 0..3 {
                assert_eq!(out.at(c, y, x), 1.0);
            }
        }

        let big = PlanarImage::filled(100, 50, [0.3; 3]);
        let out = white_fill(&big, 20, 20).unwrap();
        assert_eq!((out.height, out.width), (20, 20));
        assert_eq!(out.at(0, 0, 10), 1.0);
        assert!((out.at(0, 10, 10) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn random_crop_identity_and_determinism() {
        let img = gradient(12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, off) = random_crop(&img, 12, &mut rng).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(c, img);

        let big = gradient(30, 30);
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..5).map(|_| random_crop(&big, 20, &mut r).unwrap().1).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..5).map(|_| random_crop(&big, 20, &mut r).unwrap().1).collect()
        };
        assert_eq!(a, b);
        assert!(random_crop(&big, 31, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn random_crop_offsets_are_uniform() {
        // 10^4 draws of 320 from 330 put offsets on an 11x11 grid; a chi-square
        // statistic on 120 degrees of freedom should sit far below 200.
        let img = PlanarImage::filled(330, 330, [0.5; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [[0usize; 11]; 11];
        let draws = 10_000;
        for _ in 0..draws {
            let top = rng.random_range(0..=img.height - 320);
            let left = rng.random_range(0..=img.width - 320);
            counts[top][left] += 1;
        }
        // The sampling above mirrors random_crop; confirm it agrees.
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let small = PlanarImage::filled(330, 330, [0.5; 3]);
        for _ in 0..20 {
            let (_, off) = random_crop(&small, 320, &mut r1).unwrap();
            assert_eq!(off, (r2.random_range(0..=10), r2.random_range(0..=10)));
        }
        let expected = draws as f64 / 121.0;
        let chi2: f64 = counts.iter().flatten().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 200.0, "chi-square {chi2}");
    }

    #[test]
    fn five_crop_cases() {
        let img = gradient(20, 20);
        let crops = five_crop(&img, 20).unwrap();
        assert!(crops.iter().all(|c| *c == img));

        assert_eq!(five_crop_offsets(340, 340, 320), [(0, 0), (0, 20), (20, 0), (20, 20), (10, 10)]);
        let flat = PlanarImage::filled(9, 7, [0.25; 3]);
        for c in five_crop(&flat, 5).unwrap() {
            assert!(c.data.iter().all(|&v| v == 0.25));
        }
        assert!(five_crop(&flat, 8).is_err());
    }

    #[test]
    fn aggregate() {
        assert_eq!(score_aggregate(&[2.0; 5]).unwrap(), 2.0);
        assert_eq!(score_aggregate(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 3.0);
        assert!(score_aggregate(&[1.0; 4]).is_err());
    }

    #[test]
    fn normalization_of_constant_image() {
        let img = PlanarImage::from_rgb(&RgbImage::filled(4, 4, [255, 0, 51]));
        let t: Tensor<f64> = img.to_tensor([0.5; 3], [0.5; 3]);
        assert_eq!(t.shape(), &[1, 3, 4, 4]);
        assert!(t.data()[..16].iter().all(|&v| v == 1.0));
        assert!(t.data()[16..32].iter().all(|&v| v == -1.0));
        assert!(t.data()[32..].iter().all(|&v| (v - (-0.6)).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn five_crop_offsets_closed_form(h in 1usize..400, w in 1usize..400, frac in 0.0f64..1.0) {
            let size = 1 + ((h.min(w) - 1) as f64 * frac) as usize;
            let o = five_crop_offsets(h, w, size);
            prop_assert_eq!(o[0], (0, 0));
            prop_assert_eq!(o[3], (h - size, w - size));
            prop_assert_eq!(o[4], ((h - size) / 2, (w - size) / 2));
        }

        #[test]
        fn rgb_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (seed >> (i % 57)) as u8).collect();
            let img = RgbImage::new(w, h, data).unwrap();
            prop_assert_eq!(PlanarImage::from_rgb(&img).to_rgb(), img);
        }
    }
}
