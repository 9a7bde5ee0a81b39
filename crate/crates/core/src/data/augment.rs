use rand::Rng;

use crate::rng;
use crate::tensor::Tensor;

/// Resamples every channel under a translation by `(shift_y, shift_x)`
/// pixels and a zoom by `scale` about the image centre. Bilinear
/// interpolation, zero outside the source, output clipped to `[0,1]`.
pub fn resample_affine(img: &Tensor, shift_y: f64, shift_x: f64, scale: f64) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    warp(img, |y, x| {
        ((y - cy - shift_y) / scale + cy, (x - cx - shift_x) / scale + cx)
    })
}

/// Bilinear pull-back: output pixel `(y, x)` reads the source at
/// `source_of(y, x)`. Zero outside the source, clipped to `[0,1]`.
pub(crate) fn warp(img: &Tensor, source_of: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let [c, h, w] = img.shape()[..] else {
        panic!("expected a (C,H,W) image, got {:?}", img.shape());
    };
    let src = img.data();
    let mut out = vec![0.0; c * h * w];
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source_of(y as f64, x as f64);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let v = if fy == 0.0 && fx == 0.0 {
                    at(ch, y0, x0)
                } else {
                    (1.0 - fy) * ((1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x0 + 1))
                        + fy * ((1.0 - fx) * at(ch, y0 + 1, x0) + fx * at(ch, y0 + 1, x0 + 1))
                };
                out[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Random shift of up to `max_frac` of each spatial extent and an
/// independent zoom in `[1 - max_frac, 1 + max_frac]`.
pub fn augment_shift_zoom<R: Rng>(img: &Tensor, max_frac: f64, rng: &mut R) -> Tensor {
    assert!((0.0..1.0).contains(&max_frac), "max_frac must lie in [0, 1)");
    if max_frac == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.shape()[1] as f64, img.shape()[2] as f64);
    let dy = rng.gen_range(-max_frac..=max_frac) * h;
    let dx = rng.gen_range(-max_frac..=max_frac) * w;
    let scale = rng.gen_range(1.0 - max_frac..=1.0 + max_frac);
    resample_affine(img, dy, dx, scale)
}

pub fn augment_seeded(img: &Tensor, max_frac: f64, seed: u64) -> Tensor {
    augment_shift_zoom(img, max_frac, &mut rng::stream(seed, "augment", 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        let data = (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let img = ramp(28, 28);
        assert_eq!(augment_seeded(&img, 0.0, 5), img);
        assert_eq!(resample_affine(&img, 0.0, 0.0, 1.0), img);
    }

    #[test]
    fn zero_image_stays_zero() {
        let img = Tensor::zeros(&[1, 28, 28]);
        for s in 0..10 {
            assert!(augment_seeded(&img, 0.1, s).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn integer_shift_matches_index_shift() {
        let img = ramp(28, 28);
        let out = resample_affine(&img, 2.0, 0.0, 1.0);
        for y in 0..28 {
            for x in 0..28 {
                let want = if y >= 2 { img.data()[(y - 2) * 28 + x] } else { 0.0 };
                assert_eq!(out.data()[y * 28 + x], want);
            }
        }
        // mass lost is exactly the bottom two rows
        let lost: f64 = img.data()[26 * 28..].iter().sum();
        assert!((img.sum() - out.sum() - lost).abs() < 1e-9);
    }

    #[test]
    fn shape_and_range_preserved() {
        let img = ramp(12, 9);
        for s in 0..20 {
            let out = augment_seeded(&img, 0.3, s);
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(augment_seeded(&img, 0.3, 4), augment_seeded(&img, 0.3, 4));
    }
}
