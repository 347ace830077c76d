use gem_core::loss::{photometric_loss, LossWeights};
use gem_core::metrics::{l1, psnr, ssim, ssim_with_grad};
use gem_core::ImageBuffer;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn loop_psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                let d = a.pixel(x, y)[c] - b.pixel(x, y)[c];
                se += d * d;
                n += 1;
            }
        }
    }
    10.0 * (1.0 / (se / n as f64)).log10()
}

fn loop_l1(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mut s = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            s += (a.pixel(x, y) - b.pixel(x, y)).abs().sum();
        }
    }
    s / (a.width() * a.height() * 3) as f64
}

/// SSIM straight from the definition: for every pixel, weighted moments over
/// the full 11x11 window with mirrored borders.
fn direct_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (w, h) = (a.width() as i64, a.height() as i64);
    let mirror = |i: i64, n: i64| if i < 0 { -i - 1 } else if i >= n { 2 * n - i - 1 } else { i };
    let mut kernel = [[0.0; 11]; 11];
    let mut ksum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            ksum += *v;
        }
    }
    let mut total = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = kernel[i][j] / ksum;
                        let sy = mirror(y + i as i64 - 5, h) as usize;
                        let sx = mirror(x + j as i64 - 5, w) as usize;
                        let p = a.pixel(sx, sy)[c];
                        let q = b.pixel(sx, sy)[c];
                        mx += k * p;
                        my += k * q;
                        sxx += k * p * p;
                        syy += k * q * q;
                        sxy += k * p * q;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cv = sxy - mx * my;
                let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (w * h * 3) as f64
}

#[test]
fn metrics_match_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);
        assert!((psnr(&a, &b).unwrap() - loop_psnr(&a, &b)).abs() < 1e-9);
        assert!((l1(&a, &b).unwrap() - loop_l1(&a, &b)).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - direct_ssim(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn constant_images_ssim_matches_formula() {
    let a = ImageBuffer::filled(16, 13, Vector3::new(0.2, 0.3, 0.1));
    let b = ImageBuffer::filled(16, 13, Vector3::new(0.7, 0.8, 0.6));
    let s = ssim(&a, &b).unwrap();
    assert!((s - direct_ssim(&a, &b)).abs() < 1e-9);
    // Constant planes have zero variance: SSIM reduces to the luminance term.
    let c1 = 1e-4;
    let lum = |x: f64, y: f64| (2.0 * x * y + c1) / (x * x + y * y + c1);
    let expected = (lum(0.2, 0.7) + lum(0.3, 0.8) + lum(0.1, 0.6)) / 3.0;
    assert!((s - expected).abs() < 1e-9);
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_image(&mut rng, 14, 12);
    let b = random_image(&mut rng, 14, 12);
    let (_, grad) = ssim_with_grad(&a, &b).unwrap();
    let h = 1e-5;
    for _ in 0..20 {
        let i = rng.random_range(0..a.data().len());
        let mut p = a.clone();
        p.data_mut()[i] += h;
        let mut m = a.clone();
        m.data_mut()[i] -= h;
        let numeric = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
        let analytic = grad.data()[i];
        assert!(
            (analytic - numeric).abs() <= 1e-4 * numeric.abs().max(1e-6),
            "pixel value {i}: analytic {analytic} numeric {numeric}"
        );
    }
}

#[test]
fn photometric_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r = random_image(&mut rng, 13, 11);
    let t = random_image(&mut rng, 13, 11);
    let w = LossWeights::default();
    let (_, grad) = photometric_loss(&r, &t, &w, None).unwrap();
    let h = 1e-6;
    for _ in 0..20 {
        let i = rng.random_range(0..r.data().len());
        let mut p = r.clone();
        p.data_mut()[i] += h;
        let mut m = r.clone();
        m.data_mut()[i] -= h;
        let lp = photometric_loss(&p, &t, &w, None).unwrap().0.total;
        let lm = photometric_loss(&m, &t, &w, None).unwrap().0.total;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad.data()[i];
        assert!(
            (analytic - numeric).abs() <= 1e-4 * numeric.abs().max(1e-6),
            "pixel value {i}: analytic {analytic} numeric {numeric}"
        );
    }
}

#[test]
fn shifting_content_changes_ssim() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random_image(&mut rng, 20, 20);
    let mut shifted = ImageBuffer::zeros(20, 20);
    for y in 0..20 {
        for x in 0..20 {
            shifted.set_pixel(x, y, a.pixel((x + 1) % 20, y));
        }
    }
    assert!(ssim(&a, &shifted).unwrap() < 0.9);
    // Same set of pixel differences, so the pointwise metrics cannot tell.
    let zero = ImageBuffer::zeros(20, 20);
    assert!((psnr(&a, &zero).unwrap() - psnr(&shifted, &zero).unwrap()).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, 12, 11);
        let b = random_image(&mut rng, 12, 11);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pointwise_metrics_ignore_pixel_order(seed in any::<u64>(), swap in 0usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        let permute = |im: &ImageBuffer| {
            let mut out = im.clone();
            let (p, q) = (swap, 63 - swap);
            out.set_pixel(p % 8, p / 8, im.pixel(q % 8, q / 8));
            out.set_pixel(q % 8, q / 8, im.pixel(p % 8, p / 8));
            out
        };
        let (pa, pb) = (permute(&a), permute(&b));
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&pa, &pb).unwrap()).abs() < 1e-9);
        prop_assert!((l1(&a, &b).unwrap() - l1(&pa, &pb).unwrap()).abs() < 1e-12);
    }
}
