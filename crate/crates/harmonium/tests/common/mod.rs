//! Fixtures shared by the integration suites: synthetic patch sets with
//! known in-class transforms, toy catalogs on disk, and an independent
//! direct-formula SSIM oracle.

use std::path::{Path, PathBuf};

use harmonium::color::{poly_features, PatchColors, Rgb};
use harmonium::dataset::{AnnotatedImage, Catalog};
use harmonium::raster::{BinaryMask, LinearImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_patches(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> PatchColors {
    let colors: Vec<Rgb> = (0..24)
        .map(|_| {
            Rgb::new(
                rng.gen_range(lo..hi),
                rng.gen_range(lo..hi),
                rng.gen_range(lo..hi),
            )
        })
        .collect();
    PatchColors::from_slice(&colors).unwrap()
}

/// A known degree-2 map, gentle enough that patches in [0.2, 0.8] stay in
/// [0, 1] and the inverse restricted to the patch domain is itself close
/// to a degree-2 map.
pub fn gentle_quadratic(rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut matrix = vec![[0.0; 3]; 10];
    for (i, row) in matrix.iter_mut().take(3).enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = if i == c { 1.0 } else { 0.0 } + rng.gen_range(-0.05..0.05);
        }
    }
    for row in matrix.iter_mut().take(9).skip(3) {
        for v in row.iter_mut() {
            *v = rng.gen_range(-0.005..0.005);
        }
    }
    for v in matrix[9].iter_mut() {
        *v = rng.gen_range(-0.03..0.03);
    }
    matrix
}

pub fn eval_quadratic(matrix: &[[f64; 3]], color: Rgb) -> Rgb {
    let phi = poly_features(color, 2).unwrap();
    let mut out = [0.0; 3];
    for (f, row) in phi.iter().zip(matrix) {
        for c in 0..3 {
            out[c] += f * row[c];
        }
    }
    Rgb::new(out[0], out[1], out[2])
}

pub fn map_patches(matrix: &[[f64; 3]], patches: &PatchColors) -> PatchColors {
    let colors: Vec<Rgb> = patches
        .colors()
        .iter()
        .map(|c| eval_quadratic(matrix, *c))
        .collect();
    PatchColors::from_slice(&colors).unwrap()
}

pub fn smooth_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LinearImage {
    let base = [
        rng.gen_range(0.3..0.6),
        rng.gen_range(0.3..0.6),
        rng.gen_range(0.3..0.6),
    ];
    let mut img = LinearImage::new(w, h).unwrap();
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / w as f64;
            let fy = y as f64 / h as f64;
            img.set(
                x,
                y,
                [
                    (base[0] + 0.25 * fx).clamp(0.0, 1.0),
                    (base[1] + 0.25 * fy).clamp(0.0, 1.0),
                    (base[2] + 0.15 * fx * fy).clamp(0.0, 1.0),
                ],
            );
        }
    }
    img
}

pub fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    let mut m = BinaryMask::filled(w, h, false).unwrap();
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(x, y, true);
        }
    }
    m
}

/// Writes a toy catalog to `dir`: `n_images` smooth 16x16 images with
/// affine-derived patch colors; the first `extra_masks` images carry a
/// second foreground. Returns the catalog and the standard patches.
pub fn toy_catalog(
    dir: &Path,
    n_images: usize,
    extra_masks: usize,
    seed: u64,
) -> (Catalog, PatchColors) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let standard = random_patches(&mut rng, 0.25, 0.75);
    let mut images = Vec::new();
    for i in 0..n_images {
        let img = smooth_image(&mut rng, 16, 16);
        let image_path = dir.join(format!("img{i}.png"));
        img.save_png(&image_path).unwrap();

        let mut mask_paths: Vec<PathBuf> = vec![dir.join(format!("img{i}_m0.png"))];
        rect_mask(16, 16, 2, 2, 9, 9)
            .save_png(&mask_paths[0])
            .unwrap();
        if i < extra_masks {
            let second = dir.join(format!("img{i}_m1.png"));
            rect_mask(16, 16, 10, 10, 15, 15).save_png(&second).unwrap();
            mask_paths.push(second);
        }

        // Gentle invertible affine illumination record.
        let mut linear = [[0.0; 3]; 3];
        for (r, row) in linear.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = if r == c { 1.0 } else { 0.0 } + rng.gen_range(-0.05..0.05);
            }
        }
        let offset = [
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
        ];
        let colors: Vec<Rgb> = standard
            .colors()
            .iter()
            .map(|p| {
                let x = p.to_array();
                let mut out = [0.0; 3];
                for r in 0..3 {
                    out[r] = offset[r];
                    for c in 0..3 {
                        out[r] += linear[r][c] * x[c];
                    }
                }
                Rgb::new(out[0], out[1], out[2])
            })
            .collect();
        images.push(AnnotatedImage {
            image_path,
            mask_paths,
            patch_colors: PatchColors::from_slice(&colors).unwrap(),
        });
    }
    (Catalog::new(images).unwrap(), standard)
}

/// Direct-formula SSIM map: explicit 2-D Gaussian window at every pixel
/// with border clipping and per-pixel weight renormalization.
pub fn ssim_map_oracle(pred: &LinearImage, gt: &LinearImage) -> Vec<f64> {
    const WINDOW: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
    const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

    let (w, h) = (pred.width(), pred.height());
    let r = (WINDOW / 2) as isize;
    let mut g = [0.0; WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = (i as isize - r) as f64;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let gsum: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= gsum;
    }

    let mut map = vec![0.0; w * h];
    for c in 0..3 {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut wsum = 0.0;
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut ex2, mut ey2, mut exy) = (0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let wgt = g[(dy + r) as usize] * g[(dx + r) as usize];
                        let a = 255.0 * pred.get(xx as usize, yy as usize)[c];
                        let b = 255.0 * gt.get(xx as usize, yy as usize)[c];
                        wsum += wgt;
                        mx += wgt * a;
                        my += wgt * b;
                        ex2 += wgt * a * a;
                        ey2 += wgt * b * b;
                        exy += wgt * a * b;
                    }
                }
                mx /= wsum;
                my /= wsum;
                let (vx, vy, cov) = (
                    ex2 / wsum - mx * mx,
                    ey2 / wsum - my * my,
                    exy / wsum - mx * my,
                );
                let s = ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                map[y as usize * w + x as usize] += s / 3.0;
            }
        }
    }
    map
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LinearImage {
    let pixels = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    LinearImage::from_pixels(w, h, pixels).unwrap()
}
