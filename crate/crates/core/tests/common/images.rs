//! Fixed test images rebuilt from a splitmix64 hash, plus SSIM values for
//! them computed once with scikit-image 0.25 (`structural_similarity` with
//! `gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
//! data_range=1.0`). The same construction in Python reproduces the images
//! bit for bit.

/// `(height, width, channels, ssim)` of image pair `k`.
pub const SKIMAGE_SSIM: [(usize, usize, usize, f64); 10] = [
    (11, 11, 1, 0.916268316205967),
    (16, 16, 1, 0.40236901654912655),
    (32, 32, 1, 0.8822958736002037),
    (24, 40, 1, 0.3376555957708225),
    (40, 24, 1, 0.8805395956806289),
    (16, 16, 3, 0.4008366045210876),
    (32, 32, 3, 0.8882910712048334),
    (13, 29, 1, 0.41867054949727556),
    (64, 64, 1, 0.8868776004921689),
    (20, 20, 2, 0.3221846395387893),
];

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(k: usize, i: usize) -> f64 {
    (splitmix(((k as u64) << 32) | i as u64) >> 40) as f64 / (1u64 << 24) as f64
}

/// Smooth pattern plus hashed texture; odd pairs share only the pattern,
/// even pairs are a contrast-reduced copy with fresh texture.
pub fn reference_pair(k: usize, h: usize, w: usize, c: usize) -> (Vec<f32>, Vec<f32>) {
    let n = h * w * c;
    let mut x = vec![0.0f32; n];
    let mut y = vec![0.0f32; n];
    for i in 0..n {
        let p = i / c;
        let (r, col) = (p / w, p % w);
        let smooth = 0.5 + 0.4 * (0.3 * r as f64 + 0.2 * col as f64 + k as f64).sin();
        let xv = 0.6 * smooth + 0.4 * unit(2 * k, i);
        let yv = if k % 2 == 1 { 0.6 * smooth + 0.4 * unit(2 * k + 1, i) } else { 0.8 * xv + 0.2 * unit(2 * k + 1, i) };
        x[i] = xv as f32;
        y[i] = yv as f32;
    }
    (x, y)
}

/// SSIM by explicit 11x11 window sums at every fully covered position.
pub fn naive_ssim(x: &[f32], y: &[f32], h: usize, w: usize, c: usize) -> f64 {
    let mut g = [[0.0f64; 11]; 11];
    let mut norm = 0.0;
    for (a, row) in g.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (da, db) = (a as f64 - 5.0, b as f64 - 5.0);
            *v = (-(da * da + db * db) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let px = |img: &[f32], r: usize, q: usize| img[(r * w + q) * c + ch] as f64;
        let mut sum = 0.0;
        let mut count = 0usize;
        for r0 in 0..=h - 11 {
            for q0 in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let wt = g[a][b] / norm;
                        let (u, v) = (px(x, r0 + a, q0 + b), px(y, r0 + a, q0 + b));
                        mx += wt * u;
                        my += wt * v;
                        xx += wt * u * u;
                        yy += wt * v * v;
                        xy += wt * u * v;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / c as f64
}
