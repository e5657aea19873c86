//! Brute-force weighted F-beta, written directly from the published formula:
//! full-scan nearest foreground (ties to the smallest row-major index), a
//! direct 2-D Gaussian window with zero padding, and no separability.
#![allow(clippy::needless_range_loop)]

pub const SIGMA: f64 = 5.0;
pub const WINDOW: i64 = 7;

pub fn weighted_fbeta(pred: &[f64], gt: &[bool], h: usize, w: usize, beta: f64) -> f64 {
    let alpha = 0.5f64.ln() / 5.0;
    let n_fg = gt.iter().filter(|&&g| g).count();
    if n_fg == 0 {
        return if pred.iter().all(|&p| p == 0.0) {
            1.0
        } else {
            0.0
        };
    }
    let e: Vec<f64> = (0..h * w)
        .map(|i| (pred[i] - if gt[i] { 1.0 } else { 0.0 }).abs())
        .collect();

    // Distance to, and index of, the nearest foreground pixel.
    let mut dist = vec![0.0; h * w];
    let mut idx = vec![0usize; h * w];
    for i in 0..h * w {
        let (r, c) = ((i / w) as f64, (i % w) as f64);
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..h * w {
            if gt[j] {
                let d = ((r - (j / w) as f64).powi(2) + (c - (j % w) as f64).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        dist[i] = best.0;
        idx[i] = best.1;
    }
    let et: Vec<f64> = (0..h * w)
        .map(|i| if gt[i] { e[i] } else { e[idx[i]] })
        .collect();

    // 2-D Gaussian kernel normalised to unit sum.
    let half = WINDOW / 2;
    let mut kernel = vec![0.0; (WINDOW * WINDOW) as usize];
    for dy in -half..=half {
        for dx in -half..=half {
            kernel[((dy + half) * WINDOW + dx + half) as usize] =
                (-((dx * dx + dy * dy) as f64) / (2.0 * SIGMA * SIGMA)).exp();
        }
    }
    let ks: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ks);
    let mut ea = vec![0.0; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let mut acc = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (rr, cc) = (r + dy, c + dx);
                    if rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 {
                        acc += kernel[((dy + half) * WINDOW + dx + half) as usize]
                            * et[(rr * w as i64 + cc) as usize];
                    }
                }
            }
            ea[(r * w as i64 + c) as usize] = acc;
        }
    }

    let mut ew = vec![0.0; h * w];
    for i in 0..h * w {
        let m = if gt[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        let b = if gt[i] {
            1.0
        } else {
            2.0 - (alpha * dist[i]).exp()
        };
        ew[i] = m * b;
    }
    let ew_fg: f64 = (0..h * w).filter(|&i| gt[i]).map(|i| ew[i]).sum();
    let fpw: f64 = (0..h * w).filter(|&i| !gt[i]).map(|i| ew[i]).sum();
    let tpw = n_fg as f64 - ew_fg;
    let r = 1.0 - ew_fg / n_fg as f64;
    let p = if tpw + fpw > 0.0 {
        tpw / (tpw + fpw)
    } else {
        0.0
    };
    let b2 = beta * beta;
    if b2 * p + r > 0.0 {
        (1.0 + b2) * p * r / (b2 * p + r)
    } else {
        0.0
    }
}
