//! Static result plots rendered straight to RGB images.

use crate::policy::EvalReport;
use crate::scenegen::{LabelMasks, RgbImage};
use crate::{Error, Result};

pub type Color = [u8; 3];

pub const WHITE: Color = [255, 255, 255];
pub const BLACK: Color = [0, 0, 0];
pub const GREY: Color = [190, 190, 190];
pub const GREEN: Color = [30, 160, 60];
pub const RED: Color = [210, 40, 40];
pub const BLUE: Color = [40, 80, 210];
pub const ORANGE: Color = [235, 140, 20];

/// Tint for wrap-grasp pixels.
pub const WRAP_TINT: Color = [255, 40, 40];
/// Tint for contain pixels.
pub const CONTAIN_TINT: Color = [40, 90, 255];

/// Pixel canvas with a linear data-to-pixel mapping.
pub struct Canvas {
    pub image: RgbImage,
    x_range: [f64; 2],
    y_range: [f64; 2],
    margin: usize,
}

impl Canvas {
    pub fn new(width: usize, height: usize, x_range: [f64; 2], y_range: [f64; 2]) -> Result<Self> {
        if !(x_range[1] > x_range[0] && y_range[1] > y_range[0]) {
            return Err(Error::Input("plot range must be non-empty".into()));
        }
        Ok(Self {
            image: RgbImage {
                height,
                width,
                data: vec![255; width * height * 3],
            },
            x_range,
            y_range,
            margin: 24,
        })
    }

    pub fn put(&mut self, px: i64, py: i64, c: Color) {
        if px < 0 || py < 0 || px as usize >= self.image.width || py as usize >= self.image.height {
            return;
        }
        let i = 3 * (py as usize * self.image.width + px as usize);
        self.image.data[i..i + 3].copy_from_slice(&c);
    }

    /// Data coordinates to pixel coordinates (y up).
    pub fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let m = self.margin as f64;
        let w = self.image.width as f64 - 2.0 * m;
        let h = self.image.height as f64 - 2.0 * m;
        let fx = (x - self.x_range[0]) / (self.x_range[1] - self.x_range[0]);
        let fy = (y - self.y_range[0]) / (self.y_range[1] - self.y_range[0]);
        (m + fx * w, m + (1.0 - fy) * h)
    }

    pub fn line_px(&mut self, a: (f64, f64), b: (f64, f64), c: Color) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            self.put(x.round() as i64, y.round() as i64, c);
        }
    }

    pub fn line(&mut self, a: [f64; 2], b: [f64; 2], c: Color) {
        let (pa, pb) = (self.to_px(a[0], a[1]), self.to_px(b[0], b[1]));
        self.line_px(pa, pb, c);
    }

    pub fn polyline(&mut self, pts: &[[f64; 2]], c: Color) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], c);
        }
    }

    pub fn dot(&mut self, p: [f64; 2], radius: i64, c: Color) {
        let (cx, cy) = self.to_px(p[0], p[1]);
        let (cx, cy) = (cx.round() as i64, cy.round() as i64);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= radius * radius {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    /// Ellipse `{center + R·diag(a, b)·(cos t, sin t)}` with `R` a rotation by `angle`.
    pub fn ellipse(&mut self, center: [f64; 2], a: f64, b: f64, angle: f64, c: Color) {
        let (s, co) = angle.sin_cos();
        let pts: Vec<[f64; 2]> = (0..=128)
            .map(|k| {
                let t = k as f64 / 128.0 * std::f64::consts::TAU;
                let (u, v) = (a * t.cos(), b * t.sin());
                [center[0] + co * u - s * v, center[1] + s * u + co * v]
            })
            .collect();
        self.polyline(&pts, c);
    }

    /// Frame plus zero lines where they fall inside the range.
    pub fn axes(&mut self) {
        let [x0, x1] = self.x_range;
        let [y0, y1] = self.y_range;
        self.polyline(&[[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]], BLACK);
        if x0 < 0.0 && x1 > 0.0 {
            self.line([0.0, y0], [0.0, y1], GREY);
        }
        if y0 < 0.0 && y1 > 0.0 {
            self.line([x0, 0.0], [x1, 0.0], GREY);
        }
    }
}

/// Eigen-decomposition of a symmetric 2×2 covariance: `(λ_major, λ_minor, angle)`.
pub fn covariance_axes(cov: [[f64; 2]; 2]) -> (f64, f64, f64) {
    let (a, b, d) = (cov[0][0], cov[0][1], cov[1][1]);
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d).powi(2) + b * b).sqrt();
    let angle = 0.5 * (2.0 * b).atan2(a - d);
    (mean + r, (mean - r).max(0.0), angle)
}

/// Planar landing errors per trial with 1σ and 2σ covariance ellipses and the
/// success circle `inner_radius − ball_radius`. Green dots succeeded, red failed.
pub fn error_ellipse_plot(report: &EvalReport, size: usize) -> Result<RgbImage> {
    let n = report.trials.len();
    if n == 0 {
        return Err(Error::Input("report has no trials".into()));
    }
    let nf = n as f64;
    let mx = report.trials.iter().map(|t| t.err_x).sum::<f64>() / nf;
    let my = report.trials.iter().map(|t| t.err_y).sum::<f64>() / nf;
    let mut cov = [[0.0; 2]; 2];
    for t in &report.trials {
        let (dx, dy) = (t.err_x - mx, t.err_y - my);
        cov[0][0] += dx * dx / nf;
        cov[0][1] += dx * dy / nf;
        cov[1][1] += dy * dy / nf;
    }
    cov[1][0] = cov[0][1];
    let (l1, l2, angle) = covariance_axes(cov);
    let success_r = report.inner_radius - report.ball_radius;
    let extent = report
        .trials
        .iter()
        .map(|t| t.err_x.abs().max(t.err_y.abs()))
        .fold(2.0 * l1.sqrt() + mx.abs().max(my.abs()), f64::max)
        .max(1.5 * success_r)
        .max(1e-3)
        * 1.1;
    let mut c = Canvas::new(size, size, [-extent, extent], [-extent, extent])?;
    c.axes();
    c.ellipse([0.0, 0.0], success_r, success_r, 0.0, GREY);
    for t in &report.trials {
        c.dot([t.err_x, t.err_y], 1, if t.success { GREEN } else { RED });
    }
    c.ellipse([mx, my], l1.sqrt(), l2.sqrt(), angle, BLUE);
    c.ellipse([mx, my], 2.0 * l1.sqrt(), 2.0 * l2.sqrt(), angle, BLUE);
    c.dot([mx, my], 2, BLUE);
    Ok(c.image)
}

/// Mean planar error (blue) and failure rate scaled to the error axis (orange)
/// against clutter level, averaged over cup shapes.
pub fn clutter_curve_plot(report: &EvalReport, width: usize, height: usize) -> Result<RgbImage> {
    let mut levels: Vec<usize> = report.rows.iter().map(|r| r.clutter).collect();
    levels.sort_unstable();
    levels.dedup();
    if levels.is_empty() {
        return Err(Error::Input("report has no rows".into()));
    }
    let agg = |f: &dyn Fn(&crate::policy::ConditionRow) -> f64| -> Vec<[f64; 2]> {
        levels
            .iter()
            .map(|&l| {
                let rows: Vec<_> = report
                    .rows
                    .iter()
                    .filter(|r| r.clutter == l && r.n > 0)
                    .collect();
                let total: usize = rows.iter().map(|r| r.n).sum();
                let v = rows.iter().map(|r| f(r) * r.n as f64).sum::<f64>() / total.max(1) as f64;
                [l as f64, v]
            })
            .collect()
    };
    let err = agg(&|r| r.mean_err_m);
    let fail = agg(&|r| 1.0 - r.success_rate);
    let y_max = err.iter().map(|p| p[1]).fold(1e-3, f64::max) * 1.2;
    let fail: Vec<[f64; 2]> = fail.iter().map(|p| [p[0], p[1] * y_max]).collect();
    let x0 = levels[0] as f64;
    let x1 = (*levels.last().unwrap() as f64).max(x0 + 1.0);
    let pad = 0.05 * (x1 - x0);
    let mut c = Canvas::new(width, height, [x0 - pad, x1 + pad], [0.0, y_max])?;
    c.axes();
    c.polyline(&fail, ORANGE);
    c.polyline(&err, BLUE);
    for (e, f) in err.iter().zip(&fail) {
        c.dot(*e, 3, BLUE);
        c.dot(*f, 2, ORANGE);
    }
    Ok(c.image)
}

/// Blends `WRAP_TINT` into wrap-grasp pixels and `CONTAIN_TINT` into contain
/// pixels; unlabeled pixels are copied unchanged.
pub fn affordance_overlay(image: &RgbImage, masks: &LabelMasks, alpha: f64) -> Result<RgbImage> {
    if (image.height, image.width) != (masks.height, masks.width) {
        return Err(Error::Input("image and masks differ in size".into()));
    }
    let mut out = image.clone();
    for r in 0..image.height {
        for col in 0..image.width {
            let tint = match (masks.get(0, r, col), masks.get(1, r, col)) {
                (_, true) => CONTAIN_TINT,
                (true, false) => WRAP_TINT,
                _ => continue,
            };
            let i = 3 * (r * image.width + col);
            for k in 0..3 {
                let v = (1.0 - alpha) * f64::from(image.data[i + k]) + alpha * f64::from(tint[k]);
                out.data[i + k] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale(image: &RgbImage, factor: usize) -> RgbImage {
    let (h, w) = (image.height * factor, image.width * factor);
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let i = 3 * ((r / factor) * image.width + c / factor);
            data.extend_from_slice(&image.data[i..i + 3]);
        }
    }
    RgbImage {
        height: h,
        width: w,
        data,
    }
}

/// Places images of equal height side by side.
pub fn hstack(images: &[RgbImage]) -> Result<RgbImage> {
    let h = images.first().map_or(0, |i| i.height);
    if images.iter().any(|i| i.height != h) {
        return Err(Error::Input("hstack needs equal heights".into()));
    }
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for img in images {
            data.extend_from_slice(&img.data[3 * r * img.width..3 * (r + 1) * img.width]);
        }
    }
    Ok(RgbImage {
        height: h,
        width: w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_axes_of_rotated_ellipse() {
        let (l1, l2, a) = covariance_axes([[2.0, 0.0], [0.0, 1.0]]);
        assert_eq!((l1, l2, a), (2.0, 1.0, 0.0));
        let (l1, l2, a) = covariance_axes([[1.5, 0.5], [0.5, 1.5]]);
        assert!((l1 - 2.0).abs() < 1e-12 && (l2 - 1.0).abs() < 1e-12);
        assert!((a - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn upscale_and_hstack_shapes() {
        let img = RgbImage {
            height: 2,
            width: 3,
            data: (0..18).collect(),
        };
        let up = upscale(&img, 2);
        assert_eq!((up.height, up.width), (4, 6));
        assert_eq!(&up.data[0..6], &[0, 1, 2, 0, 1, 2]);
        let s = hstack(&[img.clone(), img]).unwrap();
        assert_eq!(s.width, 6);
        assert_eq!(&s.data[9..12], &[0, 1, 2]);
    }

    #[test]
    fn canvas_maps_corners_inside_margin() {
        let c = Canvas::new(100, 50, [0.0, 1.0], [0.0, 2.0]).unwrap();
        assert_eq!(c.to_px(0.0, 0.0), (24.0, 26.0));
        assert_eq!(c.to_px(1.0, 2.0), (76.0, 24.0));
        assert!(Canvas::new(10, 10, [1.0, 1.0], [0.0, 1.0]).is_err());
    }
}
