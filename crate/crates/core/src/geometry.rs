//! Differentiable image resampling and the polar canonical-coordinate
//! transform.
//!
//! Coordinates handed to [`bilinear_sample`] are continuous pixel
//! positions with (0, 0) at the image center, x along columns and y along
//! rows. In the polar representation produced by [`to_polar`], column `j`
//! holds angle `2*pi*j / A` and the angular axis is periodic, so rotating
//! the source image becomes a circular shift of the columns.

use crate::error::{Error, Result};
use crate::tensor::{BackFn, Tensor};

/// Single-channel square image, pixel intensities in [0, 1], shape (1, S, S).
#[derive(Clone)]
pub struct GalaxyImage {
    pixels: Tensor,
}

impl GalaxyImage {
    /// Validates shape (1, S, S) and the [0, 1] intensity range.
    pub fn new(pixels: Tensor) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[0] != 1 || shape[1] != shape[2] {
            return Err(Error::RankMismatch {
                op: "GalaxyImage",
                expected: 3,
                shape,
            });
        }
        let ok = pixels.with_values(|v| v.iter().all(|p| (-1e-9..=1.0 + 1e-9).contains(p)));
        if !ok {
            return Err(Error::Config(
                "image intensities must lie in [0, 1]".to_string(),
            ));
        }
        Ok(GalaxyImage { pixels })
    }

    /// Internal constructor for op outputs that preserve the range by
    /// construction (bilinear sampling is a convex combination).
    pub(crate) fn from_op_output(pixels: Tensor) -> Self {
        debug_assert!(pixels.shape().len() == 3 && pixels.shape()[0] == 1);
        GalaxyImage { pixels }
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }
}

/// Polar resampling of an image: shape (1, R, A), rows are radii sampled
/// at bin centers, columns are angles.
#[derive(Clone)]
pub struct PolarImage {
    pixels: Tensor,
}

impl PolarImage {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::RankMismatch {
                op: "PolarImage",
                expected: 3,
                shape,
            });
        }
        Ok(PolarImage { pixels })
    }

    pub fn radial_bins(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn angular_bins(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }
}

/// Predicted rotation of an image relative to its canonical pose.
///
/// `angle` is reduced to [0, 2*pi); `node` is the same angle as a live
/// graph scalar so downstream transforms stay differentiable with respect
/// to the pose predictor.
#[derive(Clone)]
pub struct PoseParams {
    pub angle: f64,
    pub node: Tensor,
}

impl PoseParams {
    pub fn new(node: Tensor) -> Self {
        let angle = node.item().rem_euclid(std::f64::consts::TAU);
        PoseParams { angle, node }
    }

    /// Pose with no graph history, for plain-float callers.
    pub fn from_angle(angle: f64) -> Self {
        Self::new(Tensor::scalar(angle))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SampleBoundary {
    /// Out-of-bounds samples contribute zero.
    Zeros,
    /// Wrap the x (angular) axis, clamp the y (radial) axis; used when
    /// sampling a polar grid.
    WrapXClampY,
}

/// Low-level bilinear gather from a (1, H, W) tensor at fractional index
/// coordinates (column `xs`, row `ys`). Differentiable with respect to
/// the source and, where they require gradients, the coordinates.
fn sample_grid(src: &Tensor, xs: &Tensor, ys: &Tensor, boundary: SampleBoundary) -> Result<Tensor> {
    let xshape = xs.shape();
    if xshape != ys.shape() {
        return Err(Error::ShapeMismatch {
            op: "bilinear_sample coordinates",
            lhs: xshape,
            rhs: ys.shape(),
        });
    }
    let sshape = src.shape();
    let (h, w) = (sshape[1], sshape[2]);
    let sv = src.values();
    let xv = xs.values();
    let yv = ys.values();
    let n = xv.len();

    // (value, d/dx, d/dy) per sample.
    let mut out = vec![0.0; n];
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    // Neighbour bookkeeping for the backward scatter:
    // four (index, weight) pairs per sample, index = usize::MAX when the
    // neighbour is out of bounds.
    let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(n);

    for i in 0..n {
        let (px, py) = (xv[i], yv[i]);
        let (x0, y0, fx, fy, clamped_y) = match boundary {
            SampleBoundary::Zeros => {
                let x0 = px.floor();
                let y0 = py.floor();
                (x0, y0, px - x0, py - y0, false)
            }
            SampleBoundary::WrapXClampY => {
                let x0 = px.floor();
                let fx = px - x0;
                let (y0, fy, clamped) = if py <= 0.0 {
                    (0.0, 0.0, py < 0.0)
                } else if py >= (h - 1) as f64 {
                    ((h - 2) as f64, 1.0, py > (h - 1) as f64)
                } else {
                    let y0 = py.floor();
                    (y0, py - y0, false)
                };
                (x0, y0, fx, fy, clamped)
            }
        };

        let fetch = |xi: isize, yi: isize| -> (usize, f64) {
            match boundary {
                SampleBoundary::Zeros => {
                    if xi >= 0 && (xi as usize) < w && yi >= 0 && (yi as usize) < h {
                        let idx = yi as usize * w + xi as usize;
                        (idx, sv[idx])
                    } else {
                        (usize::MAX, 0.0)
                    }
                }
                SampleBoundary::WrapXClampY => {
                    let xw = xi.rem_euclid(w as isize) as usize;
                    let yc = yi.clamp(0, h as isize - 1) as usize;
                    let idx = yc * w + xw;
                    (idx, sv[idx])
                }
            }
        };

        let (xi0, yi0) = (x0 as isize, y0 as isize);
        let (i00, v00) = fetch(xi0, yi0);
        let (i10, v10) = fetch(xi0 + 1, yi0);
        let (i01, v01) = fetch(xi0, yi0 + 1);
        let (i11, v11) = fetch(xi0 + 1, yi0 + 1);

        let (wx0, wx1) = (1.0 - fx, fx);
        let (wy0, wy1) = (1.0 - fy, fy);
        out[i] = wy0 * (wx0 * v00 + wx1 * v10) + wy1 * (wx0 * v01 + wx1 * v11);
        dx[i] = wy0 * (v10 - v00) + wy1 * (v11 - v01);
        dy[i] = if clamped_y {
            0.0
        } else {
            wx0 * (v01 - v00) + wx1 * (v11 - v10)
        };
        taps.push([
            (i00, wy0 * wx0),
            (i10, wy0 * wx1),
            (i01, wy1 * wx0),
            (i11, wy1 * wx1),
        ]);
    }

    let need_src = src.requires_grad();
    let need_x = xs.requires_grad();
    let need_y = ys.requires_grad();
    if !need_src && !need_x && !need_y {
        return Ok(Tensor::new(&xshape, out).expect("shape accounted"));
    }
    let mut parents = Vec::new();
    if need_src {
        parents.push(src.clone());
    }
    if need_x {
        parents.push(xs.clone());
    }
    if need_y {
        parents.push(ys.clone());
    }
    let src_len = sv.len();
    let back: BackFn = Box::new(move |up| {
        let mut grads = Vec::new();
        if need_src {
            let mut g = vec![0.0; src_len];
            for (i, tap) in taps.iter().enumerate() {
                let u = up[i];
                for (idx, wgt) in tap {
                    if *idx != usize::MAX {
                        g[*idx] += u * wgt;
                    }
                }
            }
            grads.push(g);
        }
        if need_x {
            grads.push(up.iter().zip(&dx).map(|(u, d)| u * d).collect());
        }
        if need_y {
            grads.push(up.iter().zip(&dy).map(|(u, d)| u * d).collect());
        }
        grads
    });
    Ok(Tensor::from_op(xshape, out, parents, back))
}

/// Bilinear interpolation of an image at center-origin coordinates.
/// Samples outside the frame return 0.
pub fn bilinear_sample(img: &GalaxyImage, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
    let c = (img.size() as f64 - 1.0) / 2.0;
    let px = xs.add_scalar(c);
    let py = ys.add_scalar(c);
    sample_grid(img.pixels(), &px, &py, SampleBoundary::Zeros)
}

fn rotation_index_grids(size: usize, angle: f64) -> (Vec<f64>, Vec<f64>) {
    let c = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut xs = Vec::with_capacity(size * size);
    let mut ys = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = i as f64 - c;
        for j in 0..size {
            let x = j as f64 - c;
            xs.push(x * cos + y * sin + c);
            ys.push(y * cos - x * sin + c);
        }
    }
    (xs, ys)
}

/// Rotates about the image center. Pixels leaving the frame are lost;
/// entering pixels are 0.
pub fn rotate_image(img: &GalaxyImage, angle: f64) -> GalaxyImage {
    let s = img.size();
    let (xs, ys) = rotation_index_grids(s, angle);
    let xs = Tensor::new(&[s * s], xs).expect("grid shape");
    let ys = Tensor::new(&[s * s], ys).expect("grid shape");
    let flat = sample_grid(img.pixels(), &xs, &ys, SampleBoundary::Zeros)
        .expect("shapes constructed consistently");
    GalaxyImage::from_op_output(flat.reshape(&[1, s, s]).expect("element count"))
}

/// Rotation with a live-graph angle, so gradients reach whatever network
/// predicted it.
pub fn rotate_image_diff(img: &GalaxyImage, angle: &Tensor) -> Result<GalaxyImage> {
    let s = img.size();
    let c = (s as f64 - 1.0) / 2.0;
    let mut bx = Vec::with_capacity(s * s);
    let mut by = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            bx.push(j as f64 - c);
            by.push(i as f64 - c);
        }
    }
    let base_x = Tensor::new(&[s * s], bx)?;
    let base_y = Tensor::new(&[s * s], by)?;
    let cos = angle.cos();
    let sin = angle.sin();
    // Source position of output pixel (x, y) is (x cos + y sin, y cos - x sin).
    let xs = base_x.scale(&cos)?.add(&base_y.scale(&sin)?)?.add_scalar(c);
    let ys = base_y.scale(&cos)?.sub(&base_x.scale(&sin)?)?.add_scalar(c);
    let flat = sample_grid(img.pixels(), &xs, &ys, SampleBoundary::Zeros)?;
    Ok(GalaxyImage::from_op_output(flat.reshape(&[1, s, s])?))
}

/// Resamples onto a polar grid: row `i` is radius `(i + 0.5) * r_max / R`,
/// column `j` is angle `2*pi*j / A`.
pub fn to_polar(img: &GalaxyImage, radial_bins: usize, angular_bins: usize, r_max: f64) -> Result<PolarImage> {
    let s = img.size();
    if r_max > s as f64 / 2.0 {
        return Err(Error::RadiusTooLarge { r_max, size: s });
    }
    let c = (s as f64 - 1.0) / 2.0;
    let mut xs = Vec::with_capacity(radial_bins * angular_bins);
    let mut ys = Vec::with_capacity(radial_bins * angular_bins);
    for i in 0..radial_bins {
        let r = (i as f64 + 0.5) * r_max / radial_bins as f64;
        for j in 0..angular_bins {
            let phi = std::f64::consts::TAU * j as f64 / angular_bins as f64;
            xs.push(r * phi.cos() + c);
            ys.push(r * phi.sin() + c);
        }
    }
    let xs = Tensor::new(&[radial_bins * angular_bins], xs)?;
    let ys = Tensor::new(&[radial_bins * angular_bins], ys)?;
    let flat = sample_grid(img.pixels(), &xs, &ys, SampleBoundary::Zeros)?;
    PolarImage::new(flat.reshape(&[1, radial_bins, angular_bins])?)
}

/// Inverse of [`to_polar`]: every Cartesian pixel inside radius `r_max`
/// bilinearly samples the polar grid (periodic in angle, clamped in
/// radius); pixels outside `r_max` are 0.
pub fn from_polar(polar: &PolarImage, size: usize, r_max: f64) -> Result<GalaxyImage> {
    let (rb, ab) = (polar.radial_bins(), polar.angular_bins());
    let c = (size as f64 - 1.0) / 2.0;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut inside: Vec<usize> = Vec::new();
    for i in 0..size {
        let y = i as f64 - c;
        for j in 0..size {
            let x = j as f64 - c;
            let r = (x * x + y * y).sqrt();
            if r > r_max {
                continue;
            }
            let mut phi = y.atan2(x);
            if phi < 0.0 {
                phi += std::f64::consts::TAU;
            }
            xs.push(phi * ab as f64 / std::f64::consts::TAU);
            ys.push(r * rb as f64 / r_max - 0.5);
            inside.push(i * size + j);
        }
    }
    let n_in = inside.len();
    let xs = Tensor::new(&[n_in], xs)?;
    let ys = Tensor::new(&[n_in], ys)?;
    let gathered = sample_grid(polar.pixels(), &xs, &ys, SampleBoundary::WrapXClampY)?;

    // Scatter the disc samples into the full frame.
    let gv = gathered.values();
    let mut out = vec![0.0; size * size];
    for (slot, idx) in gv.iter().zip(&inside) {
        out[*idx] = *slot;
    }
    if !gathered.requires_grad() {
        let t = Tensor::new(&[1, size, size], out)?;
        return Ok(GalaxyImage::from_op_output(t));
    }
    let back: BackFn = Box::new(move |up| {
        let g = inside.iter().map(|idx| up[*idx]).collect();
        vec![g]
    });
    let t = Tensor::from_op(vec![1, size, size], out, vec![gathered], back);
    Ok(GalaxyImage::from_op_output(t))
}
