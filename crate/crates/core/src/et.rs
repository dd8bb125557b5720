//! Equivariant pose prediction and canonicalization.
//!
//! The pose predictor works on the polar representation, where rotating
//! the source image is a circular shift of the angular axis. Its
//! convolutions are stride-1 with circular width padding, so the feature
//! map shifts along with the input. Pooling then weights each angular
//! column's mean activation by the phase of that column:
//!
//! `(u, v) = sum_j w_j * (cos(2*pi*j/A), sin(2*pi*j/A))`
//!
//! A shift of the columns multiplies `(u, v)` by the matching rotation,
//! so the predicted angle `atan2(v, u)` moves one-for-one with input
//! rotation, for any parameter values. Plain mean pooling would be
//! invariant and carry no pose signal at all.

use crate::error::{Error, Result};
use crate::geometry::{
    from_polar, rotate_image_diff, to_polar, GalaxyImage, PolarImage, PoseParams,
};
use crate::nn::Conv2dLayer;
use crate::tensor::{PaddingMode, ParameterStore, Tensor};

pub struct PosePredictorNet {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    pub radial_bins: usize,
    pub angular_bins: usize,
    pub r_max: f64,
    /// Fixed phase basis, (A, 2) columns of cos and sin.
    phase: Tensor,
}

impl PosePredictorNet {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        radial_bins: usize,
        angular_bins: usize,
        r_max: f64,
        seed: u64,
    ) -> Result<Self> {
        let conv1 = Conv2dLayer::new(
            store,
            &format!("{prefix}.conv1"),
            1,
            8,
            3,
            1,
            1,
            PaddingMode::CircularWidth,
            seed,
        )?;
        let conv2 = Conv2dLayer::new(
            store,
            &format!("{prefix}.conv2"),
            8,
            16,
            3,
            1,
            1,
            PaddingMode::CircularWidth,
            seed,
        )?;
        let mut basis = Vec::with_capacity(angular_bins * 2);
        for j in 0..angular_bins {
            let phi = std::f64::consts::TAU * j as f64 / angular_bins as f64;
            basis.push(phi.cos());
            basis.push(phi.sin());
        }
        let phase = Tensor::new(&[angular_bins, 2], basis)?;
        Ok(PosePredictorNet {
            conv1,
            conv2,
            radial_bins,
            angular_bins,
            r_max,
            phase,
        })
    }

    /// Phase-weighted pooled feature pair (u, v) of a polar image.
    pub fn pooled_phase(&self, polar: &PolarImage) -> Result<(Tensor, Tensor)> {
        let f = self.conv1.forward(polar.pixels())?.relu();
        let f = self.conv2.forward(&f)?;
        let shape = f.shape();
        let (c, r, a) = (shape[0], shape[1], shape[2]);
        // Rows of (c*r, a) times the (a, 2) phase basis, averaged over rows.
        let uv = f.reshape(&[c * r, a])?.matmul(&self.phase)?;
        let n = (c * r) as f64;
        let flat = uv.flatten();
        // Columns interleave as [u0, v0, u1, v1, ...]; split with masks.
        let len = 2 * c * r;
        let mut mu = vec![0.0; len];
        let mut mv = vec![0.0; len];
        for i in 0..c * r {
            mu[2 * i] = 1.0 / n;
            mv[2 * i + 1] = 1.0 / n;
        }
        let u = flat.mul(&Tensor::new(&[len], mu)?)?.sum();
        let v = flat.mul(&Tensor::new(&[len], mv)?)?.sum();
        Ok((u, v))
    }
}

/// Predicts the rotation of `img` relative to its canonical pose.
/// Differentiable with respect to the network parameters and the image.
pub fn predict_pose(net: &PosePredictorNet, img: &GalaxyImage) -> Result<PoseParams> {
    let polar = to_polar(img, net.radial_bins, net.angular_bins, net.r_max)?;
    let (u, v) = net.pooled_phase(&polar)?;
    let angle = Tensor::atan2(&v, &u)?;
    Ok(PoseParams::new(angle))
}

/// Rotates the image back by its predicted pose and resamples to polar
/// coordinates. The returned polar map is approximately invariant to
/// rotations of the input; the angle carries the pose.
pub fn canonicalize(
    net: &PosePredictorNet,
    img: &GalaxyImage,
) -> Result<(PolarImage, PoseParams)> {
    let pose = predict_pose(net, img)?;
    let unrotated = rotate_image_diff(img, &pose.node.neg())?;
    let polar = to_polar(&unrotated, net.radial_bins, net.angular_bins, net.r_max)?;
    Ok((polar, pose))
}

/// Inverse of [`canonicalize`]: back to Cartesian pixels, then forward by
/// the pose angle. Differentiable with respect to both the polar map and
/// the pose.
pub fn decanonicalize(
    polar: &PolarImage,
    pose: &PoseParams,
    size: usize,
    r_max: f64,
) -> Result<GalaxyImage> {
    if r_max > size as f64 / 2.0 {
        return Err(Error::RadiusTooLarge { r_max, size });
    }
    let cart = from_polar(polar, size, r_max)?;
    rotate_image_diff(&cart, &pose.node)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(seed: u64) -> (ParameterStore, PosePredictorNet) {
        let mut store = ParameterStore::new();
        let net = PosePredictorNet::new(&mut store, "pose", 16, 32, 14.0, seed).unwrap();
        (store, net)
    }

    fn blob_image(s: usize, cx: f64, cy: f64, sigma: f64) -> GalaxyImage {
        let c = (s as f64 - 1.0) / 2.0;
        let mut v = Vec::with_capacity(s * s);
        for i in 0..s {
            for j in 0..s {
                let (x, y) = (j as f64 - c, i as f64 - c);
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                v.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        GalaxyImage::new(Tensor::new(&[1, s, s], v).unwrap()).unwrap()
    }

    #[test]
    fn pose_is_deterministic() {
        let (_s1, n1) = net(3);
        let (_s2, n2) = net(3);
        let img = blob_image(32, 5.0, 2.0, 3.0);
        let a = predict_pose(&n1, &img).unwrap().angle;
        let b = predict_pose(&n2, &img).unwrap().angle;
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_image_pose_is_well_defined_and_canonical_polar_is_stable() {
        let (store, n) = net(1);
        // A constant image is exactly rotation-symmetric as seen by the
        // polar probe (r_max keeps samples away from the corners).
        let s = 32;
        let img =
            GalaxyImage::new(Tensor::new(&[1, s, s], vec![0.6; s * s]).unwrap()).unwrap();
        let polar = to_polar(&img, n.radial_bins, n.angular_bins, n.r_max).unwrap();
        let (u, v) = n.pooled_phase(&polar).unwrap();
        // Constant angular axis: the phase-weighted sums cancel.
        assert!(u.item().abs() < 1e-9, "u = {}", u.item());
        assert!(v.item().abs() < 1e-9, "v = {}", v.item());
        let pose = predict_pose(&n, &img).unwrap();
        assert!(pose.angle.is_finite());
        assert!((0.0..std::f64::consts::TAU).contains(&pose.angle));
        // Backward through the atan2 near its origin must not poison the
        // graph with NaN.
        pose.node.backward().unwrap();
        for (_, p) in store.iter() {
            if let Some(g) = p.grad() {
                assert!(g.iter().all(|x| x.is_finite()));
            }
        }
        // Rotation of a symmetric image cannot move its canonical polar
        // map, whatever angle the net happens to report.
        let (canon_a, _) = canonicalize(&n, &img).unwrap();
        let (canon_b, _) = canonicalize(&n, &crate::geometry::rotate_image(&img, 0.37)).unwrap();
        let (a, b) = (canon_a.pixels().values(), canon_b.pixels().values());
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = a.iter().map(|x| x * x).sum();
        assert!((num / den).sqrt() < 1e-9);
    }

    #[test]
    fn canonicalize_angle_matches_predict_pose() {
        let (_s, n) = net(9);
        let img = blob_image(32, 4.0, -3.0, 2.5);
        let direct = predict_pose(&n, &img).unwrap();
        let (_, pose) = canonicalize(&n, &img).unwrap();
        assert_eq!(direct.angle, pose.angle);
    }

    #[test]
    fn decanonicalize_with_zero_pose_equals_from_polar() {
        let (_s, n) = net(2);
        let img = blob_image(32, 3.0, 1.0, 4.0);
        let polar = to_polar(&img, n.radial_bins, n.angular_bins, n.r_max).unwrap();
        let a = decanonicalize(&polar, &PoseParams::from_angle(0.0), 32, n.r_max).unwrap();
        let b = from_polar(&polar, 32, n.r_max).unwrap();
        let (av, bv) = (a.pixels().values(), b.pixels().values());
        for (x, y) in av.iter().zip(&bv) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
