//! Convolutional VAE in canonical polar coordinates.
//!
//! The encoder canonicalizes the input (rotate back by the predicted
//! pose, resample to polar) and maps the polar image to a diagonal
//! Gaussian over the latents. The decoder maps a latent draw to a polar
//! map through dense layers and two upsample+conv stages with a sigmoid
//! output. Reconstruction likelihood is measured in canonical polar
//! space against the canonical representation of the input, with a
//! Bernoulli (binary cross-entropy) pixel model evaluated from the
//! decoder logits for numerical stability.

use crate::error::{Error, Result};
use crate::et::{canonicalize, decanonicalize, PosePredictorNet};
use crate::geometry::{GalaxyImage, PolarImage, PoseParams};
use crate::nn::{Conv2dLayer, DenseLayer};
use crate::seeding;
use crate::tensor::{PaddingMode, ParameterStore, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Geometry and capacity knobs shared by every network in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Cartesian image side S.
    pub image_size: usize,
    /// Polar radial bins R (divisible by 4).
    pub radial_bins: usize,
    /// Polar angular bins A (divisible by 4).
    pub angular_bins: usize,
    /// Outer sampling radius of the polar grid, at most S/2.
    pub r_max: f64,
    /// Latent dimension d.
    pub latent_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            radial_bins: 32,
            angular_bins: 64,
            r_max: 31.0,
            latent_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radial_bins % 4 != 0 || self.angular_bins % 4 != 0 {
            return Err(Error::Config(format!(
                "polar bins ({}, {}) must be divisible by 4 for the decoder",
                self.radial_bins, self.angular_bins
            )));
        }
        if self.r_max > self.image_size as f64 / 2.0 {
            return Err(Error::RadiusTooLarge {
                r_max: self.r_max,
                size: self.image_size,
            });
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior q(z|x).
#[derive(Clone)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// A reparameterized draw together with the noise that produced it.
#[derive(Clone)]
pub struct LatentSample {
    pub z: Tensor,
    pub noise: Vec<f64>,
}

fn conv_s2_out(n: usize) -> usize {
    // 3x3 kernel, stride 2, padding 1.
    (n + 2 - 3) / 2 + 1
}

pub struct VaeModel {
    pub config: ModelConfig,
    pub pose_net: PosePredictorNet,
    enc_conv1: Conv2dLayer,
    enc_conv2: Conv2dLayer,
    enc_mean: DenseLayer,
    enc_logvar: DenseLayer,
    dec_fc1: DenseLayer,
    dec_fc2: DenseLayer,
    dec_conv1: Conv2dLayer,
    dec_conv2: Conv2dLayer,
    pub params: ParameterStore,
}

impl VaeModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let pose_net = PosePredictorNet::new(
            &mut params,
            "pose",
            config.radial_bins,
            config.angular_bins,
            config.r_max,
            seed,
        )?;

        let enc_conv1 = Conv2dLayer::new(
            &mut params,
            "encoder.conv1",
            1,
            8,
            3,
            2,
            1,
            PaddingMode::CircularWidth,
            seed,
        )?;
        let enc_conv2 = Conv2dLayer::new(
            &mut params,
            "encoder.conv2",
            8,
            16,
            3,
            2,
            1,
            PaddingMode::CircularWidth,
            seed,
        )?;
        let feat = 16 * conv_s2_out(conv_s2_out(config.radial_bins))
            * conv_s2_out(conv_s2_out(config.angular_bins));
        let enc_mean = DenseLayer::new(&mut params, "encoder.mean", feat, config.latent_dim, seed)?;
        let enc_logvar =
            DenseLayer::new(&mut params, "encoder.logvar", feat, config.latent_dim, seed)?;

        let (dr, da) = (config.radial_bins / 4, config.angular_bins / 4);
        let dec_fc1 = DenseLayer::new(&mut params, "decoder.fc1", config.latent_dim, 128, seed)?;
        let dec_fc2 = DenseLayer::new(&mut params, "decoder.fc2", 128, 16 * dr * da, seed)?;
        let dec_conv1 = Conv2dLayer::new(
            &mut params,
            "decoder.conv1",
            16,
            8,
            3,
            1,
            1,
            PaddingMode::CircularWidth,
            seed,
        )?;
        let dec_conv2 = Conv2dLayer::new(
            &mut params,
            "decoder.conv2",
            8,
            1,
            3,
            1,
            1,
            PaddingMode::CircularWidth,
            seed,
        )?;

        Ok(VaeModel {
            config: config.clone(),
            pose_net,
            enc_conv1,
            enc_conv2,
            enc_mean,
            enc_logvar,
            dec_fc1,
            dec_fc2,
            dec_conv1,
            dec_conv2,
            params,
        })
    }

    /// Encoder pass that also exposes the canonical polar representation
    /// the posterior was computed from (the ELBO needs it as its
    /// reconstruction target).
    pub fn encode_full(
        &self,
        img: &GalaxyImage,
    ) -> Result<(LatentDistribution, PoseParams, PolarImage)> {
        if img.size() != self.config.image_size {
            return Err(Error::Config(format!(
                "image size {} does not match configured size {}",
                img.size(),
                self.config.image_size
            )));
        }
        let (canon, pose) = canonicalize(&self.pose_net, img)?;
        let h = self.enc_conv1.forward(canon.pixels())?.relu();
        let h = self.enc_conv2.forward(&h)?.relu();
        let flat = h.flatten();
        let mean = self.enc_mean.forward(&flat)?;
        let logvar = self.enc_logvar.forward(&flat)?;
        Ok((LatentDistribution { mean, logvar }, pose, canon))
    }

    /// Pre-sigmoid decoder output over the canonical polar grid.
    pub fn decoder_logits(&self, z: &Tensor) -> Result<Tensor> {
        let (dr, da) = (self.config.radial_bins / 4, self.config.angular_bins / 4);
        let h = self.dec_fc1.forward(z)?.relu();
        let h = self.dec_fc2.forward(&h)?.relu();
        let h = h.reshape(&[16, dr, da])?;
        let h = h.upsample2()?;
        let h = self.dec_conv1.forward(&h)?.relu();
        let h = h.upsample2()?;
        self.dec_conv2.forward(&h)
    }

    /// Decoded canonical polar image, pixels in (0, 1).
    pub fn decode_polar(&self, z: &Tensor) -> Result<PolarImage> {
        PolarImage::new(self.decoder_logits(z)?.sigmoid())
    }
}

/// Encoder front half only: posterior and pose.
pub fn encode(model: &VaeModel, img: &GalaxyImage) -> Result<(LatentDistribution, PoseParams)> {
    let (dist, pose, _) = model.encode_full(img)?;
    Ok((dist, pose))
}

/// `z = mean + exp(logvar / 2) * eps` with the given noise vector;
/// differentiable with respect to mean and logvar.
pub fn reparameterize_with(dist: &LatentDistribution, noise: &[f64]) -> Result<LatentSample> {
    let eps = Tensor::new(&[noise.len()], noise.to_vec())?;
    let std = dist.logvar.mul_scalar(0.5).exp();
    let z = dist.mean.add(&std.mul(&eps)?)?;
    Ok(LatentSample {
        z,
        noise: noise.to_vec(),
    })
}

/// Reparameterized sample with standard-normal noise drawn from the seed.
pub fn reparameterize(dist: &LatentDistribution, seed: u64) -> Result<LatentSample> {
    let mut rng = seeding::rng(seed, "reparam");
    let noise: Vec<f64> = (0..dist.mean.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    reparameterize_with(dist, &noise)
}

/// Closed-form `KL(q || N(0, I)) = 0.5 * sum(mean^2 + exp(logvar) - 1 - logvar)`.
pub fn gaussian_kl(dist: &LatentDistribution) -> Result<Tensor> {
    let d = dist.mean.len() as f64;
    let sq = dist.mean.square().sum();
    let ev = dist.logvar.exp().sum();
    let lv = dist.logvar.sum();
    Ok(sq.add(&ev)?.sub(&lv)?.add_scalar(-d).mul_scalar(0.5))
}

/// Bernoulli log-likelihood of targets in [0, 1] under decoder logits:
/// `sum(x * l - softplus(l))`, the stable form of `-BCE`.
pub fn bernoulli_log_likelihood(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let xl = target.mul(logits)?.sum();
    let sp = logits.softplus().sum();
    xl.sub(&sp)
}

/// Single-sample evidence lower bound for one image, to be maximized.
/// The reconstruction term is measured in canonical polar space against
/// the canonical representation of the input.
pub fn elbo(model: &VaeModel, img: &GalaxyImage, seed: u64) -> Result<Tensor> {
    let (dist, _pose, canon) = model.encode_full(img)?;
    let sample = reparameterize(&dist, seed)?;
    let logits = model.decoder_logits(&sample.z)?;
    let recon = bernoulli_log_likelihood(&logits, canon.pixels())?;
    let kl = gaussian_kl(&dist)?;
    recon.sub(&kl)
}

/// Decodes a latent draw and restores the original orientation.
pub fn decode(model: &VaeModel, sample: &LatentSample, pose: &PoseParams) -> Result<GalaxyImage> {
    let polar = model.decode_polar(&sample.z)?;
    decanonicalize(&polar, pose, model.config.image_size, model.config.r_max)
}

/// Analytic ELBO for a Gaussian observation model, used to check ELBO
/// semantics against conjugate closed forms: with `p(z) = N(0, I)` and
/// `p(x_i | z) = N(z_i, obs_var)`, the expectation over q is exact:
///
/// `E_q[log p(x|z)] = sum_i [ -0.5*ln(2*pi*v) - ((x_i - mu_i)^2 + s_i^2) / (2v) ]`
///
/// and the returned value is that expectation minus `KL(q || N(0, I))`.
pub fn gaussian_elbo_analytic(dist: &LatentDistribution, x: &[f64], obs_var: f64) -> f64 {
    let mean = dist.mean.values();
    let logvar = dist.logvar.values();
    assert_eq!(mean.len(), x.len());
    let mut expected_ll = 0.0;
    let mut kl = 0.0;
    for i in 0..x.len() {
        let s2 = logvar[i].exp();
        expected_ll += -0.5 * (std::f64::consts::TAU * obs_var).ln()
            - ((x[i] - mean[i]).powi(2) + s2) / (2.0 * obs_var);
        kl += 0.5 * (mean[i] * mean[i] + s2 - 1.0 - logvar[i]);
    }
    expected_ll - kl
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"PVAECKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `magic | u64 manifest length | manifest JSON | raw f64 LE data`
/// with parameters in lexicographic order. Byte-for-byte reproducible.
pub fn save_checkpoint(params: &ParameterStore, config: &ModelConfig, path: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        config: config.clone(),
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape(),
            })
            .collect(),
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(mjson.len() as u64).to_le_bytes())?;
    file.write_all(&mjson)?;
    for (_, t) in params.iter() {
        for v in t.values() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint back as (config, name -> values).
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, BTreeMap<String, Vec<f64>>)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint {
            path: path.display().to_string(),
        });
    }
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint {
            reason: "bad magic".into(),
        });
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)?;
    let mlen = u64::from_le_bytes(len8) as usize;
    let mut mjson = vec![0u8; mlen];
    file.read_exact(&mut mjson)?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&mjson).map_err(|e| Error::BadCheckpoint {
            reason: e.to_string(),
        })?;
    let mut out = BTreeMap::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf).map_err(|_| Error::BadCheckpoint {
            reason: format!("truncated data for '{}'", entry.name),
        })?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(entry.name.clone(), values);
    }
    Ok((manifest.config, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            radial_bins: 8,
            angular_bins: 12,
            r_max: 7.0,
            latent_dim: 3,
        }
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> GalaxyImage {
        let s = cfg.image_size;
        let mut rng = seeding::rng(seed, "img");
        let v: Vec<f64> = (0..s * s).map(|_| rng.gen_range(0.05..0.95)).collect();
        GalaxyImage::new(Tensor::new(&[1, s, s], v).unwrap()).unwrap()
    }

    use rand::Rng;

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = tiny_config();
        let model = VaeModel::new(&cfg, 7).unwrap();
        let img = random_image(&cfg, 1);
        let (dist, pose) = encode(&model, &img).unwrap();
        assert_eq!(dist.mean.shape(), vec![cfg.latent_dim]);
        assert_eq!(dist.logvar.shape(), vec![cfg.latent_dim]);
        assert!(pose.angle.is_finite());
        let (dist2, _) = encode(&model, &img).unwrap();
        assert_eq!(dist.mean.values(), dist2.mean.values());
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let cfg = tiny_config();
        let model = VaeModel::new(&cfg, 7).unwrap();
        let wrong = GalaxyImage::new(Tensor::new(&[1, 20, 20], vec![0.1; 400]).unwrap()).unwrap();
        assert!(encode(&model, &wrong).is_err());
    }

    #[test]
    fn reparameterize_degenerate_variance_returns_mean() {
        let dist = LatentDistribution {
            mean: Tensor::new(&[2], vec![1.0, -2.0]).unwrap(),
            logvar: Tensor::new(&[2], vec![-60.0, -60.0]).unwrap(),
        };
        let s = reparameterize(&dist, 3).unwrap();
        let z = s.z.values();
        assert!((z[0] - 1.0).abs() < 1e-12);
        assert!((z[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let n = 100_000;
        let dist = LatentDistribution {
            mean: Tensor::new(&[2], vec![1.0, -2.0]).unwrap(),
            logvar: Tensor::new(&[2], vec![0.0, 4.0f64.ln()]).unwrap(),
        };
        let mut sum = [0.0f64; 2];
        let mut sumsq = [0.0f64; 2];
        for i in 0..n {
            let z = reparameterize(&dist, i as u64).unwrap().z.values();
            for d in 0..2 {
                sum[d] += z[d];
                sumsq[d] += z[d] * z[d];
            }
        }
        let m0 = sum[0] / n as f64;
        let m1 = sum[1] / n as f64;
        // CLT bound: 3 sigma / sqrt(n) with sigma = 1 is ~0.0095.
        assert!((m0 - 1.0).abs() < 0.02, "mean[0] = {m0}");
        assert!((m1 + 2.0).abs() < 0.02, "mean[1] = {m1}");
        let var1 = sumsq[1] / n as f64 - m1 * m1;
        assert!((var1 - 4.0).abs() < 0.2, "var[1] = {var1}");
    }

    #[test]
    fn kl_zero_iff_standard_normal() {
        let zero = LatentDistribution {
            mean: Tensor::zeros(&[4]),
            logvar: Tensor::zeros(&[4]),
        };
        assert!(gaussian_kl(&zero).unwrap().item().abs() < 1e-15);
        let shifted = LatentDistribution {
            mean: Tensor::new(&[1], vec![1.0]).unwrap(),
            logvar: Tensor::zeros(&[1]),
        };
        let kl = gaussian_kl(&shifted).unwrap().item();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        let mean = vec![1.0, 0.5];
        let logvar = vec![0.3, -0.4];
        let dist = LatentDistribution {
            mean: Tensor::new(&[2], mean.clone()).unwrap(),
            logvar: Tensor::new(&[2], logvar.clone()).unwrap(),
        };
        let analytic = gaussian_kl(&dist).unwrap().item();
        // E_q[log q(z) - log p(z)] by sampling.
        let n = 200_000;
        let mut acc = 0.0;
        for i in 0..n {
            let z = reparameterize(&dist, i as u64).unwrap().z.values();
            for d in 0..2 {
                let s2 = logvar[d].exp();
                let log_q = -0.5 * (std::f64::consts::TAU * s2).ln()
                    - (z[d] - mean[d]).powi(2) / (2.0 * s2);
                let log_p =
                    -0.5 * std::f64::consts::TAU.ln() - z[d] * z[d] / 2.0;
                acc += log_q - log_p;
            }
        }
        let mc = acc / n as f64;
        assert!(
            (mc - analytic).abs() < 0.01 * analytic.max(1.0),
            "mc = {mc}, analytic = {analytic}"
        );
    }

    #[test]
    fn decode_stays_in_unit_range_and_vanishes_outside_disc() {
        let cfg = tiny_config();
        let model = VaeModel::new(&cfg, 5).unwrap();
        let img = random_image(&cfg, 2);
        let (dist, pose) = encode(&model, &img).unwrap();
        let sample = reparameterize(&dist, 0).unwrap();
        let out = decode(&model, &sample, &pose).unwrap();
        let s = cfg.image_size;
        let c = (s as f64 - 1.0) / 2.0;
        let v = out.pixels().values();
        for i in 0..s {
            for j in 0..s {
                let r = ((j as f64 - c).powi(2) + (i as f64 - c).powi(2)).sqrt();
                let p = v[i * s + j];
                if r > cfg.r_max + 1.5 {
                    assert_eq!(p, 0.0);
                } else {
                    assert!((0.0..=1.0).contains(&p));
                }
            }
        }
    }

    #[test]
    fn elbo_is_finite_with_gradient_everywhere() {
        let cfg = tiny_config();
        let model = VaeModel::new(&cfg, 11).unwrap();
        let img = random_image(&cfg, 3);
        let bound = elbo(&model, &img, 0).unwrap();
        assert!(bound.item().is_finite());
        bound.backward().unwrap();
        for (name, p) in model.params.iter() {
            let g = p.grad().unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(
                g.iter().any(|x| *x != 0.0),
                "gradient of {name} is all zero"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_reproducible() {
        let cfg = tiny_config();
        let model = VaeModel::new(&cfg, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&model.params, &cfg, &p1).unwrap();
        save_checkpoint(&model.params, &cfg, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let (cfg2, values) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg, cfg2);
        let fresh = VaeModel::new(&cfg, 99).unwrap();
        fresh.params.restore(&values).unwrap();
        assert_eq!(fresh.params.snapshot(), model.params.snapshot());
    }

    #[test]
    fn missing_checkpoint_is_a_structured_error() {
        let err = load_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint { .. }));
    }
}
