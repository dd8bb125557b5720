//! Thin layer wrappers over the tensor ops, with seeded initialization.

use crate::error::Result;
use crate::seeding;
use crate::tensor::{PaddingMode, ParameterStore, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// He-style normal init scaled by fan-in; one rng stream per parameter
/// name, so init does not depend on construction order.
fn init_values(n: usize, fan_in: usize, seed: u64, name: &str) -> Vec<f64> {
    let mut rng = seeding::rng(seed, name);
    let scale = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect()
}

pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub mode: PaddingMode,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        mode: PaddingMode,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let fan_in = c_in * k * k;
        let weight = Tensor::parameter(
            &[c_out, c_in, k, k],
            init_values(c_out * c_in * k * k, fan_in, seed, &wname),
        )?;
        let bias = Tensor::parameter(&[c_out], vec![0.0; c_out])?;
        store.insert(&wname, weight.clone())?;
        store.insert(&bname, bias.clone())?;
        Ok(Conv2dLayer {
            weight,
            bias,
            stride,
            padding,
            mode,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.padding, self.mode)
    }
}

pub struct DenseLayer {
    pub weight: Tensor, // (out, in)
    pub bias: Tensor,   // (out)
}

impl DenseLayer {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let weight = Tensor::parameter(
            &[dim_out, dim_in],
            init_values(dim_out * dim_in, dim_in, seed, &wname),
        )?;
        let bias = Tensor::parameter(&[dim_out], vec![0.0; dim_out])?;
        store.insert(&wname, weight.clone())?;
        store.insert(&bname, bias.clone())?;
        Ok(DenseLayer { weight, bias })
    }

    /// `W x + b` for a rank-1 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.len();
        let col = x.reshape(&[n, 1])?;
        let out = self.weight.matmul(&col)?;
        out.flatten().add(&self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed_and_deterministic() {
        let a = init_values(8, 4, 7, "x.weight");
        let b = init_values(8, 4, 7, "x.weight");
        let c = init_values(8, 4, 7, "y.weight");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dense_forward_shape() {
        let mut store = ParameterStore::new();
        let layer = DenseLayer::new(&mut store, "fc", 4, 3, 0).unwrap();
        let y = layer.forward(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(y.shape(), vec![3]);
        assert_eq!(store.len(), 2);
    }
}
