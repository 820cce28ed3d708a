use rand::Rng;

use crate::error::Result;
use crate::tensor::{xavier_uniform, ParamId, ParamStore, ParamTensor, Tape, Var};

/// Square-kernel convolution with bias, parameters held in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let kk = kernel * kernel;
        let weight = store.insert(xavier_uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kk,
            out_channels * kk,
            rng,
        ));
        let bias = store.insert(ParamTensor::zeros(format!("{name}.bias"), &[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// 1x1, stride 1, no padding.
    pub fn pointwise<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, 1, 1, 0, rng)
    }

    /// 3x3, stride 1, padding 1: keeps the spatial size.
    pub fn same3x3<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, 3, 1, 1, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        tape.conv2d(store, x, self.weight, self.bias, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}
