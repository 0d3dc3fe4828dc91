//! The layer vocabulary: 2-d convolution and transposed convolution,
//! batch normalization, PReLU, average pooling, fully connected, sigmoid,
//! and the texture energy layer.

mod conv;
#[cfg(test)]
mod tests;
mod layers;

pub use conv::{avgpool2d, conv2d, conv_transpose2d};
pub use layers::{
    batchnorm2d, fully_connected, prelu, sigmoid, texture_energy_layer, BatchNorm2d, Conv2d,
    ConvTranspose2d, Linear, PRelu,
};

use crate::error::{Error, Result};

/// Geometry and channel contract for (transposed) convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub transposed: bool,
}

impl ConvSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            transposed: false,
        }
    }

    pub fn with_stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn with_padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    /// Output spatial extent; errors when the result would collapse below 1.
    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if self.transposed {
            let oh = (h - 1) * sh + kh;
            let ow = (w - 1) * sw + kw;
            if oh <= 2 * ph || ow <= 2 * pw {
                return Err(Error::InvalidArgument {
                    op: "conv_spec",
                    msg: format!("transposed output collapses for input {h}×{w} with {self:?}"),
                });
            }
            Ok((oh - 2 * ph, ow - 2 * pw))
        } else {
            if h + 2 * ph < kh || w + 2 * pw < kw {
                return Err(Error::InvalidArgument {
                    op: "conv_spec",
                    msg: format!("kernel does not fit padded input {h}×{w} with {self:?}"),
                });
            }
            Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
        }
    }
}
