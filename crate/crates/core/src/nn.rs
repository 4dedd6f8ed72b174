//! Convolution layers and the small U-Net shared by the matching stages.

use itermvs_tensor::{kaiming_normal, Bound, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Negative slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

/// A square convolution with bias and "same"-style padding `(k - 1) / 2`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Adds Kaiming-initialized weights and a zero bias to `store`.
    pub fn register<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.insert(
            self.weight_name(),
            kaiming_normal([self.cout, self.cin, self.k, self.k], rng),
        )?;
        store.insert(self.bias_name(), Tensor::zeros([self.cout]))?;
        Ok(())
    }

    /// `x` is `[N, cin, H, W]`.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        Ok(tape.conv2d(x, w, Some(b), self.stride, (self.k - 1) / 2)?)
    }

    /// Convolution followed by a leaky ReLU.
    pub fn forward_act<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, x: Var) -> Result<Var> {
        let y = self.forward(tape, p, x)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// Registers every layer in order. Parameter order, and therefore the
/// random stream each layer draws from, follows the slice order.
pub fn register_all<T: Real, R: Rng>(convs: &[&Conv], store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
    for c in convs {
        c.register(store, rng)?;
    }
    Ok(())
}

/// Encoder-decoder with two stride-2 levels and skip connections.
#[derive(Clone, Debug)]
pub struct UNet {
    enc0: Conv,
    enc1: Conv,
    enc2: Conv,
    dec1: Conv,
    dec0: Conv,
    pub head: Conv,
}

impl UNet {
    pub fn new(prefix: &str, cin: usize, cout: usize, base: usize) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        UNet {
            enc0: Conv::new(n("enc0"), cin, base, 3, 1),
            enc1: Conv::new(n("enc1"), base, 2 * base, 3, 2),
            enc2: Conv::new(n("enc2"), 2 * base, 4 * base, 3, 2),
            dec1: Conv::new(n("dec1"), 6 * base, 2 * base, 3, 1),
            dec0: Conv::new(n("dec0"), 3 * base, base, 3, 1),
            head: Conv::new(n("head"), base, cout, 3, 1),
        }
    }

    pub fn convs(&self) -> Vec<&Conv> {
        vec![&self.enc0, &self.enc1, &self.enc2, &self.dec1, &self.dec0, &self.head]
    }

    /// `x` is `[N, cin, H, W]`; the output keeps `H x W`. Upsampling goes to
    /// the skip connection's size, so odd and 1-pixel maps work.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, x: Var) -> Result<Var> {
        let e0 = self.enc0.forward_act(tape, p, x)?;
        let e1 = self.enc1.forward_act(tape, p, e0)?;
        let e2 = self.enc2.forward_act(tape, p, e1)?;
        let d1 = self.decode(tape, p, &self.dec1, e2, e1)?;
        let d0 = self.decode(tape, p, &self.dec0, d1, e0)?;
        self.head.forward(tape, p, d0)
    }

    fn decode<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, conv: &Conv, coarse: Var, skip: Var) -> Result<Var> {
        let sd = tape.dims(skip);
        let up = tape.resize_bilinear(coarse, sd[2], sd[3])?;
        let cat = tape.concat(&[up, skip], 1)?;
        conv.forward_act(tape, p, cat)
    }
}
