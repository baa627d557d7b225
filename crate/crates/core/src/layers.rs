//! Small trainable building blocks shared by the extractor and update
//! networks.

use crate::tensor::{ParamId, ParamStore, Result, Tape, TensorId};
use rand_chacha::ChaCha8Rng;

/// A conv2d layer with stored weight/bias. Padding defaults to
/// `(kernel - 1) / 2` so odd kernels are shape-preserving at stride 1.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add_uniform(
            &format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = store.add_zeros(&format!("{name}.bias"), vec![cout]);
        ConvLayer {
            weight,
            bias,
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    /// Zero-initialized variant, for residual-output heads: the layer
    /// starts as the identity contribution (output 0) so early updates
    /// cannot drive the state into saturated, zero-gradient regions.
    pub fn init_zero(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add_zeros(
            &format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
        );
        let bias = store.add_zeros(&format!("{name}.bias"), vec![cout]);
        ConvLayer {
            weight,
            bias,
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let w = tape.param_cached(store, self.weight);
        let b = tape.param_cached(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Two 3x3 convs with a skip connection: `relu(x + c2(relu(c1(x))))`.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    c1: ConvLayer,
    c2: ConvLayer,
}

impl ResBlock {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        ResBlock {
            c1: ConvLayer::init(store, rng, &format!("{name}.c1"), channels, channels, 3, 1),
            c2: ConvLayer::init(store, rng, &format!("{name}.c2"), channels, channels, 3, 1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let y = self.c1.forward(tape, store, x)?;
        let y = tape.relu(y)?;
        let y = self.c2.forward(tape, store, y)?;
        let s = tape.add(x, y)?;
        tape.relu(s)
    }
}
