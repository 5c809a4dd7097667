//! Parameterized layers. A layer holds only [`ParamId`]s; values live in a
//! [`ParamStore`] so one layout serves both 32- and 64-bit stores.

use rand::Rng;

use crate::error::TensorError;
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// Uniform `±1/√fan_in`, the customary default for convolution layers.
fn init<F: Element, R: Rng + ?Sized>(shape: [usize; 4], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
}

impl Conv1x1 {
    pub fn new<F: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::grouped(store, name, cin, cout, 1, rng)
    }

    pub fn grouped<F: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(groups > 0 && cin.is_multiple_of(groups) && cout.is_multiple_of(groups), "{name}: bad grouping");
        let fan_in = cin / groups;
        let weight = store.add(format!("{name}.weight"), init([cout, fan_in, 1, 1], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), init([1, cout, 1, 1], fan_in, rng));
        Self {
            name: name.to_string(),
            weight,
            bias,
            cin,
            cout,
            groups,
        }
    }

    pub fn forward<F: Element>(&self, tape: &Tape<F>, store: &ParamStore<F>, x: &Var<F>) -> Result<Var<F>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv1x1(x, &w, Some(&b), self.groups)
    }

    /// Weight count, biases excluded.
    pub fn weights(&self) -> u64 {
        (self.cout * self.cin / self.groups) as u64
    }

    pub fn biases(&self) -> u64 {
        self.cout as u64
    }

    /// Multiplies per output pixel.
    pub fn macs_per_pixel(&self) -> u64 {
        self.weights()
    }
}

#[derive(Debug, Clone)]
pub struct DwConv3x3 {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl DwConv3x3 {
    pub fn new<F: Element, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, channels: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), init([channels, 1, 3, 3], 9, rng));
        let bias = store.add(format!("{name}.bias"), init([1, channels, 1, 1], 9, rng));
        Self {
            name: name.to_string(),
            weight,
            bias,
            channels,
        }
    }

    pub fn forward<F: Element>(&self, tape: &Tape<F>, store: &ParamStore<F>, x: &Var<F>) -> Result<Var<F>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dwconv3x3(x, &w, Some(&b))
    }

    pub fn weights(&self) -> u64 {
        9 * self.channels as u64
    }

    pub fn biases(&self) -> u64 {
        self.channels as u64
    }

    pub fn macs_per_pixel(&self) -> u64 {
        self.weights()
    }
}
