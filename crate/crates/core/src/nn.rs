//! Dense layers shared by the kernel networks, the lifts and the transformers.

use crate::tensor::{ParamId, ParamStore, Real, Result, Tape, Tensor, Var};
use rand::Rng;

/// `y = x W + b` on row vectors, `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.insert_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = store.insert_uniform(format!("{name}.bias"), &[d_out], d_in, rng);
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(tape.param(store, self.weight))?
            .add_row(tape.param(store, self.bias))
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        *store.value_mut(self.weight) = Tensor::zeros(&[self.d_in, self.d_out]);
        *store.value_mut(self.bias) = Tensor::zeros(&[self.d_out]);
    }
}

/// Two affine maps with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), d_in, d_hidden, rng),
            out: Linear::new(store, &format!("{name}.1"), d_hidden, d_out, rng),
        }
    }

    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.hidden.forward(tape, store, x)?.gelu()?;
        self.out.forward(tape, store, h)
    }

    pub fn d_in(&self) -> usize {
        self.hidden.d_in
    }

    pub fn d_out(&self) -> usize {
        self.out.d_out
    }
}
