//! Linear layers and two-layer perceptrons on top of [`Graph`].

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian used for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

/// `y = x·W + b`, with `W` stored as `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[input, output], INIT_STD, rng)?;
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), &[1, output])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    /// Same layout with all-zero weights.
    pub fn zeroed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[input, output])?;
        let bias = Some(store.zeros(&format!("{name}.bias"), &[1, output])?);
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.input {
            return Err(Error::shape(
                "linear",
                format!("input width {cols}, layer expects {}", self.input),
            ));
        }
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// linear → ReLU → linear.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, true, rng)?,
            second: Linear::new(store, &format!("{name}.1"), hidden, output, true, rng)?,
        })
    }

    /// Output layer starts at zero, so the MLP initially returns zeros.
    pub fn with_zero_output<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, true, rng)?,
            second: Linear::zeroed(store, &format!("{name}.1"), hidden, output)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(h);
        self.second.forward(g, h)
    }
}
