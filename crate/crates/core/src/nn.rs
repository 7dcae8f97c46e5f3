//! Small layer helpers shared by the conditioners and the velocity network.

use crate::numerics::{Binder, ParamId, ParamStore, Result, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// N(0, std²)
    Normal(f64),
    /// N(0, 1/fan_in)
    FanIn,
}

pub fn init_tensor<T: Scalar>(shape: &[usize], init: Init, rng: &mut Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::FanIn => Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let mut r = rng.derive_str(name);
        let w = store.add(format!("{name}.w"), init_tensor(&[d_in, d_out], init, &mut r), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), true));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &mut Binder<T>, x: Var) -> Result<Var> {
        let w = bind.get(tape, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = bind.get(tape, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// `Linear → SiLU → Linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        last: Init,
        rng: &mut Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, true, Init::FanIn, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, true, last, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &mut Binder<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, bind, x)?;
        let h = tape.silu(h)?;
        self.fc2.forward(tape, bind, h)
    }
}
