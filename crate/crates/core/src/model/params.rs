use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AblationSwitches, ModelDims};
use crate::error::{Error, Result};
use crate::nn::{BlockGrads, FFBlockParams, Matrix, ParamSlot, Real};

/// Fixed block order used for initialization, gradients, the optimizer and checkpoints.
pub const BLOCK_NAMES: [&str; 8] = [
    "o_enc", "o_proj1", "o_proj2", "w_enc", "w_proj", "d_o1", "d_o2", "d_w",
];

/// All weights of the six networks, with the metadata needed to rebuild them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub dims: ModelDims,
    pub switches: AblationSwitches,
    pub seed: u64,
    pub o_enc: FFBlockParams<T>,
    pub o_proj1: FFBlockParams<T>,
    pub o_proj2: FFBlockParams<T>,
    pub w_enc: FFBlockParams<T>,
    pub w_proj: FFBlockParams<T>,
    pub d_o1: FFBlockParams<T>,
    pub d_o2: FFBlockParams<T>,
    pub d_w: FFBlockParams<T>,
}

/// `(in, out)` of every block, in [`BLOCK_NAMES`] order.
pub fn block_shapes(dims: &ModelDims, switches: &AblationSwitches) -> [(usize, usize); 8] {
    [
        (switches.av_width(dims), dims.d_model),
        (dims.d_model, dims.d_hidden),
        (dims.d_hidden, dims.d_out),
        (switches.text_width(dims), dims.d_model),
        (dims.d_model, dims.d_out),
        (dims.d_out, dims.d_hidden),
        (dims.d_hidden, dims.d_model),
        (dims.d_out, dims.d_model),
    ]
}

impl<T: Real> ModelParams<T> {
    pub fn init(dims: ModelDims, switches: AblationSwitches, seed: u64) -> Result<Self> {
        dims.validate()?;
        switches.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = block_shapes(&dims, &switches)
            .map(|(i, o)| FFBlockParams::init(i, o, dims.dropout_rate, &mut rng))
            .into_iter();
        let mut next = || blocks.next().expect("eight blocks");
        Ok(Self {
            dims,
            switches,
            seed,
            o_enc: next(),
            o_proj1: next(),
            o_proj2: next(),
            w_enc: next(),
            w_proj: next(),
            d_o1: next(),
            d_o2: next(),
            d_w: next(),
        })
    }

    pub fn blocks(&self) -> [&FFBlockParams<T>; 8] {
        [
            &self.o_enc,
            &self.o_proj1,
            &self.o_proj2,
            &self.w_enc,
            &self.w_proj,
            &self.d_o1,
            &self.d_o2,
            &self.d_w,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut FFBlockParams<T>; 8] {
        [
            &mut self.o_enc,
            &mut self.o_proj1,
            &mut self.o_proj2,
            &mut self.w_enc,
            &mut self.w_proj,
            &mut self.d_o1,
            &mut self.d_o2,
            &mut self.d_w,
        ]
    }

    /// Number of trainable scalars (weights, biases, BN scale and shift).
    pub fn learnable_count(&self) -> usize {
        self.blocks().iter().map(|b| b.learnable_count()).sum()
    }

    /// Verifies every block against the shapes implied by `dims` and `switches`.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = block_shapes(&self.dims, &self.switches);
        for ((name, block), (i, o)) in BLOCK_NAMES.iter().zip(self.blocks()).zip(expected) {
            let ok = block.in_dim() == i
                && block.out_dim() == o
                && block.affine.bias.len() == o
                && block.bn.dim() == o
                && block.bn.beta.len() == o
                && block.bn.running_mean.len() == o
                && block.bn.running_var.len() == o;
            if !ok {
                return Err(Error::dim(
                    "model block",
                    format!("{name} {}x{}", block.in_dim(), block.out_dim()),
                    format!("expected {i}x{o}"),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            dims: self.dims,
            switches: self.switches,
            seed: self.seed,
            o_enc: self.o_enc.cast(),
            o_proj1: self.o_proj1.cast(),
            o_proj2: self.o_proj2.cast(),
            w_enc: self.w_enc.cast(),
            w_proj: self.w_proj.cast(),
            d_o1: self.d_o1.cast(),
            d_o2: self.d_o2.cast(),
            d_w: self.d_w.cast(),
        }
    }

    /// Learnable values flattened as weight, bias, gamma, beta per block.
    pub fn flatten_learnables(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.learnable_count());
        for b in self.blocks() {
            out.extend_from_slice(b.affine.weight.as_slice());
            out.extend_from_slice(&b.affine.bias);
            out.extend_from_slice(&b.bn.gamma);
            out.extend_from_slice(&b.bn.beta);
        }
        out
    }

    pub fn set_learnables(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.learnable_count() {
            return Err(Error::dim(
                "set_learnables",
                self.learnable_count(),
                values.len(),
            ));
        }
        let mut rest = values;
        let mut take = |dst: &mut [T]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for b in self.blocks_mut() {
            take(b.affine.weight.as_mut_slice());
            take(&mut b.affine.bias);
            take(&mut b.bn.gamma);
            take(&mut b.bn.beta);
        }
        Ok(())
    }

    /// Pairs every learnable tensor with its gradient for the optimizer.
    pub fn slots<'a>(&'a mut self, grads: &'a ModelGrads<T>) -> Vec<ParamSlot<'a, T>> {
        let mut slots = Vec::with_capacity(32);
        for ((name, b), g) in BLOCK_NAMES.iter().zip(self.blocks_mut()).zip(&grads.blocks) {
            let FFBlockParams { affine, bn, .. } = b;
            slots.push(ParamSlot {
                name: format!("{name}.weight"),
                value: affine.weight.as_mut_slice(),
                grad: g.weight.as_slice(),
            });
            slots.push(ParamSlot {
                name: format!("{name}.bias"),
                value: &mut affine.bias,
                grad: &g.bias,
            });
            slots.push(ParamSlot {
                name: format!("{name}.gamma"),
                value: &mut bn.gamma,
                grad: &g.gamma,
            });
            slots.push(ParamSlot {
                name: format!("{name}.beta"),
                value: &mut bn.beta,
                grad: &g.beta,
            });
        }
        slots
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| {
            b.affine.weight.is_finite()
                && [&b.affine.bias, &b.bn.gamma, &b.bn.beta, &b.bn.running_mean, &b.bn.running_var]
                    .iter()
                    .all(|v| v.iter().all(|x| x.is_finite()))
        })
    }
}

/// Gradients for every block, in [`BLOCK_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T = f32> {
    pub blocks: [BlockGrads<T>; 8],
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros_like(p: &ModelParams<T>) -> Self {
        Self {
            blocks: p.blocks().map(BlockGrads::zeros_like),
        }
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.accumulate(b)?;
        }
        Ok(())
    }

    /// Same layout as [`ModelParams::flatten_learnables`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in &self.blocks {
            out.extend_from_slice(g.weight.as_slice());
            out.extend_from_slice(&g.bias);
            out.extend_from_slice(&g.gamma);
            out.extend_from_slice(&g.beta);
        }
        out
    }

    pub fn block(&self, name: &str) -> Option<&BlockGrads<T>> {
        BLOCK_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| &self.blocks[i])
    }

    pub fn max_abs(&self) -> T {
        self.blocks
            .iter()
            .map(|g| {
                let w = g.weight.max_abs();
                [&g.bias, &g.gamma, &g.beta]
                    .iter()
                    .flat_map(|v| v.iter())
                    .fold(w, |m, &x| m.max(if x < T::ZERO { -x } else { x }))
            })
            .fold(T::ZERO, T::max)
    }
}

impl<T: Real> Default for ModelGrads<T> {
    fn default() -> Self {
        let empty = || BlockGrads {
            weight: Matrix::zeros(0, 0),
            bias: Vec::new(),
            gamma: Vec::new(),
            beta: Vec::new(),
        };
        Self {
            blocks: [(); 8].map(|_| empty()),
        }
    }
}
