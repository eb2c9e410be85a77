//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use avgzsl::model::{
    backward, forward_batch, AblationSwitches, BatchInput, ModelDims, ModelParams,
};
use avgzsl::nn::gradcheck::{GradCheck, GradCheckReport};
use avgzsl::nn::{Matrix, Mode};
use avgzsl::objective::{loss_ce, loss_rec, loss_reg, loss_total, LossOptions};
use avgzsl::model::TraceGrads;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NOISE_FLOOR: f64 = 1e-8;
pub const REL_TOL: f64 = 1e-4;

/// B=4 samples, K_s=3 classes, d_out=8.
pub struct ToyProblem {
    pub params: ModelParams<f64>,
    pub visual: Matrix<f64>,
    pub audio: Matrix<f64>,
    pub clip: Matrix<f64>,
    pub clap: Matrix<f64>,
    pub labels: Vec<usize>,
    pub dropout_seed: u64,
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn toy_dims() -> ModelDims {
    ModelDims {
        d_in_a: 6,
        d_in_v: 5,
        d_model: 7,
        d_hidden: 6,
        d_out: 8,
        dropout_rate: 0.1,
    }
}

impl ToyProblem {
    pub fn new(switches: AblationSwitches, seed: u64) -> Self {
        let dims = toy_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::<f64>::init(dims, switches, seed).unwrap();
        // move BN away from the identity so every parameter matters
        for b in params.blocks_mut() {
            for g in &mut b.bn.gamma {
                *g = rng.random_range(0.5..1.5);
            }
            for g in &mut b.bn.beta {
                *g = rng.random_range(0.2..0.8);
            }
        }
        Self {
            params,
            visual: random(4, dims.d_in_v, &mut rng),
            audio: random(4, dims.d_in_a, &mut rng),
            clip: random(3, dims.d_in_v, &mut rng),
            clap: random(3, dims.d_in_a, &mut rng),
            labels: vec![0, 2, 1, 2],
            dropout_seed: seed ^ 0x5eed,
        }
    }

    fn input(&self) -> BatchInput<'_, f64> {
        BatchInput {
            visual: &self.visual,
            audio: &self.audio,
            labels: &self.labels,
            class_clip: &self.clip,
            class_clap: &self.clap,
        }
    }

    /// Loss and analytic gradient (flattened) for the given loss selection,
    /// train mode with a fixed dropout mask.
    pub fn evaluate(
        &self,
        params: &ModelParams<f64>,
        pick: Component,
        options: &LossOptions,
        mode: Mode,
    ) -> (f64, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let (trace, cache) = forward_batch(self.input(), params, mode, &mut rng).unwrap();
        let (value, grads): (f64, TraceGrads<f64>) = match pick {
            Component::Ce => {
                let s = loss_ce(&trace).unwrap();
                (s.value, s.grads)
            }
            Component::Rec => {
                let s = loss_rec(&trace, options.stop_target_gradient).unwrap();
                (s.value, s.grads)
            }
            Component::Reg => {
                let s = loss_reg(&trace).unwrap();
                (s.value, s.grads)
            }
            Component::Total => {
                let (b, g) = loss_total(&trace, options).unwrap();
                (b.l_total, g)
            }
        };
        let g = backward(&cache, params, &grads).unwrap();
        (value, g.flatten())
    }

    /// Central differences over every learnable coordinate.
    pub fn check(&self, pick: Component, options: &LossOptions, mode: Mode) -> GradCheckReport {
        let theta = self.params.flatten_learnables();
        let (_, analytic) = self.evaluate(&self.params, pick, options, mode);
        let mut scratch = self.params.clone();
        let gc = GradCheck {
            noise_floor: NOISE_FLOOR,
            ..GradCheck::default()
        };
        gc.run(
            |t| {
                scratch.set_learnables(t).unwrap();
                self.evaluate(&scratch, pick, options, mode).0
            },
            &theta,
            &analytic,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Ce,
    Rec,
    Reg,
    Total,
}

/// `(method, dataset, acc_S, acc_U, HM)` rows of the published main results.
pub const PUBLISHED_RESULTS: [(&str, &str, f64, f64, f64); 15] = [
    ("CJME", "VGGSound", 11.96, 5.41, 7.45),
    ("CJME", "UCF", 48.18, 17.68, 25.87),
    ("CJME", "ActivityNet", 16.06, 9.13, 11.64),
    ("AVGZSLNet", "VGGSound", 13.02, 2.88, 4.71),
    ("AVGZSLNet", "UCF", 56.26, 34.37, 42.67),
    ("AVGZSLNet", "ActivityNet", 14.81, 11.11, 12.70),
    ("AVCA", "VGGSound", 32.47, 6.81, 11.26),
    ("AVCA", "UCF", 34.90, 38.67, 36.69),
    ("AVCA", "ActivityNet", 24.04, 19.88, 21.76),
    ("Hyper-multiple", "VGGSound", 21.99, 8.12, 11.87),
    ("Hyper-multiple", "UCF", 43.52, 39.77, 41.56),
    ("Hyper-multiple", "ActivityNet", 20.52, 21.30, 20.90),
    ("Ours", "VGGSound", 29.68, 11.12, 16.18),
    ("Ours", "UCF", 77.14, 43.91, 55.97),
    ("Ours", "ActivityNet", 45.98, 20.06, 27.93),
];

/// Tolerance for the two-decimal rounding of the published HM values.
pub const PUBLISHED_TOL: f64 = 0.01;
