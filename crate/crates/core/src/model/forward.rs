//! Forward and backward passes through the audio-visual branch, the text
//! branch and the two decoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ModelGrads, ModelParams};
use crate::error::{Error, Result};
use crate::nn::{ff_block_backward, ff_block_forward, FFBlockCache, Matrix, Mode, Real};

/// One batch's intermediate tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T = f32> {
    /// `B x d_model`
    pub o: Matrix<T>,
    /// `B x d_out`
    pub theta_o: Matrix<T>,
    /// `C x d_model`
    pub w: Matrix<T>,
    /// `C x d_out`
    pub theta_w: Matrix<T>,
    /// `B x d_model`
    pub rho_o: Matrix<T>,
    /// `C x d_model`
    pub rho_w: Matrix<T>,
    /// Class-table row of each sample's ground truth.
    pub gt_rows: Vec<usize>,
}

/// Upstream gradients w.r.t. the trace tensors that the losses read.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGrads<T = f32> {
    pub theta_o: Matrix<T>,
    pub theta_w: Matrix<T>,
    pub w: Matrix<T>,
    pub rho_o: Matrix<T>,
    pub rho_w: Matrix<T>,
}

impl<T: Real> TraceGrads<T> {
    pub fn zeros_like(trace: &ForwardTrace<T>) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            theta_o: z(&trace.theta_o),
            theta_w: z(&trace.theta_w),
            w: z(&trace.w),
            rho_o: z(&trace.rho_o),
            rho_w: z(&trace.rho_w),
        }
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        self.theta_o.add_assign(&other.theta_o)?;
        self.theta_w.add_assign(&other.theta_w)?;
        self.w.add_assign(&other.w)?;
        self.rho_o.add_assign(&other.rho_o)?;
        self.rho_w.add_assign(&other.rho_w)
    }
}

/// Per-block caches for backward, in block order.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    blocks: [Option<FFBlockCache<T>>; 8],
}

impl<T> ForwardCache<T> {
    fn take(&self, i: usize) -> &FFBlockCache<T> {
        self.blocks[i].as_ref().expect("forward_batch fills every block")
    }
}

const O_ENC: usize = 0;
const O_PROJ1: usize = 1;
const O_PROJ2: usize = 2;
const W_ENC: usize = 3;
const W_PROJ: usize = 4;
const D_O1: usize = 5;
const D_O2: usize = 6;
const D_W: usize = 7;

fn expect_width<T: Real>(what: &str, m: &Matrix<T>, width: usize) -> Result<()> {
    if m.cols() != width {
        return Err(Error::Config(format!(
            "{what} width: expected {width}, got {}",
            m.cols()
        )));
    }
    Ok(())
}

/// Concatenates `(v, a)` in that order, dropping a modality the switches disable.
pub fn av_input<T: Real>(params: &ModelParams<T>, visual: &Matrix<T>, audio: &Matrix<T>) -> Result<Matrix<T>> {
    let s = &params.switches;
    let d = &params.dims;
    match (s.uses_visual(), s.uses_audio()) {
        (true, true) => {
            expect_width("visual feature", visual, d.d_in_v)?;
            expect_width("audio feature", audio, d.d_in_a)?;
            if visual.rows() != audio.rows() {
                return Err(Error::Config(format!(
                    "visual and audio row counts differ: {} vs {}",
                    visual.rows(),
                    audio.rows()
                )));
            }
            visual.hconcat(audio)
        }
        (true, false) => {
            expect_width("visual feature", visual, d.d_in_v)?;
            Ok(visual.clone())
        }
        (false, true) => {
            expect_width("audio feature", audio, d.d_in_a)?;
            Ok(audio.clone())
        }
        (false, false) => unreachable!("switches validated"),
    }
}

/// Concatenates `(w^v, w^a)` in that order, dropping a text embedding the switches disable.
pub fn text_input<T: Real>(params: &ModelParams<T>, clip: &Matrix<T>, clap: &Matrix<T>) -> Result<Matrix<T>> {
    let s = &params.switches;
    let d = &params.dims;
    match (s.uses_clip(), s.uses_clap()) {
        (true, true) => {
            expect_width("CLIP text embedding", clip, d.d_in_v)?;
            expect_width("CLAP text embedding", clap, d.d_in_a)?;
            if clip.rows() != clap.rows() {
                return Err(Error::Config(format!(
                    "text table row counts differ: {} vs {}",
                    clip.rows(),
                    clap.rows()
                )));
            }
            clip.hconcat(clap)
        }
        (true, false) => {
            expect_width("CLIP text embedding", clip, d.d_in_v)?;
            Ok(clip.clone())
        }
        (false, true) => {
            expect_width("CLAP text embedding", clap, d.d_in_a)?;
            Ok(clap.clone())
        }
        (false, false) => unreachable!("switches validated"),
    }
}

/// `o = O_enc(concat(v, a))`
pub fn encode_audio_visual<T: Real>(
    visual: &Matrix<T>,
    audio: &Matrix<T>,
    params: &ModelParams<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Matrix<T>, FFBlockCache<T>)> {
    let x = av_input(params, visual, audio)?;
    ff_block_forward(&x, &params.o_enc, mode, rng)
}

/// `θ_o = O_proj(o)`, two stacked blocks.
pub fn project_output<T: Real>(
    o: &Matrix<T>,
    params: &ModelParams<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Matrix<T>, [FFBlockCache<T>; 2])> {
    let (h, c1) = ff_block_forward(o, &params.o_proj1, mode, rng)?;
    let (theta, c2) = ff_block_forward(&h, &params.o_proj2, mode, rng)?;
    Ok((theta, [c1, c2]))
}

/// `w = W_enc(concat(w^v, w^a))`
pub fn encode_text<T: Real>(
    clip: &Matrix<T>,
    clap: &Matrix<T>,
    params: &ModelParams<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Matrix<T>, FFBlockCache<T>)> {
    let x = text_input(params, clip, clap)?;
    ff_block_forward(&x, &params.w_enc, mode, rng)
}

/// `θ_w = W_proj(w)`
pub fn project_text<T: Real>(
    w: &Matrix<T>,
    params: &ModelParams<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Matrix<T>, FFBlockCache<T>)> {
    ff_block_forward(w, &params.w_proj, mode, rng)
}

/// `ρ_o = D_o(θ_o)` (two blocks) and `ρ_w = D_w(θ_w)` (one block).
#[allow(clippy::type_complexity)]
pub fn decode<T: Real>(
    theta_o: &Matrix<T>,
    theta_w: &Matrix<T>,
    params: &ModelParams<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<((Matrix<T>, Matrix<T>), [FFBlockCache<T>; 3])> {
    let (h, c1) = ff_block_forward(theta_o, &params.d_o1, mode, rng)?;
    let (rho_o, c2) = ff_block_forward(&h, &params.d_o2, mode, rng)?;
    let (rho_w, c3) = ff_block_forward(theta_w, &params.d_w, mode, rng)?;
    Ok(((rho_o, rho_w), [c1, c2, c3]))
}

/// Samples and the class table the batch is scored against.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a, T = f32> {
    pub visual: &'a Matrix<T>,
    pub audio: &'a Matrix<T>,
    /// Row of `class_clip`/`class_clap` holding each sample's class.
    pub labels: &'a [usize],
    pub class_clip: &'a Matrix<T>,
    pub class_clap: &'a Matrix<T>,
}

/// Runs the whole graph once. Nothing in `params` is modified; in train mode
/// call [`ModelParams::absorb_running_stats`] with the returned cache.
pub fn forward_batch<T: Real>(
    input: BatchInput<'_, T>,
    params: &ModelParams<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(ForwardTrace<T>, ForwardCache<T>)> {
    let classes = input.class_clip.rows().max(input.class_clap.rows());
    if let Some(&bad) = input.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!(
            "label row {bad} not in class table of {classes} rows"
        )));
    }
    let (o, c_oenc) = encode_audio_visual(input.visual, input.audio, params, mode, rng)?;
    if o.rows() != input.labels.len() {
        return Err(Error::Data(format!(
            "{} samples but {} labels",
            o.rows(),
            input.labels.len()
        )));
    }
    let (theta_o, [c_p1, c_p2]) = project_output(&o, params, mode, rng)?;
    let (w, c_wenc) = encode_text(input.class_clip, input.class_clap, params, mode, rng)?;
    let (theta_w, c_wproj) = project_text(&w, params, mode, rng)?;
    let ((rho_o, rho_w), [c_d1, c_d2, c_dw]) = decode(&theta_o, &theta_w, params, mode, rng)?;
    let trace = ForwardTrace {
        o,
        theta_o,
        w,
        theta_w,
        rho_o,
        rho_w,
        gt_rows: input.labels.to_vec(),
    };
    let cache = ForwardCache {
        blocks: [
            Some(c_oenc),
            Some(c_p1),
            Some(c_p2),
            Some(c_wenc),
            Some(c_wproj),
            Some(c_d1),
            Some(c_d2),
            Some(c_dw),
        ],
    };
    Ok((trace, cache))
}

impl<T: Real> ModelParams<T> {
    pub fn absorb_running_stats(&mut self, cache: &ForwardCache<T>) {
        for (block, c) in self.blocks_mut().into_iter().zip(&cache.blocks) {
            if let Some(c) = c {
                block.bn.update_running(c.bn());
            }
        }
    }
}

/// Backpropagates trace gradients to every parameter block.
pub fn backward<T: Real>(
    cache: &ForwardCache<T>,
    params: &ModelParams<T>,
    upstream: &TraceGrads<T>,
) -> Result<ModelGrads<T>> {
    let mut grads = ModelGrads::default();

    let (d_h, g) = ff_block_backward(cache.take(D_O2), &params.d_o2, &upstream.rho_o)?;
    grads.blocks[D_O2] = g;
    let (d_theta_o_rec, g) = ff_block_backward(cache.take(D_O1), &params.d_o1, &d_h)?;
    grads.blocks[D_O1] = g;
    let (d_theta_w_rec, g) = ff_block_backward(cache.take(D_W), &params.d_w, &upstream.rho_w)?;
    grads.blocks[D_W] = g;

    let d_theta_o = upstream.theta_o.add(&d_theta_o_rec)?;
    let (d_h, g) = ff_block_backward(cache.take(O_PROJ2), &params.o_proj2, &d_theta_o)?;
    grads.blocks[O_PROJ2] = g;
    let (d_o, g) = ff_block_backward(cache.take(O_PROJ1), &params.o_proj1, &d_h)?;
    grads.blocks[O_PROJ1] = g;
    let (_, g) = ff_block_backward(cache.take(O_ENC), &params.o_enc, &d_o)?;
    grads.blocks[O_ENC] = g;

    let d_theta_w = upstream.theta_w.add(&d_theta_w_rec)?;
    let (d_w_proj, g) = ff_block_backward(cache.take(W_PROJ), &params.w_proj, &d_theta_w)?;
    grads.blocks[W_PROJ] = g;
    let d_w = upstream.w.add(&d_w_proj)?;
    let (_, g) = ff_block_backward(cache.take(W_ENC), &params.w_enc, &d_w)?;
    grads.blocks[W_ENC] = g;

    Ok(grads)
}

fn eval_rng() -> ChaCha8Rng {
    // eval-mode dropout never draws
    ChaCha8Rng::seed_from_u64(0)
}

/// Eval-mode `θ_o` for a set of samples.
pub fn embed_audio_visual<T: Real>(
    params: &ModelParams<T>,
    visual: &Matrix<T>,
    audio: &Matrix<T>,
) -> Result<Matrix<T>> {
    let mut rng = eval_rng();
    let (o, _) = encode_audio_visual(visual, audio, params, Mode::Eval, &mut rng)?;
    Ok(project_output(&o, params, Mode::Eval, &mut rng)?.0)
}

/// Eval-mode `θ_w` for a class table.
pub fn embed_classes<T: Real>(params: &ModelParams<T>, clip: &Matrix<T>, clap: &Matrix<T>) -> Result<Matrix<T>> {
    let mut rng = eval_rng();
    let (w, _) = encode_text(clip, clap, params, Mode::Eval, &mut rng)?;
    Ok(project_text(&w, params, Mode::Eval, &mut rng)?.0)
}
