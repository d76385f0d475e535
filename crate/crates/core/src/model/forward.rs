//! Forward and backward passes of the sequence model.
//!
//! Each sub-network runs over a whole sequence at once: the frame tower
//! encodes all `T` frames as one batch, the recurrent cells sweep time, and
//! the decoder's transposed convolutions again process all steps together.
//! The decoder never consumes its own outputs, so this batching is exact.

use super::config::ModelConfig;
use super::params::{AudioEncoder, Decoder, FrameEncoder, ModelParams, PosteriorChain};
use crate::error::{Error, Result};
use crate::gaussian::{self, DiagonalGaussian, LOG_VAR_MAX};
use crate::nn::{
    conv_transpose, conv_transpose_backward, elu_backward_inplace, elu_inplace, sigmoid, LstmState, LstmTrace,
};
use crate::scalar::{compensated_sum, Scalar};

/// Recurrent state of a posterior chain.
pub type ChainState<S> = LstmState<S>;
/// Recurrent state of the frame decoder.
pub type DecoderState<S> = LstmState<S>;

/// A `(channels, height, width)` activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<S>,
}

/// Encoder activations of one frame at every level, shallow to deep.
/// Spatial size halves from one level to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipStack<S> {
    pub levels: Vec<FeatureMap<S>>,
}

/// Time-ordered posteriors emitted by one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSequence<S: Scalar = f64> {
    pub gaussians: Vec<DiagonalGaussian<S>>,
}

impl<S: Scalar> PosteriorSequence<S> {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

pub(crate) fn check_finite<S: Scalar>(subnetwork: &'static str, values: &[S]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NumericalFailure { subnetwork, detail: format!("non-finite activation at index {i}") }),
    }
}

/// `T x H x W x C` frames to the `(C, T, H, W)` working layout.
pub(crate) fn frames_to_cnhw<S: Scalar>(frames: &[f32], n: usize, h: usize, w: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; frames.len()];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[((ch * n + b) * h + y) * w + x] = S::from_f32(frames[((b * h + y) * w + x) * c + ch]);
                }
            }
        }
    }
    out
}

pub(crate) fn cnhw_to_frames<S: Scalar>(x: &[S], c: usize, n: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for ch in 0..c {
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    out[((b * h + y) * w + xx) * c + ch] = x[((ch * n + b) * h + y) * w + xx].as_f32();
                }
            }
        }
    }
    out
}

/// `(c, n, hw)` to `(n, c*hw)`.
fn cn_to_nc<S: Scalar>(x: &[S], c: usize, n: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; x.len()];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * hw..][..hw].copy_from_slice(&x[(ch * n + b) * hw..][..hw]);
        }
    }
    out
}

/// `(n, c*hw)` to `(c, n, hw)`.
fn nc_to_cn<S: Scalar>(x: &[S], c: usize, n: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; x.len()];
    for ch in 0..c {
        for b in 0..n {
            out[(ch * n + b) * hw..][..hw].copy_from_slice(&x[(b * c + ch) * hw..][..hw]);
        }
    }
    out
}

/// Picks image `index` out of a `(c, n, h, w)` batch.
fn select_image<S: Scalar>(x: &[S], c: usize, n: usize, hw: usize, index: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(c * hw);
    for ch in 0..c {
        out.extend_from_slice(&x[(ch * n + index) * hw..][..hw]);
    }
    out
}

// ---------------------------------------------------------------- encoders

pub(crate) struct FrameEncTrace<S> {
    n: usize,
    /// `acts[0]` is the input; `acts[l+1]` the post-activation output of level `l`.
    acts: Vec<Vec<S>>,
    cols: Vec<Vec<S>>,
    flat: Vec<S>,
    /// `n x frame_hidden`, post-activation.
    pub emb: Vec<S>,
}

impl<S: Scalar> FrameEncTrace<S> {
    /// Skip features of image `index`.
    pub(crate) fn skips(&self, config: &ModelConfig, index: usize) -> SkipStack<S> {
        let levels = (0..config.levels())
            .map(|l| {
                let (h, w) = config.spatial_at(l + 1);
                let c = config.encoder_channels[l];
                FeatureMap { channels: c, height: h, width: w, data: select_image(&self.acts[l + 1], c, self.n, h * w, index) }
            })
            .collect();
        SkipStack { levels }
    }
}

pub(crate) fn frame_encoder_forward<S: Scalar>(
    enc: &FrameEncoder<S>, config: &ModelConfig, input: Vec<S>, n: usize,
) -> Result<FrameEncTrace<S>> {
    let mut acts = vec![input];
    let mut cols = Vec::with_capacity(enc.convs.len());
    for (l, conv) in enc.convs.iter().enumerate() {
        let (h, w) = config.spatial_at(l);
        let (c, mut y) = conv.forward(&acts[l], n, h, w);
        elu_inplace(&mut y);
        cols.push(c);
        acts.push(y);
    }
    let (h, w) = config.spatial_at(config.levels());
    let c_last = *config.encoder_channels.last().expect("validated");
    let flat = cn_to_nc(acts.last().expect("non-empty"), c_last, n, h * w);
    let mut emb = enc.fc.forward(&flat, n);
    elu_inplace(&mut emb);
    check_finite("frame_encoder", &emb)?;
    Ok(FrameEncTrace { n, acts, cols, flat, emb })
}

/// `d_skips[l]` is the gradient w.r.t. level `l` features of image 0.
pub(crate) fn frame_encoder_backward<S: Scalar>(
    enc: &FrameEncoder<S>, config: &ModelConfig, trace: &FrameEncTrace<S>,
    d_emb: &[S], d_skips: &[Vec<S>], grad: &mut FrameEncoder<S>,
) {
    let n = trace.n;
    let levels = config.levels();
    let mut d = d_emb.to_vec();
    elu_backward_inplace(&trace.emb, &mut d);
    let d_flat = enc.fc.backward(&trace.flat, &d, n, &mut grad.fc, true).expect("dx requested");
    let (h, w) = config.spatial_at(levels);
    let mut d_act = nc_to_cn(&d_flat, config.encoder_channels[levels - 1], n, h * w);
    for l in (0..levels).rev() {
        let (h, w) = config.spatial_at(l + 1);
        let hw = h * w;
        let c = config.encoder_channels[l];
        for ch in 0..c {
            let dst = &mut d_act[(ch * n) * hw..][..hw];
            for (a, &b) in dst.iter_mut().zip(&d_skips[l][ch * hw..][..hw]) {
                *a += b;
            }
        }
        elu_backward_inplace(&trace.acts[l + 1], &mut d_act);
        let (hi, wi) = config.spatial_at(l);
        let want_dx = l > 0;
        let dx = enc.convs[l].backward(&trace.cols[l], &d_act, n, hi, wi, &mut grad.convs[l], want_dx);
        if let Some(dx) = dx {
            d_act = dx;
        }
    }
}

pub(crate) struct AudioEncTrace<S> {
    n: usize,
    x: Vec<S>,
    h1: Vec<S>,
    pub emb: Vec<S>,
}

pub(crate) fn audio_encoder_forward<S: Scalar>(enc: &AudioEncoder<S>, audio: &[f32], n: usize) -> Result<AudioEncTrace<S>> {
    let x: Vec<S> = audio.iter().map(|&v| S::from_f32(v)).collect();
    let mut h1 = enc.fc1.forward(&x, n);
    elu_inplace(&mut h1);
    let mut emb = enc.fc2.forward(&h1, n);
    elu_inplace(&mut emb);
    check_finite("audio_encoder", &emb)?;
    Ok(AudioEncTrace { n, x, h1, emb })
}

pub(crate) fn audio_encoder_backward<S: Scalar>(
    enc: &AudioEncoder<S>, trace: &AudioEncTrace<S>, d_emb: &[S], grad: &mut AudioEncoder<S>,
) {
    let mut d = d_emb.to_vec();
    elu_backward_inplace(&trace.emb, &mut d);
    let mut d_h1 = enc.fc2.backward(&trace.h1, &d, trace.n, &mut grad.fc2, true).expect("dx requested");
    elu_backward_inplace(&trace.h1, &mut d_h1);
    enc.fc1.backward(&trace.x, &d_h1, trace.n, &mut grad.fc1, false);
}

// ------------------------------------------------------------------ chains

pub(crate) struct ChainTrace<S> {
    pub t: usize,
    lstm: LstmTrace<S>,
    /// `t x D` each.
    pub mean: Vec<S>,
    pub log_var: Vec<S>,
}

impl<S: Scalar> ChainTrace<S> {
    pub(crate) fn final_state(&self, hidden: usize) -> ChainState<S> {
        ChainState {
            h: self.lstm.h[self.t * hidden..].to_vec(),
            c: self.lstm.c[self.t * hidden..].to_vec(),
        }
    }

    pub(crate) fn posteriors(&self, d: usize) -> Result<PosteriorSequence<S>> {
        let gaussians = (0..self.t)
            .map(|t| DiagonalGaussian::new(self.mean[t * d..][..d].to_vec(), self.log_var[t * d..][..d].to_vec()))
            .collect::<Result<_>>()?;
        Ok(PosteriorSequence { gaussians })
    }
}

pub(crate) fn chain_forward<S: Scalar>(
    chain: &PosteriorChain<S>, emb: &[S], t: usize, init: &ChainState<S>, name: &'static str,
) -> Result<ChainTrace<S>> {
    let r = chain.lstm.hidden_dim();
    let lstm = chain.lstm.forward_seq(emb, t, init);
    let out = chain.head.forward(lstm.outputs(r), t);
    let d = chain.head.output_dim() / 2;
    let bound = S::from_f64(LOG_VAR_MAX);
    let mut mean = Vec::with_capacity(t * d);
    let mut log_var = Vec::with_capacity(t * d);
    for row in out.chunks_exact(2 * d) {
        mean.extend_from_slice(&row[..d]);
        // smooth squashing into the admissible log-variance range
        log_var.extend(row[d..].iter().map(|&raw| bound * (raw / bound).tanh()));
    }
    check_finite(name, &mean)?;
    check_finite(name, &log_var)?;
    Ok(ChainTrace { t, lstm, mean, log_var })
}

pub(crate) fn chain_backward<S: Scalar>(
    chain: &PosteriorChain<S>, trace: &ChainTrace<S>, d_mean: &[S], d_log_var: &[S], grad: &mut PosteriorChain<S>,
) -> Vec<S> {
    let t = trace.t;
    let d = chain.head.output_dim() / 2;
    let r = chain.lstm.hidden_dim();
    let bound = S::from_f64(LOG_VAR_MAX);
    let mut d_out = vec![S::ZERO; t * 2 * d];
    for step in 0..t {
        let row = &mut d_out[step * 2 * d..][..2 * d];
        for j in 0..d {
            let k = step * d + j;
            let s = trace.log_var[k] / bound;
            row[j] = d_mean[k];
            row[d + j] = d_log_var[k] * (S::ONE - s * s);
        }
    }
    let d_h = chain.head.backward(trace.lstm.outputs(r), &d_out, t, &mut grad.head, true).expect("dx requested");
    let (d_emb, _) = chain.lstm.backward_seq(&trace.lstm, &d_h, &mut grad.lstm);
    d_emb
}

// ----------------------------------------------------------------- decoder

pub(crate) struct DecoderTrace<S> {
    t: usize,
    lstm: LstmTrace<S>,
    /// Post-activation bottleneck, `t x bottleneck`.
    u: Vec<S>,
    /// Input of each up level (`(c, t, h, w)`), deepest first.
    inputs: Vec<Vec<S>>,
    /// Output frames `(C, t, H, W)` after the sigmoid.
    pub out: Vec<S>,
}

impl<S: Scalar> DecoderTrace<S> {
    pub(crate) fn final_state(&self, hidden: usize) -> DecoderState<S> {
        DecoderState { h: self.lstm.h[self.t * hidden..].to_vec(), c: self.lstm.c[self.t * hidden..].to_vec() }
    }
}

/// Skip contribution of every up level; constant over time.
pub(crate) fn skip_contributions<S: Scalar>(dec: &Decoder<S>, config: &ModelConfig, skips: &SkipStack<S>) -> Vec<Vec<S>> {
    let levels = config.levels();
    (0..levels)
        .map(|k| {
            let fm = &skips.levels[levels - 1 - k];
            conv_transpose(&dec.ups[k].skip, &fm.data, 1, fm.height, fm.width)
        })
        .collect()
}

pub(crate) fn initial_state_pre<S: Scalar>(dec: &Decoder<S>, first_emb: &[S]) -> DecoderState<S> {
    let h = dec.init.forward(first_emb, 1).into_iter().map(|v| v.tanh()).collect::<Vec<_>>();
    let c = vec![S::ZERO; h.len()];
    DecoderState { h, c }
}

pub(crate) fn decoder_forward<S: Scalar>(
    dec: &Decoder<S>, config: &ModelConfig, skip_contrib: &[Vec<S>], init: &DecoderState<S>, z: &[S], t: usize,
) -> Result<DecoderTrace<S>> {
    let levels = config.levels();
    let r = dec.lstm.hidden_dim();
    let lstm = dec.lstm.forward_seq(z, t, init);
    let mut u = dec.fc.forward(lstm.outputs(r), t);
    elu_inplace(&mut u);
    let (h, w) = config.spatial_at(levels);
    let mut x = nc_to_cn(&u, config.encoder_channels[levels - 1], t, h * w);
    let mut inputs = Vec::with_capacity(levels);
    for k in 0..levels {
        let (h, w) = config.spatial_at(levels - k);
        let up = &dec.ups[k];
        let mut y = conv_transpose(&up.main, &x, t, h, w);
        let c_out = up.b.len();
        let plane = 4 * h * w;
        let sc = &skip_contrib[k];
        for ch in 0..c_out {
            let b = up.b.data[ch];
            let s = &sc[ch * plane..][..plane];
            for step in 0..t {
                for (v, &sv) in y[(ch * t + step) * plane..][..plane].iter_mut().zip(s) {
                    *v += sv + b;
                }
            }
        }
        if k + 1 < levels {
            elu_inplace(&mut y);
        } else {
            y.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        inputs.push(std::mem::replace(&mut x, y));
    }
    check_finite("decoder", &x)?;
    Ok(DecoderTrace { t, lstm, u, inputs, out: x })
}

/// `d_out` is the gradient w.r.t. the post-sigmoid frames. Returns
/// `(dz, d_initial_state, d_skip_contributions)`.
pub(crate) fn decoder_backward<S: Scalar>(
    dec: &Decoder<S>, config: &ModelConfig, trace: &DecoderTrace<S>, d_out: &[S], grad: &mut Decoder<S>,
) -> (Vec<S>, DecoderState<S>, Vec<Vec<S>>) {
    let levels = config.levels();
    let t = trace.t;
    let mut d: Vec<S> = d_out.iter().zip(&trace.out).map(|(&g, &y)| g * y * (S::ONE - y)).collect();
    let mut d_skip = vec![Vec::new(); levels];
    for k in (0..levels).rev() {
        let (h, w) = config.spatial_at(levels - k);
        let up = &dec.ups[k];
        let c_out = up.b.len();
        let plane = 4 * h * w;
        let mut ds = vec![S::ZERO; c_out * plane];
        for ch in 0..c_out {
            let acc = &mut ds[ch * plane..][..plane];
            for step in 0..t {
                let src = &d[(ch * t + step) * plane..][..plane];
                for (a, &s) in acc.iter_mut().zip(src) {
                    *a += s;
                }
            }
            grad.ups[k].b.data[ch] += acc.iter().copied().sum::<S>();
        }
        d_skip[k] = ds;
        let mut dx = conv_transpose_backward(&up.main, &trace.inputs[k], &d, t, h, w, &mut grad.ups[k].main, true)
            .expect("dx requested");
        if k > 0 {
            elu_backward_inplace(&trace.inputs[k], &mut dx);
        }
        d = dx;
    }
    let (h, w) = config.spatial_at(levels);
    let mut du = cn_to_nc(&d, config.encoder_channels[levels - 1], t, h * w);
    elu_backward_inplace(&trace.u, &mut du);
    let r = dec.lstm.hidden_dim();
    let d_h = dec.fc.backward(trace.lstm.outputs(r), &du, t, &mut grad.fc, true).expect("dx requested");
    let (dz, d_init) = dec.lstm.backward_seq(&trace.lstm, &d_h, &mut grad.lstm);
    (dz, d_init, d_skip)
}

/// Backward of [`skip_contributions`]; returns per-encoder-level gradients.
pub(crate) fn skip_contributions_backward<S: Scalar>(
    dec: &Decoder<S>, config: &ModelConfig, skips: &SkipStack<S>, d_contrib: &[Vec<S>], grad: &mut Decoder<S>,
) -> Vec<Vec<S>> {
    let levels = config.levels();
    let mut d_levels = vec![Vec::new(); levels];
    for k in 0..levels {
        let l = levels - 1 - k;
        let fm = &skips.levels[l];
        d_levels[l] = conv_transpose_backward(&dec.ups[k].skip, &fm.data, &d_contrib[k], 1, fm.height, fm.width, &mut grad.ups[k].skip, true)
            .expect("dx requested");
    }
    d_levels
}

// ------------------------------------------------------------ public steps

fn check_frame(config: &ModelConfig, frame: &[f32]) -> Result<()> {
    if frame.len() != config.frame_len() {
        return Err(Error::invalid(format!(
            "frame has {} values, model expects {}x{}x{}",
            frame.len(), config.height, config.width, config.channels
        )));
    }
    if frame.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("frame values must lie in [0, 1]"));
    }
    Ok(())
}

/// Embeds one `H x W x C` frame; also returns its skip features.
pub fn encode_frame<S: Scalar>(frame: &[f32], params: &ModelParams<S>, config: &ModelConfig) -> Result<(Vec<S>, SkipStack<S>)> {
    check_frame(config, frame)?;
    let x = frames_to_cnhw(frame, 1, config.height, config.width, config.channels);
    let trace = frame_encoder_forward(&params.frame_encoder, config, x, 1)?;
    let skips = trace.skips(config, 0);
    Ok((trace.emb, skips))
}

/// Embeds one audio feature vector.
pub fn encode_audio<S: Scalar>(features: &[f32], params: &ModelParams<S>, config: &ModelConfig) -> Result<Vec<S>> {
    if features.len() != config.audio_dim {
        return Err(Error::invalid(format!("audio vector has {} values, model expects {}", features.len(), config.audio_dim)));
    }
    Ok(audio_encoder_forward(&params.audio_encoder, features, 1)?.emb)
}

/// Runs a posterior chain over `t` stacked embeddings.
pub fn run_posterior_chain<S: Scalar>(
    embeddings: &[S], t: usize, chain: &PosteriorChain<S>, initial: &ChainState<S>,
) -> Result<(PosteriorSequence<S>, ChainState<S>)> {
    let i = chain.lstm.input_dim();
    let r = chain.lstm.hidden_dim();
    if t == 0 || embeddings.len() != t * i {
        return Err(Error::invalid(format!("posterior chain expects {t}x{i} embeddings, got {}", embeddings.len())));
    }
    if initial.h.len() != r || initial.c.len() != r {
        return Err(Error::invalid("posterior chain state width mismatch"));
    }
    let trace = chain_forward(chain, embeddings, t, initial, "posterior_chain")?;
    let d = chain.head.output_dim() / 2;
    Ok((trace.posteriors(d)?, trace.final_state(r)))
}

/// Decoder state derived from the first frame's embedding.
pub fn initial_decoder_state<S: Scalar>(first_embedding: &[S], params: &ModelParams<S>) -> Result<DecoderState<S>> {
    if first_embedding.len() != params.decoder.init.input_dim() {
        return Err(Error::invalid("first-frame embedding width mismatch"));
    }
    Ok(initial_state_pre(&params.decoder, first_embedding))
}

/// Decodes one latent into an `H x W x C` frame and advances the decoder state.
pub fn decode_frame<S: Scalar>(
    z: &[S], skips: &SkipStack<S>, state: &DecoderState<S>, params: &ModelParams<S>, config: &ModelConfig,
) -> Result<(Vec<f32>, DecoderState<S>)> {
    if z.len() != config.latent_dim {
        return Err(Error::invalid(format!("latent has {} entries, model expects {}", z.len(), config.latent_dim)));
    }
    if skips.levels.len() != config.levels() {
        return Err(Error::invalid("skip stack depth does not match the model"));
    }
    let contrib = skip_contributions(&params.decoder, config, skips);
    let trace = decoder_forward(&params.decoder, config, &contrib, state, z, 1)?;
    let frame = cnhw_to_frames(&trace.out, config.channels, 1, config.height, config.width);
    Ok((frame, trace.final_state(params.decoder.lstm.hidden_dim())))
}

// ------------------------------------------------------------ full forward

/// Forward state of one training sequence, kept for the backward pass.
pub(crate) struct SequenceTrace<S> {
    pub t: usize,
    target: Vec<S>,
    enc_f: FrameEncTrace<S>,
    skips: SkipStack<S>,
    enc_a: AudioEncTrace<S>,
    pub chain_f: ChainTrace<S>,
    pub chain_a: ChainTrace<S>,
    noise: Vec<S>,
    init_h: Vec<S>,
    dec: DecoderTrace<S>,
    pub recon_per_t: Vec<S>,
    pub kl_per_t: Vec<S>,
}

impl<S: Scalar> SequenceTrace<S> {
    /// Reconstructed frames as `T x H x W x C`.
    pub(crate) fn reconstruction(&self, config: &ModelConfig) -> Vec<f32> {
        cnhw_to_frames(&self.dec.out, config.channels, self.t, config.height, config.width)
    }
}

/// Training-time pass: latents come from the frame posterior.
pub(crate) fn forward_sequence<S: Scalar>(
    params: &ModelParams<S>, config: &ModelConfig, frames: &[f32], audio: &[f32], t: usize, noise: &[S],
) -> Result<SequenceTrace<S>> {
    let d = config.latent_dim;
    let target = frames_to_cnhw::<S>(frames, t, config.height, config.width, config.channels);
    let enc_f = frame_encoder_forward(&params.frame_encoder, config, target.clone(), t)?;
    let skips = enc_f.skips(config, 0);
    let enc_a = audio_encoder_forward(&params.audio_encoder, audio, t)?;
    let r = config.recurrent_hidden_dim;
    let chain_f = chain_forward(&params.frame_chain, &enc_f.emb, t, &ChainState::zeros(r), "frame_chain")?;
    let chain_a = chain_forward(&params.audio_chain, &enc_a.emb, t, &ChainState::zeros(r), "audio_chain")?;

    let half = S::from_f64(0.5);
    let z: Vec<S> = (0..t * d)
        .map(|k| chain_f.mean[k] + (half * chain_f.log_var[k]).exp() * noise[k])
        .collect();

    let init = initial_state_pre(&params.decoder, &enc_f.emb[..config.frame_hidden_dim]);
    let contrib = skip_contributions(&params.decoder, config, &skips);
    let dec = decoder_forward(&params.decoder, config, &contrib, &init, &z, t)?;

    let plane = config.height * config.width;
    let mut recon_per_t = vec![S::ZERO; t];
    for ch in 0..config.channels {
        for (step, r) in recon_per_t.iter_mut().enumerate() {
            let off = (ch * t + step) * plane;
            let sse = compensated_sum(dec.out[off..off + plane].iter().zip(&target[off..off + plane]).map(|(&a, &b)| (a - b) * (a - b)));
            *r += half * sse;
        }
    }
    let kl_per_t = (0..t)
        .map(|step| {
            let s = step * d..(step + 1) * d;
            gaussian::kl_terms(
                &chain_f.mean[s.clone()], &chain_f.log_var[s.clone()], &chain_a.mean[s.clone()], &chain_a.log_var[s],
            )
        })
        .collect::<Vec<_>>();
    check_finite("objective", &kl_per_t)?;
    Ok(SequenceTrace {
        t, target, enc_f, skips, enc_a, chain_f, chain_a, noise: noise.to_vec(), init_h: init.h, dec, recon_per_t, kl_per_t,
    })
}

/// Accumulates `scale * d(total)/d(params)` into `grad`.
pub(crate) fn backward_sequence<S: Scalar>(
    params: &ModelParams<S>, config: &ModelConfig, trace: &SequenceTrace<S>, grad: &mut ModelParams<S>, scale: S,
) {
    let t = trace.t;
    let d = config.latent_dim;
    let half = S::from_f64(0.5);
    let lambda = S::from_f64(config.lambda) * scale;
    let beta = S::from_f64(config.beta) * scale;

    let d_out: Vec<S> = trace.dec.out.iter().zip(&trace.target).map(|(&a, &b)| lambda * (a - b)).collect();
    let (dz, d_init, d_contrib) = decoder_backward(&params.decoder, config, &trace.dec, &d_out, &mut grad.decoder);
    let d_skips = skip_contributions_backward(&params.decoder, config, &trace.skips, &d_contrib, &mut grad.decoder);

    // initial state: h0 = tanh(init(e_1)), c0 = 0
    let d_pre: Vec<S> = d_init.h.iter().zip(&trace.init_h).map(|(&g, &h)| g * (S::ONE - h * h)).collect();
    let fh = config.frame_hidden_dim;
    let d_first = params.decoder.init.backward(&trace.enc_f.emb[..fh], &d_pre, 1, &mut grad.decoder.init, true).expect("dx requested");

    let cf = &trace.chain_f;
    let ca = &trace.chain_a;
    let mut dmf = dz.clone();
    let mut dlf: Vec<S> = (0..t * d).map(|k| dz[k] * half * (half * cf.log_var[k]).exp() * trace.noise[k]).collect();
    let mut dma = vec![S::ZERO; t * d];
    let mut dla = vec![S::ZERO; t * d];
    for step in 0..t {
        let s = step * d..(step + 1) * d;
        gaussian::kl_backward(
            &cf.mean[s.clone()], &cf.log_var[s.clone()], &ca.mean[s.clone()], &ca.log_var[s.clone()],
            beta,
            &mut dmf[s.clone()], &mut dlf[s.clone()], &mut dma[s.clone()], &mut dla[s],
        );
    }
    let mut d_emb_f = chain_backward(&params.frame_chain, cf, &dmf, &dlf, &mut grad.frame_chain);
    let d_emb_a = chain_backward(&params.audio_chain, ca, &dma, &dla, &mut grad.audio_chain);
    for (a, &b) in d_emb_f[..fh].iter_mut().zip(&d_first) {
        *a += b;
    }
    frame_encoder_backward(&params.frame_encoder, config, &trace.enc_f, &d_emb_f, &d_skips, &mut grad.frame_encoder);
    audio_encoder_backward(&params.audio_encoder, &trace.enc_a, &d_emb_a, &mut grad.audio_encoder);
}
