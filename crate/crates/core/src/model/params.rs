use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{fan_in_bound, Conv, Dense, Lstm, Tensor, KERNEL};
use crate::scalar::Scalar;

/// Strided convolution tower followed by a dense projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEncoder<S> {
    pub convs: Vec<Conv<S>>,
    pub fc: Dense<S>,
}

/// Two dense layers over a single audio feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioEncoder<S> {
    pub fc1: Dense<S>,
    pub fc2: Dense<S>,
}

/// Recurrent cell plus a head emitting `(mean, raw log-variance)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorChain<S> {
    pub lstm: Lstm<S>,
    pub head: Dense<S>,
}

/// One transposed-convolution level of the decoder. The input is the
/// concatenation of the upsampled main path and the first-frame skip features;
/// the weight is stored split along that concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct UpLevel<S> {
    pub main: Tensor<S>,
    pub skip: Tensor<S>,
    pub b: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<S> {
    /// Maps the first-frame embedding to the initial recurrent hidden state.
    pub init: Dense<S>,
    pub lstm: Lstm<S>,
    pub fc: Dense<S>,
    /// Deepest level first.
    pub ups: Vec<UpLevel<S>>,
}

/// All learnable weights, grouped by sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub frame_encoder: FrameEncoder<S>,
    pub audio_encoder: AudioEncoder<S>,
    pub frame_chain: PosteriorChain<S>,
    pub audio_chain: PosteriorChain<S>,
    pub decoder: Decoder<S>,
}

/// Names of the parameter groups, in storage order.
pub const PARAM_GROUPS: [&str; 5] = ["frame_encoder", "audio_encoder", "frame_chain", "audio_chain", "decoder"];

impl<S: Scalar> ModelParams<S> {
    /// Fan-in scaled uniform initialization, zero biases, forget bias 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let ch = &config.encoder_channels;
        let levels = config.levels();
        let d = config.latent_dim;
        let r = config.recurrent_hidden_dim;

        let mut convs = Vec::with_capacity(levels);
        let mut c_in = config.channels;
        for &c_out in ch {
            convs.push(Conv::new(c_in, c_out, rng));
            c_in = c_out;
        }
        let frame_encoder = FrameEncoder { convs, fc: Dense::new(config.bottleneck_len(), config.frame_hidden_dim, rng) };
        let audio_encoder = AudioEncoder {
            fc1: Dense::new(config.audio_dim, config.audio_hidden_dim, rng),
            fc2: Dense::new(config.audio_hidden_dim, config.audio_hidden_dim, rng),
        };
        let frame_chain = PosteriorChain { lstm: Lstm::new(config.frame_hidden_dim, r, rng), head: Dense::new(r, 2 * d, rng) };
        let audio_chain = PosteriorChain { lstm: Lstm::new(config.audio_hidden_dim, r, rng), head: Dense::new(r, 2 * d, rng) };

        let mut ups = Vec::with_capacity(levels);
        for level in (0..levels).rev() {
            let c_main = ch[level];
            let c_out = if level == 0 { config.channels } else { ch[level - 1] };
            // each output pixel of a stride-2 4x4 transposed conv sees 2x2 taps per input channel
            let bound = fan_in_bound(2 * c_main * KERNEL);
            ups.push(UpLevel {
                main: Tensor::uniform(&[c_main, c_out * KERNEL * KERNEL], bound, rng),
                skip: Tensor::uniform(&[c_main, c_out * KERNEL * KERNEL], bound, rng),
                b: Tensor::zeros(&[c_out]),
            });
        }
        let decoder = Decoder {
            init: Dense::new(config.frame_hidden_dim, r, rng),
            lstm: Lstm::new(d, r, rng),
            fc: Dense::new(r, config.bottleneck_len(), rng),
            ups,
        };
        Ok(Self { frame_encoder, audio_encoder, frame_chain, audio_chain, decoder })
    }

    /// Same structure with every entry zero; used for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill(S::ZERO));
        z
    }

    /// Visits every tensor with its dotted name, in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor<S>)) {
        let fe = &self.frame_encoder;
        for (i, c) in fe.convs.iter().enumerate() {
            f(&format!("frame_encoder.conv{i}.w"), &c.w);
            f(&format!("frame_encoder.conv{i}.b"), &c.b);
        }
        dense(&mut f, "frame_encoder.fc", &fe.fc);
        dense(&mut f, "audio_encoder.fc1", &self.audio_encoder.fc1);
        dense(&mut f, "audio_encoder.fc2", &self.audio_encoder.fc2);
        for (name, chain) in [("frame_chain", &self.frame_chain), ("audio_chain", &self.audio_chain)] {
            lstm(&mut f, &format!("{name}.lstm"), &chain.lstm);
            dense(&mut f, &format!("{name}.head"), &chain.head);
        }
        let dec = &self.decoder;
        dense(&mut f, "decoder.init", &dec.init);
        lstm(&mut f, "decoder.lstm", &dec.lstm);
        dense(&mut f, "decoder.fc", &dec.fc);
        for (i, up) in dec.ups.iter().enumerate() {
            f(&format!("decoder.up{i}.main"), &up.main);
            f(&format!("decoder.up{i}.skip"), &up.skip);
            f(&format!("decoder.up{i}.b"), &up.b);
        }

        fn dense<S>(f: &mut impl FnMut(&str, &Tensor<S>), p: &str, d: &Dense<S>) {
            f(&format!("{p}.w"), &d.w);
            f(&format!("{p}.b"), &d.b);
        }
        fn lstm<S>(f: &mut impl FnMut(&str, &Tensor<S>), p: &str, l: &Lstm<S>) {
            f(&format!("{p}.w_ih"), &l.w_ih);
            f(&format!("{p}.w_hh"), &l.w_hh);
            f(&format!("{p}.b"), &l.b);
        }
    }

    /// Mutable counterpart of [`for_each`](Self::for_each), same order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>)) {
        let fe = &mut self.frame_encoder;
        for (i, c) in fe.convs.iter_mut().enumerate() {
            f(&format!("frame_encoder.conv{i}.w"), &mut c.w);
            f(&format!("frame_encoder.conv{i}.b"), &mut c.b);
        }
        dense(&mut f, "frame_encoder.fc", &mut fe.fc);
        dense(&mut f, "audio_encoder.fc1", &mut self.audio_encoder.fc1);
        dense(&mut f, "audio_encoder.fc2", &mut self.audio_encoder.fc2);
        for (name, chain) in [("frame_chain", &mut self.frame_chain), ("audio_chain", &mut self.audio_chain)] {
            lstm(&mut f, &format!("{name}.lstm"), &mut chain.lstm);
            dense(&mut f, &format!("{name}.head"), &mut chain.head);
        }
        let dec = &mut self.decoder;
        dense(&mut f, "decoder.init", &mut dec.init);
        lstm(&mut f, "decoder.lstm", &mut dec.lstm);
        dense(&mut f, "decoder.fc", &mut dec.fc);
        for (i, up) in dec.ups.iter_mut().enumerate() {
            f(&format!("decoder.up{i}.main"), &mut up.main);
            f(&format!("decoder.up{i}.skip"), &mut up.skip);
            f(&format!("decoder.up{i}.b"), &mut up.b);
        }

        fn dense<S>(f: &mut impl FnMut(&str, &mut Tensor<S>), p: &str, d: &mut Dense<S>) {
            f(&format!("{p}.w"), &mut d.w);
            f(&format!("{p}.b"), &mut d.b);
        }
        fn lstm<S>(f: &mut impl FnMut(&str, &mut Tensor<S>), p: &str, l: &mut Lstm<S>) {
            f(&format!("{p}.w_ih"), &mut l.w_ih);
            f(&format!("{p}.w_hh"), &mut l.w_hh);
            f(&format!("{p}.b"), &mut l.b);
        }
    }

    /// Every tensor, mutably, in [`for_each`](Self::for_each) order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for c in &mut self.frame_encoder.convs {
            out.extend([&mut c.w, &mut c.b]);
        }
        let fe = &mut self.frame_encoder.fc;
        out.extend([&mut fe.w, &mut fe.b]);
        let ae = &mut self.audio_encoder;
        out.extend([&mut ae.fc1.w, &mut ae.fc1.b, &mut ae.fc2.w, &mut ae.fc2.b]);
        for chain in [&mut self.frame_chain, &mut self.audio_chain] {
            let PosteriorChain { lstm, head } = chain;
            out.extend([&mut lstm.w_ih, &mut lstm.w_hh, &mut lstm.b, &mut head.w, &mut head.b]);
        }
        let Decoder { init, lstm, fc, ups } = &mut self.decoder;
        out.extend([&mut init.w, &mut init.b, &mut lstm.w_ih, &mut lstm.w_hh, &mut lstm.b, &mut fc.w, &mut fc.b]);
        for up in ups {
            out.extend([&mut up.main, &mut up.skip, &mut up.b]);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// Concatenation of every tensor in visiting order.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.for_each(|_, t| out.extend_from_slice(&t.data));
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::invalid(format!("flat parameter vector has {} entries, expected {}", flat.len(), self.num_scalars())));
        }
        let mut offset = 0;
        self.for_each_mut(|_, t| {
            let n = t.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Flat index ranges of each parameter group.
    pub fn group_ranges(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let mut ranges: Vec<(&'static str, std::ops::Range<usize>)> = Vec::new();
        let mut offset = 0;
        self.for_each(|name, t| {
            let group = PARAM_GROUPS.iter().copied().find(|g| name.starts_with(g)).expect("known group");
            match ranges.last_mut() {
                Some((g, r)) if *g == group => r.end += t.len(),
                _ => ranges.push((group, offset..offset + t.len())),
            }
            offset += t.len();
        });
        ranges
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        return ModelParams::<T> {
            frame_encoder: FrameEncoder {
                convs: self.frame_encoder.convs.iter().map(|c| Conv { w: c.w.cast(), b: c.b.cast() }).collect(),
                fc: cast_dense(&self.frame_encoder.fc),
            },
            audio_encoder: AudioEncoder { fc1: cast_dense(&self.audio_encoder.fc1), fc2: cast_dense(&self.audio_encoder.fc2) },
            frame_chain: cast_chain(&self.frame_chain),
            audio_chain: cast_chain(&self.audio_chain),
            decoder: Decoder {
                init: cast_dense(&self.decoder.init),
                lstm: cast_lstm(&self.decoder.lstm),
                fc: cast_dense(&self.decoder.fc),
                ups: self.decoder.ups.iter().map(|u| UpLevel { main: u.main.cast(), skip: u.skip.cast(), b: u.b.cast() }).collect(),
            },
        };

        fn cast_dense<A: Scalar, B: Scalar>(d: &Dense<A>) -> Dense<B> {
            Dense { w: d.w.cast(), b: d.b.cast() }
        }
        fn cast_lstm<A: Scalar, B: Scalar>(l: &Lstm<A>) -> Lstm<B> {
            Lstm { w_ih: l.w_ih.cast(), w_hh: l.w_hh.cast(), b: l.b.cast() }
        }
        fn cast_chain<A: Scalar, B: Scalar>(c: &PosteriorChain<A>) -> PosteriorChain<B> {
            PosteriorChain { lstm: cast_lstm(&c.lstm), head: cast_dense(&c.head) }
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }

    /// Checks every tensor shape against a freshly built model for `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::<S>::init(config, 0)?;
        let mut expected = Vec::new();
        reference.for_each(|name, t| expected.push((name.to_string(), t.shape.clone())));
        let mut found = Vec::new();
        self.for_each(|name, t| found.push((name.to_string(), t.shape.clone())));
        if expected != found {
            return Err(Error::invalid("parameter shapes do not match the model configuration"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::for_frames(8, 8, 1, 4);
        c.latent_dim = 2;
        c.frame_hidden_dim = 6;
        c.audio_hidden_dim = 5;
        c.recurrent_hidden_dim = 4;
        c
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::<f32>::init(&tiny(), 3).unwrap();
        let b = ModelParams::<f32>::init(&tiny(), 3).unwrap();
        let c = ModelParams::<f32>::init(&tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn flatten_round_trip_and_groups() {
        let p = ModelParams::<f64>::init(&tiny(), 1).unwrap();
        let flat = p.flatten();
        let mut q = p.zeros_like();
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        let groups = p.group_ranges();
        assert_eq!(groups.iter().map(|(g, _)| *g).collect::<Vec<_>>(), PARAM_GROUPS);
        assert_eq!(groups.last().unwrap().1.end, flat.len());
        p.check_shapes(&tiny()).unwrap();
        assert!(p.check_shapes(&ModelConfig::default()).is_err());
    }

    #[test]
    fn tensors_mut_follows_visit_order() {
        let mut p = ModelParams::<f64>::init(&tiny(), 1).unwrap();
        let mut shapes = Vec::new();
        p.for_each(|_, t| shapes.push(t.shape.clone()));
        let listed: Vec<_> = p.tensors_mut().into_iter().map(|t| t.shape.clone()).collect();
        assert_eq!(shapes, listed);
        for (i, t) in p.tensors_mut().into_iter().enumerate() {
            t.fill(i as f64);
        }
        let mut i = 0.0;
        p.for_each(|_, t| {
            assert!(t.data.iter().all(|&v| v == i));
            i += 1.0;
        });
    }

    #[test]
    fn cast_preserves_values() {
        let p = ModelParams::<f32>::init(&tiny(), 2).unwrap();
        let q: ModelParams<f64> = p.cast();
        let back: ModelParams<f32> = q.cast();
        assert_eq!(p, back);
    }
}
