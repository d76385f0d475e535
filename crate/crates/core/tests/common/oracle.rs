//! Direct loop-by-loop recomputation of the training objective. Shares no
//! code with the library beyond reading parameter tensors.

use xmodal::model::{AudioStream, FrameStream, ModelConfig, ModelParams};
use xmodal::nn::Tensor;

type Map = Vec<Vec<Vec<f64>>>; // [channel][y][x]

fn elu(x: f64) -> f64 {
    if x > 0.0 { x } else { x.exp() - 1.0 }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dense(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (o, i) = (w.shape[0], w.shape[1]);
    assert_eq!(x.len(), i);
    (0..o).map(|r| b.data[r] + (0..i).map(|c| w.data[r * i + c] * x[c]).sum::<f64>()).collect()
}

/// 4x4 kernel, stride 2, padding 1.
fn conv_down(w: &Tensor<f64>, b: &Tensor<f64>, x: &Map) -> Map {
    let c_out = w.shape[0];
    let c_in = x.len();
    let (h, wd) = (x[0].len(), x[0][0].len());
    let mut y = vec![vec![vec![0.0; wd / 2]; h / 2]; c_out];
    for co in 0..c_out {
        for oy in 0..h / 2 {
            for ox in 0..wd / 2 {
                let mut s = b.data[co];
                for ci in 0..c_in {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let iy = (2 * oy + ky) as isize - 1;
                            let ix = (2 * ox + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += w.data[co * c_in * 16 + ci * 16 + ky * 4 + kx] * x[ci][iy as usize][ix as usize];
                            }
                        }
                    }
                }
                y[co][oy][ox] = s;
            }
        }
    }
    y
}

/// Adjoint of `conv_down` without bias; weight is `c_in x (c_out*16)`.
fn conv_up(w: &Tensor<f64>, x: &Map) -> Map {
    let c_in = w.shape[0];
    let c_out = w.shape[1] / 16;
    let (h, wd) = (x[0].len(), x[0][0].len());
    let mut y = vec![vec![vec![0.0; 2 * wd]; 2 * h]; c_out];
    for ci in 0..c_in {
        for iy in 0..h {
            for ix in 0..wd {
                for co in 0..c_out {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let oy = (2 * iy + ky) as isize - 1;
                            let ox = (2 * ix + kx) as isize - 1;
                            if oy >= 0 && ox >= 0 && (oy as usize) < 2 * h && (ox as usize) < 2 * wd {
                                y[co][oy as usize][ox as usize] += w.data[ci * c_out * 16 + co * 16 + ky * 4 + kx] * x[ci][iy][ix];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn lstm(w_ih: &Tensor<f64>, w_hh: &Tensor<f64>, b: &Tensor<f64>, xs: &[Vec<f64>], h0: Vec<f64>) -> Vec<Vec<f64>> {
    let r = w_hh.shape[1];
    let i = w_ih.shape[1];
    let (mut h, mut c) = (h0, vec![0.0; r]);
    let mut out = Vec::new();
    for x in xs {
        let pre: Vec<f64> = (0..4 * r)
            .map(|g| {
                b.data[g]
                    + (0..i).map(|k| w_ih.data[g * i + k] * x[k]).sum::<f64>()
                    + (0..r).map(|k| w_hh.data[g * r + k] * h[k]).sum::<f64>()
            })
            .collect();
        for j in 0..r {
            let ig = sigmoid(pre[j]);
            let fg = sigmoid(pre[r + j]);
            let gg = pre[2 * r + j].tanh();
            let og = sigmoid(pre[3 * r + j]);
            c[j] = fg * c[j] + ig * gg;
            h[j] = og * c[j].tanh();
        }
        out.push(h.clone());
    }
    out
}

fn frame_map(frames: &FrameStream, t: usize) -> Map {
    let (h, w, ch) = (frames.height(), frames.width(), frames.channels());
    let f = frames.frame(t);
    (0..ch).map(|c| (0..h).map(|y| (0..w).map(|x| f[(y * w + x) * ch + c] as f64).collect()).collect()).collect()
}

fn flatten(m: &Map) -> Vec<f64> {
    m.iter().flat_map(|c| c.iter().flat_map(|r| r.iter().copied())).collect()
}

fn act(m: &mut Map, f: fn(f64) -> f64) {
    m.iter_mut().flat_map(|c| c.iter_mut().flat_map(|r| r.iter_mut())).for_each(|v| *v = f(*v));
}

fn posteriors(chain: &xmodal::model::PosteriorChain<f64>, embs: &[Vec<f64>], d: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let hs = lstm(&chain.lstm.w_ih, &chain.lstm.w_hh, &chain.lstm.b, embs, vec![0.0; chain.lstm.w_hh.shape[1]]);
    hs.iter()
        .map(|h| {
            let o = dense(&chain.head.w, &chain.head.b, h);
            let lv = o[d..].iter().map(|&v| 10.0 * (v / 10.0).tanh()).collect();
            (o[..d].to_vec(), lv)
        })
        .collect()
}

pub struct OracleLoss {
    pub total: f64,
    pub recon_per_t: Vec<f64>,
    pub kl_per_t: Vec<f64>,
}

/// Objective for latents `z_t = mu_t + sigma_t * eps_t` from the frame posterior.
pub fn objective(params: &ModelParams<f64>, config: &ModelConfig, frames: &FrameStream, audio: &AudioStream, eps: &[f64]) -> OracleLoss {
    let t_len = frames.len();
    let d = config.latent_dim;

    // frame encoder on every frame, keeping per-level activations of frame 1
    let mut emb_f = Vec::new();
    let mut skips: Vec<Map> = Vec::new();
    for t in 0..t_len {
        let mut x = frame_map(frames, t);
        for (l, conv) in params.frame_encoder.convs.iter().enumerate() {
            x = conv_down(&conv.w, &conv.b, &x);
            act(&mut x, elu);
            if t == 0 {
                assert_eq!(skips.len(), l);
                skips.push(x.clone());
            }
        }
        let fc = &params.frame_encoder.fc;
        emb_f.push(dense(&fc.w, &fc.b, &flatten(&x)).into_iter().map(elu).collect::<Vec<_>>());
    }
    let ae = &params.audio_encoder;
    let emb_a: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let x: Vec<f64> = audio.step(t).iter().map(|&v| v as f64).collect();
            let h1: Vec<f64> = dense(&ae.fc1.w, &ae.fc1.b, &x).into_iter().map(elu).collect();
            dense(&ae.fc2.w, &ae.fc2.b, &h1).into_iter().map(elu).collect()
        })
        .collect();

    let qf = posteriors(&params.frame_chain, &emb_f, d);
    let qa = posteriors(&params.audio_chain, &emb_a, d);

    let kl_per_t: Vec<f64> = (0..t_len)
        .map(|t| {
            let ((mq, lq), (mp, lp)) = (&qf[t], &qa[t]);
            (0..d)
                .map(|j| 0.5 * (lp[j] - lq[j] + (lq[j].exp() + (mq[j] - mp[j]).powi(2)) / lp[j].exp() - 1.0))
                .sum()
        })
        .collect();

    let z: Vec<Vec<f64>> = (0..t_len)
        .map(|t| (0..d).map(|j| qf[t].0[j] + (0.5 * qf[t].1[j]).exp() * eps[t * d + j]).collect())
        .collect();

    let dec = &params.decoder;
    let h0: Vec<f64> = dense(&dec.init.w, &dec.init.b, &emb_f[0]).into_iter().map(f64::tanh).collect();
    let hs = lstm(&dec.lstm.w_ih, &dec.lstm.w_hh, &dec.lstm.b, &z, h0);

    let levels = config.encoder_channels.len();
    let c_deep = config.encoder_channels[levels - 1];
    let (hd, wd) = (config.height >> levels, config.width >> levels);
    let mut recon_per_t = Vec::new();
    for t in 0..t_len {
        let u: Vec<f64> = dense(&dec.fc.w, &dec.fc.b, &hs[t]).into_iter().map(elu).collect();
        let mut x: Map = (0..c_deep).map(|c| (0..hd).map(|y| u[(c * hd + y) * wd..][..wd].to_vec()).collect()).collect();
        for (k, up) in dec.ups.iter().enumerate() {
            let main = conv_up(&up.main, &x);
            let skip = conv_up(&up.skip, &skips[levels - 1 - k]);
            let mut y = main;
            for (c, plane) in y.iter_mut().enumerate() {
                for (yy, row) in plane.iter_mut().enumerate() {
                    for (xx, v) in row.iter_mut().enumerate() {
                        *v += skip[c][yy][xx] + up.b.data[c];
                    }
                }
            }
            act(&mut y, if k + 1 < levels { elu } else { sigmoid });
            x = y;
        }
        let target = frame_map(frames, t);
        let mut sse = 0.0;
        for c in 0..config.channels {
            for y in 0..config.height {
                for xx in 0..config.width {
                    sse += (x[c][y][xx] - target[c][y][xx]).powi(2);
                }
            }
        }
        recon_per_t.push(0.5 * sse);
    }
    let total = (0..t_len).map(|t| config.lambda * recon_per_t[t] + config.beta * kl_per_t[t]).sum();
    OracleLoss { total, recon_per_t, kl_per_t }
}
