use rand::Rng;

use super::{join, Layer, Mode, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Unidirectional single-layer LSTM over the frame axis.
///
/// Gate rows are stacked `[input, forget, cell, output]`, so `w_ih` is
/// `[4H, I]`, `w_hh` is `[4H, H]` and `bias` is `[4H]`. State `(h, c)` is kept
/// per batch item between calls until [`Layer::reset_state`]; gradients are
/// truncated at the start of each call.
#[derive(Debug, Clone)]
pub struct LstmLayer<T> {
    pub w_ih: Param<T>,
    pub w_hh: Param<T>,
    pub bias: Param<T>,
    input_size: usize,
    hidden: usize,
    state: Option<LstmState<T>>,
    cache: Option<Vec<SeqCache<T>>>,
}

#[derive(Debug, Clone)]
struct LstmState<T> {
    h: Vec<T>,
    c: Vec<T>,
    batch: usize,
}

#[derive(Debug, Clone)]
struct SeqCache<T> {
    /// `[J, I]`
    x: Vec<T>,
    /// Post-activation gates, `[J, 4H]`.
    gates: Vec<T>,
    /// `[J, H]`
    cells: Vec<T>,
    /// `[J + 1, H]`; row 0 is the initial state.
    hidden: Vec<T>,
    c0: Vec<T>,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> LstmLayer<T> {
    /// Weights uniform in `±1/sqrt(hidden)`, forget-gate bias 1, other biases 0.
    pub fn new(input_size: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(T::one());
        LstmLayer {
            w_ih: Param::uniform(&[4 * hidden, input_size], bound, rng),
            w_hh: Param::uniform(&[4 * hidden, hidden], bound, rng),
            bias: Param::new(bias),
            input_size,
            hidden,
            state: None,
            cache: None,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Run one sequence given as `[J, I]`, starting from `(h0, c0)`; writes
    /// `[J, H]` hidden outputs into `hs[H..]` (row 0 of `hs` is `h0`).
    fn run_sequence(&self, x: &[T], frames: usize, hs: &mut [T], cells: &mut [T], gates: &mut [T], c0: &[T]) {
        let (i_sz, h) = (self.input_size, self.hidden);
        let g4 = 4 * h;
        gates.fill(T::zero());
        gemm_nt(frames, i_sz, g4, x, i_sz, self.w_ih.value.data(), i_sz, gates, g4);
        let b = self.bias.value.data();
        for t in 0..frames {
            let (prev_rows, rest) = hs.split_at_mut((t + 1) * h);
            let h_prev = &prev_rows[t * h..];
            let z = &mut gates[t * g4..(t + 1) * g4];
            for (zr, &br) in z.iter_mut().zip(b) {
                *zr += br;
            }
            gemm_nt(1, h, g4, h_prev, h, self.w_hh.value.data(), h, z, g4);
            let c_prev: Vec<T> = if t == 0 {
                c0.to_vec()
            } else {
                cells[(t - 1) * h..t * h].to_vec()
            };
            let h_out = &mut rest[..h];
            for k in 0..h {
                let ig = sigmoid(z[k]);
                let fg = sigmoid(z[h + k]);
                let gg = z[2 * h + k].tanh();
                let og = sigmoid(z[3 * h + k]);
                z[k] = ig;
                z[h + k] = fg;
                z[2 * h + k] = gg;
                z[3 * h + k] = og;
                let c = fg * c_prev[k] + ig * gg;
                cells[t * h + k] = c;
                h_out[k] = og * c.tanh();
            }
        }
    }
}

impl<T: Real> Parameterized<T> for LstmLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w_ih"), &mut self.w_ih);
        f(&join(prefix, "w_hh"), &mut self.w_hh);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for LstmLayer<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, i_sz, frames) = input.dims3()?;
        if i_sz != self.input_size {
            return Err(Error::shape(format!(
                "lstm expects {} input channels, got {i_sz}",
                self.input_size
            )));
        }
        let h = self.hidden;
        let (h_init, c_init) = match &self.state {
            Some(s) if s.batch != batch => {
                return Err(Error::shape(format!(
                    "lstm state holds {} sequences but the batch has {batch}; reset the state first",
                    s.batch
                )))
            }
            Some(s) => (s.h.clone(), s.c.clone()),
            None => (vec![T::zero(); batch * h], vec![T::zero(); batch * h]),
        };

        let mut out = vec![T::zero(); batch * h * frames];
        let mut caches = Vec::with_capacity(if mode == Mode::Train { batch } else { 0 });
        let mut h_last = vec![T::zero(); batch * h];
        let mut c_last = vec![T::zero(); batch * h];
        for b in 0..batch {
            let src = &input.data()[b * i_sz * frames..(b + 1) * i_sz * frames];
            let mut x = vec![T::zero(); frames * i_sz];
            for c in 0..i_sz {
                for t in 0..frames {
                    x[t * i_sz + c] = src[c * frames + t];
                }
            }
            let mut hs = vec![T::zero(); (frames + 1) * h];
            hs[..h].copy_from_slice(&h_init[b * h..(b + 1) * h]);
            let mut cells = vec![T::zero(); frames * h];
            let mut gates = vec![T::zero(); frames * 4 * h];
            let c0 = &c_init[b * h..(b + 1) * h];
            self.run_sequence(&x, frames, &mut hs, &mut cells, &mut gates, c0);

            let dst = &mut out[b * h * frames..(b + 1) * h * frames];
            for t in 0..frames {
                for k in 0..h {
                    dst[k * frames + t] = hs[(t + 1) * h + k];
                }
            }
            if frames > 0 {
                h_last[b * h..(b + 1) * h].copy_from_slice(&hs[frames * h..]);
                c_last[b * h..(b + 1) * h].copy_from_slice(&cells[(frames - 1) * h..]);
            } else {
                h_last[b * h..(b + 1) * h].copy_from_slice(&hs[..h]);
                c_last[b * h..(b + 1) * h].copy_from_slice(c0);
            }
            if mode == Mode::Train {
                caches.push(SeqCache {
                    x,
                    gates,
                    cells,
                    hidden: hs,
                    c0: c0.to_vec(),
                });
            }
        }
        self.state = Some(LstmState {
            h: h_last,
            c: c_last,
            batch,
        });
        self.cache = (mode == Mode::Train).then_some(caches);
        let out = Tensor::from_vec(&[batch, h, frames], out)?;
        out.ensure_finite("lstm output")?;
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let caches = self.cache.as_ref().ok_or(Error::MissingForward("lstm"))?;
        let (batch, h_sz, frames) = grad_output.dims3()?;
        if batch != caches.len() || h_sz != self.hidden {
            return Err(Error::shape("lstm gradient does not match the cached forward"));
        }
        let (i_sz, h) = (self.input_size, self.hidden);
        let g4 = 4 * h;
        let mut dx_all = vec![T::zero(); batch * i_sz * frames];
        let one = T::one();
        for (b, cache) in caches.iter().enumerate() {
            let gy = &grad_output.data()[b * h * frames..(b + 1) * h * frames];
            let mut dz = vec![T::zero(); frames * g4];
            let mut dh_next = vec![T::zero(); h];
            let mut dc_next = vec![T::zero(); h];
            for t in (0..frames).rev() {
                let gates = &cache.gates[t * g4..(t + 1) * g4];
                let c_prev = if t == 0 {
                    &cache.c0[..]
                } else {
                    &cache.cells[(t - 1) * h..t * h]
                };
                let dzt = &mut dz[t * g4..(t + 1) * g4];
                for k in 0..h {
                    let (ig, fg, gg, og) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                    let tc = cache.cells[t * h + k].tanh();
                    let dh = gy[k * frames + t] + dh_next[k];
                    let dc = dh * og * (one - tc * tc) + dc_next[k];
                    dzt[k] = dc * gg * ig * (one - ig);
                    dzt[h + k] = dc * c_prev[k] * fg * (one - fg);
                    dzt[2 * h + k] = dc * ig * (one - gg * gg);
                    dzt[3 * h + k] = dh * tc * og * (one - og);
                    dc_next[k] = dc * fg;
                }
                dh_next.fill(T::zero());
                gemm_nn(1, g4, h, dzt, g4, self.w_hh.value.data(), h, &mut dh_next, h);
            }
            gemm_tn(g4, frames, i_sz, &dz, g4, &cache.x, i_sz, self.w_ih.grad.data_mut(), i_sz);
            gemm_tn(g4, frames, h, &dz, g4, &cache.hidden, h, self.w_hh.grad.data_mut(), h);
            let db = self.bias.grad.data_mut();
            for row in dz.chunks_exact(g4) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            let mut dx = vec![T::zero(); frames * i_sz];
            gemm_nn(frames, g4, i_sz, &dz, g4, self.w_ih.value.data(), i_sz, &mut dx, i_sz);
            let dst = &mut dx_all[b * i_sz * frames..(b + 1) * i_sz * frames];
            for t in 0..frames {
                for c in 0..i_sz {
                    dst[c * frames + t] = dx[t * i_sz + c];
                }
            }
        }
        Tensor::from_vec(&[batch, i_sz, frames], dx_all)
    }

    fn reset_state(&mut self) {
        self.state = None;
    }
}
