//! Slice-level numeric kernels used by the tape.
//!
//! Row-parallel loops split work into fixed-size chunks, and reductions sum
//! per-chunk partials in chunk order, so results do not depend on the number
//! of worker threads.

use rayon::prelude::*;

use super::Float;

const ROW_CHUNK: usize = 512;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<S: Float>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    out.par_chunks_mut(ROW_CHUNK * n)
        .enumerate()
        .for_each(|(chunk, rows)| {
            let first = chunk * ROW_CHUNK;
            for (r, out_row) in rows.chunks_mut(n).enumerate() {
                let a_row = &a[(first + r) * k..(first + r + 1) * k];
                for (p, &av) in a_row.iter().enumerate() {
                    if av == S::zero() {
                        continue;
                    }
                    axpy(out_row, av, &b[p * n..(p + 1) * n]);
                }
            }
        });
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_b<S: Float>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let chunks = m.div_ceil(ROW_CHUNK).max(1);
    let partials: Vec<Vec<S>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![S::zero(); k * n];
            let end = ((chunk + 1) * ROW_CHUNK).min(m);
            for r in chunk * ROW_CHUNK..end {
                let b_row = &b[r * n..(r + 1) * n];
                for (p, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
                    if av == S::zero() {
                        continue;
                    }
                    axpy(&mut acc[p * n..(p + 1) * n], av, b_row);
                }
            }
            acc
        })
        .collect();
    sum_partials(partials, k * n)
}

/// `out[m×k] = a[m×n] · b[k×n]ᵀ`
pub fn matmul_a_bt<S: Float>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    out.par_chunks_mut(ROW_CHUNK * k)
        .enumerate()
        .for_each(|(chunk, rows)| {
            let first = chunk * ROW_CHUNK;
            for (r, out_row) in rows.chunks_mut(k).enumerate() {
                let a_row = &a[(first + r) * n..(first + r + 1) * n];
                for (p, o) in out_row.iter_mut().enumerate() {
                    *o = dot(a_row, &b[p * n..(p + 1) * n]);
                }
            }
        });
    out
}

/// Column sums of a row-major `m×n` matrix.
pub fn column_sums<S: Float>(a: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n];
    for row in a.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[inline]
pub fn axpy<S: Float>(y: &mut [S], alpha: S, x: &[S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn dot<S: Float>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn sum_partials<S: Float>(partials: Vec<Vec<S>>, len: usize) -> Vec<S> {
    let mut out = vec![S::zero(); len];
    for part in partials {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
    out
}

/// Geometry of a stride-1 "same" convolution over a `[T, Cin]` input.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub len: usize,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvShape {
    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Kernel taps `k` for which input row `t + k - pad` is in bounds.
    #[inline]
    fn taps(&self, t: usize) -> std::ops::Range<usize> {
        let pad = self.pad();
        let lo = pad.saturating_sub(t);
        let hi = (self.len + pad - t).min(self.kernel);
        lo..hi
    }
}

pub fn conv1d_forward<S: Float>(input: &[S], kernels: &[S], bias: &[S], g: ConvShape) -> Vec<S> {
    let ConvShape { cin, cout, .. } = g;
    let pad = g.pad();
    let mut out = vec![S::zero(); g.len * cout];
    out.par_chunks_mut(ROW_CHUNK * cout)
        .enumerate()
        .for_each(|(chunk, rows)| {
            let first = chunk * ROW_CHUNK;
            for (r, out_row) in rows.chunks_mut(cout).enumerate() {
                let t = first + r;
                out_row.copy_from_slice(bias);
                for k in g.taps(t) {
                    let s = t + k - pad;
                    let x_row = &input[s * cin..(s + 1) * cin];
                    for (c, &x) in x_row.iter().enumerate() {
                        if x == S::zero() {
                            continue;
                        }
                        let w = &kernels[(k * cin + c) * cout..(k * cin + c + 1) * cout];
                        axpy(out_row, x, w);
                    }
                }
            }
        });
    out
}

/// Gradient of a "same" convolution with respect to its input.
pub fn conv1d_backward_input<S: Float>(grad_out: &[S], kernels: &[S], g: ConvShape) -> Vec<S> {
    let ConvShape {
        len,
        kernel,
        cin,
        cout,
    } = g;
    let pad = g.pad();
    let mut grad_in = vec![S::zero(); len * cin];
    grad_in
        .par_chunks_mut(ROW_CHUNK * cin)
        .enumerate()
        .for_each(|(chunk, rows)| {
            let first = chunk * ROW_CHUNK;
            for (r, gin_row) in rows.chunks_mut(cin).enumerate() {
                let s = first + r;
                // out row t reads input row s through tap k = s + pad - t
                for k in 0..kernel {
                    let Some(t) = (s + pad).checked_sub(k) else {
                        continue;
                    };
                    if t >= len {
                        continue;
                    }
                    let g_row = &grad_out[t * cout..(t + 1) * cout];
                    for (c, gi) in gin_row.iter_mut().enumerate() {
                        let w = &kernels[(k * cin + c) * cout..(k * cin + c + 1) * cout];
                        *gi += dot(w, g_row);
                    }
                }
            }
        });
    grad_in
}

/// Gradient of a "same" convolution with respect to its kernels.
pub fn conv1d_backward_kernels<S: Float>(input: &[S], grad_out: &[S], g: ConvShape) -> Vec<S> {
    let ConvShape {
        len,
        kernel,
        cin,
        cout,
    } = g;
    let pad = g.pad();
    let chunks = len.div_ceil(ROW_CHUNK).max(1);
    let partials: Vec<Vec<S>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![S::zero(); kernel * cin * cout];
            let end = ((chunk + 1) * ROW_CHUNK).min(len);
            for t in chunk * ROW_CHUNK..end {
                let g_row = &grad_out[t * cout..(t + 1) * cout];
                for k in g.taps(t) {
                    let s = t + k - pad;
                    for (c, &x) in input[s * cin..(s + 1) * cin].iter().enumerate() {
                        if x == S::zero() {
                            continue;
                        }
                        let base = (k * cin + c) * cout;
                        axpy(&mut acc[base..base + cout], x, g_row);
                    }
                }
            }
            acc
        })
        .collect();
    sum_partials(partials, kernel * cin * cout)
}

#[inline]
pub fn sigmoid<S: Float>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Saved state of one LSTM direction over a whole sequence.
#[derive(Clone, Debug)]
pub struct LstmCache<S> {
    /// Post-activation gates `[T, 4U]` in (input, forget, cell, output) order.
    pub gates: Vec<S>,
    /// Cell states `[T, U]`.
    pub cells: Vec<S>,
}

/// Runs one LSTM direction. Returns hidden states `[T, U]` indexed by time
/// (not by processing order) and the cache needed for backpropagation.
#[allow(clippy::too_many_arguments)]
pub fn lstm_forward<S: Float>(
    input: &[S],
    w_in: &[S],
    w_rec: &[S],
    bias: &[S],
    len: usize,
    dim: usize,
    units: usize,
    reverse: bool,
) -> (Vec<S>, LstmCache<S>) {
    let g4 = 4 * units;
    let mut pre = matmul(input, w_in, len, dim, g4);
    for row in pre.chunks_mut(g4) {
        for (p, &b) in row.iter_mut().zip(bias) {
            *p += b;
        }
    }
    let mut hidden = vec![S::zero(); len * units];
    let mut gates = vec![S::zero(); len * g4];
    let mut cells = vec![S::zero(); len * units];
    let mut h_prev = vec![S::zero(); units];
    let mut c_prev = vec![S::zero(); units];
    let mut z = vec![S::zero(); g4];
    for step in 0..len {
        let t = if reverse { len - 1 - step } else { step };
        z.copy_from_slice(&pre[t * g4..(t + 1) * g4]);
        for (j, &h) in h_prev.iter().enumerate() {
            if h != S::zero() {
                axpy(&mut z, h, &w_rec[j * g4..(j + 1) * g4]);
            }
        }
        let gate_row = &mut gates[t * g4..(t + 1) * g4];
        for u in 0..units {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[units + u]);
            let gc = z[2 * units + u].tanh();
            let o = sigmoid(z[3 * units + u]);
            let c = f * c_prev[u] + i * gc;
            let h = o * c.tanh();
            gate_row[u] = i;
            gate_row[units + u] = f;
            gate_row[2 * units + u] = gc;
            gate_row[3 * units + u] = o;
            cells[t * units + u] = c;
            hidden[t * units + u] = h;
            c_prev[u] = c;
            h_prev[u] = h;
        }
    }
    (hidden, LstmCache { gates, cells })
}

/// Gradients of one LSTM direction: `(d_input, d_w_in, d_w_rec, d_bias)`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_backward<S: Float>(
    input: &[S],
    w_in: &[S],
    w_rec: &[S],
    hidden: &[S],
    cache: &LstmCache<S>,
    grad_hidden: &[S],
    len: usize,
    dim: usize,
    units: usize,
    reverse: bool,
) -> (Vec<S>, Vec<S>, Vec<S>, Vec<S>) {
    let g4 = 4 * units;
    let mut d_pre = vec![S::zero(); len * g4];
    let mut d_w_rec = vec![S::zero(); units * g4];
    let mut dh_next = vec![S::zero(); units];
    let mut dc_next = vec![S::zero(); units];
    let zeros = vec![S::zero(); units];
    let one = S::one();
    for step in (0..len).rev() {
        let t = if reverse { len - 1 - step } else { step };
        let prev_t = if step == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        let (h_prev, c_prev) = match prev_t {
            Some(p) => (
                &hidden[p * units..(p + 1) * units],
                &cache.cells[p * units..(p + 1) * units],
            ),
            None => (&zeros[..], &zeros[..]),
        };
        let gate_row = &cache.gates[t * g4..(t + 1) * g4];
        let dz = &mut d_pre[t * g4..(t + 1) * g4];
        for u in 0..units {
            let i = gate_row[u];
            let f = gate_row[units + u];
            let gc = gate_row[2 * units + u];
            let o = gate_row[3 * units + u];
            let tc = cache.cells[t * units + u].tanh();
            let dh = grad_hidden[t * units + u] + dh_next[u];
            let d_o = dh * tc;
            let dc = dh * o * (one - tc * tc) + dc_next[u];
            dz[u] = dc * gc * i * (one - i);
            dz[units + u] = dc * c_prev[u] * f * (one - f);
            dz[2 * units + u] = dc * i * (one - gc * gc);
            dz[3 * units + u] = d_o * o * (one - o);
            dc_next[u] = dc * f;
        }
        for (j, dh) in dh_next.iter_mut().enumerate() {
            *dh = dot(&w_rec[j * g4..(j + 1) * g4], dz);
        }
        for (j, &h) in h_prev.iter().enumerate() {
            if h != S::zero() {
                axpy(&mut d_w_rec[j * g4..(j + 1) * g4], h, dz);
            }
        }
    }
    let d_w_in = matmul_at_b(input, &d_pre, len, dim, g4);
    let d_input = matmul_a_bt(&d_pre, w_in, len, g4, dim);
    let d_bias = column_sums(&d_pre, g4);
    (d_input, d_w_in, d_w_rec, d_bias)
}
