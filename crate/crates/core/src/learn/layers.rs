//! Per-example layer kernels on channel-major slices `(C, H, W)`.
//!
//! Backward functions accumulate parameter gradients (`+=`) so a batch
//! gradient is the sum of per-example calls.

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_h() * self.out_w()
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k, self.k]
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unfolds input patches into a `(c_in·k·k) × (out_h·out_w)` matrix.
pub fn im2col<T: Scalar>(input: &[T], s: &ConvShape, col: &mut [T]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    debug_assert_eq!(col.len(), s.fan_in() * n);
    for ci in 0..s.c_in {
        let plane = &input[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (ci * s.k + ky) * s.k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= s.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        *v = if ix < 0 || ix >= s.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, adding into `d_input`.
pub fn col2im_add<T: Scalar>(col: &[T], s: &ConvShape, d_input: &mut [T]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    for ci in 0..s.c_in {
        let plane = &mut d_input[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (ci * s.k + ky) * s.k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(input: &[T], s: &ConvShape, weight: &[T], bias: &[T], out: &mut [T]) {
    let n = s.out_h() * s.out_w();
    let kk = s.fan_in();
    let mut col = vec![T::zero(); kk * n];
    im2col(input, s, &mut col);
    for (co, row) in out.chunks_exact_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    T::gemm(
        s.c_out, kk, n, T::one(), weight, kk as isize, 1, &col, n as isize, 1, T::one(), out,
        n as isize, 1,
    );
}

/// Accumulates weight and bias gradients; writes (not adds) `d_input`.
pub fn conv_backward<T: Scalar>(
    input: &[T],
    s: &ConvShape,
    weight: &[T],
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    d_input: Option<&mut [T]>,
) {
    let n = s.out_h() * s.out_w();
    let kk = s.fan_in();
    let mut col = vec![T::zero(); kk * n];
    im2col(input, s, &mut col);
    // dW += dOut · colᵀ
    T::gemm(
        s.c_out, n, kk, T::one(), d_out, n as isize, 1, &col, 1, n as isize, T::one(), d_weight,
        kk as isize, 1,
    );
    for (co, row) in d_out.chunks_exact(n).enumerate() {
        d_bias[co] = d_bias[co] + row.iter().copied().sum::<T>();
    }
    if let Some(d_input) = d_input {
        // dcol = Wᵀ · dOut
        T::gemm(
            kk, s.c_out, n, T::one(), weight, 1, kk as isize, d_out, n as isize, 1, T::zero(),
            &mut col, n as isize, 1,
        );
        d_input.fill(T::zero());
        col2im_add(&col, s, d_input);
    }
}

/// Nearest ×2 upsampling followed by a 3×3, pad 1 convolution. Each output
/// parity only ever reads a 2×2 low-resolution neighbourhood, so it runs as
/// four 2×2 convolutions on the input instead of one 3×3 on the upsampled
/// image. `h`, `w` are the input (low-resolution) sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpConvShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
}

impl UpConvShape {
    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * 4 * self.h * self.w
    }
}

/// 3×3 taps folding onto low-res offset `a` for output parity `p`: `TAPS[p][a]`.
const TAPS: [[&[usize]; 2]; 2] = [[&[0], &[1, 2]], [&[0, 1], &[2]]];

fn parity_weights<T: Scalar>(weight: &[T], s: &UpConvShape, py: usize, px: usize) -> Vec<T> {
    let mut out = vec![T::zero(); s.c_out * s.c_in * 4];
    for oc in 0..s.c_out * s.c_in {
        let k = &weight[oc * 9..oc * 9 + 9];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = T::zero();
                for &ky in TAPS[py][a] {
                    for &kx in TAPS[px][b] {
                        acc = acc + k[ky * 3 + kx];
                    }
                }
                out[oc * 4 + a * 2 + b] = acc;
            }
        }
    }
    out
}

/// `col[(ci·2 + a)·2 + b][i·w + j] = x[ci][i + py - 1 + a][j + px - 1 + b]`.
fn parity_cols<T: Scalar>(input: &[T], s: &UpConvShape, py: usize, px: usize, col: &mut [T]) {
    let n = s.h * s.w;
    for ci in 0..s.c_in {
        let plane = &input[ci * n..(ci + 1) * n];
        for a in 0..2 {
            for b in 0..2 {
                let row = &mut col[((ci * 2 + a) * 2 + b) * n..][..n];
                let dy = (py + a) as isize - 1;
                let dx = (px + b) as isize - 1;
                for i in 0..s.h {
                    let iy = i as isize + dy;
                    let line = &mut row[i * s.w..(i + 1) * s.w];
                    if iy < 0 || iy >= s.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..][..s.w];
                    for (j, v) in line.iter_mut().enumerate() {
                        let ix = j as isize + dx;
                        *v = if ix < 0 || ix >= s.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn parity_cols_adjoint<T: Scalar>(col: &[T], s: &UpConvShape, py: usize, px: usize, d_input: &mut [T]) {
    let n = s.h * s.w;
    for ci in 0..s.c_in {
        let plane = &mut d_input[ci * n..(ci + 1) * n];
        for a in 0..2 {
            for b in 0..2 {
                let row = &col[((ci * 2 + a) * 2 + b) * n..][..n];
                let dy = (py + a) as isize - 1;
                let dx = (px + b) as isize - 1;
                for i in 0..s.h {
                    let iy = i as isize + dy;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..][..s.w];
                    for j in 0..s.w {
                        let ix = j as isize + dx;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[i * s.w + j];
                        }
                    }
                }
            }
        }
    }
}

pub fn upconv_forward<T: Scalar>(input: &[T], s: &UpConvShape, weight: &[T], bias: &[T], out: &mut [T]) {
    let n = s.h * s.w;
    let kk = s.c_in * 4;
    let w2 = 2 * s.w;
    let mut col = vec![T::zero(); kk * n];
    let mut tmp = vec![T::zero(); s.c_out * n];
    for py in 0..2 {
        for px in 0..2 {
            let wp = parity_weights(weight, s, py, px);
            parity_cols(input, s, py, px, &mut col);
            T::gemm(
                s.c_out, kk, n, T::one(), &wp, kk as isize, 1, &col, n as isize, 1, T::zero(), &mut tmp,
                n as isize, 1,
            );
            for co in 0..s.c_out {
                let dst = &mut out[co * 4 * n..(co + 1) * 4 * n];
                let src = &tmp[co * n..(co + 1) * n];
                for i in 0..s.h {
                    for j in 0..s.w {
                        dst[(2 * i + py) * w2 + 2 * j + px] = src[i * s.w + j] + bias[co];
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients; writes (not adds) `d_input`.
pub fn upconv_backward<T: Scalar>(
    input: &[T],
    s: &UpConvShape,
    weight: &[T],
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    mut d_input: Option<&mut [T]>,
) {
    let n = s.h * s.w;
    let kk = s.c_in * 4;
    let w2 = 2 * s.w;
    for (co, plane) in d_out.chunks_exact(4 * n).enumerate() {
        d_bias[co] = d_bias[co] + plane.iter().copied().sum::<T>();
    }
    if let Some(d) = d_input.as_deref_mut() {
        d.fill(T::zero());
    }
    let mut col = vec![T::zero(); kk * n];
    let mut d_par = vec![T::zero(); s.c_out * n];
    let mut dwp = vec![T::zero(); s.c_out * kk];
    for py in 0..2 {
        for px in 0..2 {
            for co in 0..s.c_out {
                let src = &d_out[co * 4 * n..(co + 1) * 4 * n];
                for i in 0..s.h {
                    for j in 0..s.w {
                        d_par[co * n + i * s.w + j] = src[(2 * i + py) * w2 + 2 * j + px];
                    }
                }
            }
            parity_cols(input, s, py, px, &mut col);
            T::gemm(
                s.c_out, n, kk, T::one(), &d_par, n as isize, 1, &col, 1, n as isize, T::zero(), &mut dwp,
                kk as isize, 1,
            );
            for oc in 0..s.c_out * s.c_in {
                let k = &mut d_weight[oc * 9..oc * 9 + 9];
                for a in 0..2 {
                    for b in 0..2 {
                        let g = dwp[oc * 4 + a * 2 + b];
                        for &ky in TAPS[py][a] {
                            for &kx in TAPS[px][b] {
                                k[ky * 3 + kx] = k[ky * 3 + kx] + g;
                            }
                        }
                    }
                }
            }
            if let Some(d) = d_input.as_deref_mut() {
                let wp = parity_weights(weight, s, py, px);
                T::gemm(
                    kk, s.c_out, n, T::one(), &wp, 1, kk as isize, &d_par, n as isize, 1, T::zero(), &mut col,
                    n as isize, 1,
                );
                parity_cols_adjoint(&col, s, py, px, d);
            }
        }
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `d` wherever the ReLU output was not positive.
pub fn relu_backward<T: Scalar>(out: &[T], d: &mut [T]) {
    for (g, &o) in d.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Nearest-neighbour ×2 upsampling of `(c, h, w)`.
pub fn upsample2x<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &input[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
            for (x, v) in dst.iter_mut().enumerate() {
                *v = src[x / 2];
            }
        }
    }
    out
}

/// Sums each 2×2 block of `d_out` back onto its source pixel.
pub fn upsample2x_backward<T: Scalar>(d_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut d = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let i = (ch * h + y / 2) * w + x / 2;
                d[i] = d[i] + d_out[(ch * h2 + y) * w2 + x];
            }
        }
    }
    d
}

pub fn global_avg_pool<T: Scalar>(input: &[T], c: usize, hw: usize) -> Vec<T> {
    let inv = T::from_f64(1.0 / hw as f64);
    (0..c)
        .map(|ch| input[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(d_out: &[T], hw: usize) -> Vec<T> {
    let inv = T::from_f64(1.0 / hw as f64);
    d_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect()
}

/// `out = W x + b` with `W` shaped `(out, in)`.
pub fn linear_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let n_in = x.len();
    out.copy_from_slice(bias);
    T::gemm(out.len(), n_in, 1, T::one(), weight, n_in as isize, 1, x, 1, 1, T::one(), out, 1, 1);
}

/// Accumulates `dW += d_out xᵀ`, `db += d_out`; returns `Wᵀ d_out` if asked.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let (n_out, n_in) = (d_out.len(), x.len());
    T::gemm(n_out, 1, n_in, T::one(), d_out, 1, 1, x, 1, 1, T::one(), d_weight, n_in as isize, 1);
    for (b, &g) in d_bias.iter_mut().zip(d_out) {
        *b = *b + g;
    }
    want_input_grad.then(|| {
        let mut dx = vec![T::zero(); n_in];
        T::gemm(n_in, n_out, 1, T::one(), weight, 1, n_in as isize, d_out, 1, 1, T::zero(), &mut dx, 1, 1);
        dx
    })
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy on a logit; returns (loss, d loss / d logit).
pub fn bce_with_logit<T: Scalar>(z: T, fell: bool) -> (T, T) {
    // -log σ(z) = softplus(-z), -log(1-σ(z)) = softplus(z)
    let softplus = |v: T| {
        if v > T::zero() {
            v + (-v).exp().ln_1p()
        } else {
            v.exp().ln_1p()
        }
    };
    let y = if fell { T::one() } else { T::zero() };
    let loss = if fell { softplus(-z) } else { softplus(z) };
    (loss, sigmoid(z) - y)
}

/// Per-pixel softmax over `classes` planes of `pixels` each.
pub fn softmax_planes<T: Scalar>(logits: &[T], classes: usize, pixels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for p in 0..pixels {
        let mut max = logits[p];
        for c in 1..classes {
            max = max.max(logits[c * pixels + p]);
        }
        let mut sum = T::zero();
        for c in 0..classes {
            let e = (logits[c * pixels + p] - max).exp();
            out[c * pixels + p] = e;
            sum = sum + e;
        }
        for c in 0..classes {
            out[c * pixels + p] = out[c * pixels + p] / sum;
        }
    }
    out
}

/// Mean per-pixel cross-entropy; returns (loss, d loss / d logits).
pub fn softmax_ce<T: Scalar>(logits: &[T], labels: &[u8], classes: usize) -> (T, Vec<T>) {
    let pixels = labels.len();
    let mut d = softmax_planes(logits, classes, pixels);
    let inv = T::from_f64(1.0 / pixels as f64);
    let mut loss = T::zero();
    for (p, &y) in labels.iter().enumerate() {
        let i = y as usize * pixels + p;
        // log-softmax computed from the logits for accuracy at confident pixels.
        let mut max = logits[p];
        for c in 1..classes {
            max = max.max(logits[c * pixels + p]);
        }
        let lse = (0..classes)
            .map(|c| (logits[c * pixels + p] - max).exp())
            .sum::<T>()
            .ln()
            + max;
        loss = loss + (lse - logits[i]);
        d[i] = d[i] - T::one();
    }
    for v in d.iter_mut() {
        *v = *v * inv;
    }
    (loss * inv, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_vec(r: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.uniform_range(-1.0, 1.0)).collect()
    }

    /// Direct convolution, the definition.
    fn conv_naive(x: &[f64], s: &ConvShape, w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (s.out_h(), s.out_w());
        let mut out = vec![0.0; s.c_out * oh * ow];
        for co in 0..s.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..s.c_in {
                        for ky in 0..s.k {
                            for kx in 0..s.k {
                                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                    acc += w[((co * s.c_in + ci) * s.k + ky) * s.k + kx]
                                        * x[(ci * s.h + iy as usize) * s.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut r = SeededRng::new(1);
        for s in [
            ConvShape { c_in: 3, h: 9, w: 9, c_out: 4, k: 5, stride: 2, pad: 2 },
            ConvShape { c_in: 2, h: 6, w: 6, c_out: 3, k: 3, stride: 1, pad: 1 },
        ] {
            let x = rand_vec(&mut r, s.in_len());
            let w = rand_vec(&mut r, s.c_out * s.fan_in());
            let b = rand_vec(&mut r, s.c_out);
            let mut out = vec![0.0; s.out_len()];
            conv_forward(&x, &s, &w, &b, &mut out);
            let expect = conv_naive(&x, &s, &w, &b);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = SeededRng::new(2);
        let s = ConvShape { c_in: 2, h: 7, w: 7, c_out: 3, k: 3, stride: 2, pad: 1 };
        let x = rand_vec(&mut r, s.in_len());
        let w = rand_vec(&mut r, s.c_out * s.fan_in());
        let b = rand_vec(&mut r, s.c_out);
        let g = rand_vec(&mut r, s.out_len());
        // Scalar objective L = Σ g ⊙ conv(x).
        let objective = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            conv_naive(x, &s, w, b).iter().zip(&g).map(|(o, gi)| o * gi).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let mut dx = vec![0.0; x.len()];
        conv_backward(&x, &s, &w, &g, &mut dw, &mut db, Some(&mut dx));
        let h = 1e-3;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (objective(&x, &wp, &b) - objective(&x, &wm, &b)) / (2.0 * h);
            assert!(rel_err(dw[i], fd) < 1e-4, "w[{i}]");
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (objective(&xp, &w, &b) - objective(&xm, &w, &b)) / (2.0 * h);
            assert!(rel_err(dx[i], fd) < 1e-4, "x[{i}]");
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            let fd = (objective(&x, &w, &bp) - objective(&x, &w, &bm)) / (2.0 * h);
            assert!(rel_err(db[i], fd) < 1e-4, "b[{i}]");
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut r = SeededRng::new(3);
        let (c, h, w) = (2, 3, 4);
        let x = rand_vec(&mut r, c * h * w);
        let g = rand_vec(&mut r, c * 4 * h * w);
        let up = upsample2x(&x, c, h, w);
        let lhs: f64 = up.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = upsample2x_backward(&g, c, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(up[0], x[0]);
        assert_eq!(up[1], x[0]);
        assert_eq!(up[2 * w], x[0]);
    }

    #[test]
    fn upconv_equals_upsample_then_conv() {
        let mut r = SeededRng::new(6);
        let u = UpConvShape { c_in: 3, h: 4, w: 5, c_out: 2 };
        let s = ConvShape { c_in: 3, h: 8, w: 10, c_out: 2, k: 3, stride: 1, pad: 1 };
        let x = rand_vec(&mut r, u.in_len());
        let w = rand_vec(&mut r, 2 * 3 * 9);
        let b = rand_vec(&mut r, 2);
        let g = rand_vec(&mut r, u.out_len());

        let up = upsample2x(&x, 3, 4, 5);
        let mut want = vec![0.0; s.out_len()];
        conv_forward(&up, &s, &w, &b, &mut want);
        let mut got = vec![0.0; u.out_len()];
        upconv_forward(&x, &u, &w, &b, &mut got);
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }

        let (mut dw1, mut db1, mut dup) = (vec![0.0; w.len()], vec![0.0; 2], vec![0.0; s.in_len()]);
        conv_backward(&up, &s, &w, &g, &mut dw1, &mut db1, Some(&mut dup));
        let dx1 = upsample2x_backward(&dup, 3, 4, 5);
        let (mut dw2, mut db2, mut dx2) = (vec![0.0; w.len()], vec![0.0; 2], vec![0.0; u.in_len()]);
        upconv_backward(&x, &u, &w, &g, &mut dw2, &mut db2, Some(&mut dx2));
        for (a, e) in dw2.iter().chain(&db2).chain(&dx2).zip(dw1.iter().chain(&db1).chain(&dx1)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_linear_and_relu_gradients() {
        let mut r = SeededRng::new(4);
        let (c, hw) = (3, 5);
        let x = rand_vec(&mut r, c * hw);
        let g = rand_vec(&mut r, c);
        let back = global_avg_pool_backward(&g, hw);
        let lhs: f64 = global_avg_pool(&x, c, hw).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let (n_in, n_out) = (4, 3);
        let xin = rand_vec(&mut r, n_in);
        let w = rand_vec(&mut r, n_in * n_out);
        let b = rand_vec(&mut r, n_out);
        let go = rand_vec(&mut r, n_out);
        let f = |xv: &[f64], wv: &[f64]| -> f64 {
            let mut o = vec![0.0; n_out];
            linear_forward(xv, wv, &b, &mut o);
            o.iter().zip(&go).map(|(a, c)| a * c).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; n_out];
        let dx = linear_backward(&xin, &w, &go, &mut dw, &mut db, true).unwrap();
        let h = 1e-3;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            assert!(rel_err(dw[i], (f(&xin, &wp) - f(&xin, &wm)) / (2.0 * h)) < 1e-4);
        }
        for i in 0..n_in {
            let (mut xp, mut xm) = (xin.clone(), xin.clone());
            xp[i] += h;
            xm[i] -= h;
            assert!(rel_err(dx[i], (f(&xp, &w) - f(&xm, &w)) / (2.0 * h)) < 1e-4);
        }
        assert_eq!(db, go);

        // ReLU away from the kink: derivative is exactly 0 or 1.
        let mut y = vec![-0.5, 0.25, 2.0, -3.0];
        relu_inplace(&mut y);
        let mut d = vec![1.0; 4];
        relu_backward(&y, &mut d);
        assert_eq!(d, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let h = 1e-3;
        for &z in &[-3.0f64, -0.2, 0.0, 1.7] {
            for fell in [false, true] {
                let (_, dz) = bce_with_logit(z, fell);
                let fd = (bce_with_logit(z + h, fell).0 - bce_with_logit(z - h, fell).0) / (2.0 * h);
                assert!(rel_err(dz, fd) < 1e-4, "z={z} fell={fell}");
            }
        }
        let mut r = SeededRng::new(5);
        let (classes, pixels) = (5, 6);
        let logits = rand_vec(&mut r, classes * pixels);
        let labels = [0u8, 4, 2, 2, 1, 3];
        let (_, d) = softmax_ce(&logits, &labels, classes);
        for i in 0..logits.len() {
            let (mut lp, mut lm) = (logits.clone(), logits.clone());
            lp[i] += h;
            lm[i] -= h;
            let fd = (softmax_ce(&lp, &labels, classes).0 - softmax_ce(&lm, &labels, classes).0) / (2.0 * h);
            assert!(rel_err(d[i], fd) < 1e-4, "logit {i}");
        }
    }

    #[test]
    fn softmax_normalizes_and_zero_logits_are_uniform() {
        let logits = vec![0.0f32; 5 * 7];
        let p = softmax_planes(&logits, 5, 7);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-7));
        let (loss, _) = softmax_ce(&logits, &[0; 7], 5);
        assert!((loss - 5f32.ln()).abs() < 1e-6);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
