//! Stack of HSTU blocks evolving the temporally ordered group representations.
//!
//! One block, for a `k × d_g` input `G` with valid-row mask:
//!
//! ```text
//! H = G·W1 + b1,   [U | V | Q | K] = SiLU(H)              (each k × d_h)
//! S = Q·Kᵀ + bias[bucket(|t_i − t_j|)]
//! A_ij = SiLU(S_ij) / n_valid   (0 for padded keys)
//! Y = (LayerNorm(A·V) ⊙ U)·W2 + b2
//! out = Y + G on valid rows, 0 on padded rows
//! ```

use crate::buckets::LogBuckets;
use crate::error::{Error, Result};
use crate::numeric::ops::{layer_norm_slice, layer_norm_slice_backward, silu_grad_scalar, silu_scalar};
use crate::numeric::{Matrix, ParamSet, LAYER_NORM_EPS};

pub fn param_names(layer: usize) -> [String; 5] {
    ["w1", "b1", "w2", "b2", "bias"].map(|n| format!("hstu.{layer}.{n}"))
}

#[derive(Clone, Copy)]
pub struct HstuBlock<'a> {
    pub w1: &'a Matrix,
    pub b1: &'a Matrix,
    pub w2: &'a Matrix,
    pub b2: &'a Matrix,
    /// `1 × n_buckets` relative time bias table.
    pub bias: &'a Matrix,
}

impl<'a> HstuBlock<'a> {
    pub fn from_params(params: &'a ParamSet, layer: usize) -> Self {
        let [w1, b1, w2, b2, bias] = param_names(layer);
        Self {
            w1: params.value(&w1),
            b1: params.value(&b1),
            w2: params.value(&w2),
            b2: params.value(&b2),
            bias: params.value(&bias),
        }
    }

    pub fn d_h(&self) -> usize {
        self.w2.rows()
    }

    fn check(&self, d_g: usize) -> Result<()> {
        let dh = self.d_h();
        let ok = self.w1.shape() == (d_g, 4 * dh)
            && self.b1.shape() == (1, 4 * dh)
            && self.w2.shape() == (dh, d_g)
            && self.b2.shape() == (1, d_g)
            && self.bias.rows() == 1
            && self.bias.cols() >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::dim("hstu_forward", format!("block shapes do not fit d_g = {d_g}, d_h = {dh}")))
        }
    }
}

/// Bucket of every pairwise time gap, row-major `k × k`.
pub fn gap_buckets(timestamps: &[i64], buckets: &LogBuckets) -> Vec<usize> {
    let k = timestamps.len();
    let mut out = Vec::with_capacity(k * k);
    for &ti in timestamps {
        for &tj in timestamps {
            out.push(buckets.bucket((ti - tj).unsigned_abs() as f64));
        }
    }
    out
}

/// `bias[i][j] = table[bucket(|t_i − t_j|)]`.
pub fn relative_bias(timestamps: &[i64], table: &[f64], buckets: &LogBuckets) -> Matrix {
    let k = timestamps.len();
    let idx = gap_buckets(timestamps, buckets);
    let data = idx.iter().map(|&b| table[b.min(table.len() - 1)]).collect();
    Matrix::from_vec(k, k, data).expect("k x k")
}

#[derive(Clone, Debug)]
pub struct HstuCache {
    g: Matrix,
    h: Matrix,
    p: Matrix,
    s: Matrix,
    a: Matrix,
    av: Matrix,
    n: Matrix,
    z: Matrix,
    valid: Vec<bool>,
    buckets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct HstuGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub bias: Matrix,
    pub g: Matrix,
}

fn block_cols(m: &Matrix, part: usize, dh: usize) -> Matrix {
    m.col_block(part * dh, dh)
}

/// One block. `gap_bucket` comes from [`gap_buckets`] over the rows' timestamps.
pub fn hstu_forward(
    block: &HstuBlock,
    g: &Matrix,
    valid: &[bool],
    gap_bucket: &[usize],
) -> Result<(Matrix, HstuCache)> {
    let (k, d_g) = g.shape();
    block.check(d_g)?;
    if valid.len() != k || gap_bucket.len() != k * k {
        return Err(Error::dim("hstu_forward", "mask/bucket sizes must match k"));
    }
    let dh = block.d_h();
    let n_valid = valid.iter().filter(|&&v| v).count();
    let table = block.bias.row(0);

    let mut h = g.mm(block.w1);
    h.add_row_broadcast(block.b1.row(0));
    let p = h.map(silu_scalar);
    let (u, v, q, kk) = (
        block_cols(&p, 0, dh),
        block_cols(&p, 1, dh),
        block_cols(&p, 2, dh),
        block_cols(&p, 3, dh),
    );
    let mut s = q.mmt(&kk);
    let mut a = Matrix::zeros(k, k);
    let norm = 1.0 / n_valid.max(1) as f64;
    for i in 0..k {
        for j in 0..k {
            let b = gap_bucket[i * k + j].min(table.len() - 1);
            let sij = s[(i, j)] + table[b];
            s.data_mut()[i * k + j] = sij;
            if valid[j] {
                a.data_mut()[i * k + j] = silu_scalar(sij) * norm;
            }
        }
    }
    let av = a.mm(&v);
    let mut n = Matrix::zeros(k, dh);
    for i in 0..k {
        layer_norm_slice(av.row(i), LAYER_NORM_EPS, n.row_mut(i));
    }
    let mut z = n.clone();
    for (zv, uv) in z.data_mut().iter_mut().zip(u.data()) {
        *zv *= uv;
    }
    let mut out = z.mm(block.w2);
    out.add_row_broadcast(block.b2.row(0));
    out.add_assign(g);
    for i in (0..k).filter(|&i| !valid[i]) {
        out.row_mut(i).fill(0.0);
    }
    Ok((
        out,
        HstuCache {
            g: g.clone(),
            h,
            p,
            s,
            a,
            av,
            n,
            z,
            valid: valid.to_vec(),
            buckets: gap_bucket.to_vec(),
        },
    ))
}

pub fn hstu_backward(block: &HstuBlock, cache: &HstuCache, d_out: &Matrix) -> HstuGrads {
    let (k, d_g) = cache.g.shape();
    let dh = block.d_h();
    let n_valid = cache.valid.iter().filter(|&&v| v).count();
    let norm = 1.0 / n_valid.max(1) as f64;
    let n_buckets = block.bias.cols();

    let mut dy = d_out.clone();
    for i in (0..k).filter(|&i| !cache.valid[i]) {
        dy.row_mut(i).fill(0.0);
    }
    let g_w2 = cache.z.tmm(&dy);
    let mut g_b2 = Matrix::zeros(1, d_g);
    dy.accumulate_col_sums(g_b2.row_mut(0));
    let dz = dy.mmt(block.w2);
    let u = block_cols(&cache.p, 0, dh);
    let v = block_cols(&cache.p, 1, dh);
    let q = block_cols(&cache.p, 2, dh);
    let kk = block_cols(&cache.p, 3, dh);

    let mut dn = dz.clone();
    for (d, uv) in dn.data_mut().iter_mut().zip(u.data()) {
        *d *= uv;
    }
    let mut du = dz;
    for (d, nv) in du.data_mut().iter_mut().zip(cache.n.data()) {
        *d *= nv;
    }
    let mut dav = Matrix::zeros(k, dh);
    for i in 0..k {
        layer_norm_slice_backward(cache.av.row(i), dn.row(i), LAYER_NORM_EPS, dav.row_mut(i));
    }
    let da = dav.mmt(&v);
    let dv = cache.a.tmm(&dav);
    let mut ds = Matrix::zeros(k, k);
    let mut g_bias = Matrix::zeros(1, n_buckets);
    for i in 0..k {
        for j in (0..k).filter(|&j| cache.valid[j]) {
            let d = da[(i, j)] * silu_grad_scalar(cache.s[(i, j)]) * norm;
            ds.data_mut()[i * k + j] = d;
            g_bias.data_mut()[cache.buckets[i * k + j].min(n_buckets - 1)] += d;
        }
    }
    let dq = ds.mm(&kk);
    let dk = ds.tmm(&q);

    let mut dp = Matrix::zeros(k, 4 * dh);
    dp.add_col_block(0, &du);
    dp.add_col_block(dh, &dv);
    dp.add_col_block(2 * dh, &dq);
    dp.add_col_block(3 * dh, &dk);
    let mut dh_pre = dp;
    for (d, hv) in dh_pre.data_mut().iter_mut().zip(cache.h.data()) {
        *d *= silu_grad_scalar(*hv);
    }
    let g_w1 = cache.g.tmm(&dh_pre);
    let mut g_b1 = Matrix::zeros(1, 4 * dh);
    dh_pre.accumulate_col_sums(g_b1.row_mut(0));
    let mut dg = dh_pre.mmt(block.w1);
    dg.add_assign(&dy);
    HstuGrads {
        w1: g_w1,
        b1: g_b1,
        w2: g_w2,
        b2: g_b2,
        bias: g_bias,
        g: dg,
    }
}

/// Sequential composition of blocks. Only user history reaches this
/// function, so its output can be cached per user.
pub fn stack_forward(
    blocks: &[HstuBlock],
    g: &Matrix,
    valid: &[bool],
    timestamps: &[i64],
    buckets: &LogBuckets,
) -> Result<(Matrix, Vec<HstuCache>)> {
    if blocks.is_empty() {
        return Err(Error::invalid("HSTU stack needs at least one block"));
    }
    if timestamps.len() != g.rows() {
        return Err(Error::dim("stack_forward", "one timestamp per row"));
    }
    let gaps = gap_buckets(timestamps, buckets);
    let mut x = g.clone();
    for i in (0..x.rows()).filter(|&i| !valid[i]) {
        x.row_mut(i).fill(0.0);
    }
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, c) = hstu_forward(b, &x, valid, &gaps)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

/// Per-block gradients (same order as `blocks`) and the gradient w.r.t. the input.
pub fn stack_backward(blocks: &[HstuBlock], caches: &[HstuCache], d_out: &Matrix) -> (Vec<HstuGrads>, Matrix) {
    let mut d = d_out.clone();
    let mut grads: Vec<HstuGrads> = Vec::with_capacity(blocks.len());
    for (b, c) in blocks.iter().zip(caches).rev() {
        let g = hstu_backward(b, c, &d);
        d = g.g.clone();
        grads.push(g);
    }
    grads.reverse();
    for i in (0..d.rows()).filter(|&i| !caches[0].valid[i]) {
        d.row_mut(i).fill(0.0);
    }
    (grads, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{seeded_rng, uniform_with_rng};

    struct Owned {
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
        bias: Matrix,
    }

    impl Owned {
        fn random(d_g: usize, dh: usize, nb: usize, seed: u64) -> Self {
            let mut rng = seeded_rng(seed);
            Self {
                w1: uniform_with_rng(d_g, 4 * dh, 0.6, &mut rng),
                b1: uniform_with_rng(1, 4 * dh, 0.3, &mut rng),
                w2: uniform_with_rng(dh, d_g, 0.6, &mut rng),
                b2: uniform_with_rng(1, d_g, 0.3, &mut rng),
                bias: uniform_with_rng(1, nb, 0.5, &mut rng),
            }
        }

        fn zero(d_g: usize, dh: usize, nb: usize) -> Self {
            Self {
                w1: Matrix::zeros(d_g, 4 * dh),
                b1: Matrix::zeros(1, 4 * dh),
                w2: Matrix::zeros(dh, d_g),
                b2: Matrix::zeros(1, d_g),
                bias: Matrix::zeros(1, nb),
            }
        }

        fn block(&self) -> HstuBlock<'_> {
            HstuBlock {
                w1: &self.w1,
                b1: &self.b1,
                w2: &self.w2,
                b2: &self.b2,
                bias: &self.bias,
            }
        }
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    /// Literal reading of the block equations with scalar loops.
    fn oracle(o: &Owned, g: &Matrix, valid: &[bool], ts: &[i64], buckets: &LogBuckets) -> Matrix {
        let (k, d_g) = g.shape();
        let dh = o.w2.rows();
        let f1 = |i: usize, c: usize| -> f64 { o.b1[(0, c)] + (0..d_g).map(|t| g[(i, t)] * o.w1[(t, c)]).sum::<f64>() };
        let phi: Vec<Vec<f64>> = (0..k).map(|i| (0..4 * dh).map(|c| silu(f1(i, c))).collect()).collect();
        let (u, v, q, kk) = (0, dh, 2 * dh, 3 * dh);
        let nv = valid.iter().filter(|&&x| x).count() as f64;
        let mut out = Matrix::zeros(k, d_g);
        for i in 0..k {
            if !valid[i] {
                continue;
            }
            let mut av = vec![0.0; dh];
            for j in 0..k {
                if !valid[j] {
                    continue;
                }
                let gap = (ts[i] - ts[j]).abs() as f64;
                let b = ((gap.ln_1p() / buckets.width).floor() as usize).min(buckets.count - 1);
                let qk: f64 = (0..dh).map(|c| phi[i][q + c] * phi[j][kk + c]).sum();
                let aij = silu(qk + o.bias[(0, b)]) / nv;
                for c in 0..dh {
                    av[c] += aij * phi[j][v + c];
                }
            }
            let mean = av.iter().sum::<f64>() / dh as f64;
            let var = av.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / dh as f64;
            let gated: Vec<f64> = (0..dh)
                .map(|c| (av[c] - mean) / (var + 1e-6).sqrt() * phi[i][u + c])
                .collect();
            for c in 0..d_g {
                out.data_mut()[i * d_g + c] =
                    o.b2[(0, c)] + (0..dh).map(|t| gated[t] * o.w2[(t, c)]).sum::<f64>() + g[(i, c)];
            }
        }
        out
    }

    fn lb() -> LogBuckets {
        LogBuckets::new(std::f64::consts::LN_10, 8)
    }

    #[test]
    fn relative_bias_examples() {
        let z = relative_bias(&[0, 100, 10_000], &[0.0; 8], &lb());
        assert_eq!(z.frobenius_sq(), 0.0);
        let table: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let b = relative_bias(&[0, 100, 10_000], &table, &lb());
        for i in 0..3 {
            assert_eq!(b[(i, i)], 0.0);
            for j in 0..3 {
                assert_eq!(b[(i, j)], b[(j, i)]);
            }
        }
        assert_ne!(b[(0, 1)], b[(0, 2)]);
    }

    #[test]
    fn zero_block_adds_output_bias_to_residual() {
        let mut o = Owned::zero(5, 3, 8);
        o.b2 = Matrix::from_rows(&[[0.1, -0.2, 0.3, 0.0, 1.0]]);
        let mut rng = seeded_rng(1);
        let g = uniform_with_rng(3, 5, 1.0, &mut rng);
        let gaps = gap_buckets(&[1, 2, 3], &lb());
        let (out, _) = hstu_forward(&o.block(), &g, &[true; 3], &gaps).unwrap();
        for i in 0..3 {
            for c in 0..5 {
                assert!((out[(i, c)] - g[(i, c)] - o.b2[(0, c)]).abs() < 1e-15);
            }
        }
        let o = Owned::zero(5, 3, 8);
        let (out, _) = stack_forward(&[o.block(), o.block()], &g, &[true; 3], &[1, 2, 3], &lb()).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn single_group_scalar_case() {
        let o = Owned::random(2, 1, 8, 4);
        let g = Matrix::from_rows(&[[0.4, -0.7]]);
        let (out, _) = hstu_forward(&o.block(), &g, &[true], &[0]).unwrap();
        // d_h = 1: layer norm of a single value is 0, leaving bias + residual
        for c in 0..2 {
            assert!((out[(0, c)] - (o.b2[(0, c)] + g[(0, c)])).abs() < 1e-12);
        }
        let o = Owned::random(2, 2, 8, 5);
        let (out, _) = hstu_forward(&o.block(), &g, &[true], &[0]).unwrap();
        let h: Vec<f64> = (0..8).map(|c| silu(o.b1[(0, c)] + 0.4 * o.w1[(0, c)] - 0.7 * o.w1[(1, c)])).collect();
        let a = silu(h[4] * h[6] + h[5] * h[7] + o.bias[(0, 0)]);
        let av = [a * h[2], a * h[3]];
        let m = (av[0] + av[1]) / 2.0;
        let sd = (((av[0] - m).powi(2) + (av[1] - m).powi(2)) / 2.0 + 1e-6).sqrt();
        let z = [(av[0] - m) / sd * h[0], (av[1] - m) / sd * h[1]];
        for c in 0..2 {
            let want = z[0] * o.w2[(0, c)] + z[1] * o.w2[(1, c)] + o.b2[(0, c)] + g[(0, c)];
            assert!((out[(0, c)] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_literal_oracle_with_padding() {
        let mut rng = seeded_rng(7);
        for trial in 0..10 {
            let o = Owned::random(6, 3, 8, trial);
            let mut g = uniform_with_rng(4, 6, 1.0, &mut rng);
            let valid = [true, true, true, trial % 2 == 0];
            if !valid[3] {
                g.row_mut(3).fill(0.0);
            }
            let ts = [1000, 1500, 90_000, 2_000_000];
            let gaps = gap_buckets(&ts, &lb());
            let (out, _) = hstu_forward(&o.block(), &g, &valid, &gaps).unwrap();
            let want = oracle(&o, &g, &valid, &ts, &lb());
            assert!(out.max_abs_diff(&want) < 1e-10);
            if !valid[3] {
                assert!(out.row(3).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn two_block_stack_is_composition() {
        let a = Owned::random(6, 3, 8, 1);
        let b = Owned::random(6, 3, 8, 2);
        let mut rng = seeded_rng(3);
        let g = uniform_with_rng(3, 6, 1.0, &mut rng);
        let ts = [10, 400, 5000];
        let valid = [true; 3];
        let (out, _) = stack_forward(&[a.block(), b.block()], &g, &valid, &ts, &lb()).unwrap();
        let want = oracle(&b, &oracle(&a, &g, &valid, &ts, &lb()), &valid, &ts, &lb());
        assert!(out.max_abs_diff(&want) < 1e-10);
        let (one, _) = stack_forward(&[a.block()], &g, &valid, &ts, &lb()).unwrap();
        let (direct, _) = hstu_forward(&a.block(), &g, &valid, &gap_buckets(&ts, &lb())).unwrap();
        assert_eq!(one, direct);
    }

    #[test]
    fn stack_backward_matches_finite_differences() {
        let blocks = [Owned::random(4, 2, 8, 11), Owned::random(4, 2, 8, 12)];
        let mut rng = seeded_rng(5);
        let mut g = uniform_with_rng(3, 4, 1.0, &mut rng);
        g.row_mut(2).fill(0.0);
        let valid = [true, true, false];
        let ts = [5, 700, 900];
        let probe = uniform_with_rng(3, 4, 1.0, &mut rng);
        let loss = |bs: &[Owned], g: &Matrix| -> f64 {
            let refs: Vec<HstuBlock> = bs.iter().map(Owned::block).collect();
            let (out, _) = stack_forward(&refs, g, &valid, &ts, &lb()).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let refs: Vec<HstuBlock> = blocks.iter().map(Owned::block).collect();
        let (_, caches) = stack_forward(&refs, &g, &valid, &ts, &lb()).unwrap();
        let (grads, dg) = stack_backward(&refs, &caches, &probe);
        let h = 1e-6;
        let close = |num: f64, ana: f64, what: &str| {
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "{what}: {num} vs {ana}");
        };
        for e in 0..8 {
            let (mut gp, mut gm) = (g.clone(), g.clone());
            gp.data_mut()[e] += h;
            gm.data_mut()[e] -= h;
            close((loss(&blocks, &gp) - loss(&blocks, &gm)) / (2.0 * h), dg.data()[e], "g");
        }
        for l in 0..2 {
            for which in 0..5 {
                let len = [32, 8, 8, 4, 8][which];
                for e in 0..len {
                    let bump = |s: f64| -> f64 {
                        let mut bs = [Owned::random(4, 2, 8, 11), Owned::random(4, 2, 8, 12)];
                        let m = match which {
                            0 => &mut bs[l].w1,
                            1 => &mut bs[l].b1,
                            2 => &mut bs[l].w2,
                            3 => &mut bs[l].b2,
                            _ => &mut bs[l].bias,
                        };
                        m.data_mut()[e] += s;
                        loss(&bs, &g)
                    };
                    let num = (bump(h) - bump(-h)) / (2.0 * h);
                    let gr = &grads[l];
                    let ana = [&gr.w1, &gr.b1, &gr.w2, &gr.b2, &gr.bias][which].data()[e];
                    close(num, ana, &format!("layer {l} param {which}[{e}]"));
                }
            }
        }
    }
}
