//! Row-major matrix kernels. All of them accumulate into `out`.

/// `out[p×r] += a[p×q] · b[q×r]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[p×q] += g[p×r] · b[q×r]ᵀ`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            let mut acc = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * q + k] += acc;
        }
    }
}

/// `out[q×r] += a[p×q]ᵀ · g[p×r]`, restricted to output rows `k0..k0+rows`.
pub(crate) fn gemm_tn_rows(
    a: &[f64],
    g: &[f64],
    out_rows: &mut [f64],
    k0: usize,
    p: usize,
    q: usize,
    r: usize,
) {
    let rows = out_rows.len() / r;
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for kk in 0..rows {
            let aik = a[i * q + k0 + kk];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out_rows[kk * r..(kk + 1) * r];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

/// Pairwise summation; error grows as O(log n) rather than O(n).
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n if n <= 8 => xs.iter().sum(),
        n => {
            let (l, r) = xs.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}
