//! Dense matrix kernels on row-major slices.

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m,n] += aᵀ · b` with `a[k,m]`, `b[k,n]`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    }
}

/// `c[m,n] += a · bᵀ` with `a[m,k]`, `b[n,k]`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// Lays out `k×k` neighbourhoods of `x[b,c,h,w]` (zero padded, stride 1) as
/// rows of a `[b*h*w, c*k*k]` matrix.
pub(crate) fn im2col(x: &[f64], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let cols = c * k * k;
    let mut out = vec![0.0; b * h * w * cols];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * cols;
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = xx as isize + dx as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out[row + (ci * k + dy) * k + dx] = plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds column gradients back onto the image.
pub(crate) fn col2im(
    cols: &[f64],
    dx: &mut [f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let pad = (k / 2) as isize;
    let ncols = c * k * k;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * ncols;
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx_ in 0..k {
                            let sx = xx as isize + dx_ as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[base + sy as usize * w + sx as usize] +=
                                cols[row + (ci * k + dy) * k + dx_];
                        }
                    }
                }
            }
        }
    }
}
