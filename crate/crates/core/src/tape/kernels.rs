//! Dense row-major kernels. Loop orders keep the innermost loop contiguous.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `da[m×k] += dc[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_bt_acc(da: &mut [f64], dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dv) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in dcrow.iter().zip(brow) {
                s += x * y;
            }
            *dv += s;
        }
    }
}

/// `db[k×n] += aᵀ · dc` where `a` is `m×k` and `dc` is `m×n`.
pub fn matmul_at_acc(db: &mut [f64], a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, &g) in dbrow.iter_mut().zip(dcrow) {
                *dv += aip * g;
            }
        }
    }
}

#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn add_into(y: &mut [f64], x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let mut c = vec![0.0; 4];
        matmul_acc(&mut c, &[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(c, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn transposed_products() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2×3
        let b = [1., 0., 2., 1., 0., 3.]; // 3×2
        let dc = [1., 2., 3., 4.]; // 2×2
        let mut da = vec![0.0; 6];
        matmul_bt_acc(&mut da, &dc, &b, 2, 3, 2);
        assert_eq!(da, vec![1., 4., 6., 3., 10., 12.]);
        let mut db = vec![0.0; 6];
        matmul_at_acc(&mut db, &a, &dc, 2, 3, 2);
        assert_eq!(db, vec![13., 18., 17., 24., 21., 30.]);
    }
}
