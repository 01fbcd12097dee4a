//! Classical linear comparisons: Truncated Balanced Realization via
//! Bartels–Stewart Lyapunov solves, and Dynamic Mode Decomposition with
//! control, plus eigenvalue utilities for spectrum comparisons.

use nalgebra::{Complex, DMatrix};

use crate::physics::LinearStateSpace;
use crate::{Error, Result};

/// Solve `A·X + X·Aᵀ + Q = 0` by Bartels–Stewart over the real Schur form.
/// The relative residual ‖AX + XAᵀ + Q‖_F / ‖Q‖_F is checked against 1e-8.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Linalg(format!(
            "Lyapunov needs square same-size matrices, got A {}x{}, Q {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let schur = a.clone().schur();
    let (u, t) = schur.unpack();
    // Transformed problem: T·Y + Y·Tᵀ = −Uᵀ·Q·U
    let c = -(u.transpose() * q * &u);
    let y = solve_quasi_triangular_lyapunov(&t, &c)?;
    let x = &u * y * u.transpose();

    let residual = (a * &x + &x * a.transpose() + q).norm();
    let scale = q.norm().max(1e-300);
    if residual / scale > 1e-8 {
        return Err(Error::Linalg(format!(
            "Lyapunov residual {residual:e} exceeds tolerance (relative {:e})",
            residual / scale
        )));
    }
    Ok(x)
}

/// Block back-substitution for `T·Y + Y·Tᵀ = C` with `T` real quasi-upper
/// triangular (1x1 / 2x2 diagonal blocks from the real Schur form).
fn solve_quasi_triangular_lyapunov(t: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    // Diagonal block boundaries.
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        let size = if i + 1 < n && t[(i + 1, i)].abs() > 1e-14 * (t[(i, i)].abs() + t[(i + 1, i + 1)].abs()).max(1e-300) {
            2
        } else {
            1
        };
        blocks.push((i, size));
        i += size;
    }
    let nb = blocks.len();
    let mut y = DMatrix::zeros(n, n);

    // Iterate blocks from bottom-right to top-left; later blocks are known.
    for bi in (0..nb).rev() {
        let (i0, si) = blocks[bi];
        for bj in (0..nb).rev() {
            let (j0, sj) = blocks[bj];
            // RHS = C_ij − Σ_{k>bi} T_ik Y_kj − Σ_{l>bj} Y_il (Tᵀ)_lj
            let mut rhs = c.view((i0, j0), (si, sj)).into_owned();
            for bk in (bi + 1)..nb {
                let (k0, sk) = blocks[bk];
                let t_ik = t.view((i0, k0), (si, sk));
                let y_kj = y.view((k0, j0), (sk, sj));
                rhs -= t_ik * y_kj;
            }
            for bl in (bj + 1)..nb {
                let (l0, sl) = blocks[bl];
                let y_il = y.view((i0, l0), (si, sl));
                // (Tᵀ)_{l j} = (T_{j l})ᵀ
                let t_jl = t.view((j0, l0), (sj, sl));
                rhs -= y_il * t_jl.transpose();
            }
            // Solve T_ii Y_ij + Y_ij T_jjᵀ = rhs via the small Kronecker system
            // (I ⊗ T_ii + T_jj ⊗ I) vec(Y_ij) = vec(rhs), column-major vec.
            let t_ii = t.view((i0, i0), (si, si)).into_owned();
            let t_jj = t.view((j0, j0), (sj, sj)).into_owned();
            let dim = si * sj;
            let mut k = DMatrix::zeros(dim, dim);
            for col in 0..sj {
                for row in 0..si {
                    let r = col * si + row;
                    for col2 in 0..sj {
                        for row2 in 0..si {
                            let cc = col2 * si + row2;
                            let mut v = 0.0;
                            if col == col2 {
                                v += t_ii[(row, row2)];
                            }
                            if row == row2 {
                                v += t_jj[(col, col2)];
                            }
                            k[(r, cc)] += v;
                        }
                    }
                }
            }
            let mut vec_rhs = DMatrix::zeros(dim, 1);
            for col in 0..sj {
                for row in 0..si {
                    vec_rhs[(col * si + row, 0)] = rhs[(row, col)];
                }
            }
            let sol = k
                .lu()
                .solve(&vec_rhs)
                .ok_or_else(|| Error::Linalg("singular block in Lyapunov back-substitution".into()))?;
            for col in 0..sj {
                for row in 0..si {
                    y[(i0 + row, j0 + col)] = sol[(col * si + row, 0)];
                }
            }
        }
    }
    Ok(y)
}

/// Reduced LTI from balanced truncation, with the balancing transform pair
/// and the Hankel singular values.
#[derive(Debug, Clone)]
pub struct ReducedLti {
    pub reduced: LinearStateSpace,
    pub order: usize,
    pub hankel_singular_values: Vec<f64>,
    pub transform: DMatrix<f64>,     // T: full state = T · balanced state
    pub transform_inv: DMatrix<f64>, // T⁻¹
}

/// Truncated balanced realization by the square-root method: Cholesky
/// factors of both gramians, SVD of their cross product, truncation to the
/// `r` largest Hankel singular values.
pub fn tbr_reduce(sys: &LinearStateSpace, r: usize) -> Result<ReducedLti> {
    let n = sys.state_dim();
    if r == 0 || r > n {
        return Err(Error::Config(format!("reduction order {r} outside 1..={n}")));
    }
    if sys.eigenvalues().iter().any(|ev| ev.re >= 0.0) {
        return Err(Error::Linalg("TBR requires a Hurwitz A matrix".into()));
    }
    // Controllability: A·P + P·Aᵀ + B·Bᵀ = 0; observability: Aᵀ·Q + Q·A + Cᵀ·C = 0.
    let p = solve_lyapunov(&sys.a, &(&sys.b * sys.b.transpose()))?;
    let q = solve_lyapunov(&sys.a.transpose(), &(sys.c.transpose() * &sys.c))?;

    let lp = DMatrix::from(
        p.clone()
            .cholesky()
            .ok_or_else(|| Error::Linalg("controllability gramian not positive definite".into()))?
            .l(),
    );
    let lq = DMatrix::from(
        q.clone()
            .cholesky()
            .ok_or_else(|| Error::Linalg("observability gramian not positive definite".into()))?
            .l(),
    );

    let m = lq.transpose() * &lp;
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let hsv: Vec<f64> = svd.singular_values.iter().copied().collect();
    if hsv[r - 1] <= 0.0 {
        return Err(Error::Linalg(format!("Hankel singular value {r} is zero; system order is lower", )));
    }

    // T = Lp·V·Σ^{-1/2}, T⁻¹ = Σ^{-1/2}·Uᵀ·Lqᵀ
    let sqrt_inv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        hsv.len(),
        hsv.iter().map(|s| 1.0 / s.sqrt()),
    ));
    let t_full = &lp * vt.transpose() * &sqrt_inv;
    let t_inv_full = &sqrt_inv * u.transpose() * lq.transpose();

    let t_r = t_full.columns(0, r).into_owned();
    let t_inv_r = t_inv_full.rows(0, r).into_owned();

    let reduced = LinearStateSpace {
        a: &t_inv_r * &sys.a * &t_r,
        b: &t_inv_r * &sys.b,
        c: &sys.c * &t_r,
        d: sys.d.clone(),
    };
    Ok(ReducedLti {
        reduced,
        order: r,
        hankel_singular_values: hsv,
        transform: t_r,
        transform_inv: t_inv_r,
    })
}

/// Discrete-time LTI fit `x' ≈ A·x + B·u` from snapshot matrices by
/// truncated-SVD least squares. Returns the operator pair plus the effective
/// rank actually used.
#[derive(Debug, Clone)]
pub struct DmdcFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub rank: usize,
    pub effective_rank: usize,
    pub dt: f64,
}

/// `x_snapshots`: n×m states at step k, `x_next`: n×m at k+1, `u_snapshots`:
/// q×m controls at step k. `[A B] = X' · pinv_r([X; U])` with SVD truncation
/// at `rank`.
pub fn dmdc_fit(
    x_snapshots: &DMatrix<f64>,
    x_next: &DMatrix<f64>,
    u_snapshots: &DMatrix<f64>,
    rank: usize,
    dt: f64,
) -> Result<DmdcFit> {
    let n = x_snapshots.nrows();
    let m = x_snapshots.ncols();
    let q = u_snapshots.nrows();
    if x_next.nrows() != n || x_next.ncols() != m || (q > 0 && u_snapshots.ncols() != m) {
        return Err(Error::Linalg("snapshot matrices misaligned".into()));
    }
    if rank == 0 || rank > n + q || rank > m {
        return Err(Error::Config(format!(
            "rank {rank} outside 1..=min(n+q = {}, m = {m})",
            n + q
        )));
    }
    // Ω = [X; U]
    let mut omega = DMatrix::zeros(n + q, m);
    omega.view_mut((0, 0), (n, m)).copy_from(x_snapshots);
    if q > 0 {
        omega.view_mut((n, 0), (q, m)).copy_from(u_snapshots);
    }
    let svd = omega.svd(true, true);
    let u_full = svd.u.as_ref().unwrap();
    let vt_full = svd.v_t.as_ref().unwrap();
    let sv = &svd.singular_values;

    // Drop numerically zero directions inside the requested rank.
    let tol = sv[0] * 1e-12 * (m.max(n + q) as f64);
    let effective_rank = sv.iter().take(rank).filter(|s| **s > tol).count();
    if effective_rank == 0 {
        return Err(Error::Linalg("snapshot matrix is numerically zero".into()));
    }
    let ur = u_full.columns(0, effective_rank);
    let vr_t = vt_full.rows(0, effective_rank);
    let sinv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        effective_rank,
        sv.iter().take(effective_rank).map(|s| 1.0 / s),
    ));
    // [A B] = X' · Vr · Σr⁻¹ · Urᵀ
    let ab = x_next * vr_t.transpose() * sinv * ur.transpose();
    let a = ab.columns(0, n).into_owned();
    let b = if q > 0 {
        ab.columns(n, q).into_owned()
    } else {
        DMatrix::zeros(n, 0)
    };
    Ok(DmdcFit {
        a,
        b,
        rank,
        effective_rank,
        dt,
    })
}

/// Full complex spectrum of a square matrix.
pub fn eigenvalues(mat: &DMatrix<f64>) -> Vec<Complex<f64>> {
    mat.complex_eigenvalues().iter().copied().collect()
}

/// Continuous-time spectrum implied by a discrete operator at step `dt`:
/// log of each discrete eigenvalue divided by dt (principal branch).
/// Eigenvalues on the closed negative real axis have no unambiguous
/// continuous counterpart and are rejected.
pub fn continuous_spectrum_from_discrete(a_discrete: &DMatrix<f64>, dt: f64) -> Result<Vec<Complex<f64>>> {
    if !(dt > 0.0) {
        return Err(Error::Config("dt must be positive".into()));
    }
    eigenvalues(a_discrete)
        .into_iter()
        .map(|ev| {
            let r = ev.norm();
            if r == 0.0 || (ev.re <= 0.0 && ev.im.abs() < 1e-14 * r.max(1.0)) {
                return Err(Error::Linalg(format!(
                    "discrete eigenvalue {ev} lies on the log branch cut"
                )));
            }
            Ok(Complex::new(r.ln() / dt, ev.arg() / dt))
        })
        .collect()
}

/// Minimum-total-distance pairing of two equally sized spectra. Sizes here
/// are small (a handful of active modes), so exhaustive permutation search
/// is exact and cheap.
pub fn match_spectra(learned: &[Complex<f64>], reference: &[Complex<f64>]) -> Result<Vec<(usize, usize, f64)>> {
    let n = learned.len();
    if n != reference.len() {
        return Err(Error::Config(format!(
            "spectrum sizes differ: {n} vs {}",
            reference.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > 8 {
        return Err(Error::Config("spectrum matching supports up to 8 modes".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    permute(&mut perm, 0, &mut |p| {
        let cost: f64 = p
            .iter()
            .enumerate()
            .map(|(i, &j)| (learned[i] - reference[j]).norm())
            .sum();
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, p.to_vec()));
        }
    });
    let (_, assignment) = best.unwrap();
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| (i, j, (learned[i] - reference[j]).norm()))
        .collect())
}

fn permute(arr: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == arr.len() {
        visit(arr);
        return;
    }
    for i in k..arr.len() {
        arr.swap(k, i);
        permute(arr, k + 1, visit);
        arr.swap(k, i);
    }
}
