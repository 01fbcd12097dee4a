//! Built-in ground-truth systems: the stratified heat flow (SHF) RC ladder
//! and the two-state system that becomes linear after lifting with the x1²
//! observable.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// (A, B, C, D) matrices of a continuous-time LTI system.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LinearStateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n || d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::Config(format!(
                "inconsistent state-space shapes: A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(LinearStateSpace { a, b, c, d })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let n = self.state_dim();
        let m = self.input_dim();
        debug_assert_eq!(x.len(), n);
        debug_assert_eq!(u.len(), m);
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self.a[(i, j)] * x[j];
            }
            for j in 0..m {
                s += self.b[(i, j)] * u[j];
            }
            out[i] = s;
        }
        out
    }

    pub fn output(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let p = self.output_dim();
        let mut out = vec![0.0; p];
        for i in 0..p {
            let mut s = 0.0;
            for j in 0..self.state_dim() {
                s += self.c[(i, j)] * x[j];
            }
            for j in 0..self.input_dim() {
                s += self.d[(i, j)] * u[j];
            }
            out[i] = s;
        }
        out
    }

    pub fn eigenvalues(&self) -> Vec<nalgebra::Complex<f64>> {
        self.a.complex_eigenvalues().iter().copied().collect()
    }
}

/// Interface the dataset generator drives: rhs + output map with optional
/// controls and sampled parameters.
pub trait DynamicalModel: Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn rhs(&self, t: f64, x: &[f64], u: &[f64], p: &[f64]) -> Vec<f64>;
    fn output(&self, x: &[f64], u: &[f64], p: &[f64]) -> Vec<f64>;
}

/// 1-D heat conduction discretized into `n_seg` RC segments. Each segment is
/// an R2C1 network: half the segment resistance on each side of the
/// capacitance, so adjacent halves merge into `r_seg` between interior cells
/// and the boundary links to the source temperatures are `r_seg / 2`.
#[derive(Debug, Clone, Copy)]
pub struct ShfModel {
    pub r_total: f64,
    pub c_total: f64,
    pub n_seg: usize,
}

impl Default for ShfModel {
    fn default() -> Self {
        ShfModel {
            r_total: 1.0,
            c_total: 1.0,
            n_seg: 16,
        }
    }
}

impl ShfModel {
    pub fn new(r_total: f64, c_total: f64, n_seg: usize) -> Result<ShfModel> {
        if !(r_total > 0.0) || !(c_total > 0.0) || n_seg < 2 {
            return Err(Error::Config(format!(
                "SHF needs R > 0, C > 0, n_seg >= 2; got R = {r_total}, C = {c_total}, n_seg = {n_seg}"
            )));
        }
        Ok(ShfModel {
            r_total,
            c_total,
            n_seg,
        })
    }

    pub fn r_seg(&self) -> f64 {
        self.r_total / self.n_seg as f64
    }

    pub fn c_seg(&self) -> f64 {
        self.c_total / self.n_seg as f64
    }

    /// Heat flows across the n_seg+1 links, left to right: index 0 is the
    /// T_a boundary link, index n_seg the T_b boundary link.
    fn link_flows(&self, temps: &[f64], u: &[f64]) -> Vec<f64> {
        let n = self.n_seg;
        let r = self.r_seg();
        let mut f = vec![0.0; n + 1];
        f[0] = (u[0] - temps[0]) / (r / 2.0);
        for k in 1..n {
            f[k] = (temps[k - 1] - temps[k]) / r;
        }
        f[n] = (temps[n - 1] - u[1]) / (r / 2.0);
        f
    }

    /// dT/dt for the cell temperatures given boundary temperatures [T_a, T_b].
    pub fn shf_rhs(&self, temps: &[f64], u: &[f64]) -> Vec<f64> {
        assert_eq!(temps.len(), self.n_seg, "state dim mismatch");
        assert_eq!(u.len(), 2, "SHF takes [T_a, T_b]");
        let c = self.c_seg();
        let f = self.link_flows(temps, u);
        (0..self.n_seg).map(|i| (f[i] - f[i + 1]) / c).collect()
    }

    /// 3 outputs per segment: heat flow in across the left link, heat flow
    /// out across the right link, cell temperature.
    pub fn shf_outputs(&self, temps: &[f64], u: &[f64]) -> Vec<f64> {
        let f = self.link_flows(temps, u);
        let mut out = Vec::with_capacity(3 * self.n_seg);
        for i in 0..self.n_seg {
            out.push(f[i]);
            out.push(f[i + 1]);
            out.push(temps[i]);
        }
        out
    }

    /// The same dynamics as explicit (A, B, C, D) matrices. `shf_rhs` equals
    /// `A·T + B·u` to machine precision.
    pub fn as_lti(&self) -> LinearStateSpace {
        let n = self.n_seg;
        let r = self.r_seg();
        let c = self.c_seg();
        let g_int = 1.0 / (r * c); // interior link conductance / C_i
        let g_bnd = 2.0 / (r * c); // boundary half-link
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, 2);
        for i in 0..n {
            let g_left = if i == 0 { g_bnd } else { g_int };
            let g_right = if i == n - 1 { g_bnd } else { g_int };
            a[(i, i)] = -(g_left + g_right);
            if i > 0 {
                a[(i, i - 1)] = g_left;
            }
            if i + 1 < n {
                a[(i, i + 1)] = g_right;
            }
        }
        b[(0, 0)] = g_bnd;
        b[(n - 1, 1)] = g_bnd;

        let p = 3 * n;
        let mut cm = DMatrix::zeros(p, n);
        let mut d = DMatrix::zeros(p, 2);
        let g_link_int = 1.0 / r;
        let g_link_bnd = 2.0 / r;
        for i in 0..n {
            // left link flow into cell i
            let row = 3 * i;
            if i == 0 {
                cm[(row, 0)] = -g_link_bnd;
                d[(row, 0)] = g_link_bnd;
            } else {
                cm[(row, i - 1)] = g_link_int;
                cm[(row, i)] = -g_link_int;
            }
            // right link flow out of cell i
            let row = 3 * i + 1;
            if i == n - 1 {
                cm[(row, n - 1)] = g_link_bnd;
                d[(row, 1)] = -g_link_bnd;
            } else {
                cm[(row, i)] = g_link_int;
                cm[(row, i + 1)] = -g_link_int;
            }
            // cell temperature
            cm[(3 * i + 2, i)] = 1.0;
        }
        LinearStateSpace { a, b, c: cm, d }
    }
}

impl DynamicalModel for ShfModel {
    fn name(&self) -> &'static str {
        "shf"
    }

    fn state_dim(&self) -> usize {
        self.n_seg
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        3 * self.n_seg
    }

    fn param_dim(&self) -> usize {
        0
    }

    fn rhs(&self, _t: f64, x: &[f64], u: &[f64], _p: &[f64]) -> Vec<f64> {
        self.shf_rhs(x, u)
    }

    fn output(&self, x: &[f64], u: &[f64], _p: &[f64]) -> Vec<f64> {
        self.shf_outputs(x, u)
    }
}

/// Two-state nonlinear system x1' = a·x1, x2' = b·(x2 − x1²). Adding the
/// observable x3 = x1² closes it into a 3-state linear system with
/// eigenvalues {a, b, 2a}.
#[derive(Debug, Clone, Copy)]
pub struct KoopmanAnalyticModel {
    pub a: f64,
    pub b: f64,
}

impl Default for KoopmanAnalyticModel {
    fn default() -> Self {
        KoopmanAnalyticModel { a: -0.5, b: -1.0 }
    }
}

impl KoopmanAnalyticModel {
    pub fn koopman_rhs(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), 2, "state dim mismatch");
        vec![self.a * x[0], self.b * (x[1] - x[0] * x[0])]
    }

    /// The lifted 3-state LTI with state [x1, x2, x3 = x1²], projecting back
    /// onto (x1, x2). No control inputs.
    pub fn koopman_lifted_lti(&self) -> LinearStateSpace {
        let (a, b) = (self.a, self.b);
        let am = DMatrix::from_row_slice(3, 3, &[a, 0.0, 0.0, 0.0, b, -b, 0.0, 0.0, 2.0 * a]);
        let bm = DMatrix::zeros(3, 0);
        let cm = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let dm = DMatrix::zeros(2, 0);
        LinearStateSpace {
            a: am,
            b: bm,
            c: cm,
            d: dm,
        }
    }
}

impl DynamicalModel for KoopmanAnalyticModel {
    fn name(&self) -> &'static str {
        "koopman-analytic"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        0
    }

    fn output_dim(&self) -> usize {
        0
    }

    fn param_dim(&self) -> usize {
        0
    }

    fn rhs(&self, _t: f64, x: &[f64], _u: &[f64], _p: &[f64]) -> Vec<f64> {
        self.koopman_rhs(x)
    }

    fn output(&self, _x: &[f64], _u: &[f64], _p: &[f64]) -> Vec<f64> {
        Vec::new()
    }
}
