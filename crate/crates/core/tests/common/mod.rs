//! Dense-matrix oracles built without the library's linear algebra.
#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(n: usize) -> Mat {
    vec![vec![0.0; n]; n]
}

pub fn identity(n: usize) -> Mat {
    let mut m = zeros(n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let m = b[0].len();
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for (k, bk) in b.iter().enumerate() {
            let aik = a[i][k];
            if aik != 0.0 {
                for j in 0..m {
                    c[i][j] += aik * bk[j];
                }
            }
        }
    }
    c
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn norm_inf(a: &Mat) -> f64 {
    a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Taylor series on `A / 2^s` with `‖A / 2^s‖ ≤ 1/2`, then `s` squarings.
pub fn expm_taylor(a: &Mat) -> Mat {
    let n = a.len();
    let norm = norm_inf(a);
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let b = scale(a, 0.5f64.powi(s));
    let mut sum = identity(n);
    let mut term = identity(n);
    for k in 1..40 {
        term = scale(&matmul(&term, &b), 1.0 / k as f64);
        sum = add(&sum, &term);
    }
    for _ in 0..s {
        sum = matmul(&sum, &sum);
    }
    sum
}

pub fn row_times(v: &[f64], a: &Mat) -> Vec<f64> {
    let m = a[0].len();
    let mut out = vec![0.0; m];
    for (vi, row) in v.iter().zip(a) {
        for j in 0..m {
            out[j] += vi * row[j];
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `L - diag(V)`.
pub fn killed_generator(rates: &Mat, v: &[f64]) -> Mat {
    let mut a = rates.clone();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] -= v[i];
    }
    a
}

/// `γ_t` as a row vector: `η_0 exp(t (L - V))`.
pub fn gamma_vector(rates: &Mat, v: &[f64], eta0: &[f64], t: f64) -> Vec<f64> {
    row_times(eta0, &expm_taylor(&scale(&killed_generator(rates, v), t)))
}

/// Tuples of `{0, .., s-1}^q` in row-major order.
pub fn tuples(s: usize, q: usize) -> Vec<Vec<usize>> {
    let total = s.pow(q as u32);
    (0..total)
        .map(|mut c| {
            let mut x = vec![0; q];
            for i in (0..q).rev() {
                x[i] = c % s;
                c /= s;
            }
            x
        })
        .collect()
}

fn index_of(x: &[usize], s: usize) -> usize {
    x.iter().fold(0, |acc, &v| acc * s + v)
}

/// The auxiliary `q`-particle system on a finite space, as forward
/// operators on measures over `S^q`.
pub struct AuxOracle {
    pub s: usize,
    pub q: usize,
    /// Free motion of every particle, killed at rate `Σ_i V(x_i)`.
    pub a: Mat,
    /// One ring: uniform ordered pair `(i, j)`, `x_i ← x_j` with
    /// probability `V(x_i) / V_inf`.
    pub b: Mat,
    pub mu0: Vec<f64>,
}

impl AuxOracle {
    pub fn new(rates: &Mat, v: &[f64], v_inf: f64, eta0: &[f64], q: usize) -> Self {
        let s = rates.len();
        let xs = tuples(s, q);
        let dim = xs.len();
        let mut a = zeros(dim);
        let mut b = zeros(dim);
        let pairs = (q * (q - 1)) as f64;
        for (ix, x) in xs.iter().enumerate() {
            for i in 0..q {
                for y in 0..s {
                    let mut z = x.clone();
                    z[i] = y;
                    a[ix][index_of(&z, s)] += rates[x[i]][y];
                }
                a[ix][ix] -= v[x[i]];
                for j in 0..q {
                    if i == j {
                        continue;
                    }
                    let p = v[x[i]] / v_inf;
                    let mut z = x.clone();
                    z[i] = x[j];
                    b[ix][index_of(&z, s)] += p / pairs;
                    b[ix][ix] += (1.0 - p) / pairs;
                }
            }
        }
        let mu0 = xs.iter().map(|x| x.iter().map(|&c| eta0[c]).product()).collect();
        Self { s, q, a, b, mu0 }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// `E_{t,k}(F)` through the Van Loan block exponential: the `(0, k)`
    /// block of `exp(t M)`, `M` block bidiagonal with `A` on the diagonal
    /// and `B` above it, is the ordered-time integral over the simplex.
    pub fn etk(&self, kernel: &[f64], t: f64, k: usize) -> f64 {
        let d = self.dim();
        let n = (k + 1) * d;
        let mut m = zeros(n);
        for blk in 0..=k {
            for i in 0..d {
                for j in 0..d {
                    m[blk * d + i][blk * d + j] = self.a[i][j];
                    if blk < k {
                        m[blk * d + i][(blk + 1) * d + j] = self.b[i][j];
                    }
                }
            }
        }
        let e = expm_taylor(&scale(&m, t));
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += self.mu0[i] * e[i][k * d + j] * kernel[j];
            }
        }
        let fact: f64 = (1..=k).map(|v| v as f64).product();
        acc * fact / t.powi(k as i32)
    }

    /// `E_{t,1}(F)` by composite Simpson quadrature over the ring time.
    pub fn e1_quadrature(&self, kernel: &[f64], t: f64, intervals: usize) -> f64 {
        let h = t / intervals as f64;
        let mut total = 0.0;
        for m in 0..=intervals {
            let tau = m as f64 * h;
            let w = if m == 0 || m == intervals {
                1.0
            } else if m % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let before = row_times(&self.mu0, &expm_taylor(&scale(&self.a, tau)));
            let after = row_times(&row_times(&before, &self.b), &expm_taylor(&scale(&self.a, t - tau)));
            total += w * dot(&after, kernel);
        }
        total * h / 3.0 / t
    }

    /// `Q^N_{t,q}(F)` from the unconditioned system: rings at total rate
    /// `λ = q(q-1) V_inf / N` act as `λ (B - I)`.
    pub fn q_measure(&self, kernel: &[f64], t: f64, v_inf: f64, n: usize) -> f64 {
        let lambda = (self.q * (self.q - 1)) as f64 * v_inf / n as f64;
        let d = self.dim();
        let mut g = self.a.clone();
        for i in 0..d {
            for j in 0..d {
                g[i][j] += lambda * (self.b[i][j] - if i == j { 1.0 } else { 0.0 });
            }
        }
        dot(&row_times(&self.mu0, &expm_taylor(&scale(&g, t))), kernel)
    }
}

/// Table of `F(x_1, .., x_q) = Π f(x_i)` over `S^q`.
pub fn power_table(f: &[f64], q: usize) -> Vec<f64> {
    tuples(f.len(), q).iter().map(|x| x.iter().map(|&c| f[c]).product()).collect()
}

/// Table of `f(x_1) g(x_2)` over `S^2`.
pub fn product_table(f: &[f64], g: &[f64]) -> Vec<f64> {
    tuples(f.len(), 2).iter().map(|x| f[x[0]] * g[x[1]]).collect()
}

/// `f - η(f)`.
pub fn centered(f: &[f64], eta: &[f64]) -> Vec<f64> {
    let m = dot(f, eta);
    f.iter().map(|v| v - m).collect()
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Three-state chain used across the integration tests.
pub fn three_state() -> (Mat, Vec<f64>, f64, Vec<f64>) {
    (
        vec![vec![-1.0, 0.6, 0.4], vec![0.3, -0.5, 0.2], vec![0.5, 0.5, -1.0]],
        vec![0.2, 1.5, 0.7],
        2.0,
        vec![0.3, 0.3, 0.4],
    )
}

/// Two-state chain for the larger auxiliary spaces.
pub fn two_state() -> (Mat, Vec<f64>, f64, Vec<f64>) {
    (vec![vec![-0.8, 0.8], vec![0.5, -0.5]], vec![0.3, 1.6], 2.0, vec![0.6, 0.4])
}
