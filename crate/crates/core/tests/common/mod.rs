//! Independent oracles shared by the integration tests. None of these call
//! into the library's numerical routines.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `exp(M)` by scaling and squaring with a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.iter().map(|v| v.abs()).sum::<f64>();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = m / 2f64.powi(squarings);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Exact one-step flow of `ẋ = A x + B u` under a held `u`, via the
/// augmented matrix `[[A, B u], [0, 0]]`.
pub fn linear_flow(a: &DMatrix<f64>, b: &DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64> {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    aug.view_mut((0, n), (n, 1)).copy_from(&(b * u * t));
    let e = expm(&aug);
    let mut z = DVector::zeros(n + 1);
    z.rows_mut(0, n).copy_from(x);
    z[n] = 1.0;
    (e * z).rows(0, n).into_owned()
}

/// Solves `M w = r` by Gaussian elimination with partial pivoting on plain
/// vectors.
pub fn gauss_solve(mut m: Vec<Vec<f64>>, mut r: Vec<f64>) -> Vec<f64> {
    let n = r.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        r.swap(col, piv);
        assert!(m[col][col].abs() > 1e-300, "singular oracle system");
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f == 0.0 {
                continue;
            }
            let (top, bottom) = m.split_at_mut(row);
            for (a, b) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *a -= f * b;
            }
            r[row] -= f * r[col];
        }
    }
    let mut w = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * w[k]).sum();
        w[i] = (r[i] - s) / m[i][i];
    }
    w
}

/// Ridge solution from explicitly assembled normal equations. Each row
/// is `(φ(x), u, y)`; the design row is `[φ, u₁φ, …, u_mφ]`.
pub fn ridge_oracle(rows: &[(Vec<f64>, Vec<f64>, f64)], lambda: f64) -> Vec<f64> {
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|(phi, u, _)| {
            let mut z = phi.clone();
            for ui in u {
                z.extend(phi.iter().map(|p| p * ui));
            }
            z
        })
        .collect();
    let p = design[0].len();
    let mut gram = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for (z, (_, _, y)) in design.iter().zip(rows) {
        for i in 0..p {
            rhs[i] += z[i] * y;
            for j in 0..p {
                gram[i][j] += z[i] * z[j];
            }
        }
    }
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += lambda;
    }
    gauss_solve(gram, rhs)
}

/// `min ‖u − u_des‖²  s.t.  a·u ≥ b` by active-set enumeration: the
/// unconstrained minimizer if feasible, else the KKT point of the active
/// constraint (solved as a dense linear system). `None` when infeasible.
pub fn qp_oracle(a: &[f64], b: f64, u_des: &[f64]) -> Option<Vec<f64>> {
    let dot: f64 = a.iter().zip(u_des).map(|(x, y)| x * y).sum();
    if dot >= b {
        return Some(u_des.to_vec());
    }
    if a.iter().all(|v| *v == 0.0) {
        return None;
    }
    // [2I  −a] [u]   [2 u_des]
    // [aᵀ   0] [μ] = [b      ]
    let m = a.len();
    let mut kkt = vec![vec![0.0; m + 1]; m + 1];
    let mut rhs = vec![0.0; m + 1];
    for i in 0..m {
        kkt[i][i] = 2.0;
        kkt[i][m] = -a[i];
        kkt[m][i] = a[i];
        rhs[i] = 2.0 * u_des[i];
    }
    rhs[m] = b;
    let sol = gauss_solve(kkt, rhs);
    assert!(sol[m] >= -1e-12, "negative multiplier on an active constraint");
    Some(sol[..m].to_vec())
}

/// Uniform sample on the Euclidean ball of radius `r` in `Rⁿ`.
pub fn sample_ball(rng: &mut ChaCha8Rng, n: usize, r: f64) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..1.0)));
        if v.norm() <= 1.0 {
            return v * r;
        }
    }
}

/// Brute-force `min_{‖d‖ ≤ r} F(d)` from `samples` uniform draws plus
/// `d = 0`, then a local polish of the best draw: backtracking
/// descent over directions (numerical gradient) and a dense scan plus
/// golden section on the radius.
pub fn ball_minimum(
    f: &dyn Fn(&DVector<f64>) -> f64,
    n: usize,
    r: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut best_d = DVector::zeros(n);
    let mut best = f(&best_d);
    for _ in 0..samples {
        let d = sample_ball(rng, n, r);
        let v = f(&d);
        if v < best {
            best = v;
            best_d = d;
        }
    }
    if best_d.norm() == 0.0 {
        best_d = sample_ball(rng, n, r);
    }

    let mut dir = best_d.normalize();
    let probe = r.max(1e-3);
    let at = |v: &DVector<f64>| f(&(v * probe));
    let mut step = 1.0;
    let mut current = at(&dir);
    for _ in 0..5000 {
        let mut g = DVector::zeros(n);
        for i in 0..n {
            let e = 1e-7;
            let (mut p, mut m) = (&dir * probe, &dir * probe);
            p[i] += e;
            m[i] -= e;
            g[i] = (f(&p) - f(&m)) / (2.0 * e);
        }
        let tangent = &g - &dir * dir.dot(&g);
        if tangent.norm() < 1e-13 || step < 1e-16 {
            break;
        }
        let candidate = (&dir - tangent.normalize() * step).normalize();
        let v = at(&candidate);
        if v < current {
            dir = candidate;
            current = v;
            step *= 1.5;
        } else {
            step *= 0.5;
        }
    }

    let along = |rho: f64| f(&(&dir * rho));
    let scan: usize = 10_000;
    let mut best_i = 0;
    let mut best_r = along(0.0);
    for i in 1..=scan {
        let v = along(r * i as f64 / scan as f64);
        if v < best_r {
            best_r = v;
            best_i = i;
        }
    }
    let (mut lo, mut hi) = (
        r * best_i.saturating_sub(1) as f64 / scan as f64,
        r * (best_i + 1).min(scan) as f64 / scan as f64,
    );
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let (c, d) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
        if along(c) < along(d) {
            hi = d;
        } else {
            lo = c;
        }
    }
    best.min(best_r).min(along(0.5 * (lo + hi)))
}

pub fn dv(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.random_range(lo..hi)))
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_iterator(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)))
}

pub mod toy {
    //! Planar system with the nontrivial projection `Π(x) = ‖x‖²`,
    //! `h(x) = 1 − ‖x‖²`, `h_Π(y) = 1 − y`. Nominal model `ẋ = u`; the
    //! true system adds the outward drift `ε x`.

    use nalgebra::{DMatrix, DVector};
    use pssf_core::barrier::{FilteredController, FnBarrier};
    use pssf_core::dynamics::{simulate, FnSystem, Trajectory};
    use pssf_core::kfun::ComparisonFunction;
    use pssf_core::pssf::{projected_dynamics, FnProjection};

    pub struct Toy {
        pub true_sys: FnSystem,
        pub nominal: FnSystem,
        pub barrier: FnBarrier,
        pub projection: FnProjection,
        pub k: f64,
    }

    pub fn build(k: f64, eps: f64) -> Toy {
        Toy {
            true_sys: FnSystem::new(2, 2, move |x| x * eps, |_| DMatrix::identity(2, 2)),
            nominal: FnSystem::new(2, 2, |_| DVector::zeros(2), |_| DMatrix::identity(2, 2)),
            barrier: FnBarrier::new(
                |x| 1.0 - x.norm_squared(),
                |x| x * -2.0,
                ComparisonFunction::linear(k).unwrap(),
            )
            .unwrap(),
            projection: FnProjection::new(
                1,
                |x| DVector::from_element(1, x.norm_squared()),
                |x| DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]]),
            ),
            k,
        }
    }

    pub fn h_proj(y: &DVector<f64>) -> f64 {
        1.0 - y[0]
    }

    /// Outward push with a slow rotation, filtered on the nominal model.
    pub fn rollout(toy: &Toy, x0: &DVector<f64>, duration: f64, dt: f64) -> Trajectory {
        let desired = |_t: f64, x: &DVector<f64>| DVector::from_column_slice(&[2.0 * x[0] - 0.3 * x[1], 2.0 * x[1] + 0.3 * x[0]]);
        let mut ctrl = FilteredController::new(&toy.barrier, &toy.nominal, None, Box::new(desired));
        simulate(&toy.true_sys, &mut ctrl, x0, duration, dt, None).unwrap()
    }

    /// Sup over the samples of the projected disturbance, measured in the
    /// coordinate of `h_Π`: `D h_Π · (ẏ_true − ẏ_nominal)`.
    pub fn projected_delta_bar(toy: &Toy, traj: &Trajectory) -> f64 {
        let zero = DVector::zeros(2);
        traj.states
            .iter()
            .zip(&traj.inputs)
            .map(|(x, u)| {
                let dy = projected_dynamics(&toy.projection, &toy.true_sys, x, u, &zero)
                    - projected_dynamics(&toy.projection, &toy.nominal, x, u, &zero);
                (-dy[0]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Initial conditions on a `side × side` grid over `[−1, 1]²` that lie
    /// in the safe set.
    pub fn grid(side: usize) -> Vec<DVector<f64>> {
        let step = 2.0 / (side - 1) as f64;
        let mut out = Vec::new();
        for i in 0..side {
            for j in 0..side {
                let x = DVector::from_column_slice(&[-1.0 + step * i as f64, -1.0 + step * j as f64]);
                if x.norm_squared() <= 1.0 {
                    out.push(x);
                }
            }
        }
        out
    }
}

pub mod affine {
    use super::{random_mat, random_vec};
    use nalgebra::DVector;
    use pssf_core::barrier::FnBarrier;
    use pssf_core::dynamics::FnSystem;
    use pssf_core::kfun::ComparisonFunction;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Affine barrier `h = c·x + e` on a system with constant `f` and `G`, so
    /// the filter constraint `a·u ≥ b` is known in closed form.
    pub struct AffineInstance {
        pub sys: FnSystem,
        pub bar: FnBarrier,
        pub a: Vec<f64>,
        pub b: f64,
        pub x: DVector<f64>,
    }

    pub fn affine_instance(rng: &mut ChaCha8Rng, m: usize) -> AffineInstance {
        let n = 4;
        let f = random_vec(rng, n, -2.0, 2.0);
        let g = random_mat(rng, n, m, -2.0, 2.0);
        let c = random_vec(rng, n, -1.0, 1.0);
        let e = rng.random_range(-1.0..1.0);
        let k = rng.random_range(0.1..5.0);
        let x = random_vec(rng, n, -1.0, 1.0);
        let h = c.dot(&x) + e;
        let a: Vec<f64> = (g.transpose() * &c).iter().copied().collect();
        let b = -k * h - c.dot(&f);
        let (fc, gc, cc, cg) = (f.clone(), g.clone(), c.clone(), c.clone());
        AffineInstance {
            sys: FnSystem::new(n, m, move |_| fc.clone(), move |_| gc.clone()),
            bar: FnBarrier::new(move |x| cc.dot(x) + e, move |_| cg.clone(), ComparisonFunction::linear(k).unwrap())
                .unwrap(),
            a,
            b,
            x,
        }
    }
}
