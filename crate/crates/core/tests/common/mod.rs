//! Closed-form references shared by the integration tests.
#![allow(dead_code)]

use mdf_core::autodiff::Tape;
use mdf_core::filters::{denkf_update, dekf_step, LinearModels};
use mdf_core::{RngStream, Tensor};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

pub type V2 = [f64; 2];
pub type M2 = [[f64; 2]; 2];

pub fn mv(a: &M2, x: &V2) -> V2 {
    [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]
}

pub fn mm(a: &M2, b: &M2) -> M2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

pub fn tr(a: &M2) -> M2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

pub fn add(a: &M2, b: &M2) -> M2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

pub fn inv(a: &M2) -> M2 {
    let d = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    [[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]]
}

/// One predict + update of the textbook Kalman filter with `x' = F x + B u`,
/// `y = H x + v`.
#[allow(clippy::too_many_arguments)]
pub fn kf_step(x: &V2, p: &M2, f: &M2, b: &V2, u: f64, q: &M2, h: &M2, r: &M2, y: &V2) -> (V2, M2) {
    let fx = mv(f, x);
    let xp = [fx[0] + b[0] * u, fx[1] + b[1] * u];
    let pp = add(&mm(&mm(f, p), &tr(f)), q);
    let s = add(&mm(&mm(h, &pp), &tr(h)), r);
    let k = mm(&mm(&pp, &tr(h)), &inv(&s));
    let hx = mv(h, &xp);
    let innov = [y[0] - hx[0], y[1] - hx[1]];
    let dx = mv(&k, &innov);
    let ikh = add(&[[1.0, 0.0], [0.0, 1.0]], &mm(&k, h).map(|r| r.map(|v| -v)));
    (
        [xp[0] + dx[0], xp[1] + dx[1]],
        // Joseph form keeps the reference symmetric
        add(&mm(&mm(&ikh, &pp), &tr(&ikh)), &mm(&mm(&k, r), &tr(&k))),
    )
}

fn gauss(rng: &mut impl rand::Rng, cov: &M2) -> V2 {
    // Cholesky of a 2x2 SPD matrix
    let l00 = cov[0][0].sqrt();
    let l10 = cov[1][0] / l00;
    let l11 = (cov[1][1] - l10 * l10).sqrt();
    let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
    [l00 * a, l10 * a + l11 * b]
}

pub const F: M2 = [[0.98, 0.1], [-0.1, 0.95]];
pub const Q: M2 = [[0.01, 0.002], [0.002, 0.02]];
pub const R: M2 = [[0.05, 0.0], [0.0, 0.1]];
pub const P0: M2 = [[0.5, 0.0], [0.0, 0.5]];
pub const M0: V2 = [1.0, -0.5];

#[derive(Debug, Clone, Copy)]
pub struct EnkfComparison {
    /// `|rmse(EnKF mean) / rmse(KF mean) − 1|`, errors against the true state.
    pub rmse_rel: f64,
    /// Mean over steps and seeds of `‖P_EnKF − P_KF‖_F / ‖P_KF‖_F`.
    pub cov_rel: f64,
    /// RMS of `‖m_EnKF − m_KF‖` over RMS posterior standard deviation.
    pub mean_gap: f64,
}

/// Stochastic EnKF with an identity observation map and perturbed
/// observations, run through the crate's ensemble update, against the exact
/// Kalman filter on the same simulated data.
pub fn denkf_against_kf(e: usize, steps: usize, seeds: u64) -> EnkfComparison {
    let eye = [[1.0, 0.0], [0.0, 1.0]];
    let (mut se_enkf, mut se_kf, mut gap, mut post_var, mut cov_rel, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for seed in 0..seeds {
        let mut world = RngStream(seed).named("world").rng();
        let mut noise = RngStream(seed).named("ensemble").child(e as u64).rng();
        let d0 = gauss(&mut world, &P0);
        let mut truth = [M0[0] + d0[0], M0[1] + d0[1]];
        let (mut m, mut p) = (M0, P0);
        let mut ens: Vec<V2> = (0..e)
            .map(|_| {
                let d = gauss(&mut noise, &P0);
                [M0[0] + d[0], M0[1] + d[1]]
            })
            .collect();
        for _ in 0..steps {
            let w = gauss(&mut world, &Q);
            let fx = mv(&F, &truth);
            truth = [fx[0] + w[0], fx[1] + w[1]];
            let v = gauss(&mut world, &R);
            let y = [truth[0] + v[0], truth[1] + v[1]];
            (m, p) = kf_step(&m, &p, &F, &[0.0, 0.0], 0.0, &Q, &eye, &R, &y);

            for x in ens.iter_mut() {
                let w = gauss(&mut noise, &Q);
                let fx = mv(&F, x);
                *x = [fx[0] + w[0], fx[1] + w[1]];
            }
            let mut prior = Tensor::zeros(2, e);
            let mut obs = Tensor::zeros(2, e);
            for (j, x) in ens.iter().enumerate() {
                let v = gauss(&mut noise, &R);
                for i in 0..2 {
                    prior.data_mut()[i * e + j] = x[i];
                    obs.data_mut()[i * e + j] = y[i] + v[i];
                }
            }
            let mut tape = Tape::new();
            let xv = tape.input(prior).unwrap();
            let yv = tape.input(obs).unwrap();
            let rv = tape.input(Tensor::column(vec![R[0][0], R[1][1]])).unwrap();
            let post = denkf_update(&mut tape, xv, xv, yv, rv).unwrap();
            let post = tape.value(post);
            for (j, x) in ens.iter_mut().enumerate() {
                *x = [post.data()[j], post.data()[e + j]];
            }

            let mean = [ens.iter().map(|x| x[0]).sum::<f64>() / e as f64, ens.iter().map(|x| x[1]).sum::<f64>() / e as f64];
            let mut cov = [[0.0; 2]; 2];
            for x in &ens {
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]) / (e as f64 - 1.0);
                    }
                }
            }
            let sq = |a: V2, b: V2| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            se_enkf += sq(mean, truth);
            se_kf += sq(m, truth);
            gap += sq(mean, m);
            post_var += p[0][0] + p[1][1];
            let fro = |a: &M2| a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            let diff = [[cov[0][0] - p[0][0], cov[0][1] - p[0][1]], [cov[1][0] - p[1][0], cov[1][1] - p[1][1]]];
            cov_rel += fro(&diff) / fro(&p);
            n += 1;
        }
    }
    EnkfComparison {
        rmse_rel: ((se_enkf / se_kf).sqrt() - 1.0).abs(),
        cov_rel: cov_rel / n as f64,
        mean_gap: (gap / post_var).sqrt(),
    }
}

/// Largest absolute deviation between `dekf_step` with linear models and the
/// closed-form filter over `steps` steps.
pub fn dekf_against_kf(steps: usize, seed: u64) -> f64 {
    let b = [0.05, -0.02];
    let h = [[1.0, 0.2], [0.0, 0.8]];
    let lm = LinearModels {
        f: DMatrix::from_row_slice(2, 2, &[F[0][0], F[0][1], F[1][0], F[1][1]]),
        b: DMatrix::from_row_slice(2, 1, &b),
        q: DMatrix::from_row_slice(2, 2, &[Q[0][0], Q[0][1], Q[1][0], Q[1][1]]),
        h: DMatrix::from_row_slice(2, 2, &[h[0][0], h[0][1], h[1][0], h[1][1]]),
    };
    let rm = DMatrix::from_row_slice(2, 2, &[R[0][0], R[0][1], R[1][0], R[1][1]]);
    let mut rng = RngStream(seed).rng();
    let (mut m, mut p) = (M0, P0);
    let mut x = DVector::from_column_slice(&M0);
    let mut s = DMatrix::from_row_slice(2, 2, &[P0[0][0], P0[0][1], P0[1][0], P0[1][1]]);
    let mut worst = 0.0f64;
    for t in 0..steps {
        let u = (t as f64 * 0.3).sin();
        let y = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
        (m, p) = kf_step(&m, &p, &F, &b, u, &Q, &h, &R, &y);
        (x, s) = dekf_step(&x, &s, &[u], &DVector::from_column_slice(&y), &rm, &lm, t).unwrap();
        for i in 0..2 {
            worst = worst.max((x[i] - m[i]).abs());
            for j in 0..2 {
                worst = worst.max((s[(i, j)] - p[i][j]).abs());
            }
        }
    }
    worst
}
