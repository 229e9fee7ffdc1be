use super::*;
use crate::autodiff::{grad_check, ParameterStore, Tape, Var};
use crate::blocks::{AmdfModel, GainMode, ModelConfig, QUERY};
use crate::error::Error;
use crate::rng::RngStream;
use crate::sim::render::Modality;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_tensor(rows: usize, cols: usize, stream: RngStream) -> Tensor {
    let mut rng = stream.rng();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn query_store(d: usize, e: usize, seed: u64) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert(QUERY, random_tensor(d, e, RngStream(seed))).unwrap();
    s
}

struct GainRun {
    post: Tensor,
    weights: Tensor,
}

fn run_gain(store: &ParameterStore, x: &Tensor, obs: &[Option<Tensor>; 3], mask: &AttentionGainMask, mode: GainMode) -> GainRun {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone()).unwrap();
    let mut ov = [None; 3];
    for (i, o) in obs.iter().enumerate() {
        if let Some(t) = o {
            ov[i] = Some(tape.input(t.clone()).unwrap());
        }
    }
    let g = attention_gain_update(&mut tape, store, xv, &ov, mask, mode).unwrap();
    GainRun {
        post: tape.value(g.post).clone(),
        weights: tape.value(g.weights).clone(),
    }
}

/// Scalar re-evaluation of the masked attention: full score matrix over all
/// `(M+1)·d` key rows, additive exclusion outside the enabled diagonals (or
/// multiplicative zeroing in the literal reading), row softmax, then
/// weights times values.
fn brute_force(q: &Tensor, x: &Tensor, obs: &[Option<Tensor>; 3], mask: &AttentionGainMask, literal: bool) -> Tensor {
    let (d, e) = (x.rows(), x.cols());
    let zeros = Tensor::zeros(d, e);
    let mut vals: Vec<&Tensor> = vec![x];
    for o in obs {
        vals.push(o.as_ref().unwrap_or(&zeros));
    }
    let n = SOURCES * d;
    let pe = |pos: usize, k: usize| {
        let i = k / 2;
        let a = pos as f64 / 10000f64.powf((2 * i) as f64 / e as f64);
        if k.is_multiple_of(2) {
            a.sin()
        } else {
            a.cos()
        }
    };
    let key = |c: usize, k: usize| {
        let v = vals[c / d];
        let r = c % d;
        let mean: f64 = (0..e).map(|kk| v.get(r, kk)).sum::<f64>() / e as f64;
        v.get(r, k) - mean + pe(c, k)
    };
    let allowed = |j: usize, c: usize| c % d == j && (c / d == 0 || mask.enabled[c / d - 1]);
    let mut out = Tensor::zeros(d, e);
    for j in 0..d {
        let mut logits = vec![0.0; n];
        for (c, l) in logits.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..e {
                s += (q.get(j, k) + pe(j, k)) * key(c, k);
            }
            s /= (e as f64).sqrt();
            *l = if literal {
                if allowed(j, c) {
                    s
                } else {
                    0.0
                }
            } else if allowed(j, c) {
                s
            } else {
                s + MASK_LOGIT
            };
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for k in 0..e {
            let mut acc = 0.0;
            for (c, l) in logits.iter().enumerate() {
                acc += (l - m).exp() / z * vals[c / d].get(c % d, k);
            }
            out.set(j, k, acc);
        }
    }
    out
}

#[test]
fn hand_sized_gain_matches_scalar_oracle() {
    let (d, e) = (2, 2);
    let store = query_store(d, e, 1);
    let x = Tensor::from_rows(&[&[0.3, -0.4], &[1.2, 0.8]]);
    let y = Tensor::from_rows(&[&[0.9, 0.1], &[-0.5, 0.2]]);
    let obs = [Some(y), None, None];
    let mask = AttentionGainMask::only(&[Modality::Rgb]);
    let got = run_gain(&store, &x, &obs, &mask, GainMode::Exclusion);
    let want = brute_force(store.value(QUERY).unwrap(), &x, &obs, &mask, false);
    assert!(got.post.max_abs_diff(&want) < 1e-12, "{:?} vs {:?}", got.post, want);
    let got = run_gain(&store, &x, &obs, &mask, GainMode::Hadamard);
    let want = brute_force(store.value(QUERY).unwrap(), &x, &obs, &mask, true);
    assert!(got.post.max_abs_diff(&want) < 1e-12);
}

#[test]
fn diagonal_form_matches_full_matrix_form() {
    for seed in 0..5 {
        let (d, e) = (5, 4);
        let store = query_store(d, e, seed);
        let x = random_tensor(d, e, RngStream(100 + seed));
        let obs = [
            Some(random_tensor(d, e, RngStream(200 + seed))),
            Some(random_tensor(d, e, RngStream(300 + seed))),
            Some(random_tensor(d, e, RngStream(400 + seed))),
        ];
        for mask in [AttentionGainMask::all(), AttentionGainMask::only(&[Modality::Depth])] {
            let got = run_gain(&store, &x, &obs, &mask, GainMode::Exclusion);
            let want = brute_force(store.value(QUERY).unwrap(), &x, &obs, &mask, false);
            assert!(got.post.max_abs_diff(&want) < 1e-12);
        }
    }
}

#[test]
fn gain_identities_hold_bitwise() {
    let (d, e) = (6, 4);
    let store = query_store(d, e, 7);
    let x = random_tensor(d, e, RngStream(8));
    // (a) every latent equals the prediction
    let same = [Some(x.clone()), Some(x.clone()), Some(x.clone())];
    let r = run_gain(&store, &x, &same, &AttentionGainMask::all(), GainMode::Exclusion);
    assert_eq!(r.post, x);
    // (b) all modalities masked
    let other = [
        Some(random_tensor(d, e, RngStream(9))),
        Some(random_tensor(d, e, RngStream(10))),
        Some(random_tensor(d, e, RngStream(11))),
    ];
    let r = run_gain(&store, &x, &other, &AttentionGainMask::none(), GainMode::Exclusion);
    assert_eq!(r.post, x);
    assert!(r.weights.column_vec(0).iter().all(|&w| w == 1.0));
    // (c) masked weights exactly zero
    let mask = AttentionGainMask::only(&[Modality::Rgb, Modality::Proprio]);
    let r = run_gain(&store, &x, &other, &mask, GainMode::Exclusion);
    assert!(r.weights.column_vec(2).iter().all(|&w| w == 0.0));
    // (d) masked modality values do not matter
    let mut swapped = other.clone();
    swapped[1] = Some(random_tensor(d, e, RngStream(12)).map(|v| v * 1e3));
    let r2 = run_gain(&store, &x, &swapped, &mask, GainMode::Exclusion);
    assert_eq!(r.post, r2.post);
    let mut absent = other.clone();
    absent[1] = None;
    let r3 = run_gain(&store, &x, &absent, &mask, GainMode::Exclusion);
    assert_eq!(r.post, r3.post);
}

#[test]
fn enabled_modality_without_latent_is_an_error() {
    let store = query_store(2, 2, 1);
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(2, 2)).unwrap();
    let r = attention_gain_update(&mut tape, &store, x, &[None, None, None], &AttentionGainMask::all(), GainMode::Exclusion);
    assert!(matches!(r, Err(Error::ModalityUnavailable("rgb"))));
}

#[test]
fn mask_matrix_keeps_only_enabled_diagonals() {
    let m = AttentionGainMask::only(&[Modality::Depth]).matrix(3);
    assert_eq!(m.len(), 3);
    for (j, row) in m.iter().enumerate() {
        for (c, &b) in row.iter().enumerate() {
            assert_eq!(b, c % 3 == j && (c / 3 == 0 || c / 3 == 2));
        }
    }
    assert_eq!(AttentionGainMask::all().label(), "rgb+depth+proprio");
    assert_eq!(AttentionGainMask::none().label(), "none");
}

#[test]
fn masked_cross_attention_grad_check() {
    let (d, e) = (3, 4);
    let mut store = query_store(d, e, 2);
    store.insert("x", random_tensor(d, e, RngStream(3))).unwrap();
    store.insert("y0", random_tensor(d, e, RngStream(4))).unwrap();
    store.insert("y2", random_tensor(d, e, RngStream(5))).unwrap();
    let r = random_tensor(d, e, RngStream(6));
    for mode in [GainMode::Exclusion, GainMode::Hadamard] {
        let err = grad_check(
            |t, st| {
                let x = t.param(st, "x")?;
                let y0 = t.param(st, "y0")?;
                let y2 = t.param(st, "y2")?;
                let mask = AttentionGainMask::only(&[Modality::Rgb, Modality::Proprio]);
                let g = attention_gain_update(t, st, x, &[Some(y0), None, Some(y2)], &mask, mode)?;
                let rv = t.constant(r.clone())?;
                let p = t.mul(g.post, rv)?;
                t.mean(p)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{mode:?}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn gain_weights_are_masked_convex(seed in 0u64..10_000, bits in 0u8..8, d in 1usize..6, half_e in 1usize..4) {
        let e = 2 * half_e;
        let store = query_store(d, e, seed);
        let x = random_tensor(d, e, RngStream(seed + 1));
        let obs = [
            Some(random_tensor(d, e, RngStream(seed + 2)).map(|v| 3.0 * v)),
            Some(random_tensor(d, e, RngStream(seed + 3))),
            Some(random_tensor(d, e, RngStream(seed + 4))),
        ];
        let mask = AttentionGainMask { enabled: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0] };
        let r = run_gain(&store, &x, &obs, &mask, GainMode::Exclusion);
        for j in 0..d {
            let row = r.weights.row_slice(j);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for s in 1..SOURCES {
                if !mask.source(s) {
                    prop_assert_eq!(row[s], 0.0);
                }
            }
        }
        let mass = source_mass(&r.weights, d);
        prop_assert!((mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // replacing every disabled latent leaves the output unchanged
        let mut junk = obs.clone();
        for m in Modality::ALL {
            if !mask.is_enabled(m) {
                junk[m.index()] = Some(random_tensor(d, e, RngStream(seed + 99)));
            }
        }
        prop_assert_eq!(run_gain(&store, &x, &junk, &mask, GainMode::Exclusion).post, r.post);
    }
}

fn tiny_model() -> AmdfModel {
    AmdfModel::new(ModelConfig::tiny(4, 4)).unwrap()
}

fn tiny_bundle(seed: u64) -> crate::sim::render::ModalityBundle {
    let mut rgb = random_tensor(3, 64, RngStream(seed));
    rgb = rgb.map(f64::abs);
    crate::sim::render::ModalityBundle {
        rgb,
        depth: random_tensor(1, 64, RngStream(seed + 1)).map(f64::abs),
        proprio: random_tensor(30, 1, RngStream(seed + 2)),
        available: [true; 3],
    }
}

#[test]
fn step_with_everything_masked_is_pure_prediction() {
    let model = tiny_model();
    let store = model.init(1).unwrap();
    let mut tape = Tape::new();
    let h = tape.input(random_tensor(4, 4, RngStream(2))).unwrap();
    let action = random_tensor(40, 1, RngStream(3));
    let tr = amdf_step(&model, &mut tape, &store, &[h], &action, &tiny_bundle(4), &AttentionGainMask::none(), RngStream(5)).unwrap();
    assert_eq!(tape.value(tr.post), tape.value(tr.prior));
    assert!(tr.obs.iter().all(Option::is_none));
}

#[test]
fn step_rejects_enabled_but_unavailable_modality() {
    let model = tiny_model();
    let store = model.init(1).unwrap();
    let mut tape = Tape::new();
    let h = tape.input(random_tensor(4, 4, RngStream(2))).unwrap();
    let bundle = tiny_bundle(4).with_available([true, false, true]);
    let r = amdf_step(&model, &mut tape, &store, &[h], &Tensor::zeros(40, 1), &bundle, &AttentionGainMask::all(), RngStream(5));
    assert!(matches!(r, Err(Error::ModalityUnavailable("depth"))));
}

#[test]
fn filter_diagnostics_are_normalized() {
    let model = tiny_model();
    let store = model.init(1).unwrap();
    let mask = AttentionGainMask::all();
    let (mut f, d0) = AmdfFilter::initialize(&model, &store, &tiny_bundle(1), &mask, RngStream(2)).unwrap();
    assert!((d0.mass.values().sum::<f64>() - 1.0).abs() < 1e-12);
    for t in 1..6 {
        let m = if t == 3 { AttentionGainMask::only(&[Modality::Proprio]) } else { mask };
        let d = f.step(&[0.5; 40], &tiny_bundle(10 + t), &m).unwrap();
        assert_eq!(d.t, t as usize);
        assert!((d.mass.values().sum::<f64>() - 1.0).abs() < 1e-12);
        if t == 3 {
            assert_eq!(d.mass["rgb"], 0.0);
            assert_eq!(d.mass["depth"], 0.0);
            assert_eq!(d.innovation.len(), 1);
        }
        let qn: f64 = d.state[3..].iter().map(|v| v * v).sum();
        assert!((qn - 1.0).abs() < 1e-9);
        let line = serde_json::to_string(&d).unwrap();
        assert!(line.contains("\"prediction\""));
    }
    assert_eq!(f.history().len(), 2);
}

#[test]
fn ensemble_mean_examples() {
    let same = Tensor::from_rows(&[&[1.5, 1.5, 1.5], &[-2.0, -2.0, -2.0]]);
    assert_eq!(ensemble_mean(&same), vec![1.5, -2.0]);
    let two = Tensor::from_rows(&[&[1.0, 3.0], &[0.5, -0.5]]);
    assert_eq!(ensemble_mean(&two), vec![2.0, 0.0]);
    let mut rng = RngStream(4).rng();
    let n = 1000;
    let normals = Tensor::from_vec(3, n, (0..3 * n).map(|_| StandardNormal.sample(&mut rng)).collect());
    for m in ensemble_mean(&normals) {
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
    }
    assert!(LatentEnsemble::new(Tensor::zeros(2, 1), 0).is_err());
}

#[test]
fn history_is_a_bounded_window() {
    let mut h = FilterHistory::new(3);
    for t in 0..5 {
        h.push(LatentEnsemble::new(Tensor::filled(1, 2, t as f64), t).unwrap());
    }
    let ts: Vec<usize> = h.iter().map(|x| x.t).collect();
    assert_eq!(ts, vec![2, 3, 4]);
}

fn denkf_tiny() -> (DenkfModel, ParameterStore) {
    let cfg = DenkfConfig {
        obs_dim: 3,
        ensemble: 4,
        transition_hidden: vec![6],
        obs_hidden: vec![5],
        noise_hidden: vec![4],
        image_size: 8,
        conv: [2, 2],
        image_hidden: vec![4],
        proprio_hidden: vec![4],
        feature_hidden: vec![4],
        beta_hidden: vec![4],
        ..DenkfConfig::default()
    };
    let m = DenkfModel::new(cfg).unwrap();
    let s = m.init(3).unwrap();
    (m, s)
}

#[test]
fn denkf_zero_innovation_leaves_ensemble_unchanged() {
    let (m, store) = denkf_tiny();
    let mut tape = Tape::new();
    let x = tape.input(random_tensor(7, 4, RngStream(1))).unwrap();
    let hx = m.observe(&mut tape, &store, x).unwrap();
    let y = tape.input(tape.value(hx).clone()).unwrap();
    let r = m.noise_diag(&mut tape, &store, y).unwrap();
    let post = denkf_update(&mut tape, x, hx, y, r).unwrap();
    assert_eq!(tape.value(post), tape.value(x));
}

fn covariance(x: &Tensor) -> Tensor {
    let (n, e) = (x.rows(), x.cols());
    let m = x.row_mean();
    let mut c = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..e).map(|k| (x.get(i, k) - m.data()[i]) * (x.get(j, k) - m.data()[j])).sum();
            c.set(i, j, s / (e - 1) as f64);
        }
    }
    c
}

fn permute_cols(x: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for (c, &p) in perm.iter().enumerate() {
        for r in 0..x.rows() {
            out.set(r, c, x.get(r, p));
        }
    }
    out
}

#[test]
fn denkf_is_member_permutation_invariant() {
    let (m, store) = denkf_tiny();
    let x = random_tensor(7, 4, RngStream(1));
    let y = random_tensor(3, 4, RngStream(2));
    let perm = [2, 0, 3, 1];
    let run = |x: &Tensor, y: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let yv = tape.input(y.clone()).unwrap();
        let p = m.update(&mut tape, &store, xv, yv).unwrap();
        tape.value(p).clone()
    };
    let a = run(&x, &y);
    let b = run(&permute_cols(&x, &perm), &permute_cols(&y, &perm));
    assert!(a.row_mean().max_abs_diff(&b.row_mean()) < 1e-12);
    assert!(covariance(&a).max_abs_diff(&covariance(&b)) < 1e-12);

    // prediction: member-wise map, so permuting members and their streams
    // permutes the output
    let members = crate::blocks::column_streams(RngStream(9), 4);
    let pm: Vec<RngStream> = perm.iter().map(|&p| members[p]).collect();
    let action = random_tensor(40, 1, RngStream(3));
    let pred = |x: &Tensor, s: &[RngStream]| {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let p = m.predict_members(&mut tape, &store, xv, &action, s).unwrap();
        tape.value(p).clone()
    };
    assert_eq!(permute_cols(&pred(&x, &members), &perm), pred(&permute_cols(&x, &perm), &pm));
}

#[test]
fn denkf_zero_transition_keeps_state() {
    let (m, mut store) = denkf_tiny();
    let last = m.transition.widths.len() - 1;
    let w = store.value(&m.transition.weight(last)).unwrap().zeros_like();
    store.set_value(&m.transition.weight(last), w).unwrap();
    let mut tape = Tape::new();
    let x = tape.input(random_tensor(7, 4, RngStream(1))).unwrap();
    let p = m.predict(&mut tape, &store, x, &Tensor::zeros(40, 1), RngStream(2)).unwrap();
    assert_eq!(tape.value(p), tape.value(x));
}

#[test]
fn denkf_paths_pass_grad_check() {
    let (m, store) = denkf_tiny();
    let mut p = store.clone();
    p.insert("x", random_tensor(7, 4, RngStream(1))).unwrap();
    p.insert("y", random_tensor(3, 4, RngStream(2))).unwrap();
    let action = random_tensor(40, 1, RngStream(3));
    let r = random_tensor(7, 4, RngStream(4));
    let build = |t: &mut Tape, st: &ParameterStore, update: bool| -> crate::Result<Var> {
        let x = t.param(st, "x")?;
        let x = m.predict(t, st, x, &action, RngStream(5))?;
        let out = if update {
            let y = t.param(st, "y")?;
            m.update(t, st, x, y)?
        } else {
            x
        };
        let rv = t.constant(r.clone())?;
        let prod = t.mul(out, rv)?;
        t.mean(prod)
    };
    let restricted = |prefixes: &[&str]| {
        let mut s = ParameterStore::new();
        for (name, par) in p.iter() {
            if prefixes.iter().any(|pre| name.starts_with(pre)) {
                s.insert(name, par.value.clone()).unwrap();
            }
        }
        s
    };
    let e = grad_check(|t, st| build(t, st, false), &restricted(&["x", "denkf.f"]), 1e-5).unwrap();
    assert!(e < 1e-4, "predict {e}");
    let e = grad_check(|t, st| build(t, st, true), &restricted(&["x", "y", "denkf.f", "denkf.h", "denkf.r"]), 1e-5).unwrap();
    assert!(e < 1e-4, "update {e}");
}

fn rotation(theta: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
}

/// Textbook Kalman filter with the short-form covariance update.
fn reference_kf(x: &[f64; 2], p: &[[f64; 2]; 2], lm: &LinearModels, y: &[f64; 2], r: &[[f64; 2]; 2], a: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let f = |i: usize, j: usize| lm.f[(i, j)];
    let h = |i: usize, j: usize| lm.h[(i, j)];
    let mut xp = [0.0; 2];
    for i in 0..2 {
        xp[i] = f(i, 0) * x[0] + f(i, 1) * x[1] + lm.b[(i, 0)] * a;
    }
    let mut pp = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut s = lm.q[(i, j)];
            for k in 0..2 {
                for l in 0..2 {
                    s += f(i, k) * p[k][l] * f(j, l);
                }
            }
            pp[i][j] = s;
        }
    }
    let mut s = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = r[i][j];
            for k in 0..2 {
                for l in 0..2 {
                    acc += h(i, k) * pp[k][l] * h(j, l);
                }
            }
            s[i][j] = acc;
        }
    }
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let si = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let mut k = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for l in 0..2 {
                let pht: f64 = (0..2).map(|m| pp[i][m] * h(l, m)).sum();
                acc += pht * si[l][j];
            }
            k[i][j] = acc;
        }
    }
    let mut innov = [0.0; 2];
    for i in 0..2 {
        innov[i] = y[i] - (h(i, 0) * xp[0] + h(i, 1) * xp[1]);
    }
    let mut xn = xp;
    for i in 0..2 {
        xn[i] += k[i][0] * innov[0] + k[i][1] * innov[1];
    }
    let mut ikh = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            ikh[i][j] = if i == j { 1.0 } else { 0.0 } - (k[i][0] * h(0, j) + k[i][1] * h(1, j));
        }
    }
    let mut pn = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            pn[i][j] = (0..2).map(|m| ikh[i][m] * pp[m][j]).sum();
        }
    }
    (xn, pn)
}

#[test]
fn dekf_linear_matches_closed_form_kf() {
    let lm = LinearModels {
        f: rotation(0.1) * 0.98,
        b: DMatrix::from_row_slice(2, 1, &[0.1, -0.05]),
        q: DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.03]),
        h: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.8]),
    };
    let r = [[0.1, 0.02], [0.02, 0.2]];
    let rm = DMatrix::from_row_slice(2, 2, &[r[0][0], r[0][1], r[1][0], r[1][1]]);
    let mut rng = RngStream(5).rng();
    let (mut x, mut p) = (DVector::from_column_slice(&[1.0, -1.0]), DMatrix::identity(2, 2));
    let (mut xr, mut pr) = ([1.0, -1.0], [[1.0, 0.0], [0.0, 1.0]]);
    for step in 0..100 {
        let a: f64 = rng.random_range(0.0..1.0);
        let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let (xn, pn) = dekf_step(&x, &p, &[a], &DVector::from_column_slice(&y), &rm, &lm, step).unwrap();
        (xr, pr) = reference_kf(&xr, &pr, &lm, &y, &r, a);
        (x, p) = (xn, pn);
        for i in 0..2 {
            assert!((x[i] - xr[i]).abs() < 1e-8, "step {step}");
            for j in 0..2 {
                assert!((p[(i, j)] - pr[i][j]).abs() < 1e-8, "step {step}");
                assert!((p[(i, j)] - p[(j, i)]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn dekf_noiseless_trace_never_grows() {
    let lm = LinearModels {
        f: rotation(0.3),
        b: DMatrix::zeros(2, 1),
        q: DMatrix::zeros(2, 2),
        h: DMatrix::identity(2, 2),
    };
    let r = DMatrix::identity(2, 2) * 1e-4;
    let (mut x, mut p) = (DVector::from_column_slice(&[0.5, 0.5]), DMatrix::identity(2, 2));
    let mut last = p.trace();
    for step in 0..100 {
        let truth = DVector::from_column_slice(&[0.5, 0.5]);
        (x, p) = dekf_step(&x, &p, &[0.0], &truth, &r, &lm, step).unwrap();
        assert!(p.trace() <= last + 1e-15, "step {step}");
        last = p.trace();
    }
    assert!(x.iter().all(|v| v.is_finite()));
}

#[test]
fn dekf_reports_step_of_lost_definiteness() {
    let lm = LinearModels {
        f: DMatrix::identity(2, 2),
        b: DMatrix::zeros(2, 1),
        q: DMatrix::zeros(2, 2),
        h: DMatrix::identity(2, 2),
    };
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    let r = dekf_step(&DVector::zeros(2), &bad, &[0.0], &DVector::zeros(2), &DMatrix::identity(2, 2), &lm, 17);
    assert!(matches!(r, Err(Error::NotPositiveDefinite { step: 17 })));
}

#[test]
fn learned_dekf_jacobian_matches_finite_differences() {
    let net = DekfNet::new(DekfConfig::default()).unwrap();
    let store = net.init(4).unwrap();
    let models = net.models(&store);
    let x = DVector::from_column_slice(&[0.1, 0.6, 0.0, 0.0, 0.0, 0.3, 0.9]);
    let a = vec![0.4; 40];
    let (_, jac) = models.transition(&x, &a).unwrap();
    let h = 1e-6;
    for j in 0..7 {
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        let fp = models.transition(&xp, &a).unwrap().0;
        let fm = models.transition(&xm, &a).unwrap().0;
        for i in 0..7 {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            assert!((fd - jac[(i, j)]).abs() < 1e-6);
        }
    }
}
