use mdf_wasm_demo::*;

#[test]
fn gain_rows_are_convex_and_masked_sources_get_nothing() {
    let w = gain_weights(6, 8, 3, &[0.2, -0.1, 0.5], &[0.1, 0.2, 0.3], &[true, false, true], false).unwrap();
    assert_eq!(w.len(), 6 * NUM_SOURCES + 12);
    for j in 0..6 {
        let row = &w[j * NUM_SOURCES..(j + 1) * NUM_SOURCES];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
    }
}

#[test]
fn nothing_enabled_returns_the_prior() {
    let w = gain_weights(4, 4, 1, &[1.0; 3], &[0.1; 3], &[false; 3], false).unwrap();
    let (prior, post) = w[4 * NUM_SOURCES..].split_at(4);
    assert_eq!(prior, post);
    assert!(gain_weights(4, 4, 1, &[1.0; 2], &[0.1; 3], &[true; 3], false).is_err());
}

#[test]
fn literal_mode_runs() {
    let w = gain_weights(3, 4, 2, &[0.0; 3], &[0.1; 3], &[true; 3], true).unwrap();
    for j in 0..3 {
        assert!((w[j * NUM_SOURCES..(j + 1) * NUM_SOURCES].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fusion_of_two_gaussians() {
    // precisions 1 and 3: mean (0·1 + 4·3) / 4 = 3, variance 1/4
    let f = fuse_gaussians(&[0.0, 4.0], &[1.0, 1.0 / 3.0], &[1.0, 1.0]).unwrap();
    assert!((f[0] - 3.0).abs() < 1e-12);
    assert!((f[1] - 0.25).abs() < 1e-12);
    assert!(f[2].is_finite() && f[3] > 0.0);
    assert!(fuse_gaussians(&[0.0], &[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn arm_images_have_rgba_layout() {
    let px = arm_pixels(&[0.3, -0.2, 0.5], 16, false).unwrap();
    assert_eq!(px.len(), 16 * 16 * 4);
    assert!(px.chunks(4).all(|p| p[3] == 255));
    assert!(px.chunks(4).any(|p| p[0] > 0 || p[1] > 0 || p[2] > 0));
    assert_eq!(arm_pixels(&[0.0; 3], 16, true).unwrap().len(), 1024);
    assert!(arm_pixels(&[0.0; 2], 16, false).is_err());
}

#[test]
fn straight_arm_reaches_full_length() {
    let g = arm_geometry(&[0.0, 0.0, 0.0]).unwrap();
    assert!(g[0].abs() < 1e-12);
    assert!((g[1] - 1.0).abs() < 1e-12);
    assert_eq!(g.len(), 2 + 8);
    assert!((g[8] - g[0]).abs() < 1e-12 && (g[9] - g[1]).abs() < 1e-12);
}
