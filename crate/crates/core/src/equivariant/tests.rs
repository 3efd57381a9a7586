use super::*;
use crate::imaging::{disk_window, gaussian_blob};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn windowed_blob(n: usize, sigma: f64, di: f64, dj: f64) -> Image<f64> {
    let blob = gaussian_blob::<f64>(n, n, sigma, di, dj).unwrap();
    let win = disk_window::<f64>(n, n, 0.9).unwrap();
    Image::new(n, n, blob.data().iter().zip(win.data()).map(|(a, b)| a * b).collect()).unwrap()
}

fn random_windowed(n: usize, seed: u64) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let win = disk_window::<f64>(n, n, 0.9).unwrap();
    Image::new(n, n, win.data().iter().map(|w| w * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn basis_has_two_p_squared_maps() {
    let b = build_basis(5, 5, 0.0).unwrap();
    assert_eq!(b.n_maps(), 50);
    assert_eq!(b.maps.len(), 50 * 25);
    assert!(build_basis(5, 4, 0.0).is_err());
    assert!(build_basis(0, 5, 0.0).is_err());
}

#[test]
fn constant_map_is_the_radial_mask() {
    let b = build_basis(5, 5, 0.0).unwrap();
    let dc = b.cosine(0, 0);
    for a in 0..5 {
        for c in 0..5 {
            let (x, y) = (c as f64 - 2.0, 2.0 - a as f64);
            let m = radial_mask((x * x + y * y).sqrt(), 5);
            assert_eq!(dc[a * 5 + c], m);
            if m == 1.0 {
                assert_eq!(dc[a * 5 + c], 1.0);
            }
        }
    }
    assert!(b.sine(0, 0).iter().all(|&v| v == 0.0));
    // corners lie outside radius h/2
    assert_eq!(dc[0], 0.0);
}

#[test]
fn aliasing_prone_frequencies_vanish() {
    let p = 5;
    let b = build_basis(p, 7, 0.3).unwrap();
    let mut zeroed = 0;
    for m in 0..p {
        for n in 0..p {
            let (fm, fn_) = (frequency(m, p), frequency(n, p));
            let high = (fm * fm + fn_ * fn_) as f64 > 6.25;
            if high {
                zeroed += 1;
                assert!(b.cosine(m, n).iter().chain(b.sine(m, n)).all(|&v| v == 0.0));
            } else {
                assert!(b.cosine(m, n).iter().any(|&v| v != 0.0));
            }
        }
    }
    assert_eq!(zeroed, 4);
}

#[test]
fn quarter_turn_basis_is_a_grid_rotation() {
    let b0 = build_basis(5, 5, 0.0).unwrap();
    let b1 = build_basis(5, 5, FRAC_PI_2).unwrap();
    for i in 0..b0.n_maps() {
        let rotated = rotate_grid_quarter(b0.map(i), 5, 5, 1);
        assert!(max_abs_diff(&rotated, b1.map(i)) <= 1e-12);
    }
    // derived orientations agree with direct sampling
    let g = GroupBasis::new(5, 5, 8).unwrap();
    for k in 0..8 {
        let direct = build_basis(5, 5, 2.0 * PI * k as f64 / 8.0).unwrap();
        assert!(max_abs_diff(&g.orientations[k].maps, &direct.maps) <= 1e-12);
    }
}

#[test]
fn assembled_filters_rotate_with_the_orientation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let basis = GroupBasis::new(5, 5, 8).unwrap();
    let bank = EqFilterBank::<f64>::random(2, 3, 8, 5, false, &mut rng);
    let f0 = assemble_filter(&bank, &basis, 0).unwrap();
    let f2 = assemble_filter(&bank, &basis, 2).unwrap();
    for (a, b) in f0.chunks(25).zip(f2.chunks(25)) {
        assert!(max_abs_diff(&rotate_grid_quarter(a, 5, 5, 1), b) <= 1e-12);
    }
    assert!(assemble_filter(&bank, &basis, 8).is_err());

    let zero = EqFilterBank::<f64>::zeros(2, 3, 8, 5, false);
    assert!(assemble_filter(&zero, &basis, 5).unwrap().iter().all(|&v| v == 0.0));

    let mut dc = EqFilterBank::<f64>::zeros(1, 1, 8, 5, false);
    dc.a[0] = 1.0;
    for k in 0..8 {
        assert_eq!(assemble_filter(&dc, &basis, k).unwrap(), basis.orientations[0].cosine(0, 0).to_vec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn assembly_is_linear(seed in 0u64..500, alpha in -2.0f64..2.0, beta in -2.0f64..2.0, k in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = GroupBasis::new(5, 5, 8).unwrap();
        let c1 = EqFilterBank::<f64>::random(2, 2, 8, 5, true, &mut rng);
        let c2 = EqFilterBank::<f64>::random(2, 2, 8, 5, true, &mut rng);
        let mut mix = c1.clone();
        for i in 0..mix.a.len() {
            mix.a[i] = alpha * c1.a[i] + beta * c2.a[i];
            mix.b[i] = alpha * c1.b[i] + beta * c2.b[i];
        }
        let f1 = assemble_filter(&c1, &basis, k).unwrap();
        let f2 = assemble_filter(&c2, &basis, k).unwrap();
        let fm = assemble_filter(&mix, &basis, k).unwrap();
        for i in 0..fm.len() {
            prop_assert!((fm[i] - (alpha * f1[i] + beta * f2[i])).abs() <= 1e-12);
        }
    }
}

#[test]
fn parameter_sharing_counts() {
    assert_eq!(EqFilterBank::<f64>::zeros(16, 1, 8, 5, false).param_count(), 800);
    assert_eq!(EqFilterBank::<f64>::zeros(3, 2, 8, 5, true).param_count(), 2 * 25 * 3 * 2 * 8);
    // independent of the output orientation count
    assert_eq!(
        EqFilterBank::<f64>::zeros(3, 2, 4, 5, false).param_count(),
        EqFilterBank::<f64>::zeros(3, 2, 8, 5, false).param_count()
    );
}

#[test]
fn lift_conv_basic_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let basis = GroupBasis::new(5, 5, 8).unwrap();
    let bank = EqFilterBank::<f64>::random(2, 1, 8, 5, false, &mut rng);
    let zero = lift_conv(&vec![0.0; 100], 1, 10, 10, &bank, &basis).unwrap();
    assert!(zero.data.iter().all(|&v| v == 0.0));

    let mut iso = EqFilterBank::<f64>::zeros(1, 1, 8, 5, false);
    iso.a[0] = 0.3;
    let x = random_windowed(12, 1);
    let f = lift_conv(x.data(), 1, 12, 12, &iso, &basis).unwrap();
    for k in 1..8 {
        assert_eq!(f.slice(0, k), f.slice(0, 0));
    }

    assert!(lift_conv(x.data(), 2, 12, 12, &bank, &basis).is_err());
    let gbank = EqFilterBank::<f64>::random(1, 1, 8, 5, true, &mut rng);
    assert!(lift_conv(x.data(), 1, 12, 12, &gbank, &basis).is_err());
}

#[test]
fn lift_conv_is_quarter_turn_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [4usize, 8] {
        let basis = GroupBasis::new(5, 5, n).unwrap();
        let bank = EqFilterBank::<f64>::random(2, 1, n, 5, false, &mut rng);
        let x = random_windowed(16, 2);
        let xr = rotate_grid_quarter(x.data(), 16, 16, 1);
        let out = lift_conv(x.data(), 1, 16, 16, &bank, &basis).unwrap();
        let out_r = lift_conv(&xr, 1, 16, 16, &bank, &basis).unwrap();
        let expected = out.rotate_quarter(1).shift_orientations(n / 4);
        assert!(rel(&out_r.data, &expected.data) <= 1e-6);
    }
}

#[test]
fn group_conv_basic_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let basis = GroupBasis::new(5, 5, 8).unwrap();
    let bank = EqFilterBank::<f64>::random(2, 2, 8, 5, true, &mut rng);
    let zero = GroupFeature::new(2, 8, 9, 9, vec![0.0; 2 * 8 * 81]).unwrap();
    assert!(group_conv(&zero, &bank, &basis).unwrap().data.iter().all(|&v| v == 0.0));

    let wrong = GroupFeature::new(2, 4, 9, 9, vec![0.0; 2 * 4 * 81]).unwrap();
    assert!(group_conv(&wrong, &bank, &basis).is_err());
    let lift = EqFilterBank::<f64>::random(2, 2, 8, 5, false, &mut rng);
    assert!(group_conv(&zero, &lift, &basis).is_err());
}

#[test]
fn identity_like_bank_reproduces_its_input() {
    // one-pixel filters: the radial mask is 1 at the origin, so a_00 = 1 sums to one
    let basis = GroupBasis::new(1, 1, 8).unwrap();
    let mask_sum: f64 = basis.orientations[0].cosine(0, 0).iter().sum();
    let mut bank = EqFilterBank::<f64>::zeros(2, 2, 8, 1, true);
    for c in 0..2 {
        bank.a[(c * 2 + c) * 8] = 1.0 / mask_sum;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f64> = (0..2 * 8 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = GroupFeature::new(2, 8, 8, 8, data).unwrap();
    let out = group_conv(&f, &bank, &basis).unwrap();
    assert!(rel(&out.data, &f.data) <= 1e-6);
}

#[test]
fn orientation_shift_commutes_with_isotropic_group_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let basis = GroupBasis::new(5, 5, 8).unwrap();
    let mut bank = EqFilterBank::<f64>::zeros(2, 2, 8, 5, true);
    for f in 0..2 * 2 * 8 {
        bank.a[f * 25] = rng.gen_range(-1.0..1.0);
    }
    let data: Vec<f64> = (0..2 * 8 * 100).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = GroupFeature::new(2, 8, 10, 10, data).unwrap();
    for s in [1, 3, 6] {
        let a = group_conv(&f.shift_orientations(s), &bank, &basis).unwrap();
        let b = group_conv(&f, &bank, &basis).unwrap().shift_orientations(s);
        assert!(max_abs_diff(&a.data, &b.data) <= 1e-12);
    }
}

#[test]
fn group_conv_is_quarter_turn_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let basis = GroupBasis::new(5, 5, 8).unwrap();
    let bank = EqFilterBank::<f64>::random(2, 2, 8, 5, true, &mut rng);
    let win = disk_window::<f64>(14, 14, 0.9).unwrap();
    let data: Vec<f64> = (0..2 * 8).flat_map(|_| win.data().iter().map(|w| w * rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).collect();
    let f = GroupFeature::new(2, 8, 14, 14, data).unwrap();
    for q in 1..4i64 {
        let moved = f.rotate_quarter(q).shift_orientations(2 * q as usize);
        let a = group_conv(&moved, &bank, &basis).unwrap();
        let b = group_conv(&f, &bank, &basis).unwrap().rotate_quarter(q).shift_orientations(2 * q as usize);
        assert!(rel(&a.data, &b.data) <= 1e-10);
    }
}

#[test]
fn project_group_is_the_orientation_mean() {
    let f = GroupFeature::new(1, 4, 2, 2, vec![0.5; 16]).unwrap();
    assert_eq!(project_group(&f), vec![0.5; 4]);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<f64> = (0..3 * 8 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = GroupFeature::new(3, 8, 5, 5, data).unwrap();
    let mean = project_group(&f);
    for c in 0..3 {
        for p in 0..25 {
            let brute = (0..8).map(|k| f.slice(c, k)[p]).sum::<f64>() / 8.0;
            assert!((mean[c * 25 + p] - brute).abs() <= 1e-14);
        }
    }
    assert_eq!(project_group(&f.shift_orientations(3)), mean);
}

#[test]
fn equivariance_error_of_trivial_maps() {
    let x = windowed_blob(24, 4.0, 0.0, 0.0);
    for theta in [0.3, FRAC_PI_4, FRAC_PI_2, 2.0] {
        assert_eq!(equivariance_error(|f: &Image<f64>| Ok(f.clone()), &x, theta).unwrap(), 0.0);
    }
    // constant level on a smooth radial support, so only interpolation remains
    let mean_map = |f: &Image<f64>| {
        let m = f.sum() / (f.height() * f.width()) as f64;
        let n = f.height() as f64;
        let radius = 0.45 * n;
        Image::from_fn(f.height(), f.width(), |i, j| {
            let r = (i as f64 - (n - 1.0) / 2.0).hypot(j as f64 - (n - 1.0) / 2.0);
            if r < radius {
                m * (0.5 * (1.0 + (PI * r / radius).cos())).powi(2)
            } else {
                0.0
            }
        })
    };
    let x = windowed_blob(128, 8.0, 0.0, 0.0);
    let e = equivariance_error(mean_map, &x, FRAC_PI_4).unwrap();
    assert!(e <= 1e-3, "{e}");
}

fn lift_group_project(n: usize, seed: u64) -> impl Fn(&Image<f64>) -> Result<Image<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = GroupBasis::new(5, 5, n).unwrap();
    let lift = EqFilterBank::<f64>::random(2, 1, n, 5, false, &mut rng);
    let group = EqFilterBank::<f64>::random(1, 2, n, 5, true, &mut rng);
    move |img: &Image<f64>| {
        let (h, w) = img.shape();
        let f = lift_conv(img.data(), 1, h, w, &lift, &basis)?;
        let g = group_conv(&f, &group, &basis)?;
        Image::new(h, w, project_group(&g))
    }
}

#[test]
fn layer_stack_is_equivariant_on_quarter_turns() {
    for n in [4usize, 8] {
        let map = lift_group_project(n, 11);
        let x = random_windowed(20, 12);
        for q in 1..4 {
            let e = equivariance_error(&map, &x, q as f64 * FRAC_PI_2).unwrap();
            assert!(e <= 1e-5, "N={n} q={q}: {e}");
        }
    }
}

#[test]
fn layer_stack_is_nearly_equivariant_at_45_degrees() {
    let map = lift_group_project(8, 13);
    let x = windowed_blob(33, 4.0, 0.0, 0.0);
    let e = equivariance_error(&map, &x, FRAC_PI_4).unwrap();
    assert!(e <= 0.05, "{e}");
}
