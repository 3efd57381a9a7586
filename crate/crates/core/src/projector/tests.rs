use super::*;
use crate::imaging::{render_phantom, rotate_image, Interp, PhantomSpec};
use crate::scalar::{dot, norm2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn geom(n: usize, views: usize) -> FanBeamGeometry {
    FanBeamGeometry::standard(n, n, views).unwrap()
}

#[test]
fn standard_geometry_defaults() {
    let g = geom(64, 128);
    assert_eq!(g.n_bins, 96);
    assert_eq!(g.dso, 3.0);
    assert_eq!(g.dsd, 6.0);
    let half_fan = 0.5 * g.det_pitch * g.n_bins as f64;
    assert!((half_fan - 1.05 * (1.0f64 / 3.0).asin()).abs() < 1e-12);
    assert_eq!(geom(128, 360).n_bins, 192);
}

#[test]
fn invalid_geometries_are_rejected() {
    let mut g = geom(16, 8);
    g.dso = 0.5;
    assert!(matches!(FanBeamProjector::<f64>::new(&g), Err(Error::InvalidGeometry(_))));
    let mut g = geom(16, 8);
    g.dsd = g.dso;
    assert!(g.validate().is_err());
    let mut g = geom(16, 8);
    g.n_views = 0;
    assert!(g.validate().is_err());
    let mut g = geom(16, 8);
    g.det_pitch = 1.0;
    assert!(g.validate().is_err());
}

#[test]
fn zero_in_zero_out() {
    let g = geom(16, 12);
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let s = p.forward(&Image::zeros(16, 16).unwrap()).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.0));
    let x = p.back(&Sinogram::zeros_for(&g)).unwrap();
    assert!(x.data().iter().all(|&v| v == 0.0));
    let f = fbp(&Sinogram::<f64>::zeros_for(&g), &g, FbpWindow::Hann).unwrap();
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn projection_and_fbp_are_linear() {
    let g = geom(16, 20);
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let filt = FbpFilter::<f64>::new(&g, FbpWindow::Ramlak).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (0.7, -1.3);
    let x1 = random_vec(&mut rng, 256);
    let x2 = random_vec(&mut rng, 256);
    let mix: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
    let lhs = p.forward_flat(&mix);
    let (p1, p2) = (p.forward_flat(&x1), p.forward_flat(&x2));
    let rhs: Vec<f64> = p1.iter().zip(&p2).map(|(u, v)| a * u + b * v).collect();
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(u, v)| u - v).collect();
    assert!(norm2(&diff) / norm2(&rhs) <= 1e-12);

    let y1 = random_vec(&mut rng, 24 * 20);
    let y2 = random_vec(&mut rng, 24 * 20);
    let ymix: Vec<f64> = y1.iter().zip(&y2).map(|(u, v)| a * u + b * v).collect();
    for op in [0, 1] {
        let run = |y: &Vec<f64>| -> Vec<f64> {
            if op == 0 {
                p.back_flat(y)
            } else {
                filt.apply(&Sinogram::new(24, 20, y.clone()).unwrap()).unwrap().into_data()
            }
        };
        let lhs = run(&ymix);
        let (r1, r2) = (run(&y1), run(&y2));
        let rhs: Vec<f64> = r1.iter().zip(&r2).map(|(u, v)| a * u + b * v).collect();
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(u, v)| u - v).collect();
        assert!(norm2(&diff) / norm2(&rhs) <= 1e-12, "operator {op}");
    }
}

#[test]
fn adjoint_identity_holds() {
    let g = geom(24, 30);
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x = random_vec(&mut rng, 24 * 24);
        let y = random_vec(&mut rng, g.n_bins * g.n_views);
        let px = p.forward_flat(&x);
        let pty = p.back_flat(&y);
        let err = (dot(&px, &y) - dot(&x, &pty)).abs() / (norm2(&px) * norm2(&y));
        assert!(err <= 1e-10, "{err}");
    }
}

#[test]
fn cached_and_uncached_agree_bitwise() {
    let g = geom(16, 9);
    let cached = FanBeamProjector::<f64>::new(&g).unwrap();
    let fly = FanBeamProjector::<f64>::uncached(&g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_vec(&mut rng, 256);
    assert_eq!(cached.forward_flat(&x), fly.forward_flat(&x));
    let y = random_vec(&mut rng, g.n_bins * g.n_views);
    assert_eq!(cached.back_flat(&y), fly.back_flat(&y));
}

#[test]
fn central_chord_of_disk() {
    let (r, mu) = (0.5, 0.8);
    let g = geom(128, 16);
    let img: Image<f64> = render_phantom(&PhantomSpec::disk(r, mu), 128, 128).unwrap();
    let s = forward_project(&img, &g).unwrap();
    // normalized radius r is also the physical radius when fov = 2
    let expected = 2.0 * r * mu;
    for v in 0..g.n_views {
        let got = s.get(g.n_bins / 2, v);
        assert!((got - expected).abs() / expected < 0.02, "view {v}: {got}");
    }
}

#[test]
fn impulse_back_projection_touches_only_the_ray() {
    let g = geom(32, 10);
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let (view, bin) = (3, 17);
    let mut y = vec![0.0; g.n_bins * g.n_views];
    y[bin * g.n_views + view] = 1.0;
    let img = p.back_flat(&y);
    let visited: std::collections::BTreeSet<usize> = p.ray_pixels(view, bin).into_iter().map(|e| e.0).collect();
    assert!(!visited.is_empty());
    for (k, &v) in img.iter().enumerate() {
        assert_eq!(v != 0.0, visited.contains(&k), "pixel {k}");
    }
}

#[test]
fn quarter_turn_shifts_views() {
    let g = geom(64, 64);
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let img: Image<f64> = render_phantom(&PhantomSpec::shepp_logan(), 64, 64).unwrap();
    let rot = rotate_image(&img, std::f64::consts::FRAC_PI_2, Interp::Nearest).unwrap();
    let a = p.forward(&img).unwrap();
    let b = p.forward(&rot).unwrap();
    let shift = g.n_views / 4;
    let mut num = 0.0;
    let mut den = 0.0;
    for bin in 0..g.n_bins {
        for v in 0..g.n_views {
            let d = b.get(bin, v) - a.get(bin, (v + shift) % g.n_views);
            num += d * d;
            den += a.get(bin, v).powi(2);
        }
    }
    let err = (num / den).sqrt();
    assert!(err <= 1e-2, "{err}");
}

#[test]
fn metal_trace_edge_cases_and_band() {
    let g = geom(64, 32);
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let empty = metal_trace(&BinaryImageMask::empty(64, 64).unwrap(), &p, 1e-8).unwrap();
    assert_eq!(empty.count(), 0);
    let full = metal_trace(&BinaryImageMask::full(64, 64).unwrap(), &p, 1e-8).unwrap();
    assert_eq!(full.count(), g.n_bins * g.n_views);
    assert!(metal_trace(&BinaryImageMask::empty(64, 64).unwrap(), &p, 0.0).is_err());

    let r = 0.2;
    let disk: Image<f64> = render_phantom(&PhantomSpec::disk(r, 1.0), 64, 64).unwrap();
    let mask = BinaryImageMask::from_image(&disk).unwrap();
    let tr = metal_trace(&mask, &p, 1e-8).unwrap();
    // a ray sees the bilinear interpolant of the mask iff it crosses the
    // open square of half-width one pixel around some mask pixel center
    let px = g.pixel_size().0;
    let centers: Vec<(f64, f64)> = (0..64)
        .flat_map(|i| (0..64).map(move |j| (i, j)))
        .filter(|&(i, j)| mask.get(i, j))
        .map(|(i, j)| {
            let (x, y) = crate::imaging::normalized_center(i, j, 64, 64);
            (x * g.fov / 2.0, y * g.fov / 2.0)
        })
        .collect();
    let touches = |v: usize, b: usize| {
        let (src, dir) = g.ray(v, b);
        let n = [-dir[1], dir[0]];
        let half = px * (n[0].abs() + n[1].abs());
        centers.iter().any(|&(x, y)| ((x - src[0]) * n[0] + (y - src[1]) * n[1]).abs() < half)
    };
    for v in 0..g.n_views {
        let bins: Vec<usize> = (0..g.n_bins).filter(|&b| tr.get(b, v)).collect();
        let width = bins.len() as f64;
        let analytic = (0..g.n_bins).filter(|&b| touches(v, b)).count() as f64;
        assert!((width - analytic).abs() <= 2.0, "view {v}: {width} vs {analytic}");
        assert!(bins.contains(&(g.n_bins / 2)));
        assert_eq!(bins.last().unwrap() - bins[0] + 1, bins.len(), "band is contiguous");
    }
}

#[test]
fn metal_trace_is_monotone_in_the_mask() {
    use crate::imaging::MetalSpec;
    let g = geom(32, 24);
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let mut prev = SinoMask::empty(g.n_bins, g.n_views);
    for px in [1usize, 5, 20, 60, 200] {
        let tr = metal_trace(&MetalSpec::disk(0.1, -0.2, px).render(32, 32).unwrap(), &p, 1e-8).unwrap();
        assert!(prev.data().iter().zip(tr.data()).all(|(a, b)| !a || *b));
        prev = tr;
    }
}

#[test]
fn operator_norm_properties() {
    let g = geom(16, 16);
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let e50 = operator_norm_estimate(&p, 50).unwrap();
    let e200 = operator_norm_estimate(&p, 200).unwrap();
    assert!((e200 - e50) / e200 <= 0.01);
    let mut last = 0.0;
    for iters in [10, 15, 20, 40] {
        let e = operator_norm_estimate(&p, iters).unwrap();
        assert!(e >= last * (1.0 - 1e-12));
        last = e;
    }
    assert!(operator_norm_estimate(&p, 5).is_err());

    let c = 3.0;
    let scaled = FanBeamGeometry::scaled(16, 16, 16, g.n_bins, c * g.fov).unwrap();
    let ps = FanBeamProjector::<f64>::new(&scaled).unwrap();
    let es = operator_norm_estimate(&ps, 50).unwrap();
    assert!((es / e50 - c * c).abs() / (c * c) < 1e-9, "{}", es / e50);
}

#[test]
fn single_ray_norm_is_squared_weight() {
    let mut g = geom(8, 1);
    g.n_bins = 1;
    g.det_pitch = 0.01;
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let w: f64 = p.ray_pixels(0, 0).iter().map(|e| e.1 * e.1).sum();
    let est = operator_norm_estimate(&p, 10).unwrap();
    assert!((est - w).abs() / w < 1e-12, "{est} vs {w}");
}

#[test]
fn fbp_recovers_disk_intensity() {
    let g = geom(64, 128);
    let mu = 0.6;
    let img: Image<f64> = render_phantom(&PhantomSpec::disk(0.5, mu), 64, 64).unwrap();
    let rec = fbp(&forward_project(&img, &g).unwrap(), &g, FbpWindow::Ramlak).unwrap();
    // interior pixels (radius < 0.4) avoid the edge blur
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..64 {
        for j in 0..64 {
            let (x, y) = crate::imaging::normalized_center(i, j, 64, 64);
            if x * x + y * y < 0.16 {
                sum += rec.get(i, j);
                n += 1.0;
            }
        }
    }
    let mean = sum / n;
    assert!((mean - mu).abs() / mu < 0.05, "{mean}");
}

#[test]
fn fbp_needs_four_bins() {
    let g = FanBeamGeometry::with_bins(16, 16, 8, 3).unwrap();
    assert!(FbpFilter::<f64>::new(&g, FbpWindow::Ramlak).is_err());
}

#[test]
fn single_precision_projector_tracks_double() {
    let g = geom(16, 8);
    let img: Image<f64> = render_phantom(&PhantomSpec::shepp_logan(), 16, 16).unwrap();
    let a = forward_project(&img, &g).unwrap();
    let b = forward_project(&img.cast::<f32>(), &g).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-5);
    }
}
