use super::*;
use proptest::prelude::*;
use rand::Rng;

fn geom() -> FanBeamGeometry {
    FanBeamGeometry::standard(32, 32, 48).unwrap()
}

fn random_sino(rng: &mut ChaCha8Rng, nb: usize, nv: usize) -> Sinogram<f64> {
    Sinogram::new(nb, nv, (0..nb * nv).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap()
}

fn head(seed: u64) -> PhantomSpec {
    PhantomSpec::random_head(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn sparse_mask_keeps_every_rate_th_view() {
    let d = sparse_mask(3, 640, 4).unwrap();
    let kept = (0..640).filter(|&v| !d.get(0, v)).count();
    assert_eq!(kept, 160);

    assert_eq!(sparse_mask(5, 12, 1).unwrap().count(), 0);

    let d = sparse_mask(2, 8, 4).unwrap();
    let kept: Vec<usize> = (0..8).filter(|&v| !d.get(0, v)).collect();
    assert_eq!(kept, vec![0, 4]);
    let missing_cols = (0..8).filter(|&v| (0..2).all(|b| d.get(b, v))).count();
    assert_eq!(missing_cols, 6);

    assert!(sparse_mask(4, 128, 3).is_err());
    assert!(sparse_mask(4, 128, 0).is_err());
}

#[test]
fn corruption_identity_case() {
    let g = geom();
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let y = p.forward(&render_phantom(&head(1), 32, 32).unwrap()).unwrap();
    let (out, tr) = corrupt_sinogram(&y, &BinaryImageMask::empty(32, 32).unwrap(), &p, &CorruptionParams::clean()).unwrap();
    assert_eq!(tr.count(), 0);
    assert_eq!(out.data(), y.data());
}

#[test]
fn beam_hardening_lowers_only_the_trace() {
    let g = geom();
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let y = p.forward(&render_phantom(&head(2), 32, 32).unwrap()).unwrap();
    let metal = MetalSpec::disk(0.2, 0.1, 6).render(32, 32).unwrap();
    let params = CorruptionParams {
        alpha: 0.2,
        i0: 0.0,
        ..CorruptionParams::default()
    };
    let (out, tr) = corrupt_sinogram(&y, &metal, &p, &params).unwrap();
    assert!(tr.count() > 0);
    for k in 0..y.data().len() {
        let (a, b) = (y.data()[k], out.data()[k]);
        if tr.data()[k] {
            if a > 0.0 {
                assert!(b < a);
            }
        } else {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn poisson_noise_is_seeded() {
    let g = geom();
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let y = p.forward(&render_phantom(&head(3), 32, 32).unwrap()).unwrap();
    let metal = MetalSpec::disk(0.0, 0.0, 10).render(32, 32).unwrap();
    let params = CorruptionParams {
        i0: 1e5,
        seed: 7,
        ..CorruptionParams::default()
    };
    let (a, _) = corrupt_sinogram(&y, &metal, &p, &params).unwrap();
    let (b, _) = corrupt_sinogram(&y, &metal, &p, &params).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let (c, _) = corrupt_sinogram(&y, &metal, &p, &CorruptionParams { seed: 8, ..params }).unwrap();
    assert_ne!(a.data(), c.data());
}

#[test]
fn photon_starvation_clamps_counts() {
    let g = geom();
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let y = Sinogram::new(g.n_bins, g.n_views, vec![60.0; g.n_bins * g.n_views]).unwrap();
    let metal = BinaryImageMask::full(32, 32).unwrap();
    let params = CorruptionParams {
        alpha: 0.0,
        i0: 10.0,
        ..CorruptionParams::default()
    };
    let (out, _) = corrupt_sinogram(&y, &metal, &p, &params).unwrap();
    let cap = (10.0f64).ln();
    assert!(out.data().iter().all(|&v| (v - cap).abs() < 1e-12));
}

#[test]
fn corruption_parameters_are_validated() {
    let g = geom();
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let y = Sinogram::zeros_for(&g);
    let m = BinaryImageMask::empty(32, 32).unwrap();
    for params in [
        CorruptionParams { alpha: 1.0, ..CorruptionParams::default() },
        CorruptionParams { alpha: -0.1, ..CorruptionParams::default() },
        CorruptionParams { i0: -1.0, ..CorruptionParams::default() },
    ] {
        assert!(matches!(corrupt_sinogram(&y, &m, &p, &params), Err(Error::OutOfRange(_))));
    }
}

#[test]
fn view_removal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = random_sino(&mut rng, 5, 8);
    assert_eq!(apply_view_removal(&y, &SinoMask::empty(5, 8)).unwrap().data(), y.data());
    let all = SinoMask::empty(5, 8).complement();
    assert!(apply_view_removal(&y, &all).unwrap().data().iter().all(|&v| v == 0.0));
    let out = apply_view_removal(&y, &sparse_mask(5, 8, 4).unwrap()).unwrap();
    assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 6 * 5);
    assert!(apply_view_removal(&y, &SinoMask::empty(5, 9)).is_err());
}

#[test]
fn fill_identity_without_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = random_sino(&mut rng, 6, 10);
    let e = SinoMask::empty(6, 10);
    assert_eq!(linear_interp_fill(&y, &e, &e).unwrap().data(), y.data());
}

#[test]
fn fill_between_equal_views() {
    let mut data = vec![0.0; 4 * 3];
    for b in 0..4 {
        data[b * 3] = 0.37 * (b + 1) as f64;
        data[b * 3 + 2] = 0.37 * (b + 1) as f64;
    }
    let y = Sinogram::new(4, 3, data).unwrap();
    let d = SinoMask::new(4, 3, (0..12).map(|k| k % 3 == 1).collect()).unwrap();
    let out = linear_interp_fill(&y, &SinoMask::empty(4, 3), &d).unwrap();
    for b in 0..4 {
        assert_eq!(out.get(b, 1), out.get(b, 0));
    }
}

#[test]
fn fill_recovers_a_view_ramp() {
    let (nb, nv) = (7, 16);
    let y = Sinogram::new(nb, nv, (0..nb * nv).map(|k| (k % nv) as f64).collect()).unwrap();
    let d = sparse_mask(nb, nv, 2).unwrap();
    let out = linear_interp_fill(&apply_view_removal(&y, &d).unwrap(), &SinoMask::empty(nb, nv), &d).unwrap();
    let mut worst = 0.0f64;
    for b in 0..nb {
        for v in (1..nv).step_by(2) {
            let midpoint = 0.5 * (y.get(b, v - 1) + y.get(b, (v + 1) % nv));
            worst = worst.max((out.get(b, v) - midpoint).abs());
        }
    }
    assert_eq!(worst, 0.0);
}

#[test]
fn fill_bridges_the_trace_along_bins() {
    let (nb, nv) = (9, 2);
    let y = Sinogram::new(nb, nv, (0..nb * nv).map(|k| (k / nv) as f64 * 2.0).collect()).unwrap();
    let tr = SinoMask::new(nb, nv, (0..nb * nv).map(|k| (3..6).contains(&(k / nv))).collect()).unwrap();
    let out = linear_interp_fill(&y, &tr, &SinoMask::empty(nb, nv)).unwrap();
    for b in 0..nb {
        assert!((out.get(b, 0) - 2.0 * b as f64).abs() < 1e-12);
    }
    // edge runs are extended from the nearest trusted bin
    let tr = SinoMask::new(nb, nv, (0..nb * nv).map(|k| k / nv < 2).collect()).unwrap();
    let out = linear_interp_fill(&y, &tr, &SinoMask::empty(nb, nv)).unwrap();
    assert_eq!(out.get(0, 1), y.get(2, 1));
}

#[test]
fn fill_rejects_undefined_cases() {
    let y = Sinogram::<f64>::zeros(4, 4);
    let all = SinoMask::empty(4, 4).complement();
    assert!(matches!(linear_interp_fill(&y, &all, &SinoMask::empty(4, 4)), Err(Error::Fill(_))));
    assert!(matches!(linear_interp_fill(&y, &SinoMask::empty(4, 4), &all), Err(Error::Fill(_))));
    // a bin row fully covered by the trace is still fillable
    let tr = SinoMask::new(4, 4, (0..16).map(|k| k / 4 == 1).collect()).unwrap();
    assert!(linear_interp_fill(&y, &tr, &SinoMask::empty(4, 4)).is_ok());
}

fn blob_mask(nb: usize, nv: usize, lo: usize, hi: usize) -> SinoMask {
    SinoMask::new(nb, nv, (0..nb * nv).map(|k| (lo..hi).contains(&(k / nv))).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fill_is_a_projection(seed in 0u64..1000, lo in 0usize..10, len in 1usize..5, rate in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let (nb, nv) = (12, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random_sino(&mut rng, nb, nv);
        let tr = blob_mask(nb, nv, lo, (lo + len).min(nb - 1));
        let d = sparse_mask(nb, nv, rate).unwrap();
        let once = linear_interp_fill(&y, &tr, &d).unwrap();
        let twice = linear_interp_fill(&once, &tr, &d).unwrap();
        prop_assert_eq!(once.data(), twice.data());
        let both = tr.union(&d).unwrap();
        for k in 0..nb * nv {
            if !both.data()[k] {
                prop_assert_eq!(once.data()[k], y.data()[k]);
            }
        }
    }

    #[test]
    fn untrusted_coverage_grows_with_rate(lo in 0usize..40, len in 0usize..30) {
        let g = geom();
        let tr = blob_mask(g.n_bins, g.n_views, lo, lo + len);
        let mut prev = 0;
        for rate in [1usize, 2, 4, 8] {
            let c = tr.union(&sparse_mask(g.n_bins, g.n_views, rate).unwrap()).unwrap().count();
            prop_assert!(c >= prev);
            prev = c;
        }
    }
}

#[test]
fn clean_record_matches_ground_truth_off_the_masks() {
    let g = geom();
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    let x = render_phantom(&head(9), 32, 32).unwrap();
    let metal = MetalSpec::disk(-0.2, 0.3, 8).render(32, 32).unwrap();
    let d = sparse_mask(g.n_bins, g.n_views, 4).unwrap();
    let rec = synthesize(&x, &metal, &p, &CorruptionParams::clean(), &d).unwrap();
    assert_eq!(rec.y_gt.data(), p.forward(&x).unwrap().data());
    let both = rec.tr.union(&rec.d).unwrap();
    for k in 0..both.data().len() {
        if !both.data()[k] {
            assert!((rec.y_svma.data()[k] - rec.y_gt.data()[k]).abs() <= 1e-10);
        }
        if rec.d.data()[k] {
            assert_eq!(rec.y_svma.data()[k], 0.0);
        }
    }
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_pairs_every_phantom_with_every_metal() {
    let g = geom();
    let tmp = tempfile::tempdir().unwrap();
    let phantoms = [head(1), head(2)];
    let metals = [MetalSpec::disk(0.1, 0.1, 4), MetalSpec::disk(-0.3, 0.0, 12)];
    let params = CorruptionParams {
        seed: 11,
        ..CorruptionParams::default()
    };
    let n = make_dataset(&phantoms, &metals, &g, &params, 4, tmp.path(), None).unwrap();
    assert_eq!(n, 4);
    let ds = Dataset::open(tmp.path()).unwrap();
    assert_eq!(ds.len(), 4);
    assert!(!ds.manifest.slow);
    assert_eq!(ds.manifest.records[3].seed, 14);
    assert_eq!(ds.manifest.records[1].metal_px, 12);
    let p = FanBeamProjector::<f64>::new(&g).unwrap();
    for i in 0..4 {
        let rec = ds.load::<f64>(i).unwrap();
        assert_eq!(rec.metal_px(), metals[i % 2].pixels);
        let y = p.forward(&rec.x_gt).unwrap();
        let worst = y.data().iter().zip(rec.y_gt.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-5, "{worst}");
        for k in 0..rec.d.data().len() {
            if rec.d.data()[k] {
                assert_eq!(rec.y_svma.data()[k], 0.0);
            }
        }
    }
    assert!(ds.load::<f64>(4).is_err());
}

#[test]
fn dataset_is_byte_identical_across_runs_and_thread_counts() {
    let g = geom();
    let phantoms = [head(5), PhantomSpec::shepp_logan()];
    let metals = [MetalSpec::disk(0.0, 0.2, 6)];
    let params = CorruptionParams {
        seed: 3,
        ..CorruptionParams::default()
    };
    let run = |threads: usize| {
        let tmp = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| make_dataset(&phantoms, &metals, &g, &params, 2, tmp.path(), Some("abc".into())))
            .unwrap();
        dir_bytes(tmp.path())
    };
    let a = run(1);
    assert_eq!(a.len(), 1 + 2 * 6);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
}

#[test]
fn full_scale_request_is_flagged_slow() {
    let g = FanBeamGeometry::standard(416, 416, 640).unwrap();
    let m = plan_dataset(&[PhantomSpec::shepp_logan()], &[MetalSpec::disk(0.0, 0.0, 100)], &g, &CorruptionParams::default(), 4)
        .unwrap();
    assert!(m.slow);
    assert_eq!(m.records.len(), 1);
}

#[test]
fn dataset_requests_are_validated() {
    let g = geom();
    let ok = [PhantomSpec::shepp_logan()];
    let metal = [MetalSpec::disk(0.0, 0.0, 4)];
    let p = CorruptionParams::default();
    assert!(plan_dataset(&[], &metal, &g, &p, 4).is_err());
    assert!(plan_dataset(&ok, &[], &g, &p, 4).is_err());
    assert!(plan_dataset(&ok, &metal, &g, &p, 5).is_err());
    assert!(plan_dataset(&ok, &[MetalSpec::disk(0.0, 0.0, 5000)], &g, &p, 4).is_err());

    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("occupied");
    fs::write(&file, b"x").unwrap();
    assert!(matches!(make_dataset(&ok, &metal, &g, &p, 4, &file, None), Err(Error::Io { .. })));
}
