use canopy_core::datapipe::{alignment, generate_synthetic, SynthConfig};
use canopy_core::metrics::{dft2_magnitude, fap_with_bins};
use canopy_core::trainer::Scene;
use canopy_core::SitsPatch;
use canopy_sr::geotiff::Raster;
use canopy_sr::predict::{Bicubic, HeightPredictor};
use canopy_sr::report::{evaluate, predict_reference_area};
use canopy_sr::AppResult;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Knows the answer: pastes the scene's reference into a full-patch grid.
struct Oracle {
    scene: Scene,
    factor: usize,
}

impl HeightPredictor for Oracle {
    fn factor(&self) -> usize {
        self.factor
    }

    fn predict(&self, patch: &SitsPatch, _lidar_doy: u16) -> AppResult<Raster> {
        let r = &self.scene.reference;
        let a = alignment(patch, r)?;
        let (h, w) = (patch.height * a.factor, patch.width * a.factor);
        let mut data = vec![0.0; h * w];
        let (r0, c0) = (a.row as usize * a.factor, a.col as usize * a.factor);
        for y in 0..r.height {
            for x in 0..r.width {
                data[(r0 + y) * w + c0 + x] = r.heights[y * r.width + x];
            }
        }
        Ok(Raster::new(h, w, data, patch.geo.offset(0, 0, a.factor)))
    }
}

fn scene(seed: u64, resolution: f64) -> Scene {
    let (patch, reference) = generate_synthetic(&SynthConfig {
        size: 16,
        margin: 3,
        resolution,
        candidate_dates: 14,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    Scene { patch, reference }
}

#[test]
fn oracle_predictor_scores_perfectly() {
    let scenes: Vec<Scene> = (0..3).map(|s| scene(s, 2.5)).collect();
    for sc in &scenes {
        let oracle = Oracle {
            scene: sc.clone(),
            factor: 4,
        };
        let report = evaluate(&oracle, std::slice::from_ref(sc), 16).unwrap();
        assert_eq!(report.metrics.mae, 0.0);
        assert_eq!(report.metrics.rmse, 0.0);
        assert_eq!(report.metrics.r2, Some(1.0));
        assert_eq!(report.bins.len(), 7);
        let fap = report.fap.as_ref().unwrap();
        assert_eq!(fap.prediction, fap.reference);
        assert_eq!(evaluate(&oracle, std::slice::from_ref(sc), 16).unwrap(), report);

        let dir = tempfile::tempdir().unwrap();
        let files = report.write(dir.path(), "eval").unwrap();
        assert_eq!(files.len(), 5);
        let text = std::fs::read_to_string(dir.path().join("eval.txt")).unwrap();
        assert!(text.contains("MAE   0.0000 m"));
    }
}

#[test]
fn factor_mismatch_is_reported() {
    let sc = scene(1, 2.5);
    let wrong = Oracle {
        scene: sc.clone(),
        factor: 2,
    };
    assert!(predict_reference_area(&wrong, &sc).is_err());
}

#[test]
fn bicubic_baseline_reaches_the_fine_grid() {
    let coarse = scene(2, 10.0);
    let fine = scene(2, 2.5);
    let base = Oracle {
        scene: coarse.clone(),
        factor: 1,
    };
    let up = Bicubic { inner: base, factor: 4 };
    assert_eq!(up.factor(), 4);
    let r = predict_reference_area(&up, &fine).unwrap();
    assert_eq!((r.height, r.width), (fine.reference.height, fine.reference.width));
    assert_eq!(r.geo.pixel_size, 2.5);
}

fn fft_magnitudes(img: &[f64], n: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = img.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    buf.iter().map(|c| c.norm()).collect()
}

/// Annulus means from the FFT with integer-exact bin membership.
fn fap_oracle(img: &[f64], n: usize, bins: usize) -> Vec<f64> {
    let mag = fft_magnitudes(img, n);
    let nb = bins.min(n / 2) as i64;
    let half = (n / 2) as i64;
    let signed = |k: usize| if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
    let mut sum = vec![0.0; nb as usize];
    let mut cnt = vec![0usize; nb as usize];
    for u in 0..n {
        for v in 0..n {
            let r2 = signed(u).pow(2) + signed(v).pow(2);
            if r2 == 0 || r2 > half * half {
                continue;
            }
            let k = (0..nb).find(|&k| r2 * nb * nb <= (k + 1).pow(2) * half * half).unwrap() as usize;
            sum[k] += mag[u * n + v];
            cnt[k] += 1;
        }
    }
    let means: Vec<f64> = sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect();
    means.iter().map(|m| (m / means[0]).log10()).collect()
}

#[test]
fn fap_matches_an_fft_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (n, bins) in [(16usize, 8usize), (20, 10), (32, 12), (32, 32)] {
        let img: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..30.0)).collect();
        let mag = dft2_magnitude(&img, n).unwrap();
        for (a, b) in mag.iter().zip(fft_magnitudes(&img, n)) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let got = fap_with_bins(&img, n, n, bins).unwrap();
        let want = fap_oracle(&img, n, bins);
        assert_eq!(got.values.len(), want.len());
        assert_eq!(got.values[0], 0.0);
        for (a, b) in got.values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "n={n} bins={bins}: {a} vs {b}");
        }
    }
}
