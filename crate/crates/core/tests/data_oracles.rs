use p2g_core::data::{default_domains, Artifact, DomainSpec, SPLIT_TEST};
use p2g_core::Image;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// 2-D power spectrum of the grey-level image with its mean removed.
fn power_spectrum(img: &Image) -> Vec<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    let mut grey: Vec<Vec<Complex<f64>>> = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| Complex::new((0..3).map(|c| img.get(y, x, c) as f64).sum::<f64>() / 3.0, 0.0))
                .collect()
        })
        .collect();
    let mean = grey.iter().flatten().map(|c| c.re).sum::<f64>() / (h * w) as f64;
    grey.iter_mut().flatten().for_each(|c| c.re -= mean);
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in &mut grey {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    for x in 0..w {
        let mut col: Vec<Complex<f64>> = (0..h).map(|y| grey[y][x]).collect();
        col_fft.process(&mut col);
        for y in 0..h {
            grey[y][x] = col[y];
        }
    }
    grey.iter().map(|r| r.iter().map(|c| c.norm_sqr()).collect()).collect()
}

/// Mean energy within one bin of frequency `f` on both axes.
fn band_energy(spec: &[Vec<f64>], f: usize) -> f64 {
    let n = spec.len();
    let near = |k: usize| {
        let k = k.min(n - k);
        k + 1 >= f && k <= f + 1
    };
    let mut sum = 0.0;
    let mut count = 0;
    for (y, row) in spec.iter().enumerate() {
        for (x, &p) in row.iter().enumerate() {
            if near(y) && near(x) {
                sum += p;
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn grid_domain() -> DomainSpec {
    default_domains(0, 200, 3)
        .into_iter()
        .find(|d| matches!(d.artifact, Artifact::SinusoidalGrid { .. }))
        .unwrap()
}

#[test]
fn grid_artifact_concentrates_energy_in_its_band() {
    let spec = grid_domain();
    let Artifact::SinusoidalGrid { period, .. } = spec.artifact else {
        unreachable!()
    };
    let test = spec.split(SPLIT_TEST, 32).unwrap();
    let f = (32.0 / period).round() as usize;
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for r in &test {
        let e = band_energy(&power_spectrum(&r.image), f);
        match r.label {
            p2g_core::Label::Real => real.push(e),
            p2g_core::Label::Fake => fake.push(e),
        }
    }
    assert_eq!((real.len(), fake.len()), (100, 100));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = mean(&fake) / mean(&real);
    assert!(ratio > 2.0, "band energy ratio {ratio:.2}");
}

#[test]
fn fakes_differ_from_their_real_content_only_by_the_artifact() {
    for spec in default_domains(0, 20, 5) {
        let test = spec.split(SPLIT_TEST, 32).unwrap();
        for pair in test.chunks(2) {
            assert_eq!(pair[0].class, pair[1].class);
            assert_ne!(pair[0].image, pair[1].image);
        }
    }
}
