use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::corpus::{caption, generate_scene, render, CorpusConfig, Palette, SceneSpec, Template};
use crate::foundation::{EncoderKind, FoundationConfig};

fn gaussian_set(seed: u64, n: usize, mean: &[f64], std: &[f64]) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| mean.iter().zip(std).map(|(&m, &s)| Normal::new(m, s).unwrap().sample(&mut rng)).collect())
        .collect();
    FeatureSet::new(rows, "synthetic").unwrap()
}

fn noise_image(seed: u64, side: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image { height: side, width: side, data: (0..side * side * 3).map(|_| rng.random::<f32>()).collect() }
}

fn blocks_image(side: usize) -> Image {
    // mid-contrast pattern of bars and a gradient
    let mut img = Image::filled(side, side, [0.0; 3]);
    for y in 0..side {
        for x in 0..side {
            let bar = if (x / 4) % 2 == 0 { 0.3 } else { 0.7 };
            let v = bar * 0.7 + 0.3 * y as f32 / side as f32;
            img.set_pixel(y, x, [v, 1.0 - v, 0.5 * v + 0.2]);
        }
    }
    img
}

#[test]
fn frechet_of_a_set_with_itself_is_zero() {
    let a = gaussian_set(0, 200, &[0.0, 1.0, -2.0, 0.5], &[1.0, 0.5, 2.0, 0.1]);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
}

#[test]
fn frechet_matches_one_dimensional_closed_form() {
    let a = gaussian_set(1, 10_000, &[0.0], &[1.0]);
    let b = gaussian_set(2, 10_000, &[0.5], &[2.0]);
    let d = frechet_distance(&a, &b).unwrap();
    // (0.5)^2 + (2 - 1)^2
    assert!((d - 1.25).abs() < 0.1, "{d}");
    // and exactly the same formula on the fitted moments
    let (ma, sa) = a.moments().unwrap();
    let (mb, sb) = b.moments().unwrap();
    let want = (ma[0] - mb[0]).powi(2) + (sa[(0, 0)].sqrt() - sb[(0, 0)].sqrt()).powi(2);
    assert!((d - want).abs() < 1e-9);
}

#[test]
fn frechet_matches_two_by_two_trace_formula() {
    // for 2x2 positive definite products, tr sqrt(P) = sqrt(tr P + 2 sqrt(det P))
    let a = gaussian_set(3, 300, &[0.0, 1.0], &[1.0, 2.0]);
    let rows: Vec<Vec<f64>> = gaussian_set(4, 300, &[0.3, -0.2], &[0.7, 1.5]).rows.iter().map(|r| vec![r[0] + 0.5 * r[1], r[1]]).collect();
    let b = FeatureSet::new(rows, "b").unwrap();
    let (ma, sa) = a.moments().unwrap();
    let (mb, sb) = b.moments().unwrap();
    let p = &sa * &sb;
    let tr_sqrt = (p.trace() + 2.0 * (sa.determinant() * sb.determinant()).sqrt()).sqrt();
    let want = (ma - mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
}

#[test]
fn frechet_is_symmetric_and_zero_only_for_equal_moments() {
    let a = gaussian_set(5, 100, &[0.0, 0.0, 0.0], &[1.0, 2.0, 0.5]);
    let b = gaussian_set(6, 100, &[1.0, 0.0, -1.0], &[1.0, 1.0, 1.0]);
    assert!((frechet_distance(&a, &b).unwrap() - frechet_distance(&b, &a).unwrap()).abs() < 1e-8);
    assert!(frechet_distance(&a, &b).unwrap() > 0.1);
    // point reflection through the mean keeps both moments
    let (mu, _) = a.moments().unwrap();
    let reflected: Vec<Vec<f64>> = a.rows.iter().map(|r| r.iter().enumerate().map(|(j, v)| 2.0 * mu[j] - v).collect()).collect();
    let r = FeatureSet::new(reflected, "reflected").unwrap();
    assert!(frechet_distance(&a, &r).unwrap() < 1e-6);
    let shifted: Vec<Vec<f64>> = a.rows.iter().map(|row| row.iter().map(|v| v + 0.01).collect()).collect();
    assert!(frechet_distance(&a, &FeatureSet::new(shifted, "s").unwrap()).unwrap() > 1e-5);
}

proptest! {
    #[test]
    fn frechet_is_nonnegative(seed in 0u64..200, shift in -2.0f64..2.0) {
        let a = gaussian_set(seed, 30, &[0.0, shift], &[1.0, 0.3]);
        let b = gaussian_set(seed + 999, 30, &[shift, 0.0], &[0.5, 1.5]);
        prop_assert!(frechet_distance(&a, &b).unwrap() >= 0.0);
    }
}

#[test]
fn frechet_rejects_tiny_and_non_finite_sets() {
    let one = FeatureSet::new(vec![vec![1.0, 2.0]], "one").unwrap();
    assert!(matches!(frechet_distance(&one, &one), Err(MetricError::TooFew { .. })));
    assert!(matches!(FeatureSet::new(vec![vec![f64::NAN]], "x"), Err(MetricError::NonFinite(_))));
    assert!(FeatureSet::new(vec![vec![1.0; 5]; 3], "x").unwrap().is_rank_deficient());
}

#[test]
fn ms_ssim_identity_and_symmetry() {
    let x = blocks_image(32);
    assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    let y = noise_image(1, 32);
    assert!((ms_ssim(&x, &y).unwrap() - ms_ssim(&y, &x).unwrap()).abs() < 1e-8);
}

#[test]
fn ms_ssim_ranks_inversion_below_small_noise() {
    let x = blocks_image(32);
    let inv = Image { data: x.data.iter().map(|v| 1.0 - v).collect(), ..x.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noisy = Image { data: x.data.iter().map(|v| v + 0.01 * rng.random_range(-1.0f32..1.0)).collect(), ..x.clone() };
    assert!(ms_ssim(&x, &inv).unwrap() < ms_ssim(&x, &noisy).unwrap());
}

#[test]
fn ms_ssim_of_constant_images_is_the_weighted_luminance_term() {
    let (c1, c2) = (0.2f32, 0.6f32);
    let a = Image::filled(32, 32, [c1; 3]);
    let b = Image::filled(32, 32, [c2; 3]);
    let (p, q) = (c1 as f64, c2 as f64);
    let lum = (2.0 * p * q + 1e-4) / (p * p + q * q + 1e-4);
    let w = 0.3001 / (0.0448 + 0.2856 + 0.3001);
    assert!((ms_ssim(&a, &b).unwrap() - lum.powf(w)).abs() < 1e-9);
}

#[test]
fn ms_ssim_shape_errors() {
    assert!(ms_ssim(&blocks_image(32), &blocks_image(16)).is_err());
    assert!(ms_ssim(&blocks_image(8), &blocks_image(8)).is_err());
    assert!(ms_ssim(&blocks_image(16), &blocks_image(16)).is_ok());
}

#[test]
fn every_single_object_scene_is_detected_back() {
    for palette in [Palette::Standard, Palette::Alternate] {
        for spec in SceneSpec::all_single_object() {
            let img = render(&spec, 32, palette).unwrap();
            assert_eq!(detect_attributes(&img, palette), spec);
        }
    }
}

#[test]
fn background_detects_nothing() {
    let img = Image::filled(32, 32, crate::corpus::BACKGROUND);
    assert!(detect_attributes(&img, Palette::Standard).objects.is_empty());
}

#[test]
fn multi_object_scenes_round_trip() {
    let cfg = CorpusConfig { max_objects: 3, ..Default::default() };
    for seed in 0..300 {
        let s = generate_scene(seed, &cfg).unwrap();
        assert_eq!(detect_attributes(&s.image, Palette::Standard), s.spec.unwrap());
    }
}

#[test]
fn detection_survives_uniform_noise() {
    // uniform noise with standard deviation 0.05
    let half = 0.05 * 3f32.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = CorpusConfig { max_objects: 3, ..Default::default() };
    let mut ok = 0;
    for seed in 0..1000 {
        let s = generate_scene(seed, &cfg).unwrap();
        let noisy = Image { data: s.image.data.iter().map(|v| v + rng.random_range(-half..half)).collect(), ..s.image };
        ok += usize::from(detect_attributes(&noisy, Palette::Standard) == s.spec.unwrap());
    }
    assert!(ok >= 990, "{ok}/1000");
}

#[test]
fn attribute_accuracy_examples() {
    let samples: Vec<_> = (0..10).map(|s| generate_scene(s, &CorpusConfig::default()).unwrap()).collect();
    let imgs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let caps: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    let all = attribute_accuracy(&imgs, &caps, Palette::Standard).unwrap();
    assert_eq!(all, AttributeScores { object_recall: 1.0, position_accuracy: 1.0, color_accuracy: 1.0, exact_match: 1.0 });

    let bg = Image::filled(32, 32, crate::corpus::BACKGROUND);
    let none = attribute_accuracy(&vec![&bg; 10], &caps, Palette::Standard).unwrap();
    assert_eq!(none.object_recall, 0.0);
    assert_eq!(none.exact_match, 0.0);

    let mut half = imgs.clone();
    for h in half.iter_mut().take(5) {
        *h = &bg;
    }
    assert_eq!(attribute_accuracy(&half, &caps, Palette::Standard).unwrap().exact_match, 0.5);

    assert!(matches!(attribute_accuracy(&imgs[..1], &["a purple blob"], Palette::Standard), Err(MetricError::Caption(_))));
    assert!(attribute_accuracy(&imgs[..2], &caps[..1], Palette::Standard).is_err());
}

#[test]
fn wrong_color_counts_against_color_only() {
    let spec = SceneSpec::all_single_object()[0].clone();
    let mut other = spec.clone();
    other.objects[0].color = crate::corpus::Color::Blue;
    let img = render(&other, 32, Palette::Standard).unwrap();
    let cap = caption(&spec, Template::At);
    let s = attribute_accuracy(&[&img], &[cap.as_str()], Palette::Standard).unwrap();
    assert_eq!((s.object_recall, s.position_accuracy, s.color_accuracy, s.exact_match), (0.0, 1.0, 0.0, 0.0));
}

#[test]
fn clip_score_contract() {
    let enc = FoundationEncoder::<f32>::new(EncoderKind::CrossModal, FoundationConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(clip_score(&enc, &[], &[]), Err(MetricError::TooFew { .. })));
    let s = generate_scene(0, &CorpusConfig::default()).unwrap();
    assert!(clip_score(&enc, &[&s.image], &[]).is_err());
    let v = clip_score(&enc, &[&s.image, &s.image], &[&s.caption, "a red square at top left"]).unwrap();
    assert!((-1.0..=1.0).contains(&v));
    let e = [0.3f32, -0.2, 0.9];
    assert!((cosine(&e, &e) - 1.0).abs() < 1e-12);
    let vision = FoundationEncoder::<f32>::new(EncoderKind::VisionOnly, FoundationConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(clip_score(&vision, &[&s.image], &[&s.caption]).is_err());
}
