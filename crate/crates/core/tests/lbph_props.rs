use facekit::imaging::GrayImage;
use facekit::lbph::{
    chi_square_distance, extract_template, lbp_image, lbp_image_with, spatial_histogram, train,
    BitConvention, FaceTemplate, LbpParams, ModelEntry, RecognizerModel, BINS,
};
use facekit::synth::{perturb, synthetic_face};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

fn random_image(rng: &mut StdRng, w: u32, h: u32) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| rng.random()).collect()).unwrap()
}

// Eight explicit comparisons, most significant bit first, clockwise from the
// top-left neighbour.
fn oracle_code(img: &GrayImage, x: u32, y: u32) -> u8 {
    let c = img.get(x, y);
    let bit = |nx: u32, ny: u32, shift: u8| ((c >= img.get(nx, ny)) as u8) << shift;
    bit(x - 1, y - 1, 7)
        | bit(x, y - 1, 6)
        | bit(x + 1, y - 1, 5)
        | bit(x + 1, y, 4)
        | bit(x + 1, y + 1, 3)
        | bit(x, y + 1, 2)
        | bit(x - 1, y + 1, 1)
        | bit(x - 1, y, 0)
}

fn oracle_histogram(codes: &GrayImage, gx: u32, gy: u32) -> Vec<f64> {
    let mut out = Vec::new();
    for ry in 0..gy {
        for rx in 0..gx {
            let (x0, x1) = (rx * codes.width() / gx, (rx + 1) * codes.width() / gx);
            let (y0, y1) = (ry * codes.height() / gy, (ry + 1) * codes.height() / gy);
            let mut counts = vec![0u32; BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    counts[codes.get(x, y) as usize] += 1;
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            out.extend(counts.iter().map(|&c| c as f64 / n));
        }
    }
    out
}

fn small_params() -> LbpParams {
    LbpParams {
        grid_x: 4,
        grid_y: 4,
        face_w: 40,
        face_h: 40,
        ..LbpParams::default()
    }
}

#[test]
fn lbp_matches_comparison_oracle() {
    let mut rng = StdRng::seed_from_u64(31);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(3..60), rng.random_range(3..60));
        let img = random_image(&mut rng, w, h);
        let codes = lbp_image(&img).unwrap();
        assert_eq!((codes.width(), codes.height()), (w - 2, h - 2));
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert_eq!(codes.get(x - 1, y - 1), oracle_code(&img, x, y));
            }
        }
    }
}

#[test]
fn hand_derived_three_by_three() {
    // Neighbours clockwise from top-left: 10 20 30 60 90 80 70 40, centre 50.
    let img = GrayImage::new(3, 3, vec![10, 20, 30, 40, 50, 60, 70, 80, 90]).unwrap();
    assert_eq!(lbp_image(&img).unwrap().pixels(), &[0b1110_0001]);
    assert_eq!(0b1110_0001, 225);
}

#[test]
fn histograms_match_region_count_oracle() {
    let mut rng = StdRng::seed_from_u64(32);
    for _ in 0..60 {
        let (w, h) = (rng.random_range(4..70), rng.random_range(4..70));
        let codes = random_image(&mut rng, w, h);
        let gx = rng.random_range(1..=w.min(9));
        let gy = rng.random_range(1..=h.min(9));
        let params = LbpParams {
            grid_x: gx,
            grid_y: gy,
            ..LbpParams::default()
        };
        let t = spatial_histogram(&codes, &params).unwrap();
        assert_eq!(t.histograms(), oracle_histogram(&codes, gx, gy).as_slice());
        for region in t.regions() {
            assert!((region.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

fn toy_suite(seed: u64, params: &LbpParams) -> (RecognizerModel, Vec<GrayImage>) {
    let faces: Vec<(GrayImage, String)> = (0..4)
        .flat_map(|p| {
            (0..3).map(move |k| (perturb(&synthetic_face(seed * 10 + p, 64), 12, p * 100 + k), format!("person-{p}")))
        })
        .collect();
    let model = train(faces.iter().map(|(f, l)| (f, l.as_str())), params).unwrap();
    let queries = (0..20)
        .map(|q| perturb(&synthetic_face(seed * 10 + q % 4, 64), 30, 10_000 + q))
        .collect();
    (model, queries)
}

#[test]
fn bit_convention_does_not_change_decisions() {
    for seed in 0..5 {
        let params = small_params();
        let complemented = LbpParams {
            convention: BitConvention::Complemented,
            ..params.clone()
        };
        let (model, queries) = toy_suite(seed, &params);
        let (model_c, _) = toy_suite(seed, &complemented);
        for q in &queries {
            let a = model.predict(q).unwrap();
            let b = model_c.predict(q).unwrap();
            assert_eq!(a.label, b.label);
            assert_eq!(a.index, b.index);
            assert!((a.distance - b.distance).abs() <= 1e-12);
        }
    }
}

#[test]
fn complement_reverses_bins() {
    let mut rng = StdRng::seed_from_u64(33);
    let img = random_image(&mut rng, 30, 30);
    let a = lbp_image_with(&img, BitConvention::CenterAtLeastNeighbor).unwrap();
    let b = lbp_image_with(&img, BitConvention::Complemented).unwrap();
    assert!(a.pixels().iter().zip(b.pixels()).all(|(&p, &q)| p == !q));
}

#[test]
fn enrolled_faces_match_themselves() {
    let params = LbpParams::default();
    let faces: Vec<GrayImage> = (0..6).map(|s| synthetic_face(s, 100)).collect();
    let labels: Vec<String> = (0..6).map(|s| format!("p{s}")).collect();
    let model = train(faces.iter().zip(labels.iter().map(String::as_str)), &params).unwrap();
    for (i, f) in faces.iter().enumerate() {
        let p = model.predict(f).unwrap();
        assert_eq!(p.label, labels[i]);
        assert_eq!(p.distance, 0.0);
        assert!(p.is_known);
    }
}

#[test]
fn prediction_matches_exhaustive_search() {
    let params = small_params();
    let mut rng = StdRng::seed_from_u64(34);
    let (model, _) = toy_suite(7, &params);
    for q in 0..200 {
        let query = if q % 2 == 0 {
            perturb(&synthetic_face(70 + q % 4, 64), 40, q)
        } else {
            random_image(&mut rng, 50, 50)
        };
        let t = extract_template(&query, &params).unwrap();
        let mut best = (f64::INFINITY, 0usize);
        for (i, e) in model.entries.iter().enumerate() {
            let d = chi_square_distance(&t, &FaceTemplate::from_histograms(e.template.clone())).unwrap();
            if d < best.0 {
                best = (d, i);
            }
        }
        let p = model.predict(&query).unwrap();
        assert_eq!(p.index, best.1);
        assert_eq!(p.label, model.entries[best.1].label);
        assert_eq!(p.distance, best.0);
        assert_eq!(p.is_known, best.0 <= params.unknown_threshold);
    }
}

fn random_template(rng: &mut StdRng, regions: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(regions * BINS);
    for _ in 0..regions {
        let raw: Vec<f64> = (0..BINS)
            .map(|_| if rng.random_bool(0.3) { rng.random::<f64>() } else { 0.0 })
            .collect();
        let total: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        out.extend(raw.iter().map(|v| v / total));
    }
    out
}

#[test]
fn argmin_survives_bin_permutation() {
    let mut rng = StdRng::seed_from_u64(35);
    let params = LbpParams {
        grid_x: 2,
        grid_y: 1,
        face_w: 10,
        face_h: 10,
        ..LbpParams::default()
    };
    for _ in 0..50 {
        let entries: Vec<ModelEntry> = (0..8)
            .map(|i| ModelEntry {
                label: format!("l{}", i % 3),
                template: random_template(&mut rng, 2),
            })
            .collect();
        let mut perm: Vec<usize> = (0..2 * BINS).collect();
        perm.shuffle(&mut rng);
        let permute = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let model = RecognizerModel {
            params: params.clone(),
            entries: entries.clone(),
        };
        let permuted = RecognizerModel {
            params: params.clone(),
            entries: entries
                .iter()
                .map(|e| ModelEntry {
                    label: e.label.clone(),
                    template: permute(&e.template),
                })
                .collect(),
        };
        let q = random_template(&mut rng, 2);
        let a = model.predict_template(&FaceTemplate::from_histograms(q.clone())).unwrap();
        let b = permuted.predict_template(&FaceTemplate::from_histograms(permute(&q))).unwrap();
        assert_eq!(a.label, b.label);
        assert!((a.distance - b.distance).abs() <= 1e-12);
    }
}

#[test]
fn constant_shift_leaves_template_unchanged() {
    let params = small_params();
    for seed in 0..20 {
        // Keep every pixel in [30, 200] so shifting never clamps.
        let base = GrayImage::from_fn(40, 40, |x, y| {
            (30 + ((x * 7 + y * 13 + seed * 5) % 171)) as u8
        })
        .unwrap();
        let shift = (seed % 50) as u8 + 1;
        let shifted = GrayImage::new(40, 40, base.pixels().iter().map(|p| p + shift).collect()).unwrap();
        assert_eq!(
            extract_template(&base, &params).unwrap(),
            extract_template(&shifted, &params).unwrap()
        );
        assert_eq!(extract_template(&base, &params).unwrap(), extract_template(&base, &params).unwrap());
    }
}

fn arb_template() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..4).prop_flat_map(|regions| {
        let bins = regions * BINS;
        (
            prop::collection::vec(0.0f64..1.0, bins),
            prop::collection::vec(0.0f64..1.0, bins),
        )
    })
}

proptest! {
    #[test]
    fn chi_square_is_symmetric_and_zero_on_self((a, b) in arb_template()) {
        let (ta, tb) = (FaceTemplate::from_histograms(a), FaceTemplate::from_histograms(b));
        prop_assert_eq!(chi_square_distance(&ta, &tb).unwrap(), chi_square_distance(&tb, &ta).unwrap());
        prop_assert_eq!(chi_square_distance(&ta, &ta).unwrap(), 0.0);
        prop_assert!(chi_square_distance(&ta, &tb).unwrap() >= 0.0);
    }

    #[test]
    fn model_json_round_trip(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let model = RecognizerModel {
            params: small_params(),
            entries: (0..3).map(|i| ModelEntry { label: format!("x{i}"), template: random_template(&mut rng, 16) }).collect(),
        };
        prop_assert_eq!(RecognizerModel::from_json(&model.to_json()).unwrap(), model);
    }
}
