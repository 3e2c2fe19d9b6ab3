use proptest::prelude::*;

use bracketforge::evalharness::{bracket_consistency_psnr, extract_brackets};
use bracketforge::guidance::{lambda_at, LambdaMode};
use bracketforge::histogram::{soft_histogram, SoftHistogramSpec};
use bracketforge::image::{HdrImage, Image};
use bracketforge::merge::io::{read_pfm, write_pfm};
use bracketforge::merge::{merge_stack, tonemap, weight, MergeWeightSpec, ToneMapKind};
use bracketforge::radiometry::Crf;

const EVS: [f64; 5] = [-4.0, -2.0, 0.0, 2.0, 4.0];

fn image(h: usize, w: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Image> {
    prop::collection::vec(lo..hi, h * w * c).prop_map(move |v| Image::from_vec(h, w, c, v).unwrap())
}

/// Radiance spanning about 12 stops.
fn radiance() -> impl Strategy<Value = HdrImage> {
    image(6, 5, 3, -8.0, 4.0).prop_map(|im| HdrImage::new(im.map(f64::exp2)).unwrap())
}

fn crf() -> impl Strategy<Value = Crf> {
    prop_oneof![
        (1.5f64..3.0).prop_map(|g| Crf::gamma(g).unwrap()),
        (0.3f64..1.0, 0.5f64..1.2).prop_map(|(b, g)| Crf::parametric(b, g).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_histogram_is_a_distribution(img in image(4, 7, 3, 0.0, 1.0), bins in 2usize..24, bw in 0.0f64..0.2) {
        let spec = SoftHistogramSpec { bins, bandwidth: bw };
        let h = soft_histogram(&img, &spec).unwrap();
        prop_assert_eq!(h.channels.len(), 3);
        for row in &h.channels {
            prop_assert_eq!(row.len(), bins);
            prop_assert!(row.iter().all(|m| *m >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_stays_in_range(total in 1usize..2000, t in 0usize..2000, lambda0 in 0.0f64..50.0) {
        let t = t.min(total);
        for mode in [LambdaMode::Constant, LambdaMode::TimeQuadratic] {
            let l = lambda_at(t, total, mode, lambda0);
            prop_assert!((0.0..=lambda0).contains(&l));
            if t > 0 {
                prop_assert!(lambda_at(t - 1, total, mode, lambda0) >= l);
            }
        }
        prop_assert_eq!(lambda_at(0, total, LambdaMode::TimeQuadratic, lambda0), lambda0);
    }

    #[test]
    fn merge_recovers_extracted_radiance(hdr in radiance(), crf in crf()) {
        let stack = extract_brackets(&hdr, &EVS, &crf).unwrap();
        let spec = MergeWeightSpec::default();
        let merged = merge_stack(&stack, &crf, &spec).unwrap();
        for (i, (&m, &r)) in merged.image().data().iter().zip(hdr.image().data()).enumerate() {
            prop_assert!(m.is_finite() && m >= 0.0);
            let exposed = stack.brackets().iter().any(|b| weight(b.image.data()[i], &spec) > 0.0);
            if exposed {
                prop_assert!(((m - r) / r).abs() < 1e-9, "sample {}: merged {} vs {}", i, m, r);
            }
        }
    }

    #[test]
    fn extracted_stacks_are_consistent(hdr in radiance(), crf in crf()) {
        let stack = extract_brackets(&hdr, &EVS, &crf).unwrap();
        prop_assert!(bracket_consistency_psnr(&stack, &crf).unwrap() > 80.0);
    }

    #[test]
    fn tonemap_stays_in_unit_range(hdr in radiance(), exposure in 0.01f64..100.0, crf in crf()) {
        let ldr = tonemap(&hdr, exposure, ToneMapKind::ReinhardGamma, &crf).unwrap();
        prop_assert!(ldr.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pfm_round_trips_f32_values(hdr in radiance()) {
        let hdr = HdrImage::new(hdr.image().map(|v| v as f32 as f64)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pfm");
        write_pfm(&path, &hdr).unwrap();
        prop_assert_eq!(read_pfm(&path).unwrap(), hdr);
    }
}
