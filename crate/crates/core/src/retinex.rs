//! Retinex decomposition: an image is the product of reflectance (color,
//! texture) and a single-channel illumination field. The canonical split
//! takes illumination as the per-pixel maximum over RGB, floored away from
//! zero, which makes the decomposition exactly invertible on [0, 1] inputs.

use ndarray::Array3;

/// H x W x 3, values in [0, 1].
pub type Image = Array3<f64>;

/// Illumination floor; pitch-black pixels divide by this instead of zero.
pub const EPS_L: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct RetinexPair {
    /// H x W x 3 in [0, 1].
    pub reflectance: Array3<f64>,
    /// H x W x 1 in [EPS_L, 1].
    pub illumination: Array3<f64>,
}

pub fn decompose(img: &Image) -> RetinexPair {
    let (h, w, c) = img.dim();
    assert_eq!(c, 3, "decompose expects an RGB image, got {c} channels");
    let mut reflectance = Array3::<f64>::zeros((h, w, 3));
    let mut illumination = Array3::<f64>::zeros((h, w, 1));
    for y in 0..h {
        for x in 0..w {
            let px = [img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]];
            debug_assert!(
                px.iter().all(|v| v.is_finite() && (-1e-9..=1.0 + 1e-9).contains(v)),
                "pixel out of [0,1] at ({y},{x}): {px:?}"
            );
            let l = px.iter().cloned().fold(f64::MIN, f64::max).clamp(EPS_L, 1.0);
            illumination[[y, x, 0]] = l;
            for ch in 0..3 {
                reflectance[[y, x, ch]] = (px[ch] / l).clamp(0.0, 1.0);
            }
        }
    }
    RetinexPair { reflectance, illumination }
}

pub fn recompose(pair: &RetinexPair) -> Image {
    let (h, w, _) = pair.reflectance.dim();
    assert_eq!(pair.illumination.dim(), (h, w, 1), "component shapes disagree");
    let mut img = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let l = pair.illumination[[y, x, 0]];
            for ch in 0..3 {
                img[[y, x, ch]] = (pair.reflectance[[y, x, ch]] * l).clamp(0.0, 1.0);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn known_pixel_decomposes_to_expected_components() {
        // (0.4, 0.8, 0.2): illumination is the channel max, reflectance the
        // ratios, and recomposition gives back 0.8 * 0.5 = 0.4 on the red
        // channel by construction.
        let mut img = Array3::zeros((1, 1, 3));
        img[[0, 0, 0]] = 0.4;
        img[[0, 0, 1]] = 0.8;
        img[[0, 0, 2]] = 0.2;
        let pair = decompose(&img);
        assert_eq!(pair.illumination[[0, 0, 0]], 0.8);
        assert!((pair.reflectance[[0, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((pair.reflectance[[0, 0, 1]] - 1.0).abs() < 1e-12);
        assert!((pair.reflectance[[0, 0, 2]] - 0.25).abs() < 1e-12);
        let back = recompose(&pair);
        assert!((back[[0, 0, 0]] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn black_pixels_hit_the_floor_not_a_division_by_zero() {
        let img = Array3::zeros((2, 2, 3));
        let pair = decompose(&img);
        for v in pair.illumination.iter() {
            assert_eq!(*v, EPS_L);
        }
        for v in pair.reflectance.iter() {
            assert_eq!(*v, 0.0);
        }
        let back = recompose(&pair);
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dim_pixels_below_the_floor_still_round_trip() {
        let mut img = Array3::zeros((1, 1, 3));
        img[[0, 0, 0]] = 0.5 * EPS_L;
        let pair = decompose(&img);
        assert_eq!(pair.illumination[[0, 0, 0]], EPS_L);
        assert!((pair.reflectance[[0, 0, 0]] - 0.5).abs() < 1e-12);
        let back = recompose(&pair);
        assert!((back[[0, 0, 0]] - 0.5 * EPS_L).abs() < 1e-12);
    }

    #[test]
    fn random_images_round_trip_and_stay_in_bounds() {
        let mut rng = crate::rng::stream(3, "retinex-test", 0);
        for _ in 0..20 {
            let img: Image = tensor::rand_uniform(&[9, 7, 3], 0.0, 1.0, &mut rng)
                .to_owned()
                .into_dimensionality()
                .unwrap();
            let pair = decompose(&img);
            assert!(pair.reflectance.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(pair.illumination.iter().all(|&v| (EPS_L..=1.0).contains(&v)));
            let back = recompose(&pair);
            for (a, b) in back.iter().zip(img.iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_holds_for_arbitrary_pixels(px in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let img = Array3::from_shape_vec((2, 2, 3), px).unwrap();
            let pair = decompose(&img);
            let back = recompose(&pair);
            for (a, b) in back.iter().zip(img.iter()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn illumination_dominates_every_channel(px in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let img = Array3::from_shape_vec((2, 2, 3), px).unwrap();
            let pair = decompose(&img);
            for y in 0..2 {
                for x in 0..2 {
                    let l = pair.illumination[[y, x, 0]];
                    for c in 0..3 {
                        prop_assert!(img[[y, x, c]] <= l + 1e-12);
                    }
                }
            }
        }
    }
}
