use geoflow::grid::{TensorGrid, ValidityMask};
use geoflow::reward::{r_geo, score_pair, FeatureSource, Gating, RewardConfig};
use geoflow::rng::stream;
use geoflow::synth::{inject_perturbation, render_pair, PerturbTarget, PerturbationSpec, SceneSpec};
use proptest::prelude::*;
use rand::Rng;

fn templates(seed: u64) -> [SceneSpec; 3] {
    [SceneSpec::fronto_parallel_template(seed), SceneSpec::inclined_template(seed), SceneSpec::relief_template(seed)]
}

fn wobbled(spec: &SceneSpec, amplitude: f64, seed: u64) -> geoflow::synth::RenderedPair {
    let clean = render_pair(spec, 0).unwrap();
    inject_perturbation(&clean, &PerturbationSpec { wobble_px: amplitude, ..Default::default() }, seed).unwrap()
}

#[test]
fn exact_inputs_attain_the_optimum() {
    for seed in 0..3 {
        for spec in templates(seed).into_iter().chain([SceneSpec::latent_template(seed)]) {
            let pair = render_pair(&spec, 0).unwrap();
            let s = score_pair(&pair.inputs(), FeatureSource::Reference, &RewardConfig::default()).unwrap();
            assert!(s.r_pair.abs() < 1e-6, "{:?}: r_pair {}", spec.geometry, s.r_pair);
        }
    }
}

#[test]
fn reward_strictly_decreases_with_wobble() {
    for seed in 0..3 {
        for spec in templates(seed) {
            let scores: Vec<f64> = [0.0, 0.25, 0.5, 1.0, 2.0]
                .iter()
                .map(|&a| score_pair(&wobbled(&spec, a, seed).inputs(), FeatureSource::Reference, &RewardConfig::default()).unwrap().r_pair)
                .collect();
            assert!(scores.windows(2).all(|w| w[1] < w[0]), "{:?} seed {seed}: {scores:?}", spec.geometry);
        }
    }
}

#[test]
fn composite_is_affine_in_lambda() {
    let pair = wobbled(&SceneSpec::relief_template(2), 1.0, 2);
    let at = |lambda: f64| score_pair(&pair.inputs(), FeatureSource::Reference, &RewardConfig { lambda, ..Default::default() }).unwrap();
    let (s0, s1) = (at(0.0), at(1.0));
    assert_eq!(s0.r_pair, s0.r_dino);
    assert_eq!(s1.r_pair, s1.r_geo);
    let mid = at(0.5);
    assert!((mid.r_pair - (s0.r_pair + 0.5 * (mid.r_geo - mid.r_dino))).abs() < 1e-12);
}

fn random_confidence(h: usize, w: usize, seed: u64) -> TensorGrid {
    let mut rng = stream(seed, &[0xC0]);
    TensorGrid::from_f64(vec![h, w], (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn low_confidence_pixels_never_reach_r_geo() {
    let pair = wobbled(&SceneSpec::inclined_template(1), 1.0, 1);
    let (h, w) = (48, 48);
    let conf = random_confidence(h, w, 1);
    let config = RewardConfig { gating: Gating::Threshold { threshold: 0.5 }, ..Default::default() };
    let scored = |c: &TensorGrid| {
        let mut inputs = pair.inputs();
        inputs.confidence_a = Some(c);
        score_pair(&inputs, FeatureSource::Reference, &config).unwrap()
    };
    let base = scored(&conf);

    // manual exclusion over the ungated valid set
    let ungated = score_pair(&pair.inputs(), FeatureSource::Reference, &RewardConfig { gating: Gating::Off, ..Default::default() }).unwrap();
    let c = conf.to_f64_vec();
    let keep: Vec<bool> = ungated.maps.omega.bits().iter().zip(&c).map(|(&ok, &ci)| ok && ci >= 0.5).collect();
    let manual = r_geo(&ungated.maps.q_geo, &ValidityMask::from_bits(h, w, keep).unwrap(), None, Gating::Off).unwrap();
    assert_eq!(base.r_geo, manual);

    // reshuffling values below the threshold changes nothing
    let mut rng = stream(2, &[0xC1]);
    let shuffled: Vec<f64> = c.iter().map(|&v| if v < 0.5 { rng.random::<f64>() * 0.5 } else { v }).collect();
    let again = scored(&TensorGrid::from_f64(vec![h, w], shuffled).unwrap());
    assert_eq!(base.r_geo, again.r_geo);
}

#[test]
fn emitted_maps_reproduce_r_geo() {
    for (spec, gating) in [
        (SceneSpec::relief_template(0), Gating::Weighted),
        (SceneSpec::latent_template(3).with_camera_shift(0.07), Gating::Threshold { threshold: 0.3 }),
    ] {
        let pair = wobbled(&spec, 2.0, 4);
        let conf = random_confidence(48, 48, 3);
        let mut inputs = pair.inputs();
        inputs.confidence_a = Some(&conf);
        let s = score_pair(&inputs, FeatureSource::Reference, &RewardConfig { gating, ..Default::default() }).unwrap();
        let q = s.maps.q_geo.to_f64_vec();
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &wv) in s.maps.weights.iter().enumerate() {
            assert_eq!(wv > 0.0, s.maps.omega.bits()[i]);
            num += wv * q[i];
            den += wv;
        }
        assert!((num / den - 1.0 - s.r_geo).abs() < 1e-12);
    }
}

fn arb_perturbation() -> impl Strategy<Value = PerturbationSpec> {
    (0.0f64..4.0, 0.0f64..2.0, 0.0f64..0.5, 0.0f64..0.3, any::<bool>()).prop_map(|(wobble_px, texture_drift_px, object_morph, depth_noise_rel, flow)| {
        PerturbationSpec {
            wobble_px,
            texture_drift_px,
            object_morph,
            depth_noise_rel,
            target: if flow { PerturbTarget::Flow } else { PerturbTarget::Appearance },
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn terms_stay_in_range(p in arb_perturbation(), shift in 0.0f64..0.2, seed in 0u64..100, weighted in any::<bool>()) {
        let spec = SceneSpec::latent_template(seed).with_camera_shift(shift);
        let pair = inject_perturbation(&render_pair(&spec, 0).unwrap(), &p, seed).unwrap();
        let conf = random_confidence(48, 48, seed);
        let mut inputs = pair.inputs();
        inputs.confidence_a = Some(&conf);
        inputs.confidence_b = Some(&conf);
        let gating = if weighted { Gating::Weighted } else { Gating::Threshold { threshold: 0.2 } };
        let s = score_pair(&inputs, FeatureSource::Reference, &RewardConfig { gating, ..Default::default() }).unwrap();
        prop_assert!((-1.0..=0.0).contains(&s.r_geo));
        prop_assert!((-2.0..=0.0).contains(&s.r_dino));
        prop_assert!(s.maps.q_geo.to_f64_vec().iter().all(|q| (0.0..=1.0).contains(q)));
    }
}
