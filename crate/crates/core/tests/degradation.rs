use pfr_core::degradation::{self, DegradationRecord, LightPass, Level};
use pfr_core::{data, face, rng, ImageBuffer};
use proptest::prelude::*;

fn check_light(p: &LightPass, level: Level) {
    let (r_lo, r_hi) = level.down_factor_range();
    let (d_lo, d_hi) = level.noise_std_range();
    assert!((0.1..=10.0).contains(&p.sigma));
    assert!((r_lo..=r_hi).contains(&p.down_factor));
    assert!((d_lo..=d_hi).contains(&p.noise_std));
    assert!((30..=100).contains(&p.jpeg_quality));
}

#[test]
fn heavy_frequencies_and_intervals() {
    let mut r = rng::stream(2, 0);
    let n = 20_000;
    let mut counts = [0usize; 7];
    for _ in 0..n {
        let rec = degradation::sample_degradation(Level::Heavy, &mut r);
        check_light(&rec.first, Level::Heavy);
        let flags = [
            rec.first.noise,
            rec.first.downsample,
            rec.isp.is_some(),
            rec.motion.is_some(),
            rec.median.is_some(),
            rec.second_pass.is_some(),
            rec.passthrough_hq,
        ];
        for (c, f) in counts.iter_mut().zip(flags) {
            *c += f as usize;
        }
        if let Some(p) = &rec.second_pass {
            check_light(p, Level::Heavy);
        }
        if let Some(m) = rec.motion {
            assert!((3..=15).contains(&m.length) && (0.0..std::f64::consts::PI).contains(&m.angle));
        }
        let s = rec.sinc.expect("heavy always low-passes");
        assert!(s.kernel_size % 2 == 1 && (7..=21).contains(&s.kernel_size));
        rec.validate().unwrap();
    }
    let want = [0.4, 0.7, 0.5, 0.05, 0.1, 0.9, 0.03];
    for (c, p) in counts.iter().zip(want) {
        let f = *c as f64 / n as f64;
        // 5 standard errors
        assert!((f - p).abs() < 5.0 * (p * (1.0 - p) / n as f64).sqrt(), "frequency {f} vs {p}");
    }
}

#[test]
fn light_records_stay_in_light_ranges() {
    let mut r = rng::stream(3, 0);
    for _ in 0..2000 {
        let rec = degradation::sample_degradation(Level::Light, &mut r);
        check_light(&rec.first, Level::Light);
    }
}

#[test]
fn degrade_is_a_pure_function_of_record() {
    let img = face::generate_face(&data::synthetic_params(4, 0), 32, 1).unwrap();
    let mut r = rng::stream(5, 0);
    for _ in 0..20 {
        let rec = degradation::sample_degradation_with(Level::Heavy, 0.0, &mut r);
        let a = degradation::degrade(&img, &rec).unwrap();
        assert_eq!(a, degradation::degrade(&img, &rec).unwrap());
        assert_eq!(a.dims(), img.dims());
    }
    let mut pass = DegradationRecord::minimal(Level::Heavy, 0.1, 100);
    pass.passthrough_hq = true;
    assert_eq!(degradation::degrade(&img, &pass).unwrap(), img);
}

proptest! {
    #[test]
    fn outputs_stay_in_unit_range(seed in any::<u64>(), h in 8usize..24, w in 8usize..24) {
        let mut r = rng::stream(seed, 0);
        let data: Vec<f32> = (0..h * w * 3).map(|_| rng::uniform(&mut r, 0.0, 1.0) as f32).collect();
        let img = ImageBuffer::new(h, w, data).unwrap();
        let rec = degradation::sample_degradation_with(Level::Heavy, 0.0, &mut r);
        let out = degradation::degrade(&img, &rec).unwrap();
        prop_assert_eq!(out.dims(), (h, w));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
