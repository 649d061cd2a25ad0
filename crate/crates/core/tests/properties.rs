use std::sync::Arc;

use proptest::prelude::*;

use sdlab::data::PointCorpus;
use sdlab::denoiser::{
    cfg_combine, convert_eps_to_v, convert_v_to_eps, ClassOracle, Condition, GuidanceSpec,
    NoisePredictor,
};
use sdlab::distill::{grad_asd_with_shift, grad_csd, DistillInputs, DistillationObjective, ObjectiveKind};
use sdlab::rng::{normal_mat, stream, Stream};
use sdlab::schedule::{
    anneal_range, build_schedule, diffuse, sample_shift, sample_timestep, AnnealPlan, BetaFamily,
    NoiseSchedule, ShiftMode, ShiftPolicy, TimestepRange,
};

fn ddpm() -> Arc<NoiseSchedule> {
    Arc::new(build_schedule(1000, BetaFamily::Linear).unwrap())
}

fn point_oracle(s: &Arc<NoiseSchedule>) -> ClassOracle {
    let c = PointCorpus::default_2d();
    ClassOracle::new(c.classes().to_vec(), c.unconditional(), s.clone()).unwrap()
}

fn family() -> impl Strategy<Value = BetaFamily> {
    prop_oneof![Just(BetaFamily::Linear), Just(BetaFamily::Cosine)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_variance_preserving_and_monotone(total in 2usize..3000, fam in family()) {
        let s = build_schedule(total, fam).unwrap();
        for t in 0..total {
            let (a, sg) = (s.alpha(t), s.sigma(t));
            prop_assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
            prop_assert!(a > 0.0 && a <= 1.0);
            if t > 0 {
                prop_assert!(a < s.alpha(t - 1));
            }
        }
    }

    #[test]
    fn diffuse_follows_the_forward_marginal(t in 0usize..1000, seed in any::<u64>()) {
        let s = ddpm();
        let mut rng = stream(seed, Stream::Noise);
        let x = normal_mat(&mut rng, 3, 4);
        let e = normal_mat(&mut rng, 3, 4);
        let xt = diffuse(&s, &x, &e, t).unwrap();
        let want = x.scale(s.alpha(t)).add(&e.scale(s.sigma(t)));
        prop_assert!(xt.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn shift_is_bounded_by_its_window(
        t_min in 0usize..500,
        width in 0usize..499,
        offset in 0usize..1000,
        eta in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let t_max = t_min + width;
        let t = t_min + offset % (width + 1);
        let range = TimestepRange::new(t_min, t_max, 1000).unwrap();
        let upper = (eta * (t - t_min) as f64 + 1e-9).floor() as usize;
        let mut rng = stream(seed, Stream::Shift);
        let uni = ShiftPolicy::new(ShiftMode::Uniform, eta).unwrap();
        let det = ShiftPolicy::new(ShiftMode::Deterministic, eta).unwrap();
        for _ in 0..20 {
            let dt = sample_shift(uni, t, range, 1000, &mut rng).unwrap();
            prop_assert!(dt <= upper);
            prop_assert!(t + dt <= 999);
        }
        let rounded = (eta * (t - t_min) as f64).round() as usize;
        prop_assert_eq!(sample_shift(det, t, range, 1000, &mut rng).unwrap(), rounded.min(999 - t));
        prop_assert_eq!(sample_shift(ShiftPolicy::none(), t, range, 1000, &mut rng).unwrap(), 0);
    }

    #[test]
    fn guidance_is_affine_in_scale(s1 in 0.0f64..20.0, s2 in 0.0f64..20.0, lam in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::Noise);
        let c = normal_mat(&mut rng, 4, 3);
        let u = normal_mat(&mut rng, 4, 3);
        let f = |s: f64| cfg_combine(&c, &u, GuidanceSpec::new(s).unwrap()).unwrap();
        let mix = f(lam * s1 + (1.0 - lam) * s2);
        let blend = f(s1).scale(lam).add(&f(s2).scale(1.0 - lam));
        prop_assert!(mix.max_abs_diff(&blend) < 1e-9);
        prop_assert_eq!(f(1.0), c.clone());
        prop_assert_eq!(f(0.0), u.clone());
    }

    #[test]
    fn velocity_conversion_round_trips(t in 0usize..1000, seed in any::<u64>()) {
        let s = ddpm();
        let mut rng = stream(seed, Stream::Noise);
        let x = normal_mat(&mut rng, 5, 3);
        let e = normal_mat(&mut rng, 5, 3);
        let xt = diffuse(&s, &x, &e, t).unwrap();
        let ts = vec![t; 5];
        let v = convert_eps_to_v(&e, &xt, &ts, &s).unwrap();
        // v = α ε − σ x for the clean sample that produced x_t.
        let v_true = e.scale(s.alpha(t)).sub(&x.scale(s.sigma(t)));
        prop_assert!(v.max_abs_diff(&v_true) < 1e-9);
        let back = convert_v_to_eps(&v, &xt, &ts, &s).unwrap();
        prop_assert!(back.max_abs_diff(&e) < 1e-9);
    }

    #[test]
    fn unshifted_asd_is_scaled_csd(scale in 0.0f64..15.0, seed in any::<u64>(), t in 20usize..980) {
        let s = ddpm();
        let o = point_oracle(&s);
        let mut rng = stream(seed, Stream::Noise);
        let n = 6;
        let x = normal_mat(&mut rng, n, 2);
        let eps = normal_mat(&mut rng, n, 2);
        let ts = vec![t; n];
        let conds: Vec<Condition> = (0..n).map(|i| Condition::class(i % 5)).collect();
        let inp = DistillInputs { x: &x, ts: &ts, eps: &eps, conds: &conds };
        let obj = DistillationObjective::new(ObjectiveKind::Asd);
        let asd = grad_asd_with_shift(
            &o, &s, inp, GuidanceSpec::new(scale).unwrap(), GuidanceSpec::new(1.0).unwrap(),
            &vec![0; n], obj.weight,
        ).unwrap();
        let csd = grad_csd(&o, &s, inp, obj.weight).unwrap();
        let want = csd.coefficient.scale(scale - 1.0);
        let tol = 1e-9 * (1.0 + want.norm());
        prop_assert!(asd.coefficient.max_abs_diff(&want) <= tol);
    }

    #[test]
    fn anneal_stays_between_endpoints(iter in 0usize..=500) {
        let plan = AnnealPlan { t_min_start: 500, t_min_end: 20, t_max_start: 980, t_max_end: 500, total_iters: 500 };
        let r = anneal_range(&plan, iter, 1000).unwrap();
        prop_assert!((20..=500).contains(&r.t_min()));
        prop_assert!((500..=980).contains(&r.t_max()));
        prop_assert!(r.t_min() <= r.t_max());
    }
}

#[test]
fn deterministic_shift_rounds_while_uniform_support_floors() {
    let range = TimestepRange::new(20, 980, 1000).unwrap();
    let mut rng = stream(0, Stream::Shift);
    let det = ShiftPolicy::new(ShiftMode::Deterministic, 0.1).unwrap();
    let uni = ShiftPolicy::new(ShiftMode::Uniform, 0.1).unwrap();
    assert_eq!(sample_shift(det, 25, range, 1000, &mut rng).unwrap(), 1);
    assert_eq!(sample_shift(det, 34, range, 1000, &mut rng).unwrap(), 1);
    assert_eq!(sample_shift(det, 35, range, 1000, &mut rng).unwrap(), 2);
    assert!((0..1000).all(|_| sample_shift(uni, 29, range, 1000, &mut rng).unwrap() == 0));
}

#[test]
fn timestep_draws_are_uniform_on_the_range() {
    let range = TimestepRange::new(20, 980, 1000).unwrap();
    let mut rng = stream(3, Stream::Timestep);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_timestep(range, &mut rng) as f64).sum::<f64>() / n as f64;
    // Discrete uniform on 961 values: variance (961² − 1) / 12.
    let sd = ((961.0f64 * 961.0 - 1.0) / 12.0).sqrt() / (n as f64).sqrt();
    assert!((mean - 500.0).abs() < 3.0 * sd, "mean {mean}");
}

#[test]
fn oracle_predictions_are_deterministic() {
    let s = ddpm();
    let o = point_oracle(&s);
    let mut rng = stream(11, Stream::Noise);
    let x = normal_mat(&mut rng, 32, 2);
    let ts: Vec<usize> = (0..32).map(|i| 20 + 30 * i).collect();
    let conds: Vec<Condition> = (0..32).map(|i| if i % 6 == 5 { Condition::null() } else { Condition::class(i % 5) }).collect();
    let a = o.predict_noise(&x, &ts, &conds).unwrap();
    let b = o.predict_noise(&x, &ts, &conds).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());
}
