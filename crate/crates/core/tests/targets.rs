use proptest::prelude::*;

use sbsampler::rng::{NoiseStream, Purpose};
use sbsampler::stats::{mean, std_pop};
use sbsampler::targets::{adaptive_simpson, ground_truth, make_target, TargetName};

proptest! {
    #[test]
    fn log_densities_are_finite(x in -20.0f64..20.0, y in -20.0f64..20.0) {
        for name in TargetName::ALL {
            let (t, p) = make_target(name);
            prop_assert!(t.log_mu(&[x, y]).is_finite());
            prop_assert!(p.log_nu(&[x, y]).is_finite());
        }
    }

    #[test]
    fn targets_are_symmetric_under_reflection(x in -6.0f64..6.0, y in -6.0f64..6.0) {
        for name in [TargetName::StandardNormal, TargetName::Gmm9, TargetName::DoubleWell] {
            let (t, _) = make_target(name);
            let a = t.log_mu(&[x, y]);
            prop_assert!((a - t.log_mu(&[-x, -y])).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn names_round_trip() {
    for name in TargetName::ALL {
        assert_eq!(name.as_str().parse::<TargetName>().unwrap(), name);
    }
}

#[test]
fn normalized_targets_integrate_to_one() {
    for name in [TargetName::StandardNormal, TargetName::Gmm9, TargetName::Funnel] {
        let (t, _) = make_target(name);
        let truth = ground_truth(name);
        let inner = |x: f64| {
            move |y: f64| t.log_mu(&[x, y]).exp()
        };
        // inner range wide enough for the funnel's conditional scale exp(x/2)
        let half_width = |x: f64| match name {
            TargetName::Funnel => 12.0 * (x / 2.0).exp(),
            _ => 15.0,
        };
        let (lo, hi) = match name {
            TargetName::Funnel => (-40.0, 40.0),
            _ => (-15.0, 15.0),
        };
        let z = adaptive_simpson(
            &|x| adaptive_simpson(&inner(x), -half_width(x), half_width(x), 1e-10),
            lo,
            hi,
            1e-8,
        );
        assert!((z.ln() - truth.log_z).abs() < 1e-4, "{name}: {z}");
    }
}

#[test]
fn exact_draws_match_ground_truth() {
    for name in TargetName::ALL {
        let (t, _) = make_target(name);
        let truth = ground_truth(name);
        let n = 40_000;
        let xs = t.sample(n, &NoiseStream::new(3, Purpose::Other(1), 0));
        for j in 0..2 {
            let col: Vec<f64> = xs.chunks_exact(2).map(|p| p[j]).collect();
            let sd = truth.stddev[j];
            // funnel tails are heavy; compare on a looser scale
            let tol = if name == TargetName::Funnel { 0.3 } else { 0.05 };
            assert!((mean(&col) - truth.mean[j]).abs() < tol * sd, "{name} mean");
            assert!((std_pop(&col) / sd - 1.0).abs() < tol, "{name} sd {}", std_pop(&col));
        }
    }
}
