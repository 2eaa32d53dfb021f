use invguard::latent_edit::{conditional_direction, conditional_semantic, edit_along, edit_latent, SemanticDirection};
use invguard::LatentCode;
use proptest::prelude::*;

fn unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim)
        .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        .prop_map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> {
    (2usize..40).prop_flat_map(|d| (unit(d), unit(d), prop::collection::vec(-3.0f64..3.0, d), -2.0f64..2.0, -5.0f64..5.0))
}

fn direction(normal: Vec<f64>, bias: f64) -> SemanticDirection {
    SemanticDirection {
        normal,
        attribute_tag: "t".into(),
        separator_bias: bias,
        training_accuracy: 1.0,
        reliable: true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn conditional_edits_preserve_the_condition((n1, n2, z, bias, alpha) in pair()) {
        let v = conditional_direction(&n1, &n2).unwrap();
        let inner: f64 = v.iter().zip(&n2).map(|(a, b)| a * b).sum();
        prop_assert!(inner.abs() < 1e-6);
        let cond = direction(n2.clone(), bias);
        let z = LatentCode(z);
        let moved = edit_along(&z, &v, alpha).unwrap();
        let shift = cond.signed_distance(&moved).unwrap() - cond.signed_distance(&z).unwrap();
        prop_assert!(shift.abs() < 1e-6);
        if let Ok(sem) = conditional_semantic(&direction(n1, 0.0), &cond) {
            let moved = edit_latent(&z, &sem, alpha).unwrap();
            let shift = cond.signed_distance(&moved).unwrap() - cond.signed_distance(&z).unwrap();
            prop_assert!(shift.abs() < 1e-6);
        }
    }

    #[test]
    fn edits_move_signed_distance_by_alpha((n1, _n2, z, bias, alpha) in pair()) {
        let d = direction(n1, bias);
        let z = LatentCode(z);
        let moved = edit_latent(&z, &d, alpha).unwrap();
        prop_assert!((d.signed_distance(&moved).unwrap() - d.signed_distance(&z).unwrap() - alpha).abs() < 1e-9);
    }
}
