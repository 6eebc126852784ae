use heatprompt::eval::{mae, paired_t_abs_errors, r_squared, tercile_token_trends, uplift_percent};
use heatprompt::semantics::{Factor, SemanticCaption};

fn caption(names: &[&str]) -> SemanticCaption {
    SemanticCaption {
        factors: names
            .iter()
            .map(|n| Factor {
                name: (*n).into(),
                description: String::new(),
                confidence: 0.5,
            })
            .collect(),
        raw_response: String::new(),
        provider_id: "fixture".into(),
    }
}

#[test]
fn identical_captions_give_flat_trends() {
    let caps = vec![caption(&["tree cover", "flat roofs"]); 9];
    let y: Vec<f64> = (0..9).map(f64::from).collect();
    for t in tercile_token_trends(&caps, &y).unwrap() {
        assert_eq!(t.frequencies, [1.0, 1.0, 1.0], "{}", t.token);
    }
}

#[test]
fn rising_token_is_recovered_exactly() {
    // Ten captions per tercile; "dense" appears in 1, 5 and 9 of them.
    let mut caps = Vec::new();
    let mut y = Vec::new();
    for (tercile, with_dense) in [(0, 1), (1, 5), (2, 9)] {
        for k in 0..10 {
            let names: &[&str] = if k < with_dense { &["dense blocks", "roofs"] } else { &["roofs"] };
            caps.push(caption(names));
            y.push((tercile * 10 + k) as f64);
        }
    }
    let trends = tercile_token_trends(&caps, &y).unwrap();
    let dense = trends.iter().find(|t| t.token == "dense").unwrap();
    assert!((trends[0].range() - 0.8).abs() < 1e-12);
    for (got, want) in dense.frequencies.iter().zip([0.1, 0.5, 0.9]) {
        assert!((got - want).abs() < 1e-12);
    }
    let roofs = trends.iter().find(|t| t.token == "roofs").unwrap();
    assert_eq!(roofs.frequencies, [1.0, 1.0, 1.0]);
}

#[test]
fn hand_computed_metrics() {
    assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 0.5);
    assert!((mae(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(uplift_percent(0.4, 0.4), Some(0.0));
    assert_eq!(uplift_percent(0.0, 0.4), None);
    let same = paired_t_abs_errors(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
    assert!(same.degenerate && same.t.is_none());
    let t = paired_t_abs_errors(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
    assert!((t.mean_diff - 2.0).abs() < 1e-15);
    assert!((t.t.unwrap() - 2.0 * 3f64.sqrt()).abs() < 1e-12);
}
