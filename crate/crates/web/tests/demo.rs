use copytrans_web::{curves, mask_grid, score, MAX_GRID};

#[test]
fn mask_grid_rows_follow_the_prefix_rule() {
    let g = mask_grid(3, 2).unwrap();
    let expected: Vec<Vec<u8>> = vec![
        vec![1, 1, 1, 0, 0],
        vec![1, 1, 1, 0, 0],
        vec![1, 1, 1, 0, 0],
        vec![1, 1, 1, 1, 0],
        vec![1, 1, 1, 1, 1],
    ];
    assert_eq!(g.rows, expected);
    assert_eq!(g.size, 5);
}

#[test]
fn mask_grid_bounds() {
    assert!(mask_grid(0, 3).is_err());
    assert!(mask_grid(MAX_GRID, 1).is_err());
    assert_eq!(mask_grid(MAX_GRID, 0).unwrap().rows.len(), MAX_GRID);
}

#[test]
fn brevity_penalty_saturates_at_the_scaled_threshold() {
    let c = curves(0.5, "divide", 0.25, 6.0, 12).unwrap();
    assert_eq!(c.bp.len(), 101);
    assert_eq!(c.bp[0], 0.0);
    // copy/c ≥ 1 from copy rate 0.5 upwards.
    assert!(c.bp[50..].iter().all(|&b| b == 1.0));
    assert!(c.bp[1..50].windows(2).all(|w| w[0] < w[1] && w[1] < 1.0));
    // At copy 0.25, r = 0.5 and bp = e^{1 - 2}.
    assert!((c.bp[25] - (-1.0f64).exp()).abs() < 1e-12);
}

#[test]
fn sbwr_bonus_grows_with_length_and_flattens_past_the_target() {
    let c = curves(0.55, "divide", 0.5, 6.0, 30).unwrap();
    assert_eq!(c.sbwr[0], 0.0);
    let gains: Vec<f64> = c.sbwr.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(gains.iter().all(|&g| g > 0.0 && g < 0.5));
    assert!(gains[2] > 0.4 && gains[25] < 0.01);
    assert!(curves(0.55, "divide", 0.0, 6.0, 30)
        .unwrap()
        .sbwr
        .iter()
        .all(|&s| s == 0.0));
}

#[test]
fn curve_arguments_are_checked() {
    assert!(curves(0.0, "divide", 0.25, 6.0, 10).is_err());
    assert!(curves(0.5, "sideways", 0.25, 6.0, 10).is_err());
    assert!(curves(0.5, "power", -1.0, 6.0, 10).is_err());
}

#[test]
fn scoring_matches_hand_counts() {
    let s = score("a b c", "a b d", "x a b y");
    assert!((s.copy[0].unwrap() - 200.0 / 3.0).abs() < 1e-9);
    assert_eq!(s.copy[1], Some(50.0));
    assert_eq!(s.copy[2], Some(0.0));
    assert_eq!(s.copy[3], None);
    assert!((s.rouge1.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert!((s.rouge2.f1 - 0.5).abs() < 1e-12);
    let json = copytrans_web::score_js("a", "a", "a").unwrap();
    assert!(json.contains("\"rouge_l\""));
}
