use subfinsler_web::{distance_field_values, dual_unit_ball_values, wave_snapshot_values};

#[test]
fn diagonal_distance_is_l1_in_row_order() {
    let d = distance_field_values("diagonal-shift", 8, 2.0, 1).unwrap();
    assert_eq!(d.len(), 81);
    // Row 0 is y = -2; column 3 is x = -0.5.
    assert_eq!(d[3], 2.5);
    assert_eq!(d[4 * 9 + 4], 0.0);
    assert!(distance_field_values("diagonal-shift", 7, 2.0, 1).is_err());
    assert!(distance_field_values("nope", 8, 2.0, 1).is_err());
}

#[test]
fn dual_ball_of_max_norm_is_the_l1_diamond() {
    let pts = dual_unit_ball_values("diagonal-shift", 0.0, 0.0, 16).unwrap();
    for p in pts.chunks(2) {
        assert!((p[0].abs() + p[1].abs() - 1.0).abs() < 1e-9, "{p:?}");
    }
}

#[test]
fn grushin_dual_ball_is_flat_where_u_vanishes() {
    // At x = 0 the vertical direction is not reachable, so the ball is the
    // horizontal segment [-1, 1].
    let pts = dual_unit_ball_values("grushin-pair", 0.0, 0.3, 8).unwrap();
    assert!(pts.chunks(2).all(|p| p[1].abs() < 1e-12));
    assert!((pts[0] - 1.0).abs() < 1e-9);
}

#[test]
fn wave_snapshot_keeps_mass_and_moves() {
    let cells = 32;
    let start = wave_snapshot_values("diagonal-shift", cells, 0.0, 0.15).unwrap();
    let later = wave_snapshot_values("diagonal-shift", cells, 0.25, 0.15).unwrap();
    let mass = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    assert!((mass(&start) - mass(&later)).abs() < 1e-6 * mass(&start));
    let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    // The first component moves along +x by t = 0.25, four cells.
    assert_eq!(argmax(&later), argmax(&start) + 4);
    // Euclidean is not self-adjoint as given and is doubled.
    assert_eq!(wave_snapshot_values("euclidean", 16, 0.1, 0.2).unwrap().len(), 256);
}
