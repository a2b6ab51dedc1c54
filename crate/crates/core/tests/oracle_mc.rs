//! The quadrature oracles against plain sample averages over many draws.

use ivate::simulator::{
    efficient_influence, generate, marginal_p_z, oracle_efficiency_bound, DgpConfig,
};

#[test]
fn efficiency_bound_matches_sample_average_of_squared_influence() {
    for cfg in [
        DgpConfig::reference(1_000_000, 77),
        DgpConfig::mild(1_000_000, 78),
    ] {
        let data = generate(&cfg).unwrap();
        let mc = (0..data.n())
            .map(|i| {
                efficient_influence(&cfg, data.d[i], data.z[i], data.x[(i, 0)], data.y[i]).powi(2)
            })
            .sum::<f64>()
            / data.n() as f64;
        let v = oracle_efficiency_bound(&cfg).unwrap();
        assert!((mc - v).abs() <= 0.01 * v, "mc {mc}, quadrature {v}");
    }
}

#[test]
fn instrument_share_matches_marginal() {
    let cfg = DgpConfig::reference(1_000_000, 79);
    let data = generate(&cfg).unwrap();
    let share = data.n_instrumented() as f64 / data.n() as f64;
    assert!((share - marginal_p_z(&cfg)).abs() <= 0.002);
    // a₀ = 0 and X symmetric about 0 give exactly one half
    assert!((marginal_p_z(&cfg) - 0.5).abs() <= 1e-12);
}
