use ammlab_core::data::{estimate_params, read_klines, KlineSchema, PriceSeries};
use ammlab_core::dp::StateGrid;
use ammlab_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn simulate_prices(params: &MarketParams, n: usize, seed: u64) -> (PriceSeries, PriceSeries) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [[l11, _], [l21, l22]] = params.cholesky();
    let (mut a, mut b) = (vec![100.0], vec![1.0]);
    for _ in 0..n {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        a.push(a.last().unwrap() * (params.mu_a + l11 * z1).exp());
        b.push(b.last().unwrap() * (params.mu_b + l21 * z1 + l22 * z2).exp());
    }
    let ts: Vec<i64> = (0..=n as i64).map(|i| 3_600_000 * i).collect();
    (PriceSeries::new(ts.clone(), a).unwrap(), PriceSeries::new(ts, b).unwrap())
}

#[test]
fn estimates_converge_with_sample_size() {
    let params = MarketParams::default();
    let small = {
        let (a, b) = simulate_prices(&params, 1_000, 41);
        estimate_params(&a, &b).unwrap()
    };
    let (a, b) = simulate_prices(&params, 100_000, 41);
    let large = estimate_params(&a, &b).unwrap();
    assert_eq!(large.bars, 100_001);

    let se_mu = params.sigma_a / (100_000f64).sqrt();
    assert!((large.mu_a - params.mu_a).abs() < 4.0 * se_mu, "{large:?}");
    assert!((large.mu_b - params.mu_b).abs() < 4.0 * params.sigma_b / (100_000f64).sqrt());
    assert!((large.sigma_a / params.sigma_a - 1.0).abs() < 0.01);
    assert!((large.sigma_b / params.sigma_b - 1.0).abs() < 0.01);
    assert!((large.rho - params.rho).abs() < 0.005);
    assert!((large.sigma / params.exchange_rate_volatility() - 1.0).abs() < 0.02);

    // Errors shrink roughly like 1/sqrt(n).
    let err = |e: &data::MarketEstimates| (e.sigma_a / params.sigma_a - 1.0).abs() + (e.rho - params.rho).abs();
    assert!(err(&large) < err(&small), "{} vs {}", err(&large), err(&small));
}

#[test]
fn two_column_layout() {
    let text = "time,close\n1,10\n2,11\n3,12.1\n";
    let schema = KlineSchema { has_header: true, time_column: 0, close_column: 1, ..Default::default() };
    let s = read_klines(text.as_bytes(), &schema).unwrap();
    assert_eq!(s.timestamps, vec![1, 2, 3]);
    assert_eq!(s.closes, vec![10.0, 11.0, 12.1]);
}

#[test]
fn exchange_kline_layout_with_semicolons() {
    let text = "1600000000000;1;2;0.5;1.5;10;1600003599999;15;3;1;1;0\n\
                1600003600000;1.5;2;1.4;1.8;10;1600007199999;15;3;1;1;0\n";
    let schema = KlineSchema { delimiter: b';', ..Default::default() };
    let s = read_klines(text.as_bytes(), &schema).unwrap();
    assert_eq!(s.closes, vec![1.5, 1.8]);
}

#[test]
fn rejects_non_positive_and_unordered_rows() {
    let schema = KlineSchema { time_column: 0, close_column: 1, ..Default::default() };
    let err = read_klines("1,10\n2,-3\n".as_bytes(), &schema).unwrap_err().to_string();
    assert!(err.contains("row 2"), "{err}");
    let err = read_klines("1,10\n2,0\n".as_bytes(), &schema).unwrap_err().to_string();
    assert!(err.contains("row 2"), "{err}");
    assert!(read_klines("2,10\n1,11\n".as_bytes(), &schema).is_err());
}

#[test]
fn default_chain_is_a_probability_and_converges() {
    let params = MarketParams::default();
    let pool = PoolSpec::default();
    let grid = StateGrid::band(pool.f, 101).unwrap();
    let kernel = transition_kernel(&params, &pool, &grid).unwrap();
    for i in 0..kernel.size() {
        let row = kernel.row(i);
        assert!(row.iter().all(|p| *p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "row {i}");
    }
    let dist = stationary(&kernel).unwrap();
    assert!(dist.residual < 1e-10);
    assert!(!dist.degenerate);
    assert!((dist.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // Mass piles up on the band edges, where every large move lands.
    let n = dist.mass.len();
    assert!(dist.mass[0] > dist.mass[n / 2] && dist.mass[n - 1] > dist.mass[n / 2]);
}
