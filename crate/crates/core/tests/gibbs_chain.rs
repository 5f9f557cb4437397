use gcmc::diagnostics::{autocorrelation, batch_means_ess, mean, sample_variance};
use gcmc::gibbs::{estimate, run_chain, GibbsConfig, ProposalSpec};
use gcmc::model::{build_model, ModelConfig};
use gcmc::oracle::{Block, GaussianSetup};
use gcmc::samples::Samples;
use gcmc::test_fn::TestFunction;
use proptest::prelude::*;

fn unit_toy() -> GaussianSetup {
    GaussianSetup::per_block(
        0.0,
        1.0,
        vec![Block {
            mean: 0.0,
            var: 1.0,
            scale: 1.0,
        }],
    )
    .unwrap()
}

fn three_blocks() -> GaussianSetup {
    GaussianSetup::per_block(
        0.5,
        2.0,
        [(1.0, 1.0, 1.0), (-0.5, 0.5, 2.0), (2.0, 1.5, 0.5)]
            .iter()
            .map(|&(mean, var, scale)| Block { mean, var, scale })
            .collect(),
    )
    .unwrap()
}

fn z_chain(setup: &GaussianSetup, lambda: f64, n: usize, seed: u64) -> Vec<f64> {
    run_chain(&setup.model().unwrap(), &GibbsConfig::new(lambda, n, seed)).unwrap().z.column(0)
}

#[test]
fn z_chain_is_invariant_for_pi_lambda_and_ar1() {
    let n = 100_000;
    for (setup, lambda) in [(unit_toy(), 1.0), (three_blocks(), 0.3)] {
        let z = z_chain(&setup, lambda, n, 5);
        let (m, v) = setup.pi_lambda_params(lambda);
        let se = (setup.chain_asymptotic_variance(lambda) / n as f64).sqrt();
        assert!((mean(&z) - m).abs() < 4.0 * se, "mean {} vs {m}", mean(&z));
        // variance of a long AR(1) chain: se of s² ≈ v √(2(1+α²)/((1−α²) n))
        let a = setup.ar1_params(lambda).alpha;
        let se_v = v * (2.0 * (1.0 + a * a) / ((1.0 - a * a) * n as f64)).sqrt();
        assert!((sample_variance(&z) - v).abs() < 4.0 * se_v, "var {} vs {v}", sample_variance(&z));
        let rho = autocorrelation(&z, 3);
        for k in 1..=3 {
            assert!((rho[k] - a.powi(k as i32)).abs() < 0.03, "lag {k}: {} vs {}", rho[k], a.powi(k as i32));
        }
    }
}

#[test]
fn small_lambda_estimate_matches_oracle() {
    let setup = GaussianSetup::n_form(10, 2, 1.0, 1.0, 0.0, 1.0, None).unwrap();
    let lambda = 1e-3;
    let n = 100_000;
    let chain = run_chain(&setup.model().unwrap(), &GibbsConfig::new(lambda, n, 21)).unwrap();
    let est = estimate(&chain, TestFunction::Identity).unwrap()[0];
    let se = (setup.asymptotic_variance(lambda).unwrap() / n as f64).sqrt();
    let (m, _) = setup.pi_lambda_params(lambda);
    assert!((est - m).abs() < 3.0 * se, "{est} vs {m} (se {se})");
}

#[test]
fn permuted_block_order_leaves_moments_unchanged() {
    let setup = three_blocks();
    let model = setup.model().unwrap();
    let n = 100_000;
    let run = |order: Option<Vec<usize>>, seed| {
        let mut c = GibbsConfig::new(0.5, n, seed);
        c.block_order = order;
        run_chain(&model, &c).unwrap().z
    };
    let a = run(None, 1);
    let b = run(Some(vec![2, 0, 1]), 2);
    let stat = |z: &Samples| {
        let col = z.column(0);
        let ess = batch_means_ess(z).unwrap()[0];
        (mean(&col), sample_variance(&col) / ess)
    };
    let ((ma, va), (mb, vb)) = (stat(&a), stat(&b));
    let zscore = (ma - mb) / (va + vb).sqrt();
    // two-sided test at the 1% level
    assert!(zscore.abs() < 2.576, "z = {zscore}");
}

fn logistic() -> gcmc::model::ModelSpec {
    let cfg: ModelConfig = serde_json::from_str(
        r#"{"model": "logistic_regression", "blocks": 4,
            "params": {"synthetic": {"n": 200, "dim": 3, "seed": 7}}}"#,
    )
    .unwrap();
    build_model(&cfg).unwrap()
}

#[test]
fn generic_chain_reports_valid_acceptance() {
    let m = logistic();
    let mut c = GibbsConfig::new(0.05, 300, 3);
    c.inner_steps = 5;
    c.keep_local = true;
    let out = run_chain(&m, &c).unwrap();
    assert_eq!(out.z.len(), 300);
    assert_eq!(out.x.as_ref().unwrap().len(), 300 * 4 * 3);
    assert!(out.acceptance.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!(out.acceptance.iter().all(|a| *a > 0.05), "{:?}", out.acceptance);
    c.proposal = ProposalSpec::Isotropic(0.0);
    assert!(run_chain(&m, &c).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn reruns_and_parallel_sweeps_are_bit_identical(seed in any::<u64>(), lambda in 0.01f64..2.0) {
        let m = logistic();
        let mut c = GibbsConfig::new(lambda, 20, seed);
        c.inner_steps = 2;
        let a = run_chain(&m, &c).unwrap();
        c.parallel = true;
        let b = run_chain(&m, &c).unwrap();
        prop_assert_eq!(a.z.as_flat(), b.z.as_flat());
        prop_assert_eq!(a.acceptance, b.acceptance);
        let g = three_blocks().model().unwrap();
        let x = run_chain(&g, &GibbsConfig::new(lambda, 50, seed)).unwrap();
        let y = run_chain(&g, &GibbsConfig::new(lambda, 50, seed)).unwrap();
        prop_assert_eq!(x.z.as_flat(), y.z.as_flat());
    }
}
