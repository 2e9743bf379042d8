// Compare the hand-written actor and critic gradients with central finite
// differences on a reduced network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semabr::nn::{self, Architecture, Features, Layer, Role};

fn main() {
    let arch = Architecture {
        history_len: 4,
        level_count: 3,
        filters: 3,
        kernel: 3,
        scalar_units: 4,
        hidden_units: 6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = nn::init_params(1, arch, Role::Actor);
    let w = nn::init_params(2, arch, Role::Critic);
    let x = Features {
        throughput: (0..4).map(|_| rng.random_range(0.1..3.0)).collect(),
        download: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
        sizes: vec![0.64, 1.28, 2.56],
        scalars: [0.4, 0.5, 0.75],
    };
    let action = 1;
    let eps = 1e-5;

    let analytic = nn::actor_gradients(&theta, &x, action, false).unwrap().log_policy;
    let log_pi = |p: &nn::ParameterSet| nn::actor_probs(p, &x).unwrap()[action].ln();
    report("grad log pi", &theta, analytic.flat(), eps, log_pi);

    let (_, analytic) = nn::critic_gradient(&w, &x, action).unwrap();
    let q = |p: &nn::ParameterSet| nn::critic_values(p, &x).unwrap()[action];
    report("grad q", &w, analytic.flat(), eps, q);

    println!("\nper-layer gradient norms of log pi:");
    let g = nn::actor_gradients(&theta, &x, action, false).unwrap().log_policy;
    for layer in Layer::ALL {
        let norm = g.layer(layer).iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  {:<22} {:>10.3e}", layer.name(), norm);
    }
}

fn report(
    label: &str,
    params: &nn::ParameterSet,
    analytic: &[f64],
    eps: f64,
    f: impl Fn(&nn::ParameterSet) -> f64,
) {
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        plus.flat_mut()[i] += eps;
        let mut minus = params.clone();
        minus.flat_mut()[i] -= eps;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / scale);
    }
    println!("{label}: {} parameters, max relative error {worst:.2e}", params.len());
}
