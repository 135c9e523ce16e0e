//! Compare the analytic loss gradient of a small two-sided head pair against
//! central finite differences.
//!
//! ```bash
//! cargo run -p coembed --example gradient_check
//! ```

use coembed::projhead::{init_head, Activation};
use coembed::trainer::HeadPair;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> coembed::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut a = init_head(&[5, 7, 4], Activation::Relu, 1)?;
    a.learnable_temperature = true;
    a.set_tau(0.2)?;
    let pair = HeadPair {
        a,
        b: Some(init_head(&[6, 4], Activation::Identity, 2)?),
    };
    let xa = Array2::from_shape_simple_fn((4, 5), || -> f64 { StandardNormal.sample(&mut rng) });
    let xb = Array2::from_shape_simple_fn((4, 6), || -> f64 { StandardNormal.sample(&mut rng) });

    let analytic = pair.loss_and_grads(&xa, &xb)?;
    println!("loss {:.6}", analytic.loss);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, g) in analytic.grads_a.values().enumerate() {
        let mut plus = pair.clone();
        let mut minus = pair.clone();
        *plus.a.parameters_mut().nth(k).unwrap() += h;
        *minus.a.parameters_mut().nth(k).unwrap() -= h;
        let fd = (plus.loss(&xa, &xb)? - minus.loss(&xa, &xb)?) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
    }
    println!("head A: {} partials (last one is ln(1/tau)), worst rel err {worst:.2e}", pair.a.num_parameters());
    println!("d loss / d ln(1/tau) = {:.6}", analytic.grads_a.logit_scale);
    Ok(())
}
