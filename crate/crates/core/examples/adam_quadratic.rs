//! Minimize f(theta) = theta^2 / 2 with the head optimizer on a 1x1 head.
//!
//! ```bash
//! cargo run -p coembed --example adam_quadratic
//! ```

use coembed::optim::AdamState;
use coembed::projhead::{HeadGradients, ProjectionHead};

fn main() -> coembed::Result<()> {
    let mut head = ProjectionHead::identity(1);
    let mut adam = AdamState::with_defaults(&head);
    adam.lr = 0.05;
    for step in 1..=500 {
        let theta = head.layers[0].weights[[0, 0]];
        let mut grads = HeadGradients::zeros_like(&head);
        grads.weights[0][[0, 0]] = theta;
        adam.step(&mut head, &grads)?;
        if step == 1 || step % 100 == 0 {
            println!("step {step:>3}  theta {:+.6e}", head.layers[0].weights[[0, 0]]);
        }
    }
    // fixed temperature is never stepped
    println!("tau still {}", head.tau());
    Ok(())
}
