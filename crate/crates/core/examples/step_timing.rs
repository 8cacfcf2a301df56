//! Times one forward/backward pass of the backbone with prompts attached.
use std::time::Instant;

use pass_core::nn::{Ctx, Mode, ModelConfig, SegModel, TrainPolicy};
use pass_core::prompts::{init_prompts, PassModel, PromptConfig};
use pass_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pass_core::Result<()> {
    let backbone = SegModel::new(ModelConfig::default(), 0)?;
    let prompts = init_prompts(1, &PromptConfig::for_model(&backbone))?;
    let model = PassModel::new(backbone, prompts);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for batch in [1, 8] {
        let x = Tensor::randn(&[batch, 1, 64, 64], 1.0, &mut rng);
        let reps = 5;
        let t = Instant::now();
        for _ in 0..reps {
            let mut ctx = Ctx::new(Mode::Train, TrainPolicy::ALL);
            let xv = ctx.input(&x);
            let y = model.forward(&mut ctx, xv)?;
            let y = ctx.graph.square(y);
            let l = ctx.graph.mean(y);
            ctx.backward(l)?;
        }
        println!(
            "batch {batch}: {:.1} ms per step",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );
        let t = Instant::now();
        for _ in 0..reps {
            model.predict(&x)?;
        }
        println!(
            "batch {batch}: {:.1} ms per eval forward",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );
    }
    Ok(())
}
