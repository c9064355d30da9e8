//! Trains the reference toy diffusion model (and optionally its classifier bank).
//!
//! Usage: cargo run --release --example train_toy -- OUT.ckpt [STEPS] [IMAGES] [BANK.ckpt]

use pixguide::fixtures::{train_toy_bank, train_toy_model, TOY_IMAGES, TOY_STEPS};
use pixguide::train::TrainConfig;

fn main() -> pixguide::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).cloned().unwrap_or_else(|| "toy.ckpt".into());
    let steps = args
        .get(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(TOY_STEPS);
    let count = args
        .get(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(TOY_IMAGES);
    let tc = TrainConfig {
        checkpoint: Some(out.clone().into()),
        ..Default::default()
    };
    let t = std::time::Instant::now();
    let mut acc = 0.0;
    let model = train_toy_model(steps, count, tc, |s, l| {
        acc += l;
        if (s + 1) % 100 == 0 {
            println!(
                "step {:>5}  loss {:.4}  {:.0}s",
                s + 1,
                acc / 100.0,
                t.elapsed().as_secs_f64()
            );
            acc = 0.0;
        }
    })?;
    println!("wrote {out}");
    if let Some(bank_out) = args.get(4) {
        train_toy_bank(&model)?.save(bank_out)?;
        println!("wrote {bank_out}");
    }
    Ok(())
}
