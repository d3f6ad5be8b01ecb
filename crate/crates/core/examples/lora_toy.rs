//! Train the bundled toy classifier with a rank-2 adapter and emit the loss
//! trajectory and gradient-check report as CSV.
//!
//! Usage: `cargo run -p crisisml-core --example lora_toy -- [out_dir]`

use crisisml_core::lora::{
    grad_check, toy_dataset, toy_layer, toy_train_config, train_toy, write_grad_check_csv,
    write_loss_csv,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "lora_out".to_owned());
    std::fs::create_dir_all(&out_dir)?;

    let seed = 0;
    let dataset = toy_dataset(seed);
    let mut layer = toy_layer(seed);
    let frozen_before = layer.frozen_bits();

    let mut grad_rows = Vec::new();
    for (i, sample) in dataset.iter().take(10).enumerate() {
        grad_rows.push((format!("sample-{i}"), grad_check(&layer, sample)?));
    }

    let trajectory = train_toy(&mut layer, &dataset, &toy_train_config(seed))?;
    assert_eq!(layer.frozen_bits(), frozen_before, "frozen weights moved");

    let loss_path = format!("{out_dir}/loss.csv");
    write_loss_csv(&trajectory, std::fs::File::create(&loss_path)?)?;
    let grad_path = format!("{out_dir}/grad_check.csv");
    write_grad_check_csv(&grad_rows, std::fs::File::create(&grad_path)?)?;

    println!(
        "loss {:.4} -> {:.4} over {} steps ({} trainable parameters)",
        trajectory[0],
        trajectory.last().unwrap(),
        trajectory.len() - 1,
        crisisml_core::lora::param_count(8, 3, 2),
    );
    println!("wrote {loss_path} and {grad_path}");
    Ok(())
}
