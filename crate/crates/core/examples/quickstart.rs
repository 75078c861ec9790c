//! Train a small denoiser on the synthetic set for a few epochs, sample a new
//! group performance and score it.
//!
//! `cargo run --release -p stgdance --example quickstart`

use stgdance::checkpoint::Checkpoint;
use stgdance::data::{conditioning, default_dataset, Style, SynthConfig};
use stgdance::metrics::{MetricReport, DEFAULT_DELTA};
use stgdance::train::{train, TrainConfig, TrainState};
use stgdance::DenoiserConfig;

fn main() -> stgdance::Result<()> {
    let data = default_dataset(0)?;
    let model_cfg = DenoiserConfig {
        d_model: 16,
        ..DenoiserConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 20,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let state = TrainState::fresh(model_cfg, &data, cfg.seed)?;
    let (state, curve) = train(&data, &cfg, state, |_, e| {
        if e.epoch % 5 == 0 {
            println!("epoch {:>2}  loss {:.4}", e.epoch, e.parts.total);
        }
        Ok(())
    })?;
    println!("loss {:.4} -> {:.4}", curve[0].parts.total, curve.last().unwrap().parts.total);

    let ckpt = Checkpoint::from_state(&state, cfg.schedule_spec());
    let music = conditioning(120, Style::Figure8, SynthConfig::short().tempo);
    let motion = ckpt.sample(&music, 3, None, 7, false)?;
    let pc = ckpt.model.config().position_channels;
    let report = MetricReport::compute(&motion, &[], DEFAULT_DELTA, pc)?;
    println!("{}", report.to_json());
    Ok(())
}
