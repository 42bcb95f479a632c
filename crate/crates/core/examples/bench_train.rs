use kvinv::denoiser::{DenoiserConfig, DenoiserWeights};
use kvinv::scheduler::make_schedule;
use kvinv::toyworld::{gen_dataset, train::{train_denoiser, TrainConfig}, VOCAB};
use std::time::Instant;

fn main() {
    let data = gen_dataset(256, 1).unwrap();
    let sched = make_schedule(1000, 50).unwrap();
    let mut w = DenoiserWeights::init(DenoiserConfig::default(), VOCAB.len(), 3).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 64, seed: 0, ..TrainConfig::default() };
    let t0 = Instant::now();
    let report = train_denoiser(&data, &mut w, &sched, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let batches = report.batch_losses.len();
    println!("batches: {batches}, time: {dt:.2}s, per-batch: {:.3}s", dt / batches as f64);
    println!("projected 4096x30 default: {:.1} min", dt / batches as f64 * (4096.0/64.0) * 30.0 / 60.0);
}
