//! Trains on a small synthetic corpus and prints per-epoch metrics.

use std::time::Instant;

use comer::belief::compute_frequencies;
use comer::data::{gen_synthetic, SynthSpec};
use comer::embeddings::EmbeddingSource;
use comer::model::{Model, ModelConfig};
use comer::training::{train, OptimizerKind, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let arg = |i: usize, d: f64| args.get(i).copied().unwrap_or(d);
    let corpus = gen_synthetic(SynthSpec { domains: 2, slots: 3, values: 6 }, 64, 7);
    let d_e = arg(0, 64.0) as usize;
    let table = corpus.vocabulary().build_table(&EmbeddingSource::Pseudo { dim: d_e, seed: 1 })?;
    let freq = compute_frequencies(corpus.labels());
    let config = ModelConfig { d_m: 64, d_e, dropout: arg(1, 0.0), ..ModelConfig::default() };
    let model = Model::new(config, 1)?;
    let cfg = TrainConfig {
        lr: arg(2, 0.003),
        batch_size: arg(3, 8.0) as usize,
        epochs: arg(4, 200.0) as usize,
        seed: 1,
        optimizer: if arg(5, 0.0) > 0.0 { OptimizerKind::Amsgrad } else { OptimizerKind::Adam },
        ..TrainConfig::default()
    };
    println!("turns {} table {} params {}", corpus.num_turns(), table.len(), model.num_scalars());
    let start = Instant::now();
    train(model, &cfg, &corpus, &corpus, &table, &freq, |m, _| {
        let v = m.valid.unwrap();
        println!(
            "epoch {:3} loss {:8.4} jd {:.3} jds {:.3} jg {:.3} t {:.1}s",
            m.epoch,
            m.loss,
            v.jd,
            v.jds,
            v.jg,
            start.elapsed().as_secs_f64()
        );
        v.jg < 0.95
    })?;
    Ok(())
}
