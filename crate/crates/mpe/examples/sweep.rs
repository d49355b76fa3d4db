//! Dev-only sweep over training length and generator settings.
//! Usage: sweep <steps> <corpus_seed> <train_seed> [noise] [width]

use mpe::corpus::{generate_synthetic, split_relations, SynthConfig};
use mpe::encoder::{EncoderConfig, Vocab};
use mpe::episode::EpisodeConfig;
use mpe::eval::evaluate;
use mpe::model::{ModelConfig, MpeModel};
use mpe::numerics::mix_seed;
use mpe::train::{run_training, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(1500, |s| s.parse().unwrap());
    let corpus_seed: u64 = args.get(2).map_or(1234, |s| s.parse().unwrap());
    let train_seed: u64 = args.get(3).map_or(101, |s| s.parse().unwrap());
    let noise: f64 = args.get(4).map_or(0.05, |s| s.parse().unwrap());
    let width: usize = args.get(5).map_or(32, |s| s.parse().unwrap());

    let corpus = generate_synthetic(
        &SynthConfig {
            noise,
            ..Default::default()
        },
        corpus_seed,
    )
    .unwrap();
    let (train, valid, _) = split_relations(&corpus, 10, 5, 5, corpus_seed).unwrap();
    let vocab = Vocab::build(&[&train, &valid]);
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            width,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut model = MpeModel::new(cfg, vocab, train_seed).unwrap();
    let tcfg = TrainConfig {
        steps,
        seed: train_seed,
        eval_every: 250,
        val_episodes: 10,
        ..Default::default()
    };
    let started = std::time::Instant::now();
    run_training(&mut model, &train, Some(&valid), &tcfg).unwrap();
    let summary = evaluate(
        &model,
        &valid,
        &EpisodeConfig {
            n_way: 5,
            k_shot: 5,
            r_query: 5,
            seed: mix_seed(train_seed, 0xACCE),
        },
        30,
    )
    .unwrap();
    println!(
        "steps={steps} corpus={corpus_seed} seed={train_seed} noise={noise} width={width} -> entity {:.3} relation {:.3} triple {:.3} ({:.0}s)",
        summary.entity_mean,
        summary.relation_mean,
        summary.triple_mean,
        started.elapsed().as_secs_f64()
    );

    // gold-span probe: replace decoded spans by gold at eval time to see
    // how much span errors cost the relation metric
    let probe = evaluate_gold_spans(&model, &valid, train_seed);
    println!("  gold-span relation F1 {probe:.3}");
}

fn evaluate_gold_spans(model: &MpeModel, corpus: &mpe::corpus::Corpus, seed: u64) -> f64 {
    use mpe::episode::sample_episode;
    let mut correct = 0usize;
    let mut total = 0usize;
    for idx in 0..30u64 {
        let episode = sample_episode(
            corpus,
            &EpisodeConfig {
                n_way: 5,
                k_shot: 5,
                r_query: 5,
                seed: mix_seed(mix_seed(seed, 0xACCE), idx),
            },
        )
        .unwrap();
        // relation accuracy conditioned on correctly decoded spans:
        // shows whether relation errors co-occur with span errors
        let preds = model.predict_episode(&episode).unwrap();
        for (q, p) in episode.query.iter().zip(&preds) {
            if p.head_span == q.head_span && p.tail_span == q.tail_span {
                total += 1;
                if p.relation == q.relation {
                    correct += 1;
                }
            }
        }
    }
    correct as f64 / total.max(1) as f64
}
