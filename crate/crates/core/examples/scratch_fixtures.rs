use delorean::checkpoint::{save_lm, save_ranker};
use delorean::corpus::{generate_corpus, generate_stories_iid, RuleTable};
use delorean::model::LMShape;
use delorean::ranker::{train_ranker, CoherenceModel};
use delorean::train::{train_lm, TrainConfig};
use delorean::vocab::TokenSeq;
use std::path::Path;

fn main() {
    std::fs::create_dir_all("/tmp/calib").unwrap();
    let table = RuleTable::standard();
    let vocab = table.vocab();

    let seqs: Vec<TokenSeq> = generate_corpus(&table, 500, 2)
        .iter()
        .map(|s| s.full())
        .collect();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 32,
        lr: 1e-3,
        seed: 0,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (lm, stats) = train_lm(&seqs, LMShape::desk(vocab.size()), &cfg).unwrap();
    println!("lm val {:.4} ({:.0}s)", stats.final_val_loss, t0.elapsed().as_secs_f64());
    save_lm(&lm, &vocab, Path::new("/tmp/calib/lm.json")).unwrap();

    let stories = generate_stories_iid(&table, 800, 3);
    let rcfg = TrainConfig {
        epochs: 50,
        batch_size: 32,
        lr: 2e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (ranker, acc) =
        train_ranker(&table, &stories, CoherenceModel::desk_shape(vocab.size()), &rcfg).unwrap();
    println!("ranker acc {acc:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
    save_ranker(&ranker, &vocab, Path::new("/tmp/calib/ranker.json")).unwrap();
}
