use delorean::corpus::{generate_corpus, generate_stories_iid, RuleTable};
use delorean::ranker::{train_ranker, CoherenceModel};
use delorean::train::TrainConfig;
use delorean::vocab::TokenSeq;

fn main() {
    let table = RuleTable::standard();
    let v = table.vocab();
    let stories = generate_stories_iid(&table, 300, 3);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 32,
        lr: 2e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (model, acc) = train_ranker(&table, &stories, CoherenceModel::desk_shape(v.size()), &cfg).unwrap();
    println!("final acc {acc:.4} ({:.0}s)", t0.elapsed().as_secs_f64());

    let held: Vec<Vec<TokenSeq>> = generate_corpus(&table, 30, 77)
        .into_iter()
        .map(|s| s.sentences)
        .collect();
    let mut pos = [0.0f64; 4];
    let mut neg = [0.0f64; 4];
    for (k, s) in held.iter().enumerate() {
        for i in 0..4 {
            pos[i] += model.coherence(&s[i], &s[i + 1]).unwrap();
            let other = &held[(k + 13) % held.len()];
            neg[i] += model.coherence(&s[i], &other[i + 1]).unwrap();
        }
    }
    let n = held.len() as f64;
    for i in 0..4 {
        println!("pos {} adjacent {:.4} cross {:.4}", i, pos[i] / n, neg[i] / n);
    }
    println!(
        "adjacent {:.4} cross {:.4}",
        pos.iter().sum::<f64>() / (4.0 * n),
        neg.iter().sum::<f64>() / (4.0 * n)
    );
}
