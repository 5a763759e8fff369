use delorean::corpus::{generate_corpus, RuleTable};
use delorean::model::LMShape;
use delorean::train::{train_lm, TrainConfig};
use delorean::vocab::TokenSeq;

fn main() {
    let table = RuleTable::standard();
    let vocab = table.vocab();
    let stories = generate_corpus(&table, 500, 2);
    let seqs: Vec<TokenSeq> = stories.iter().map(|s| s.full()).collect();
    let shape = LMShape::desk(vocab.size());
    for (epochs, lr) in [(30usize, 1e-3), (40, 1e-3)] {
        let cfg = TrainConfig {
            epochs,
            batch_size: 32,
            lr,
            seed: 0,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let (lm, stats) = train_lm(&seqs, shape, &cfg).unwrap();
        println!(
            "epochs={epochs}: val {:.4} ({:.0}s)",
            stats.final_val_loss,
            t0.elapsed().as_secs_f64()
        );

        // Deterministic-continuation check: X = s1..s4, continuation = s5.
        // s5 = "the <object> was <deg> <final> ." is fully rule-determined.
        let held = generate_corpus(&table, 50, 99);
        let mut exact = 0;
        let mut tok_ok = 0usize;
        let mut tok_all = 0usize;
        for s in &held {
            let mut x = TokenSeq::default();
            for sent in &s.sentences[..4] {
                x = x.concat(sent);
            }
            let gold = &s.sentences[4];
            let (tokens, _, _) =
                delorean::decode::greedy_continuation(&lm, &x, gold.len(), 3).unwrap();
            if &tokens == gold {
                exact += 1;
            }
            for (a, b) in tokens.ids.iter().zip(&gold.ids) {
                tok_all += 1;
                if a == b {
                    tok_ok += 1;
                }
            }
        }
        println!(
            "  s5 exact {}/50, token match {}/{}",
            exact, tok_ok, tok_all
        );

        // Event distribution after s1: gold abductive needs near-uniform
        // P(event | s1) so the zero-shot continuation can't cheat.
        let s = &held[0];
        let row = lm.forward_hard(&s.sentences[0]).unwrap();
        // next token after s1 is the actor (s2 starts with actor), two ahead
        // is the event; just report top-3 next-token mass for a feel.
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for &i in &idx[..3] {
            println!(
                "  next-token '{}' p={:.3}",
                vocab.token(i),
                ((row[i] - m).exp()) / z
            );
        }

        // P(event | s1 + actor): the event slot itself. Uniformity here is
        // what keeps the zero-shot abductive baseline honest.
        let mut prefix = s.sentences[0].clone();
        prefix.ids.push(s.sentences[1].ids[0]);
        let row2 = lm.forward_hard(&prefix).unwrap();
        let m2 = row2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z2: f64 = row2.iter().map(|v| (v - m2).exp()).sum();
        let mut ev: Vec<(String, f64)> = (0..row2.len())
            .map(|i| (vocab.token(i).to_string(), ((row2[i] - m2).exp()) / z2))
            .collect();
        ev.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let top: Vec<String> = ev[..6].iter().map(|(t, p)| format!("{t}:{p:.3}")).collect();
        println!("  event slot: {}", top.join(" "));
    }
}
