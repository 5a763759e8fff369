use delorean::checkpoint::load_lm;
use delorean::corpus::{build_story, generate_corpus, RuleTable};
use delorean::model::LMParams;
use delorean::vocab::TokenSeq;

fn cond_nll(lm: &LMParams, prefix: &TokenSeq, z: &TokenSeq) -> f64 {
    let mut ids = prefix.ids.clone();
    ids.extend_from_slice(&z.ids);
    let logits = lm.logits_all(&ids).unwrap();
    let mut nll = 0.0;
    for (k, &t) in z.ids.iter().enumerate() {
        let row = logits.row(prefix.len() + k - 1);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        nll -= row[t] - lse;
    }
    nll
}

fn main() {
    let table = RuleTable::standard();
    let vocab = table.vocab();
    let lm = load_lm(std::path::Path::new("/tmp/calib/lm.json")).unwrap().params;
    let story = &generate_corpus(&table, 3, 1234)[2];
    let x = story.sentences[0].clone();
    let z = story.sentences[4].clone();
    println!("x={} z={}", vocab.decode(&x), vocab.decode(&z));
    for ev in 0..table.events.len() {
        let mut tags = story.tags;
        tags.event = ev;
        let alt = build_story(&table, &vocab, tags);
        let mut y = TokenSeq::default();
        for s in &alt.sentences[1..4] {
            y = y.concat(s);
        }
        let nll = cond_nll(&lm, &x.concat(&y), &z);
        println!(
            "event {:10} nll(Z|X,Y) {:8.3} {}",
            table.events[ev],
            nll,
            if ev == story.tags.event { "<= gold" } else { "" }
        );
    }
}
