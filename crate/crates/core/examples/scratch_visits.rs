use delorean::checkpoint::{load_lm, load_ranker};
use delorean::constraints::ConstraintSpec;
use delorean::corpus::{build_story, generate_corpus, make_abductive, GoldSpan, RuleTable};
use delorean::decode::{run, DecodeConfig};
use delorean::pipeline::instance_seed;
use delorean::ranker::rank_abductive;
use delorean::vocab::TokenSeq;

fn main() {
    let table = RuleTable::standard();
    let vocab = table.vocab();
    let lm = load_lm(std::path::Path::new("/tmp/calib/lm.json")).unwrap().params;
    let ranker = load_ranker(std::path::Path::new("/tmp/calib/ranker.json")).unwrap().model;
    let tau_loss: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let scale: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let n = 15;
    let held = generate_corpus(&table, n, 1234);

    // Part 1: can the ranker spot the gold-event hypothesis among all ten?
    let mut gold_top = 0;
    for (i, s) in held.iter().enumerate() {
        let x = s.sentences[0].clone();
        let z = s.sentences[4].clone();
        let mut cands = Vec::new();
        for ev in 0..table.events.len() {
            let mut tags = s.tags;
            tags.event = ev;
            let alt = build_story(&table, &vocab, tags);
            let mut y = TokenSeq::default();
            for sent in &alt.sentences[1..4] {
                y = y.concat(sent);
            }
            cands.push(delorean::decode::Candidate {
                tokens: y,
                iteration: ev,
                config_id: 0,
                raw_overgen: TokenSeq::default(),
                incomplete: false,
                score: None,
            });
        }
        let ranked = rank_abductive(&ranker, &x, cands, &z).unwrap();
        if ranked[0].candidate.iteration == s.tags.event {
            gold_top += 1;
        }
        if i < 3 {
            let order: Vec<String> = ranked
                .iter()
                .map(|r| format!("{}:{:.2}", table.events[r.candidate.iteration], r.ranking_score))
                .collect();
            println!("inst {i} gold={} | {}", table.events[s.tags.event], order.join(" "));
        }
    }
    println!("ranker picks gold-event Y: {gold_top}/{n}");

    // Part 2: which events does the decode walk visit?
    let mut visited_gold = 0;
    let mut ranked_gold = 0;
    for (i, s) in held.iter().enumerate() {
        let inst = make_abductive(&vocab, s, i, GoldSpan::Middle3);
        let x = vocab.encode(&inst.x).unwrap();
        let z = vocab.encode(&inst.z).unwrap();
        let mut dc = DecodeConfig::abductive_default();
        dc.tau_loss = tau_loss;
        dc.soft_scale = scale;
        dc.recompute_grad = std::env::args().nth(3).is_some();
        dc.seed = instance_seed(0, &inst.id);
        let spec = ConstraintSpec::abductive(false);
        let (cands, _) = run(&lm, &spec, &x, &z, &dc).unwrap();
        let gold_ev_tok = vocab.encode(&inst.gold).unwrap().ids[1];
        let mut evs: Vec<usize> = cands
            .iter()
            .filter(|c| c.tokens.len() >= 2)
            .map(|c| c.tokens.ids[1])
            .collect();
        let hit = evs.contains(&gold_ev_tok);
        evs.sort_unstable();
        evs.dedup();
        if hit {
            visited_gold += 1;
        }
        let ranked = rank_abductive(&ranker, &x, cands, &z).unwrap();
        if ranked[0].candidate.tokens.len() >= 2 && ranked[0].candidate.tokens.ids[1] == gold_ev_tok
        {
            ranked_gold += 1;
        }
        println!(
            "inst {i}: {} distinct events, gold visited {}",
            evs.len(),
            hit
        );
    }
    println!("gold visited {visited_gold}/{n}, ranked top {ranked_gold}/{n}");
}
