use delorean::checkpoint::load_lm;
use delorean::constraints::ConstraintSpec;
use delorean::corpus::{generate_corpus, make_abductive, GoldSpan, RuleTable};
use delorean::decode::{backward_pass, forward_pass, initialize, DecodeConfig};
use delorean::vocab::TokenSeq;

fn main() {
    let table = RuleTable::standard();
    let vocab = table.vocab();
    let lm = load_lm(std::path::Path::new("/tmp/calib/lm.json")).unwrap().params;
    let tau_loss: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let story = &generate_corpus(&table, 3, 1234)[2];
    let inst = make_abductive(&vocab, story, 0, GoldSpan::Middle3);
    let x = vocab.encode(&inst.x).unwrap();
    let z = vocab.encode(&inst.z).unwrap();
    let gold = vocab.encode(&inst.gold).unwrap();
    let gold_event = gold.ids[1]; // s2 = actor event .
    println!("x={:?} z={:?} gold_event={} ({})", inst.x, inst.z, gold_event, vocab.token(gold_event));

    let mut cfg = DecodeConfig::abductive_default();
    cfg.tau_loss = tau_loss;
    if let Some(s) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        cfg.soft_scale = s;
    }
    let spec = ConstraintSpec::abductive(false).soft_scaled(cfg.soft_scale);
    let mut y = initialize(&lm, &x, cfg.n_tokens).unwrap();
    y.logits *= cfg.soft_scale;
    for t in 0..20 {
        let (y_b, loss, gnorm) = backward_pass(
            &lm, &spec, &x, &y, &z, cfg.step_size, cfg.backward_steps, false,
            cfg.soft_scale * cfg.tau_loss,
        )
        .unwrap();
        y = forward_pass(&lm, &x, &y_b, cfg.mix_weight, cfg.tau_input, cfg.soft_scale).unwrap();
        let row = y.logits.row(1);
        let am = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        println!(
            "t={t:2} loss {loss:8.2} |g| {gnorm:8.3} event row: gold {:.3} argmax {} {:.3} tokens {:?}",
            row[gold_event],
            vocab.token(am),
            row[am],
            vocab.decode(&TokenSeq::new(y.argmax_tokens().ids[..3].to_vec()))
        );
    }
}
