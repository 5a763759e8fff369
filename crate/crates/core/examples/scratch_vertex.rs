use delorean::checkpoint::load_lm;
use delorean::constraints::abductive_loss;
use delorean::corpus::{generate_corpus, make_abductive, GoldSpan, RuleTable};
use delorean::decode::{initialize, DecodeConfig};
use delorean::model::SoftSequence;

fn main() {
    let table = RuleTable::standard();
    let vocab = table.vocab();
    let lm = load_lm(std::path::Path::new("/tmp/calib/lm.json")).unwrap().params;
    let tau_loss: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let story = &generate_corpus(&table, 3, 1234)[2];
    let inst = make_abductive(&vocab, story, 0, GoldSpan::Middle3);
    let x = vocab.encode(&inst.x).unwrap();
    let z = vocab.encode(&inst.z).unwrap();
    let gold_ev = vocab.encode(&inst.gold).unwrap().ids[1];
    let ev_ids: Vec<usize> = table.events.iter().map(|e| vocab.id(e).unwrap()).collect();

    let cfg = DecodeConfig::abductive_default();
    let mut y = initialize(&lm, &x, cfg.n_tokens).unwrap();
    y.logits *= cfg.soft_scale;
    let tau = cfg.soft_scale * tau_loss;

    // True loss landscape over the event-row vertices, other rows soft vs hard.
    for hard_others in [false, true] {
        println!("--- other rows {}", if hard_others { "hard" } else { "soft" });
        let mut base = y.logits.clone();
        if hard_others {
            for r in 0..base.nrows() {
                if r == 1 {
                    continue;
                }
                let am = base
                    .row(r)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                base.row_mut(r).fill(-50.0 * tau);
                base[[r, am]] = 50.0 * tau;
            }
        }
        let mut scored: Vec<(f64, usize)> = Vec::new();
        for &ev in &ev_ids {
            let mut yl = base.clone();
            yl.row_mut(1).fill(-50.0 * tau);
            yl[[1, ev]] = 50.0 * tau;
            let (l, _) = abductive_loss(&lm, &x, &SoftSequence::new(yl), &z, tau, false).unwrap();
            scored.push((l, ev));
        }
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (l, ev) in &scored {
            println!(
                "  {:10} {:9.3} {}",
                vocab.token(*ev),
                l,
                if *ev == gold_ev { "<= gold" } else { "" }
            );
        }
    }

    // Analytic gradient at the soft init point: which events get pushed up?
    let (_, g) = abductive_loss(&lm, &x, &y, &z, tau, false).unwrap();
    let mut ranked: Vec<(f64, usize)> = ev_ids.iter().map(|&ev| (g[[1, ev]], ev)).collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    println!("--- gradient on event row (most pushed-up first)");
    for (gv, ev) in &ranked {
        println!(
            "  {:10} {:12.4} {}",
            vocab.token(*ev),
            gv,
            if *ev == gold_ev { "<= gold" } else { "" }
        );
    }
}
