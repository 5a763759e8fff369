use delorean::checkpoint::{load_lm, load_ranker};
use delorean::constraints::ConstraintSpec;
use delorean::corpus::{generate_corpus, make_abductive, make_counterfactual, GoldSpan, RuleTable};
use delorean::decode::{greedy_continuation, run, segmented_run, DecodeConfig};
use delorean::metrics::rouge_l;
use delorean::model::LMParams;
use delorean::pipeline::instance_seed;
use delorean::ranker::{rank_abductive, rank_counterfactual, sentence_split};
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
    let ranker = load_ranker(std::path::Path::new("/tmp/calib/ranker.json")).unwrap().model;
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let tau_loss: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let tau_kl: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.005);
    let scale: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    println!("tau_loss={tau_loss} tau_kl={tau_kl} scale={scale}");
    let held = generate_corpus(&table, n, 1234);

    // ---- criterion 3: abductive constraint effectiveness ----
    let mut wins = 0;
    let mut init_losses = Vec::new();
    let mut final_losses = Vec::new();
    let t0 = std::time::Instant::now();
    let mut rank_gap = Vec::new(); // criterion 5 data
    for (i, s) in held.iter().enumerate() {
        let inst = make_abductive(&vocab, s, i, GoldSpan::Middle3);
        let x = vocab.encode(&inst.x).unwrap();
        let z = vocab.encode(&inst.z).unwrap();
        let mut dc = DecodeConfig::abductive_default();
        dc.tau_loss = tau_loss;
        dc.soft_scale = scale;
        dc.seed = instance_seed(0, &inst.id);
        let spec = ConstraintSpec::abductive(false);
        let (cands, traces) = run(&lm, &spec, &x, &z, &dc).unwrap();
        assert_eq!(cands.len(), 20);
        let ranked = rank_abductive(&ranker, &x, cands, &z).unwrap();
        let y = &ranked[0].candidate.tokens;
        let xy = x.concat(y);
        let zero = greedy_continuation(&lm, &x, dc.n_tokens, dc.overgen_budget).unwrap().0;
        let xz = x.concat(&zero);
        let nll_y = cond_nll(&lm, &xy, &z);
        let nll_0 = cond_nll(&lm, &xz, &z);
        if nll_y < nll_0 {
            wins += 1;
        }
        init_losses.push(traces[0].initial_loss);
        final_losses.push(traces[0].final_loss);
        let mean_all: f64 =
            ranked.iter().map(|r| r.ranking_score).sum::<f64>() / ranked.len() as f64;
        rank_gap.push((ranked[0].ranking_score, mean_all));
    }
    init_losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
    final_losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "c3: wins {}/{} median init {:.2} final {:.2} ({:.0}s)",
        wins,
        n,
        init_losses[n / 2],
        final_losses[n / 2],
        t0.elapsed().as_secs_f64()
    );
    let top_mean: f64 = rank_gap.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let rand_mean: f64 = rank_gap.iter().map(|p| p.1).sum::<f64>() / n as f64;
    println!("c5: top {:.3} random {:.3}", top_mean, rand_mean);

    // ---- criterion 4: counterfactual minimal edit ----
    let t0 = std::time::Instant::now();
    let mut rouge_full = Vec::new();
    let mut rouge_base = Vec::new();
    let mut coh_full = Vec::new();
    let mut coh_base = Vec::new();
    for (i, s) in held.iter().enumerate() {
        let inst = make_counterfactual(&table, &vocab, s, i, 7000 + i as u64);
        let x = vocab.encode(&inst.x).unwrap();
        let z = vocab.encode(&inst.z).unwrap();
        let segs = sentence_split(&z);
        let spec = ConstraintSpec::counterfactual(tau_kl);
        let mut dc = DecodeConfig::counterfactual_default();
        dc.seed = instance_seed(0, &inst.id);
        let (cands, _) = segmented_run(&lm, &spec, &x, &segs, &dc).unwrap();
        assert_eq!(cands.len(), 8);
        let ranked = rank_counterfactual(&ranker, &x, cands, ).unwrap();
        let y = ranked[0].candidate.tokens.clone();

        // γ=1 / no-backward baseline through the same segmented protocol.
        let mut bc = dc.clone();
        bc.mix_weight = 1.0;
        bc.backward_steps = 0;
        bc.schedule = vec![(1, 0)];
        let (bcands, _) = segmented_run(&lm, &spec, &x, &segs, &bc).unwrap();
        let branked = rank_counterfactual(&ranker, &x, bcands).unwrap();
        let b = branked[0].candidate.tokens.clone();

        rouge_full.push(rouge_l(&y, &z).unwrap().2);
        rouge_base.push(rouge_l(&b, &z).unwrap().2);
        // mean pairwise coherence of the output story
        let coh = |y: &TokenSeq| {
            let mut sents = vec![x.clone()];
            sents.extend(sentence_split(y));
            let mut c = 0.0;
            let mut k = 0.0;
            for w in sents.windows(2) {
                c += ranker.coherence(&w[0], &w[1]).unwrap();
                k += 1.0;
            }
            c / k
        };
        coh_full.push(coh(&y));
        coh_base.push(coh(&b));
    }
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "c4: rouge full {:.3} base {:.3} (diff {:.3}); coh full {:.3} base {:.3} ({:.0}s)",
        m(&rouge_full),
        m(&rouge_base),
        m(&rouge_full) - m(&rouge_base),
        m(&coh_full),
        m(&coh_base),
        t0.elapsed().as_secs_f64()
    );
}
