//! Next-sentence coherence classifier and the task ranking scores.
//!
//! The classifier reuses the transformer body as an encoder over
//! `<bos> A <sep> B` and reads a 2-way head off the last position; its
//! positive-class probability is the coherence score c(A, B) in [0, 1].

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_story, RuleTable, Story};
use crate::decode::Candidate;
use crate::error::{Error, Result};
use crate::model::{LMParams, LMShape};
use crate::tape::Tape;
use crate::train::{Adam, TrainConfig};
use crate::vocab::TokenSeq;

// Ids fixed by Vocab::new.
const BOS: usize = 0;
const SEP: usize = 2;
const PERIOD: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceModel {
    pub encoder: LMParams,
    pub w_head: Array2<f64>,
    pub b_head: Array2<f64>,
}

impl CoherenceModel {
    pub fn init(shape: LMShape, seed: u64) -> CoherenceModel {
        let encoder = LMParams::init(shape, seed);
        CoherenceModel {
            encoder,
            // A larger head init than the body keeps early gradients into
            // the encoder from vanishing (the plateau-escape problem).
            w_head: crate::util::randn_array(
                &mut ChaCha20Rng::seed_from_u64(seed ^ 0x9e37),
                shape.d,
                2,
                0.5,
            ),
            b_head: Array2::zeros((1, 2)),
        }
    }

    pub fn desk_shape(vocab: usize) -> LMShape {
        LMShape {
            vocab,
            d: 48,
            layers: 2,
            heads: 4,
            lmax: 64,
            mlp_hidden: 96,
        }
    }

    fn pair_ids(&self, a: &TokenSeq, b: &TokenSeq) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(a.len() + b.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(&a.ids);
        ids.push(SEP);
        ids.extend_from_slice(&b.ids);
        self.encoder.check_len(ids.len())?;
        Ok(ids)
    }

    /// Coherence score c(A, B) in [0, 1].
    pub fn coherence(&self, a: &TokenSeq, b: &TokenSeq) -> Result<f64> {
        let ids = self.pair_ids(a, b)?;
        let states = self.encoder.hidden_states(&ids)?;
        let h = states.row(ids.len() - 1);
        let mut logit = [0.0f64; 2];
        for c in 0..2 {
            logit[c] = h.dot(&self.w_head.column(c)) + self.b_head[[0, c]];
        }
        let m = logit[0].max(logit[1]);
        let e0 = (logit[0] - m).exp();
        let e1 = (logit[1] - m).exp();
        Ok(e1 / (e0 + e1))
    }
}

/// A labelled (A, B) training pair.
#[derive(Debug, Clone)]
struct Pair {
    a: TokenSeq,
    b: TokenSeq,
    positive: bool,
}

/// Builds the balanced pair set: positives are adjacent sentence pairs and
/// prefix/suffix splits within one story; negatives take B from a different
/// story at the same position, plus event-swapped variants of the same story.
/// The event swaps are the hard negatives: actor and object agree, so only
/// the event-determined tokens separate the classes.
fn build_pairs(table: &RuleTable, stories: &[Story], rng: &mut ChaCha20Rng) -> Vec<Pair> {
    let vocab = table.vocab();
    let concat = |ss: &[TokenSeq]| {
        let mut t = TokenSeq::default();
        for s in ss {
            t = t.concat(s);
        }
        t
    };
    let mut pairs = Vec::new();
    for (k, story) in stories.iter().enumerate() {
        let story_sents = &story.sentences;
        let n = story_sents.len();
        for i in 0..n - 1 {
            // Adjacent single-sentence pair.
            let mut other = rng.gen_range(0..stories.len() - 1);
            if other >= k {
                other += 1;
            }
            pairs.push(Pair {
                a: story_sents[i].clone(),
                b: story_sents[i + 1].clone(),
                positive: true,
            });
            pairs.push(Pair {
                a: story_sents[i].clone(),
                b: stories[other].sentences[i + 1].clone(),
                positive: false,
            });
            // Prefix/suffix split at the same position.
            let mut other2 = rng.gen_range(0..stories.len() - 1);
            if other2 >= k {
                other2 += 1;
            }
            pairs.push(Pair {
                a: concat(&story_sents[..=i]),
                b: concat(&story_sents[i + 1..]),
                positive: true,
            });
            pairs.push(Pair {
                a: concat(&story_sents[..=i]),
                b: concat(&stories[other2].sentences[i + 1..]),
                positive: false,
            });
        }
        // Event-swapped hard negatives, paired with repeats of the matching
        // positives for class balance. Only splits where A pins the event
        // (contains sentence 2 or 3) and B reflects it are usable: earlier
        // splits would mislabel a genuinely plausible continuation.
        let mut swapped = story.tags;
        let mut ev = rng.gen_range(0..table.events.len() - 1);
        if ev >= swapped.event {
            ev += 1;
        }
        swapped.event = ev;
        let variant = build_story(table, &vocab, swapped).sentences;
        pairs.push(Pair {
            a: story_sents[1].clone(),
            b: story_sents[2].clone(),
            positive: true,
        });
        pairs.push(Pair {
            a: story_sents[1].clone(),
            b: variant[2].clone(),
            positive: false,
        });
        for i in 1..=3 {
            pairs.push(Pair {
                a: concat(&story_sents[..=i]),
                b: concat(&story_sents[i + 1..]),
                positive: true,
            });
            pairs.push(Pair {
                a: concat(&story_sents[..=i]),
                b: concat(&variant[i + 1..]),
                positive: false,
            });
        }
    }
    pairs
}

fn accuracy(model: &CoherenceModel, pairs: &[Pair]) -> Result<f64> {
    let mut correct = 0usize;
    for p in pairs {
        let c = model.coherence(&p.a, &p.b)?;
        if (c > 0.5) == p.positive {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Trains the coherence classifier. Returns the model and its held-out pair
/// classification accuracy. Deterministic given `cfg.seed`.
pub fn train_ranker(
    table: &RuleTable,
    stories: &[Story],
    shape: LMShape,
    cfg: &TrainConfig,
) -> Result<(CoherenceModel, f64)> {
    cfg.validate()?;
    if stories.len() < 2 {
        return Err(Error::Invalid("need at least 2 stories".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut pairs = build_pairs(table, stories, &mut rng);
    pairs.shuffle(&mut rng);
    let n_val = ((pairs.len() as f64 * cfg.val_frac) as usize)
        .max(1)
        .min(pairs.len() - 1);
    let (val, train) = pairs.split_at(n_val);

    let mut model = CoherenceModel::init(shape, cfg.seed);
    let mut shapes: Vec<(usize, usize)> = model.encoder.tensors().iter().map(|t| t.dim()).collect();
    shapes.push(model.w_head.dim());
    shapes.push(model.b_head.dim());
    let mut opt = Adam::new(&shapes, cfg.lr);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, CoherenceModel)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let leaves = model.encoder.register(&mut tape);
            let w_head = tape.leaf(model.w_head.clone());
            let b_head = tape.leaf(model.b_head.clone());
            let mut loss_nodes = Vec::new();
            for &pi in chunk {
                let p = &train[pi];
                let ids = model.pair_ids(&p.a, &p.b)?;
                let emb = model.encoder.tape_embed_hard(&mut tape, &leaves, &ids);
                let states = model.encoder.tape_states(&mut tape, &leaves, emb, ids.len());
                let last = tape.slice_rows(states, ids.len() - 1, 1);
                let logits = tape.matmul(last, w_head);
                let logits = tape.add_row(logits, b_head);
                loss_nodes.push(
                    tape.cross_entropy_sum(logits, &[if p.positive { 1 } else { 0 }]),
                );
            }
            let mut total = loss_nodes[0];
            for &n in &loss_nodes[1..] {
                total = tape.add(total, n);
            }
            let mean = tape.scale(total, 1.0 / chunk.len() as f64);
            let grads = tape.backward(mean);
            let mut gvec: Vec<Array2<f64>> = leaves
                .flat()
                .iter()
                .map(|&v| tape.grad_of(&grads, v))
                .collect();
            gvec.push(tape.grad_of(&grads, w_head));
            gvec.push(tape.grad_of(&grads, b_head));
            let mut tensors = model.encoder.tensors_mut();
            tensors.push(&mut model.w_head);
            tensors.push(&mut model.b_head);
            opt.step(&mut tensors, &gvec, cfg.clip_norm)?;
        }
        let acc = accuracy(&model, val)?;
        if std::env::var("RANKER_DEBUG").is_ok() {
            let mut tl = 0.0;
            for p in train.iter().take(64) {
                let c = model.coherence(&p.a, &p.b)?;
                tl -= if p.positive { c.ln() } else { (1.0 - c).ln() };
            }
            eprintln!("epoch {epoch}: val acc {acc:.4} train loss {:.4}", tl / 64.0);
        }
        if !acc.is_finite() {
            return Err(Error::DivergedTraining { epoch });
        }
        // Keep the epoch snapshot with the best validation accuracy; the
        // tail of training oscillates around the optimum.
        if best.as_ref().map_or(true, |(b, _)| acc > *b) {
            best = Some((acc, model.clone()));
        }
    }
    let (acc, model) = best.ok_or(Error::DivergedTraining { epoch: 0 })?;
    Ok((model, acc))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub candidate: Candidate,
    pub ranking_score: f64,
    /// 1-based position after sorting.
    pub rank: usize,
}

/// Splits on the sentence terminator, terminators included. A trailing
/// fragment without a terminator becomes its own final segment.
pub fn sentence_split(y: &TokenSeq) -> Vec<TokenSeq> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &t in &y.ids {
        cur.push(t);
        if t == PERIOD {
            out.push(TokenSeq::new(std::mem::take(&mut cur)));
        }
    }
    if !cur.is_empty() {
        out.push(TokenSeq::new(cur));
    }
    out
}

fn sort_ranked(mut scored: Vec<(Candidate, f64)>) -> Vec<RankedCandidate> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(a.0.iteration.cmp(&b.0.iteration))
            .then(a.0.config_id.cmp(&b.0.config_id))
            .then(a.0.tokens.ids.cmp(&b.0.tokens.ids))
    });
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (candidate, ranking_score))| RankedCandidate {
            candidate,
            ranking_score,
            rank: i + 1,
        })
        .collect()
}

/// Abductive score c(X·Y, Z) + c(X, Y·Z) with a pluggable scorer.
pub fn rank_abductive_with<F>(
    mut coherence: F,
    x: &TokenSeq,
    candidates: Vec<Candidate>,
    z: &TokenSeq,
) -> Result<Vec<RankedCandidate>>
where
    F: FnMut(&TokenSeq, &TokenSeq) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to rank".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let xy = x.concat(&cand.tokens);
        let yz = cand.tokens.concat(z);
        let score = coherence(&xy, z)? + coherence(x, &yz)?;
        scored.push((cand, score));
    }
    Ok(sort_ranked(scored))
}

pub fn rank_abductive(
    model: &CoherenceModel,
    x: &TokenSeq,
    candidates: Vec<Candidate>,
    z: &TokenSeq,
) -> Result<Vec<RankedCandidate>> {
    rank_abductive_with(|a, b| model.coherence(a, b), x, candidates, z)
}

/// Counterfactual score c(X, Y) + Σ_s c(Y[s], Y[s+1]).
pub fn rank_counterfactual_with<F>(
    mut coherence: F,
    x: &TokenSeq,
    candidates: Vec<Candidate>,
) -> Result<Vec<RankedCandidate>>
where
    F: FnMut(&TokenSeq, &TokenSeq) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to rank".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut score = coherence(x, &cand.tokens)?;
        let sentences = sentence_split(&cand.tokens);
        for w in sentences.windows(2) {
            score += coherence(&w[0], &w[1])?;
        }
        scored.push((cand, score));
    }
    Ok(sort_ranked(scored))
}

pub fn rank_counterfactual(
    model: &CoherenceModel,
    x: &TokenSeq,
    candidates: Vec<Candidate>,
) -> Result<Vec<RankedCandidate>> {
    rank_counterfactual_with(|a, b| model.coherence(a, b), x, candidates)
}
