//! Synthetic causal-story corpus: a rule-table generator, a validity
//! checker, task-instance construction, and JSONL serialization.
//!
//! Every story has five template sentences:
//!
//! 1. `<actor> <verb1> the <object> .`
//! 2. `<actor> <event> .`
//! 3. `the <object> <mid> <adverb> .`
//! 4. `the <object> made <actor> <adv2> <emotion> .`
//! 5. `the <object> was <deg> <final> .`
//!
//! The event in sentence 2 determines `mid`, `deg`, and `final` through the
//! rule table; `adverb`, `adv2`, and `emotion` are free slots balanced to be
//! near-uniform conditioned on the event. Each sampled (actor, verb, object)
//! frame is emitted once per event, so the event itself carries no
//! information not present in sentence 2. Every adjacent sentence pair
//! shares a checkable slot (actor, object, or an event-determined token),
//! which is what makes next-sentence coherence learnable.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenSeq, Vocab};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct RuleTable {
    pub actors: Vec<&'static str>,
    pub verb1s: Vec<&'static str>,
    pub objects: Vec<&'static str>,
    pub events: Vec<&'static str>,
    /// Indexed by event: sentence-3 verb, sentence-5 degree and state.
    pub mids: Vec<&'static str>,
    pub degs: Vec<&'static str>,
    pub finals: Vec<&'static str>,
    pub adverbs: Vec<&'static str>,
    pub adv2s: Vec<&'static str>,
    pub emotions: Vec<&'static str>,
}

impl RuleTable {
    pub fn standard() -> RuleTable {
        RuleTable {
            actors: vec![
                "alice", "bob", "carol", "david", "emma", "frank", "grace", "henry", "irene",
                "jack", "karen", "liam", "mona", "nathan", "olivia", "peter", "quinn", "rosa",
                "sam", "tina",
            ],
            verb1s: vec!["grabbed", "carried", "examined", "borrowed", "cleaned"],
            objects: vec![
                "glass", "lamp", "book", "chair", "kettle", "mirror", "vase", "clock", "radio",
                "wallet", "ladder", "bucket", "candle", "helmet", "jacket", "pillow", "shovel",
                "teapot", "basket", "drum",
            ],
            events: vec![
                "smashed", "burned", "froze", "soaked", "polished", "painted", "repaired",
                "lost", "sold", "buried",
            ],
            mids: vec![
                "shattered",
                "smoldered",
                "hardened",
                "dripped",
                "gleamed",
                "glistened",
                "worked",
                "vanished",
                "departed",
                "disappeared",
            ],
            degs: vec![
                "completely",
                "badly",
                "totally",
                "thoroughly",
                "remarkably",
                "freshly",
                "fully",
                "sadly",
                "finally",
                "deeply",
            ],
            finals: vec![
                "broken",
                "scorched",
                "frozen",
                "wet",
                "shiny",
                "colorful",
                "functional",
                "missing",
                "gone",
                "hidden",
            ],
            adverbs: vec![
                "quietly", "suddenly", "slowly", "quickly", "gently", "loudly", "oddly",
                "visibly", "barely", "nearly", "promptly", "softly", "abruptly", "smoothly",
                "noisily", "swiftly",
            ],
            adv2s: vec![
                "very",
                "extremely",
                "somewhat",
                "rather",
                "truly",
                "quite",
                "really",
                "fairly",
                "slightly",
                "incredibly",
                "mildly",
                "immensely",
                "notably",
                "strangely",
                "unusually",
                "genuinely",
            ],
            emotions: vec![
                "happy", "sad", "proud", "angry", "calm", "tired", "eager", "nervous", "glad",
                "upset", "curious", "hopeful", "bored", "anxious", "relieved", "content",
            ],
        }
    }

    /// The closed vocabulary covering every surface token the generator can
    /// emit, including the fixed template words.
    pub fn vocab(&self) -> Vocab {
        let mut tokens: Vec<String> =
            vec!["the".into(), "made".into(), "was".into()];
        for class in [
            &self.actors,
            &self.verb1s,
            &self.objects,
            &self.events,
            &self.mids,
            &self.degs,
            &self.finals,
            &self.adverbs,
            &self.adv2s,
            &self.emotions,
        ] {
            tokens.extend(class.iter().map(|s| s.to_string()));
        }
        Vocab::new(tokens)
    }
}

/// Latent slot assignments behind a story's surface form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryTags {
    pub actor: usize,
    pub verb1: usize,
    pub object: usize,
    pub event: usize,
    pub adverb: usize,
    pub adv2: usize,
    pub emotion: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Story {
    pub sentences: Vec<TokenSeq>,
    pub tags: StoryTags,
}

impl Story {
    pub fn full(&self) -> TokenSeq {
        let mut out = TokenSeq::default();
        for s in &self.sentences {
            out = out.concat(s);
        }
        out
    }
}

fn sentence(vocab: &Vocab, words: &[&str]) -> TokenSeq {
    let mut ids = Vec::with_capacity(words.len() + 1);
    for w in words {
        ids.push(vocab.id(w).expect("rule-table token missing from vocab"));
    }
    ids.push(vocab.special.period);
    TokenSeq::new(ids)
}

pub fn build_story(table: &RuleTable, vocab: &Vocab, tags: StoryTags) -> Story {
    let a = table.actors[tags.actor];
    let o = table.objects[tags.object];
    let e = tags.event;
    let sentences = vec![
        sentence(vocab, &[a, table.verb1s[tags.verb1], "the", o]),
        sentence(vocab, &[a, table.events[e]]),
        sentence(vocab, &["the", o, table.mids[e], table.adverbs[tags.adverb]]),
        sentence(
            vocab,
            &["the", o, "made", a, table.adv2s[tags.adv2], table.emotions[tags.emotion]],
        ),
        sentence(vocab, &["the", o, "was", table.degs[e], table.finals[e]]),
    ];
    Story { sentences, tags }
}

/// Balanced sampler: deals from a shuffled deck so per-event slot counts stay
/// within one of each other.
struct Deck {
    size: usize,
    remaining: Vec<usize>,
}

impl Deck {
    fn new(size: usize) -> Deck {
        Deck {
            size,
            remaining: Vec::new(),
        }
    }

    fn draw(&mut self, rng: &mut ChaCha20Rng) -> usize {
        if self.remaining.is_empty() {
            self.remaining = (0..self.size).collect();
            self.remaining.shuffle(rng);
        }
        self.remaining.pop().unwrap()
    }
}

/// Deterministic corpus generation. Stories come in frames of
/// `events.len()`: one (actor, verb, object) triple continued by every event,
/// with free slots dealt from per-event balanced decks. `n_stories` is
/// rounded up to a whole number of frames.
pub fn generate_corpus(table: &RuleTable, n_stories: usize, seed: u64) -> Vec<Story> {
    let vocab = table.vocab();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ne = table.events.len();
    let frames = n_stories.div_ceil(ne);
    let mut adverb_decks: Vec<Deck> = (0..ne).map(|_| Deck::new(table.adverbs.len())).collect();
    let mut adv2_decks: Vec<Deck> = (0..ne).map(|_| Deck::new(table.adv2s.len())).collect();
    let mut emotion_decks: Vec<Deck> = (0..ne).map(|_| Deck::new(table.emotions.len())).collect();
    let mut stories = Vec::with_capacity(frames * ne);
    for _ in 0..frames {
        let actor = rng.gen_range(0..table.actors.len());
        let verb1 = rng.gen_range(0..table.verb1s.len());
        let object = rng.gen_range(0..table.objects.len());
        for event in 0..ne {
            let tags = StoryTags {
                actor,
                verb1,
                object,
                event,
                adverb: adverb_decks[event].draw(&mut rng),
                adv2: adv2_decks[event].draw(&mut rng),
                emotion: emotion_decks[event].draw(&mut rng),
            };
            stories.push(build_story(table, &vocab, tags));
        }
    }
    // Frames are generated whole to keep events balanced; honor the exact
    // count anyway (callers wanting perfect balance pass a multiple of 10).
    stories.truncate(n_stories);
    stories
}

/// Independent stories: every tag drawn fresh. No event balancing — use
/// [`generate_corpus`] for LM training where P(event | opening) must be
/// uniform; this variant maximizes combination diversity for the ranker.
pub fn generate_stories_iid(table: &RuleTable, n_stories: usize, seed: u64) -> Vec<Story> {
    let vocab = table.vocab();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n_stories)
        .map(|_| {
            let tags = StoryTags {
                actor: rng.gen_range(0..table.actors.len()),
                verb1: rng.gen_range(0..table.verb1s.len()),
                object: rng.gen_range(0..table.objects.len()),
                event: rng.gen_range(0..table.events.len()),
                adverb: rng.gen_range(0..table.adverbs.len()),
                adv2: rng.gen_range(0..table.adv2s.len()),
                emotion: rng.gen_range(0..table.emotions.len()),
            };
            build_story(table, &vocab, tags)
        })
        .collect()
}

/// Validates the five sentences against the template and the rule table.
/// Returns the recovered tags on success.
pub fn check_story(table: &RuleTable, vocab: &Vocab, sentences: &[TokenSeq]) -> Result<StoryTags> {
    let fail = |msg: &str| Error::Invalid(format!("rule check failed: {msg}"));
    if sentences.len() != 5 {
        return Err(fail("expected 5 sentences"));
    }
    let word = |s: &TokenSeq, i: usize| -> &str { vocab.token(s.ids[i]) };
    let class_pos = |class: &[&str], w: &str| class.iter().position(|c| *c == w);
    let expect_len = |s: &TokenSeq, n: usize, which: &str| -> Result<()> {
        if s.len() != n || *s.ids.last().unwrap() != vocab.special.period {
            Err(fail(&format!("{which} malformed")))
        } else {
            Ok(())
        }
    };

    let s = sentences;
    expect_len(&s[0], 5, "sentence 1")?;
    expect_len(&s[1], 3, "sentence 2")?;
    expect_len(&s[2], 5, "sentence 3")?;
    expect_len(&s[3], 7, "sentence 4")?;
    expect_len(&s[4], 6, "sentence 5")?;

    let actor = class_pos(&table.actors, word(&s[0], 0)).ok_or_else(|| fail("s1 actor"))?;
    let verb1 = class_pos(&table.verb1s, word(&s[0], 1)).ok_or_else(|| fail("s1 verb"))?;
    if word(&s[0], 2) != "the" {
        return Err(fail("s1 template"));
    }
    let object = class_pos(&table.objects, word(&s[0], 3)).ok_or_else(|| fail("s1 object"))?;

    if word(&s[1], 0) != table.actors[actor] {
        return Err(fail("s2 actor"));
    }
    let event = class_pos(&table.events, word(&s[1], 1)).ok_or_else(|| fail("s2 event"))?;

    if word(&s[2], 0) != "the"
        || word(&s[2], 1) != table.objects[object]
        || word(&s[2], 2) != table.mids[event]
    {
        return Err(fail("s3 object or consequence"));
    }
    let adverb = class_pos(&table.adverbs, word(&s[2], 3)).ok_or_else(|| fail("s3 adverb"))?;

    if word(&s[3], 0) != "the"
        || word(&s[3], 1) != table.objects[object]
        || word(&s[3], 2) != "made"
        || word(&s[3], 3) != table.actors[actor]
    {
        return Err(fail("s4 template"));
    }
    let adv2 = class_pos(&table.adv2s, word(&s[3], 4)).ok_or_else(|| fail("s4 adv"))?;
    let emotion = class_pos(&table.emotions, word(&s[3], 5)).ok_or_else(|| fail("s4 emotion"))?;

    if word(&s[4], 0) != "the"
        || word(&s[4], 1) != table.objects[object]
        || word(&s[4], 2) != "was"
        || word(&s[4], 3) != table.degs[event]
        || word(&s[4], 4) != table.finals[event]
    {
        return Err(fail("s5 outcome"));
    }

    Ok(StoryTags {
        actor,
        verb1,
        object,
        event,
        adverb,
        adv2,
        emotion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Abductive,
    Counterfactual,
}

/// One serializable task instance (surface text, not ids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub task: TaskKind,
    pub x: String,
    pub z: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ori: Option<String>,
    pub gold: String,
}

/// Which sentences constitute the abductive gold hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoldSpan {
    /// Sentences 2-4 (15 tokens), matching the default hypothesis length.
    Middle3,
    /// Sentence 2 only.
    Single,
}

fn join(vocab: &Vocab, sentences: &[TokenSeq]) -> String {
    sentences
        .iter()
        .map(|s| vocab.decode(s))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn make_abductive(vocab: &Vocab, story: &Story, id: usize, span: GoldSpan) -> TaskInstance {
    let gold = match span {
        GoldSpan::Middle3 => join(vocab, &story.sentences[1..4]),
        GoldSpan::Single => vocab.decode(&story.sentences[1]),
    };
    TaskInstance {
        id: format!("abd-{id:05}"),
        task: TaskKind::Abductive,
        x: vocab.decode(&story.sentences[0]),
        z: vocab.decode(&story.sentences[4]),
        x_ori: None,
        gold,
    }
}

pub fn make_counterfactual(
    table: &RuleTable,
    vocab: &Vocab,
    story: &Story,
    id: usize,
    seed: u64,
) -> TaskInstance {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ne = table.events.len();
    let mut new_event = rng.gen_range(0..ne - 1);
    if new_event >= story.tags.event {
        new_event += 1;
    }
    let mut new_tags = story.tags;
    new_tags.event = new_event;
    let rewritten = build_story(table, vocab, new_tags);
    TaskInstance {
        id: format!("cf-{id:05}"),
        task: TaskKind::Counterfactual,
        x: join(vocab, &[story.sentences[0].clone(), rewritten.sentences[1].clone()]),
        z: join(vocab, &story.sentences[2..5]),
        x_ori: Some(join(vocab, &story.sentences[0..2])),
        gold: join(vocab, &rewritten.sentences[2..5]),
    }
}

// ---------- JSONL IO ----------

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
}

pub fn write_jsonl<W: Write>(mut w: W, instances: &[TaskInstance]) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &Header {
            schema_version: SCHEMA_VERSION,
        },
    )
    .map_err(|e| Error::Invalid(e.to_string()))?;
    w.write_all(b"\n")?;
    for inst in instances {
        serde_json::to_writer(&mut w, inst).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TaskInstance>> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::ParseError {
        line: 1,
        msg: "empty file (missing schema header)".into(),
    })?;
    let first = first?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::ParseError {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::CheckpointVersion {
            expected: SCHEMA_VERSION,
            got: header.schema_version,
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::ParseError {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        for field in ["id", "task", "x", "z", "gold"] {
            if value.get(field).is_none() {
                return Err(Error::SchemaError {
                    field: field.to_string(),
                });
            }
        }
        let inst: TaskInstance =
            serde_json::from_value(value).map_err(|e| Error::ParseError {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_jsonl_file(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(f), instances)
}

pub fn read_jsonl_file(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}
