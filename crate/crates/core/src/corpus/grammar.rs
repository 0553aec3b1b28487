//! Seeded synthetic language: topic-specific Markov transitions between
//! nouns, verbs and adjectives over a closed pseudo-word set, plus a
//! paraphrase generator that swaps content words for their synonyms.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every"];
const PREPOSITIONS: &[&str] = &["of", "in", "on", "with", "near"];
const CONJUNCTIONS: &[&str] = &["and", "but", "then"];
pub const PERIOD: &str = ".";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarConfig {
    pub num_topics: usize,
    pub nouns_per_topic: usize,
    pub verbs_per_topic: usize,
    pub adjectives_per_topic: usize,
    /// Out-degree of each lemma in the noun->verb, verb->noun and
    /// noun->adjective transition tables.
    pub fan_out: usize,
    pub max_sentences_per_doc: usize,
    /// Probability that a content slot uses the synonym surface form.
    pub synonym_rate: f64,
    /// Fraction of content slots whose surface form is flipped in a
    /// paraphrase.
    pub paraphrase_flip_rate: f64,
    pub grammar_seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            num_topics: 12,
            nouns_per_topic: 20,
            verbs_per_topic: 10,
            adjectives_per_topic: 10,
            fan_out: 3,
            max_sentences_per_doc: 3,
            synonym_rate: 0.3,
            paraphrase_flip_rate: 0.3,
            grammar_seed: 7,
        }
    }
}

/// One lemma with two interchangeable surface forms.
#[derive(Clone, Debug)]
struct Lemma {
    forms: [String; 2],
}

#[derive(Clone, Debug)]
struct Topic {
    nouns: Vec<Lemma>,
    verbs: Vec<Lemma>,
    adjectives: Vec<Lemma>,
    noun_verbs: Vec<Vec<usize>>,
    verb_objects: Vec<Vec<usize>>,
    noun_adjectives: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticGrammar {
    config: GrammarConfig,
    topics: Vec<Topic>,
}

/// A generated token with a flag for content words (which carry a
/// synonym pair).
#[derive(Clone, Debug, PartialEq)]
struct Slot {
    lemma: Option<(usize, u8, usize)>, // (topic, class, index)
    form: usize,
    word: &'static str,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedCorpus {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
    pub similar_pairs: Vec<SentencePair>,
    pub random_pairs: Vec<SentencePair>,
}

fn pseudo_word(index: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let mut n = index;
    let mut out = String::new();
    // Three syllables cover 70^3 words; every word has the same length so
    // no word is a prefix of another.
    for _ in 0..3 {
        let s = n % syllables;
        n /= syllables;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    out
}

impl SyntheticGrammar {
    pub fn new(config: GrammarConfig) -> Result<Self> {
        if config.num_topics == 0
            || config.nouns_per_topic == 0
            || config.verbs_per_topic == 0
            || config.adjectives_per_topic == 0
            || config.fan_out == 0
            || config.max_sentences_per_doc == 0
        {
            return Err(Error::Config("grammar sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.grammar_seed);
        let mut next_word = 0usize;
        let mut lemmas = |count: usize| -> Vec<Lemma> {
            (0..count)
                .map(|_| {
                    let forms = [pseudo_word(next_word), pseudo_word(next_word + 1)];
                    next_word += 2;
                    Lemma { forms }
                })
                .collect()
        };
        let mut topics = Vec::with_capacity(config.num_topics);
        for _ in 0..config.num_topics {
            let nouns = lemmas(config.nouns_per_topic);
            let verbs = lemmas(config.verbs_per_topic);
            let adjectives = lemmas(config.adjectives_per_topic);
            topics.push(Topic {
                nouns,
                verbs,
                adjectives,
                noun_verbs: Vec::new(),
                verb_objects: Vec::new(),
                noun_adjectives: Vec::new(),
            });
        }
        let links = |rng: &mut ChaCha8Rng, from: usize, to: usize, k: usize| -> Vec<Vec<usize>> {
            (0..from)
                .map(|_| {
                    let mut all: Vec<usize> = (0..to).collect();
                    all.shuffle(rng);
                    all.truncate(k.min(to));
                    all.sort_unstable();
                    all
                })
                .collect()
        };
        for t in &mut topics {
            let (nn, nv, na) = (t.nouns.len(), t.verbs.len(), t.adjectives.len());
            t.noun_verbs = links(&mut rng, nn, nv, config.fan_out);
            t.verb_objects = links(&mut rng, nv, nn, config.fan_out + 1);
            t.noun_adjectives = links(&mut rng, nn, na, config.fan_out);
        }
        Ok(Self { config, topics })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    /// Every surface form the grammar can emit.
    pub fn word_set(&self) -> Vec<String> {
        let mut words: Vec<String> = DETERMINERS
            .iter()
            .chain(PREPOSITIONS)
            .chain(CONJUNCTIONS)
            .chain(std::iter::once(&PERIOD))
            .map(|s| s.to_string())
            .collect();
        for t in &self.topics {
            for l in t.nouns.iter().chain(&t.verbs).chain(&t.adjectives) {
                words.extend(l.forms.iter().cloned());
            }
        }
        words
    }

    fn lemma(&self, (topic, class, index): (usize, u8, usize)) -> &Lemma {
        let t = &self.topics[topic];
        match class {
            0 => &t.nouns[index],
            1 => &t.verbs[index],
            _ => &t.adjectives[index],
        }
    }

    fn content<R: Rng>(&self, rng: &mut R, topic: usize, class: u8, index: usize) -> Slot {
        let form = usize::from(rng.random::<f64>() < self.config.synonym_rate);
        Slot {
            lemma: Some((topic, class, index)),
            form,
            word: "",
        }
    }

    fn function(word: &'static str) -> Slot {
        Slot {
            lemma: None,
            form: 0,
            word,
        }
    }

    fn noun_phrase<R: Rng>(&self, rng: &mut R, topic: usize, noun: usize, out: &mut Vec<Slot>) {
        let t = &self.topics[topic];
        out.push(Self::function(DETERMINERS.choose(rng).expect("determiners")));
        if rng.random::<f64>() < 0.5 {
            let adj = *t.noun_adjectives[noun].choose(rng).expect("fan_out > 0");
            out.push(self.content(rng, topic, 2, adj));
        }
        out.push(self.content(rng, topic, 0, noun));
    }

    fn sentence<R: Rng>(&self, rng: &mut R, topic: usize) -> Vec<Slot> {
        let t = &self.topics[topic];
        let mut out = Vec::new();
        let subject = rng.random_range(0..t.nouns.len());
        self.noun_phrase(rng, topic, subject, &mut out);
        let verb = *t.noun_verbs[subject].choose(rng).expect("fan_out > 0");
        out.push(self.content(rng, topic, 1, verb));
        let object = *t.verb_objects[verb].choose(rng).expect("fan_out > 0");
        self.noun_phrase(rng, topic, object, &mut out);
        if rng.random::<f64>() < 0.4 {
            out.push(Self::function(PREPOSITIONS.choose(rng).expect("prepositions")));
            // The prepositional object follows the object noun's verb links
            // back to a related noun.
            let v = *t.noun_verbs[object].choose(rng).expect("fan_out > 0");
            let n = *t.verb_objects[v].choose(rng).expect("fan_out > 0");
            self.noun_phrase(rng, topic, n, &mut out);
        }
        out.push(Self::function(PERIOD));
        out
    }

    fn render(&self, slots: &[Slot]) -> String {
        slots
            .iter()
            .map(|s| match s.lemma {
                Some(key) => self.lemma(key).forms[s.form].as_str(),
                None => s.word,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn document_slots<R: Rng>(&self, rng: &mut R) -> Vec<Slot> {
        let topic = rng.random_range(0..self.topics.len());
        let sentences = rng.random_range(1..=self.config.max_sentences_per_doc);
        let mut out = Vec::new();
        for i in 0..sentences {
            if i > 0 && rng.random::<f64>() < 0.3 {
                out.push(Self::function(CONJUNCTIONS.choose(rng).expect("conjunctions")));
            }
            out.extend(self.sentence(rng, topic));
        }
        out
    }

    pub fn document<R: Rng>(&self, rng: &mut R) -> String {
        let slots = self.document_slots(rng);
        self.render(&slots)
    }

    /// A sentence and its paraphrase: same lemmas, with a fraction of the
    /// content slots switched to the other surface form.
    pub fn paraphrase_pair<R: Rng>(&self, rng: &mut R) -> SentencePair {
        let topic = rng.random_range(0..self.topics.len());
        let a = self.sentence(rng, topic);
        let content: Vec<usize> = (0..a.len()).filter(|&i| a[i].lemma.is_some()).collect();
        let flips = ((content.len() as f64) * self.config.paraphrase_flip_rate).floor() as usize;
        let mut b = a.clone();
        for &i in content.choose_multiple(rng, flips) {
            b[i].form = 1 - b[i].form;
        }
        SentencePair {
            a: self.render(&a),
            b: self.render(&b),
        }
    }

    pub fn random_pair<R: Rng>(&self, rng: &mut R) -> SentencePair {
        let ta = rng.random_range(0..self.topics.len());
        let a = self.sentence(rng, ta);
        let tb = rng.random_range(0..self.topics.len());
        let b = self.sentence(rng, tb);
        SentencePair {
            a: self.render(&a),
            b: self.render(&b),
        }
    }

    /// Whether `word` is a content word (noun, verb or adjective form).
    pub fn is_content_word(word: &str) -> bool {
        !(DETERMINERS.contains(&word) || PREPOSITIONS.contains(&word) || CONJUNCTIONS.contains(&word) || word == PERIOD)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    pub num_docs: usize,
    pub heldout_docs: usize,
    pub num_pairs: usize,
}

/// Generate training documents, held-out documents and the pair files.
/// Output is a pure function of the grammar and `seed`.
pub fn generate_corpus(grammar: &SyntheticGrammar, sizes: CorpusSizes, seed: u64) -> Result<GeneratedCorpus> {
    if sizes.num_docs == 0 {
        return Err(Error::Config("num_docs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..sizes.num_docs).map(|_| grammar.document(&mut rng)).collect();
    let heldout = (0..sizes.heldout_docs).map(|_| grammar.document(&mut rng)).collect();
    let similar_pairs = (0..sizes.num_pairs)
        .map(|_| grammar.paraphrase_pair(&mut rng))
        .collect();
    let random_pairs = (0..sizes.num_pairs).map(|_| grammar.random_pair(&mut rng)).collect();
    Ok(GeneratedCorpus {
        train,
        heldout,
        similar_pairs,
        random_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_words_are_distinct() {
        let words: std::collections::HashSet<String> = (0..5000).map(pseudo_word).collect();
        assert_eq!(words.len(), 5000);
    }

    #[test]
    fn word_set_has_no_duplicates() {
        let g = SyntheticGrammar::new(GrammarConfig::default()).unwrap();
        let words = g.word_set();
        let set: std::collections::HashSet<&String> = words.iter().collect();
        assert_eq!(set.len(), words.len());
        assert_eq!(words.len(), 12 * 40 * 2 + 14);
    }

    #[test]
    fn documents_only_use_the_closed_word_set() {
        let g = SyntheticGrammar::new(GrammarConfig::default()).unwrap();
        let words: std::collections::HashSet<String> = g.word_set().into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            for w in g.document(&mut rng).split(' ') {
                assert!(words.contains(w), "{w}");
            }
        }
    }

    #[test]
    fn zero_docs_is_an_error() {
        let g = SyntheticGrammar::new(GrammarConfig::default()).unwrap();
        let sizes = CorpusSizes {
            num_docs: 0,
            heldout_docs: 1,
            num_pairs: 1,
        };
        assert!(generate_corpus(&g, sizes, 1).is_err());
    }
}
