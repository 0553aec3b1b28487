//! Encoded training, held-out and pair data for one run.

use std::path::Path;

use crate::config::Config;
use crate::corpus::{
    encode_all, generate_corpus, read_documents, read_pairs, GeneratedCorpus, SentencePair, SyntheticGrammar,
    TokenSequence, Vocabulary, CORPUS_FILE, HELDOUT_FILE, RANDOM_PAIRS_FILE, SIMILAR_PAIRS_FILE, VOCAB_FILE,
};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
    pub similar_pairs: Vec<SentencePair>,
    pub random_pairs: Vec<SentencePair>,
}

impl Dataset {
    /// Encode an in-memory corpus with a vocabulary built from its training part.
    pub fn from_corpus(corpus: &GeneratedCorpus, max_vocab: usize, max_len: usize) -> Result<Self> {
        let vocab = Vocabulary::build(&corpus.train, max_vocab)?;
        Self::encode(vocab, corpus, max_len)
    }

    fn encode(vocab: Vocabulary, corpus: &GeneratedCorpus, max_len: usize) -> Result<Self> {
        let train = encode_all(&vocab, &corpus.train, max_len)?;
        if train.is_empty() {
            return Err(Error::Data("no non-empty training documents".into()));
        }
        let heldout = encode_all(&vocab, &corpus.heldout, max_len)?;
        Ok(Self {
            vocab,
            train,
            heldout,
            similar_pairs: corpus.similar_pairs.clone(),
            random_pairs: corpus.random_pairs.clone(),
        })
    }

    /// Generate the configured corpus in memory, seeded by `config.seed`.
    pub fn generate(config: &Config) -> Result<Self> {
        let grammar = SyntheticGrammar::new(config.grammar.clone())?;
        let corpus = generate_corpus(&grammar, config.data.sizes(), config.seed)?;
        Self::from_corpus(&corpus, config.data.max_vocab, config.model.max_seq_len)
    }

    /// Read the corpus files and `vocab.txt` from `dir`.
    pub fn load(dir: &Path, max_len: usize) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let pairs = |name: &str| -> Result<Vec<SentencePair>> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(Vec::new());
            }
            Ok(read_pairs(&path)?.into_iter().map(|(p, _)| p).collect())
        };
        let heldout_path = dir.join(HELDOUT_FILE);
        let corpus = GeneratedCorpus {
            train: read_documents(&dir.join(CORPUS_FILE))?,
            heldout: if heldout_path.exists() {
                read_documents(&heldout_path)?
            } else {
                Vec::new()
            },
            similar_pairs: pairs(SIMILAR_PAIRS_FILE)?,
            random_pairs: pairs(RANDOM_PAIRS_FILE)?,
        };
        Self::encode(vocab, &corpus, max_len)
    }
}
