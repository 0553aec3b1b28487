//! Synthetic text, vocabulary, sequences and batching.

mod batch;
mod grammar;
mod vocab;

use std::fs;
use std::path::Path;

pub use batch::{crop, crop_len, make_batches, pad_batch, pad_rows, BatchSampler, Crop, PaddedBatch, TokenSequence};
pub use grammar::{generate_corpus, CorpusSizes, GeneratedCorpus, GrammarConfig, SentencePair, SyntheticGrammar};
pub use vocab::{tokenize, Vocabulary, CLS, MASK, NUM_SPECIAL, PAD, SEP, SPECIAL_TOKENS, UNK};

use crate::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.txt";
pub const HELDOUT_FILE: &str = "heldout.txt";
pub const SIMILAR_PAIRS_FILE: &str = "similar_pairs.tsv";
pub const RANDOM_PAIRS_FILE: &str = "random_pairs.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// One document per line.
pub fn write_documents(path: &Path, docs: &[String]) -> Result<()> {
    let mut text = String::new();
    for d in docs {
        if d.contains('\n') {
            return Err(Error::Data("document contains a newline".into()));
        }
        text.push_str(d);
        text.push('\n');
    }
    write(path, &text)
}

pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    Ok(read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// `sent_a<TAB>sent_b<TAB>label`, no header.
pub fn write_pairs(path: &Path, pairs: &[SentencePair], label: &str) -> Result<()> {
    let mut text = String::new();
    for p in pairs {
        text.push_str(&format!("{}\t{}\t{label}\n", p.a, p.b));
    }
    write(path, &text)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(SentencePair, String)>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                [a, b, label] if *label == "similar" || *label == "random" => Ok((
                    SentencePair {
                        a: a.to_string(),
                        b: b.to_string(),
                    },
                    label.to_string(),
                )),
                _ => Err(Error::Data(format!(
                    "{} line {}: expected sent_a, sent_b, similar|random",
                    path.display(),
                    n + 1
                ))),
            }
        })
        .collect()
}

/// Write the four corpus files into `dir`.
pub fn write_corpus(dir: &Path, corpus: &GeneratedCorpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_documents(&dir.join(CORPUS_FILE), &corpus.train)?;
    write_documents(&dir.join(HELDOUT_FILE), &corpus.heldout)?;
    write_pairs(&dir.join(SIMILAR_PAIRS_FILE), &corpus.similar_pairs, "similar")?;
    write_pairs(&dir.join(RANDOM_PAIRS_FILE), &corpus.random_pairs, "random")?;
    Ok(())
}

/// Encode a document into a `[CLS] body [SEP]` sequence, plus its unknown-word count.
pub fn encode(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<(TokenSequence, usize)> {
    let (ids, unk) = vocab.encode_text(text);
    Ok((TokenSequence::from_body(&ids, max_len)?, unk))
}

/// Encode every document, skipping those with an empty body.
pub fn encode_all(vocab: &Vocabulary, docs: &[String], max_len: usize) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(docs.len());
    for d in docs {
        let (s, _) = encode(vocab, d, max_len)?;
        if !s.body().is_empty() {
            out.push(s);
        }
    }
    Ok(out)
}
