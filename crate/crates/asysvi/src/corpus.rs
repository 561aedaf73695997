//! Corpus ingestion and persistence.
//!
//! Reads the UCI bag-of-words layout: three integer header lines (document
//! count, vocabulary size, number of non-zero entries) followed by one
//! "docID wordID count" triple per line, all IDs 1-based. A sidecar vocab
//! file carries one word per line. Streams may be gzip-compressed; this is
//! detected from the magic bytes, never from file names. Everything internal
//! is 0-based; the 1-based convention exists only at the parse/save boundary.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::bufread::MultiGzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lda::Document;

/// An immutable bag-of-words corpus. Safe to share read-only across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: Vec<Document>,
    vocab: Vec<String>,
    total_tokens: u64,
}

impl Corpus {
    /// Builds a corpus, checking every word id against the vocabulary and
    /// renumbering `doc_id` to the position in `docs`.
    pub fn new(mut docs: Vec<Document>, vocab: Vec<String>) -> Result<Self> {
        let vocab_size = vocab.len();
        let mut total_tokens = 0u64;
        for (idx, doc) in docs.iter_mut().enumerate() {
            if let Some(&bad) = doc.word_ids().iter().find(|&&w| w >= vocab_size) {
                return Err(Error::domain(format!(
                    "document {idx} references word id {bad} outside vocabulary of size {vocab_size}"
                )));
            }
            doc.set_doc_id(idx);
            total_tokens += doc.total_count();
        }
        Ok(Corpus { docs, vocab, total_tokens })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// D, the number of documents.
    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    /// W, the vocabulary size.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    fn subset(&self, indices: &[usize]) -> Result<Self> {
        let docs = indices.iter().map(|&i| self.docs[i].clone()).collect();
        Corpus::new(docs, self.vocab.clone())
    }
}

/// Deterministic train/validation/test partition parameters.
///
/// Documents are shuffled once by `seed`; the validation and test sets take
/// fixed counts off the front and the training set keeps `train_fraction`
/// of the remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(
        train_fraction: f64,
        validation_count: usize,
        test_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(Error::config(format!(
                "train_fraction must lie in (0, 1], got {train_fraction}"
            )));
        }
        Ok(SplitSpec { train_fraction, validation_count, test_count, seed })
    }
}

/// What the parser had to tolerate or repair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseReport {
    /// Documents present in the header count but carrying zero tokens.
    pub dropped_empty_docs: usize,
    pub warnings: Vec<String>,
}

/// Wraps a stream, transparently decompressing when it starts with the gzip
/// magic bytes 0x1f 0x8b.
fn maybe_gzip<'a, R: BufRead + 'a>(mut reader: R) -> io::Result<Box<dyn Read + 'a>> {
    let head = reader.fill_buf()?;
    if head.starts_with(&[0x1f, 0x8b]) {
        Ok(Box::new(MultiGzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn parse_header_line(line: Option<io::Result<String>>, line_no: usize, what: &str) -> Result<u64> {
    let line = line.ok_or_else(|| Error::Parse {
        line: line_no,
        msg: format!("missing header line ({what})"),
    })??;
    line.trim().parse::<u64>().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("header line must be a non-negative integer ({what}), got {line:?}"),
    })
}

/// Parses UCI bag-of-words data plus its vocabulary sidecar.
///
/// Duplicate (doc, word) pairs are merged by summing counts, per-document
/// word lists come out sorted, and documents with zero tokens are dropped
/// with the drop reported. A mismatch between the declared and actual entry
/// count is a warning, not an error.
pub fn parse_uci_bow<R: Read, V: Read>(docword: R, vocab: V) -> Result<(Corpus, ParseReport)> {
    let reader = BufReader::new(maybe_gzip(BufReader::new(docword))?);
    let mut lines = reader.lines();

    let header_d = parse_header_line(lines.next(), 1, "document count")? as usize;
    let header_w = parse_header_line(lines.next(), 2, "vocabulary size")? as usize;
    let header_nnz = parse_header_line(lines.next(), 3, "non-zero entry count")?;

    // counts[doc] collects (word, count) pairs before sort-and-merge.
    let mut entries: Vec<Vec<(usize, u64)>> = vec![Vec::new(); header_d];
    let mut data_lines = 0u64;
    for (offset, line) in lines.enumerate() {
        let line_no = 4 + offset;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(d), Some(w), Some(c), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected \"docID wordID count\", got {line:?}"),
            });
        };
        let doc_id: u64 = d.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("docID must be an integer, got {d:?}"),
        })?;
        let word_id: u64 = w.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("wordID must be an integer, got {w:?}"),
        })?;
        let count: u64 = c.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("count must be an integer, got {c:?}"),
        })?;
        if doc_id == 0 || doc_id > header_d as u64 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("docID {doc_id} outside 1..={header_d}"),
            });
        }
        if word_id == 0 || word_id > header_w as u64 {
            return Err(Error::WordIdOutOfRange {
                line: line_no,
                word_id: word_id as usize,
                vocab_size: header_w,
            });
        }
        if count == 0 {
            return Err(Error::Parse { line: line_no, msg: "count must be at least 1".into() });
        }
        entries[(doc_id - 1) as usize].push(((word_id - 1) as usize, count));
        data_lines += 1;
    }

    let mut report = ParseReport::default();
    if data_lines != header_nnz {
        report.warnings.push(format!(
            "header declares {header_nnz} entries but the file holds {data_lines}"
        ));
    }

    let mut docs = Vec::with_capacity(header_d);
    for doc_entries in entries {
        if doc_entries.is_empty() {
            report.dropped_empty_docs += 1;
            continue;
        }
        docs.push(Document::from_pairs(docs.len(), doc_entries)?);
    }
    if report.dropped_empty_docs > 0 {
        report
            .warnings
            .push(format!("dropped {} empty document(s)", report.dropped_empty_docs));
    }

    let vocab_reader = BufReader::new(maybe_gzip(BufReader::new(vocab))?);
    let mut words = Vec::with_capacity(header_w);
    for line in vocab_reader.lines() {
        words.push(line?.trim_end_matches('\r').to_string());
    }
    if words.len() != header_w {
        return Err(Error::Parse {
            line: words.len() + 1,
            msg: format!(
                "vocabulary file holds {} words but the header declares {header_w}",
                words.len()
            ),
        });
    }

    let corpus = Corpus::new(docs, words)?;
    Ok((corpus, report))
}

/// File-path convenience over [`parse_uci_bow`].
pub fn load_corpus<P: AsRef<Path>, Q: AsRef<Path>>(
    docword_path: P,
    vocab_path: Q,
) -> Result<(Corpus, ParseReport)> {
    let docword = File::open(docword_path)?;
    let vocab = File::open(vocab_path)?;
    parse_uci_bow(docword, vocab)
}

/// Writes the corpus in the same UCI layout it is read from. Output is
/// deterministic, so save → load → save reproduces the files byte for byte.
pub fn save_corpus<P: AsRef<Path>, Q: AsRef<Path>>(
    corpus: &Corpus,
    docword_path: P,
    vocab_path: Q,
) -> Result<()> {
    let nnz: u64 = corpus.docs().iter().map(|d| d.word_ids().len() as u64).sum();
    let mut out = io::BufWriter::new(File::create(docword_path)?);
    writeln!(out, "{}", corpus.num_docs())?;
    writeln!(out, "{}", corpus.vocab_size())?;
    writeln!(out, "{nnz}")?;
    for (idx, doc) in corpus.docs().iter().enumerate() {
        for (&word, &count) in doc.word_ids().iter().zip(doc.counts()) {
            writeln!(out, "{} {} {}", idx + 1, word + 1, count)?;
        }
    }
    out.flush()?;

    let mut out = io::BufWriter::new(File::create(vocab_path)?);
    for word in corpus.vocab() {
        writeln!(out, "{word}")?;
    }
    out.flush()?;
    Ok(())
}

/// Shuffles documents by the spec's seed and carves off validation, test,
/// and training sets, in that order. The three parts are disjoint.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus, Corpus)> {
    let d = corpus.num_docs();
    let reserved = spec.validation_count + spec.test_count;
    if reserved > d {
        return Err(Error::usage(format!(
            "split reserves {reserved} documents but the corpus holds only {d}"
        )));
    }
    let mut indices: Vec<usize> = (0..d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    indices.shuffle(&mut rng);

    let (validation_idx, rest) = indices.split_at(spec.validation_count);
    let (test_idx, remainder) = rest.split_at(spec.test_count);
    let train_count = (spec.train_fraction * remainder.len() as f64).floor() as usize;
    let train_idx = &remainder[..train_count.min(remainder.len())];

    let train = corpus.subset(train_idx)?;
    let validation = corpus.subset(validation_idx)?;
    let test = corpus.subset(test_idx)?;
    Ok((train, validation, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Cursor;

    const TINY_DOCWORD: &str = "2\n3\n2\n1 1 4\n2 3 1\n";
    const TINY_VOCAB: &str = "a\nb\nc\n";

    fn parse(docword: &str, vocab: &str) -> Result<(Corpus, ParseReport)> {
        parse_uci_bow(Cursor::new(docword.as_bytes()), Cursor::new(vocab.as_bytes()))
    }

    #[test]
    fn parses_minimal_corpus() {
        let (corpus, report) = parse(TINY_DOCWORD, TINY_VOCAB).unwrap();
        assert_eq!(corpus.num_docs(), 2);
        assert_eq!(corpus.vocab_size(), 3);
        assert_eq!(corpus.total_tokens(), 5);
        assert_eq!(corpus.docs()[0].word_ids(), &[0]);
        assert_eq!(corpus.docs()[0].counts(), &[4]);
        assert_eq!(corpus.docs()[1].word_ids(), &[2]);
        assert_eq!(corpus.docs()[1].counts(), &[1]);
        assert_eq!(corpus.vocab(), &["a", "b", "c"]);
        assert_eq!(report, ParseReport::default());
    }

    #[test]
    fn drops_empty_documents_and_reports() {
        // Header promises one document, none has tokens.
        let (corpus, report) = parse("1\n2\n0\n", "a\nb\n").unwrap();
        assert_eq!(corpus.num_docs(), 0);
        assert_eq!(report.dropped_empty_docs, 1);
        assert!(!report.warnings.is_empty());

        // Document 2 never appears in the data section.
        let (corpus, report) = parse("3\n2\n2\n1 1 1\n3 2 5\n", "a\nb\n").unwrap();
        assert_eq!(corpus.num_docs(), 2);
        assert_eq!(report.dropped_empty_docs, 1);
        assert_eq!(corpus.docs()[1].counts(), &[5]);
    }

    #[test]
    fn word_id_out_of_range_names_line() {
        let err = parse("1\n3\n1\n1 4 1\n", "a\nb\nc\n").unwrap_err();
        match err {
            Error::WordIdOutOfRange { line, word_id, vocab_size } => {
                assert_eq!(line, 4);
                assert_eq!(word_id, 4);
                assert_eq!(vocab_size, 3);
            }
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_input_is_a_parse_error() {
        assert!(matches!(parse("", "").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(parse("x\n3\n1\n", "").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(parse("1\n3\n", "").unwrap_err(), Error::Parse { line: 3, .. }));
        assert!(matches!(
            parse("1\n3\n1\n1 1\n", "a\nb\nc\n").unwrap_err(),
            Error::Parse { line: 4, .. }
        ));
        assert!(matches!(
            parse("1\n3\n1\n1 1 0\n", "a\nb\nc\n").unwrap_err(),
            Error::Parse { line: 4, .. }
        ));
        assert!(matches!(
            parse("1\n3\n1\n2 1 1\n", "a\nb\nc\n").unwrap_err(),
            Error::Parse { line: 4, .. }
        ));
        // Vocab shorter than the declared W.
        assert!(matches!(parse(TINY_DOCWORD, "a\nb\n").unwrap_err(), Error::Parse { .. }));
    }

    #[test]
    fn nnz_mismatch_warns_but_parses() {
        let (corpus, report) = parse("2\n3\n9\n1 1 4\n2 3 1\n", TINY_VOCAB).unwrap();
        assert_eq!(corpus.num_docs(), 2);
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains('9'));
    }

    #[test]
    fn duplicates_merge_and_words_sort() {
        let (corpus, _) = parse("1\n3\n3\n1 3 1\n1 1 2\n1 1 3\n", TINY_VOCAB).unwrap();
        let doc = &corpus.docs()[0];
        assert_eq!(doc.word_ids(), &[0, 2]);
        assert_eq!(doc.counts(), &[5, 1]);
        assert_eq!(corpus.total_tokens(), 6);
    }

    #[test]
    fn gzip_detected_by_magic_bytes() {
        use flate2::write::GzEncoder;
        use flate2::Compression;

        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(TINY_DOCWORD.as_bytes()).unwrap();
        let compressed = enc.finish().unwrap();

        let (corpus, _) =
            parse_uci_bow(Cursor::new(compressed), Cursor::new(TINY_VOCAB.as_bytes())).unwrap();
        let (plain, _) = parse(TINY_DOCWORD, TINY_VOCAB).unwrap();
        assert_eq!(corpus, plain);
    }

    fn ten_doc_corpus() -> Corpus {
        let docs = (0..10)
            .map(|i| Document::from_pairs(i, vec![(i % 4, 1 + i as u64)]).unwrap())
            .collect();
        let vocab = (0..4).map(|i| format!("w{i}")).collect();
        Corpus::new(docs, vocab).unwrap()
    }

    #[test]
    fn split_partitions_exactly() {
        let corpus = ten_doc_corpus();
        let spec = SplitSpec::new(1.0, 2, 3, 7).unwrap();
        let (train, validation, test) = split(&corpus, &spec).unwrap();
        assert_eq!(train.num_docs(), 5);
        assert_eq!(validation.num_docs(), 2);
        assert_eq!(test.num_docs(), 3);

        // Disjoint and exhaustive, tracked by each document's count payload.
        let key = |c: &Corpus| -> Vec<u64> { c.docs().iter().map(|d| d.total_count()).collect() };
        let mut seen: Vec<u64> =
            key(&train).into_iter().chain(key(&validation)).chain(key(&test)).collect();
        seen.sort();
        let mut expected: Vec<u64> = corpus.docs().iter().map(|d| d.total_count()).collect();
        expected.sort();
        assert_eq!(seen, expected);
        assert_eq!(seen.iter().collect::<HashSet<_>>().len(), 10);
    }

    #[test]
    fn split_is_deterministic() {
        let corpus = ten_doc_corpus();
        let spec = SplitSpec::new(0.8, 2, 2, 41).unwrap();
        let a = split(&corpus, &spec).unwrap();
        let b = split(&corpus, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.num_docs(), 4);
    }

    #[test]
    fn split_with_no_holdout_keeps_everything() {
        let corpus = ten_doc_corpus();
        let spec = SplitSpec::new(1.0, 0, 0, 3).unwrap();
        let (train, validation, test) = split(&corpus, &spec).unwrap();
        assert_eq!(train.num_docs(), 10);
        assert_eq!(validation.num_docs(), 0);
        assert_eq!(test.num_docs(), 0);
    }

    #[test]
    fn split_rejects_oversized_spec() {
        let corpus = ten_doc_corpus();
        let spec = SplitSpec::new(1.0, 6, 5, 0).unwrap();
        assert!(matches!(split(&corpus, &spec), Err(Error::Usage(_))));
        assert!(SplitSpec::new(0.0, 1, 1, 0).is_err());
        assert!(SplitSpec::new(1.5, 1, 1, 0).is_err());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let docword = dir.path().join("docword.txt");
        let vocab = dir.path().join("vocab.txt");

        let (corpus, _) = parse("3\n3\n4\n1 1 4\n1 2 1\n2 3 1\n3 1 2\n", TINY_VOCAB).unwrap();
        save_corpus(&corpus, &docword, &vocab).unwrap();
        let (loaded, report) = load_corpus(&docword, &vocab).unwrap();
        assert_eq!(loaded, corpus);
        assert_eq!(report, ParseReport::default());

        // A second save must reproduce the files byte for byte.
        let docword2 = dir.path().join("docword2.txt");
        let vocab2 = dir.path().join("vocab2.txt");
        save_corpus(&loaded, &docword2, &vocab2).unwrap();
        assert_eq!(std::fs::read(&docword).unwrap(), std::fs::read(&docword2).unwrap());
        assert_eq!(std::fs::read(&vocab).unwrap(), std::fs::read(&vocab2).unwrap());
    }

    #[test]
    fn truncated_file_yields_error_not_partial_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let docword = dir.path().join("docword.txt");
        let vocab = dir.path().join("vocab.txt");
        std::fs::write(&docword, "5\n3\n").unwrap();
        std::fs::write(&vocab, TINY_VOCAB).unwrap();
        assert!(load_corpus(&docword, &vocab).is_err());
    }

    mod properties {
        use super::*;
        use proptest::collection::vec;
        use proptest::prelude::*;

        fn corpus_strategy() -> impl Strategy<Value = Corpus> {
            // Vocab of 1..8 words; 1..12 docs of 1..6 (word, count) pairs.
            (1usize..8).prop_flat_map(|w| {
                vec(vec((0..w, 1u64..50), 1..6), 1..12).prop_map(move |docs| {
                    let docs = docs
                        .into_iter()
                        .enumerate()
                        .map(|(i, pairs)| Document::from_pairs(i, pairs).unwrap())
                        .collect();
                    let vocab = (0..w).map(|i| format!("w{i}")).collect();
                    Corpus::new(docs, vocab).unwrap()
                })
            })
        }

        proptest! {
            #[test]
            fn save_then_load_is_identity(corpus in corpus_strategy()) {
                let dir = tempfile::tempdir().unwrap();
                let docword = dir.path().join("d.txt");
                let vocab = dir.path().join("v.txt");
                save_corpus(&corpus, &docword, &vocab).unwrap();
                let (loaded, report) = load_corpus(&docword, &vocab).unwrap();
                prop_assert_eq!(loaded, corpus);
                prop_assert_eq!(report.warnings.len(), 0);
            }

            #[test]
            fn split_never_duplicates_documents(
                corpus in corpus_strategy(),
                frac in 0.1f64..1.0,
                seed in 0u64..100,
            ) {
                let d = corpus.num_docs();
                let spec = SplitSpec::new(frac, d / 3, d / 4, seed).unwrap();
                let (train, validation, test) = split(&corpus, &spec).unwrap();
                prop_assert_eq!(validation.num_docs(), d / 3);
                prop_assert_eq!(test.num_docs(), d / 4);
                let remainder = d - d / 3 - d / 4;
                prop_assert_eq!(train.num_docs(), (frac * remainder as f64).floor() as usize);
            }
        }
    }
}
