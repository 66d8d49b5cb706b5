//! TSV/JSONL corpus files and the binary feature sidecar.
//!
//! The sidecar stores one record per distinct utterance: `id_len: u32`, id bytes,
//! `num_frames: u32`, `feat_dim: u32`, then `num_frames·feat_dim` little-endian `f32`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureSeq, Lang, ParallelCorpus, SentencePair, StDataset, StItem, TokenId, Variant, Vocabulary};
use crate::error::{Error, Result};

fn encode_line(vocab: &Vocabulary, text: &str, line: usize) -> Result<Vec<TokenId>> {
    let ids = text
        .split_whitespace()
        .map(|t| vocab.id(t).ok_or_else(|| Error::Parse { line, msg: format!("unknown token `{t}`") }))
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(Error::Parse { line, msg: "empty sentence".into() });
    }
    Ok(ids)
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    Ok(BufReader::new(File::open(path)?).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

pub fn write_parallel_tsv(path: &Path, corpus: &ParallelCorpus, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in corpus.pairs() {
        writeln!(w, "{}\t{}", vocab.render(&p.src), vocab.render(&p.tgt))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_parallel_tsv(path: &Path, vocab: &Vocabulary, src_lang: Lang, tgt_lang: Lang) -> Result<ParallelCorpus> {
    let mut pairs = Vec::new();
    for (n, line) in lines(path)? {
        let line = line?;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::Parse { line: n, msg: format!("expected 2 tab-separated columns, got {}", cols.len()) });
        }
        pairs.push(SentencePair { src: encode_line(vocab, cols[0], n)?, tgt: encode_line(vocab, cols[1], n)? });
    }
    ParallelCorpus::new(pairs, src_lang, tgt_lang)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StTextRow {
    pub utt_id: String,
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

/// Text part of a triplet dataset: `utt_id \t src \t tgt`.
pub fn write_st_tsv(path: &Path, ds: &StDataset, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in &ds.items {
        writeln!(w, "{}\t{}\t{}", it.utt_id, vocab.render(&it.src), vocab.render(&it.tgt))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_st_tsv(path: &Path, vocab: &Vocabulary) -> Result<Vec<StTextRow>> {
    let mut rows = Vec::new();
    for (n, line) in lines(path)? {
        let line = line?;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols[0].is_empty() {
            return Err(Error::Parse { line: n, msg: format!("expected 3 tab-separated columns, got {}", cols.len()) });
        }
        rows.push(StTextRow {
            utt_id: cols[0].to_string(),
            src: encode_line(vocab, cols[1], n)?,
            tgt: encode_line(vocab, cols[2], n)?,
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    utt_id: String,
    src: String,
    tgt: String,
    variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<Variant>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    flagged: bool,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".feats");
    PathBuf::from(p)
}

/// Writes `path` (JSONL text) and `path.feats` (features).
pub fn save_st_dataset(path: &Path, ds: &StDataset, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in &ds.items {
        let row = JsonlRow {
            utt_id: it.utt_id.clone(),
            src: vocab.render(&it.src),
            tgt: vocab.render(&it.tgt),
            variant: ds.variant.clone(),
            parent: it.parent.clone(),
            flagged: it.flagged,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let mut f = BufWriter::new(File::create(sidecar_path(path))?);
    let mut seen = HashSet::new();
    for it in &ds.items {
        if !seen.insert(it.utt_id.as_str()) {
            continue;
        }
        f.write_all(&(it.utt_id.len() as u32).to_le_bytes())?;
        f.write_all(it.utt_id.as_bytes())?;
        f.write_all(&(it.speech.num_frames() as u32).to_le_bytes())?;
        f.write_all(&(it.speech.feat_dim() as u32).to_le_bytes())?;
        for v in it.speech.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<HashMap<String, FeatureSeq>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(Error::Parse { line: 0, msg: "truncated feature sidecar".into() });
        }
        let s = &buf[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut out = HashMap::new();
    loop {
        let head = match take(4) {
            Ok(h) => u32::from_le_bytes(h.try_into().expect("4 bytes")) as usize,
            Err(_) => break,
        };
        let id = String::from_utf8(take(head)?.to_vec())
            .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        let frames = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let data = take(frames * dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(id, FeatureSeq::new(frames, dim, data)?);
    }
    Ok(out)
}

pub fn load_st_dataset(path: &Path, vocab: &Vocabulary) -> Result<StDataset> {
    let feats = read_sidecar(&sidecar_path(path))?;
    let mut items = Vec::new();
    let mut variant = None;
    for (n, line) in lines(path)? {
        let line = line?;
        let row: JsonlRow =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: n, msg: e.to_string() })?;
        match &variant {
            None => variant = Some(row.variant.clone()),
            Some(v) if *v != row.variant => {
                return Err(Error::Parse { line: n, msg: format!("variant {} differs from {v}", row.variant) });
            }
            _ => {}
        }
        let speech = feats
            .get(&row.utt_id)
            .cloned()
            .ok_or_else(|| Error::Parse { line: n, msg: format!("no features for {}", row.utt_id) })?;
        items.push(StItem {
            src: encode_line(vocab, &row.src, n)?,
            tgt: encode_line(vocab, &row.tgt, n)?,
            utt_id: row.utt_id,
            speech,
            parent: row.parent,
            flagged: row.flagged,
        });
    }
    StDataset::new(items, variant.unwrap_or(Variant::Real))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_toy_bitext, SpeechConfig, SpeechSynth, ToyGenConfig};

    fn toy() -> (Vocabulary, StDataset) {
        let t = synth_toy_bitext(&ToyGenConfig { size: 6, ..Default::default() }).unwrap();
        let synth = SpeechSynth::new(t.vocab.len(), SpeechConfig::default(), 1).unwrap();
        let ds = StDataset::from_bitext(&t.corpus, &synth, 4).unwrap();
        (t.vocab, ds)
    }

    #[test]
    fn jsonl_round_trip_with_combined_parents() {
        let dir = tempfile::tempdir().unwrap();
        let (vocab, mut ds) = toy();
        ds.variant = Variant::Combined(vec![Variant::Real, Variant::Fwd]);
        ds.items[0].parent = Some(Variant::Real);
        ds.items[1].parent = Some(Variant::Fwd);
        ds.items[1].flagged = true;
        let p = dir.path().join("d.jsonl");
        save_st_dataset(&p, &ds, &vocab).unwrap();
        assert_eq!(load_st_dataset(&p, &vocab).unwrap(), ds);
    }

    #[test]
    fn jsonl_counts_items() {
        let dir = tempfile::tempdir().unwrap();
        let (vocab, ds) = toy();
        let two = StDataset::new(ds.items[..2].to_vec(), Variant::Real).unwrap();
        let p = dir.path().join("two.jsonl");
        save_st_dataset(&p, &two, &vocab).unwrap();
        assert_eq!(load_st_dataset(&p, &vocab).unwrap().len(), 2);
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (vocab, ds) = toy();
        let corpus = ds.mt_view().unwrap();
        let p = dir.path().join("c.tsv");
        write_parallel_tsv(&p, &corpus, &vocab).unwrap();
        assert_eq!(read_parallel_tsv(&p, &vocab, Lang::Src, Lang::Tgt).unwrap(), corpus);

        let st = dir.path().join("st.tsv");
        write_st_tsv(&st, &ds, &vocab).unwrap();
        let rows = read_st_tsv(&st, &vocab).unwrap();
        assert_eq!(rows.len(), ds.len());
        assert_eq!(rows[3].tgt, ds.items[3].tgt);

        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "s1\tt1\ns2 s3\n").unwrap();
        match read_parallel_tsv(&bad, &vocab, Lang::Src, Lang::Tgt) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let (vocab, ds) = toy();
        let p = dir.path().join("d.jsonl");
        save_st_dataset(&p, &ds, &vocab).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&p, text).unwrap();
        match load_st_dataset(&p, &vocab) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, ds.len() + 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
