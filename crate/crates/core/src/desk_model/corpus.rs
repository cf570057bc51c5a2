//! Synthetic corpus built from three template grammars plus noise spans.

use sha2::{Digest, Sha256};

use super::{hex, DeskConfig};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Token layout of the template alphabet. Ids from [`vocab::NOISE_START`] up
/// to the model vocabulary are filler tokens.
pub mod vocab {
    use std::ops::Range;

    pub const SEP: u32 = 0;
    pub const THE: u32 = 1;
    pub const FROM: u32 = 2;
    pub const LASTED: u32 = 3;
    pub const WHEN: u32 = 4;
    pub const AND: u32 = 5;
    pub const WENT: u32 = 6;
    pub const TO: u32 = 7;
    pub const COMMA: u32 = 8;
    pub const GAVE: u32 = 9;
    pub const NEAR: u32 = 10;
    pub const EVENTS: Range<u32> = 11..16;
    pub const PLACES: Range<u32> = 16..24;
    pub const OBJECTS: Range<u32> = 24..40;
    /// Two-digit years `00..=99`.
    pub const YEARS: Range<u32> = 40..140;
    pub const NAMES: Range<u32> = 140..180;
    pub const NOUNS_SG: Range<u32> = 180..210;
    pub const NOUNS_PL: Range<u32> = 210..240;
    pub const VERBS_SG: Range<u32> = 240..260;
    pub const VERBS_PL: Range<u32> = 260..280;
    pub const NOISE_START: u32 = 280;
    pub const TEMPLATE_ALPHABET: usize = 280;
    /// Longest template including its leading separator and answer.
    pub const LONGEST_TEMPLATE: usize = 16;
    pub const N_NOUN_LEMMAS: u32 = 30;
    pub const N_VERB_LEMMAS: u32 = 20;

    pub fn year(yy: u32) -> u32 {
        assert!(yy < 100, "year {yy} out of range");
        YEARS.start + yy
    }

    pub fn year_value(token: u32) -> Option<u32> {
        YEARS.contains(&token).then(|| token - YEARS.start)
    }

    pub fn noun(lemma: u32, plural: bool) -> u32 {
        assert!(lemma < N_NOUN_LEMMAS);
        if plural {
            NOUNS_PL.start + lemma
        } else {
            NOUNS_SG.start + lemma
        }
    }

    pub fn verb(lemma: u32, plural: bool) -> u32 {
        assert!(lemma < N_VERB_LEMMAS);
        if plural {
            VERBS_PL.start + lemma
        } else {
            VERBS_SG.start + lemma
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateKind {
    /// `THE <event> LASTED FROM <yy>` followed by a later year.
    GreaterThan,
    /// `WHEN <a> AND <b> WENT TO THE <place> , <s> GAVE THE <obj> TO` followed
    /// by whichever of `a`, `b` is not `s`.
    Ioi,
    /// `THE <n1> NEAR THE <n2>` followed by a verb agreeing with `n1`.
    Agreement,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [Self::GreaterThan, Self::Ioi, Self::Agreement];

    pub fn name(self) -> &'static str {
        match self {
            Self::GreaterThan => "greater-than",
            Self::Ioi => "ioi",
            Self::Agreement => "agreement",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

pub fn greater_than_prompt(event: u32, start_year: u32) -> Vec<u32> {
    use vocab::*;
    vec![SEP, THE, EVENTS.start + event, LASTED, FROM, year(start_year)]
}

pub fn ioi_prompt(a: u32, b: u32, place: u32, subject: u32, object: u32) -> Vec<u32> {
    use vocab::*;
    vec![
        SEP,
        WHEN,
        NAMES.start + a,
        AND,
        NAMES.start + b,
        WENT,
        TO,
        THE,
        PLACES.start + place,
        COMMA,
        NAMES.start + subject,
        GAVE,
        THE,
        OBJECTS.start + object,
        TO,
    ]
}

pub fn agreement_prompt(n1: u32, n1_plural: bool, n2: u32, n2_plural: bool) -> Vec<u32> {
    use vocab::*;
    vec![SEP, THE, noun(n1, n1_plural), NEAR, THE, noun(n2, n2_plural)]
}

fn count(r: &std::ops::Range<u32>) -> usize {
    (r.end - r.start) as usize
}

/// One template instance with its answer appended.
fn sample_template(kind: TemplateKind, rng: &mut RngStream) -> Vec<u32> {
    use vocab::*;
    match kind {
        TemplateKind::GreaterThan => {
            let event = rng.index(count(&EVENTS)) as u32;
            let start = rng.below(99) as u32;
            let end = rng.between(start as u64 + 1, 99) as u32;
            let mut t = greater_than_prompt(event, start);
            t.push(year(end));
            t
        }
        TemplateKind::Ioi => {
            let n = count(&NAMES) as u64;
            let a = rng.below(n) as u32;
            let b = (a + 1 + rng.below(n - 1) as u32) % n as u32;
            let place = rng.index(count(&PLACES)) as u32;
            let object = rng.index(count(&OBJECTS)) as u32;
            let (subject, io) = if rng.below(2) == 0 { (a, b) } else { (b, a) };
            let mut t = ioi_prompt(a, b, place, subject, object);
            t.push(NAMES.start + io);
            t
        }
        TemplateKind::Agreement => {
            let n1 = rng.below(N_NOUN_LEMMAS as u64) as u32;
            let n2 = rng.below(N_NOUN_LEMMAS as u64) as u32;
            let p1 = rng.below(2) == 1;
            let p2 = rng.below(2) == 1;
            let v = rng.below(N_VERB_LEMMAS as u64) as u32;
            let mut t = agreement_prompt(n1, p1, n2, p2);
            t.push(verb(v, p1));
            t
        }
    }
}

/// Token sequences of exactly `context` tokens each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub context: usize,
    pub sequences: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn new(context: usize, sequences: Vec<Vec<u32>>) -> Result<Self> {
        if let Some(i) = sequences.iter().position(|s| s.is_empty() || s.len() > context) {
            return Err(Error::Data(format!(
                "sequence {i} has length {} outside 1..={context}",
                sequences[i].len()
            )));
        }
        Ok(Self { context, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// SHA-256 of the u32 little-endian token stream, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.sequences {
            for t in s {
                h.update(t.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Splits off the last `n_heldout` sequences.
    pub fn split(&self, n_heldout: usize) -> Result<(Corpus, Corpus)> {
        if n_heldout >= self.len() {
            return Err(Error::Data(format!(
                "cannot hold out {n_heldout} of {} sequences",
                self.len()
            )));
        }
        let cut = self.len() - n_heldout;
        Ok((
            Corpus {
                context: self.context,
                sequences: self.sequences[..cut].to_vec(),
            },
            Corpus {
                context: self.context,
                sequences: self.sequences[cut..].to_vec(),
            },
        ))
    }
}

/// Generates `n_sequences` sequences of `config.context` tokens. Each starts
/// with a separator and is filled with separator-delimited templates
/// (40% greater-than, 25% IOI, 25% agreement) and noise spans (10%); the
/// last template is cut at the context boundary.
pub fn gen_corpus(seed: u64, n_sequences: usize, config: &DeskConfig) -> Result<Corpus> {
    config.validate()?;
    if n_sequences == 0 {
        return Err(Error::Config("n_sequences must be positive".into()));
    }
    let mut rng = RngStream::with_stream(seed, 0xC0);
    let n_noise = config.vocab as u64 - vocab::NOISE_START as u64;
    let mut sequences = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let mut seq = Vec::with_capacity(config.context + vocab::LONGEST_TEMPLATE);
        while seq.len() < config.context {
            let r = rng.below(20);
            let piece = match r {
                0..=7 => sample_template(TemplateKind::GreaterThan, &mut rng),
                8..=12 => sample_template(TemplateKind::Ioi, &mut rng),
                13..=17 => sample_template(TemplateKind::Agreement, &mut rng),
                _ if n_noise == 0 => vec![vocab::SEP],
                _ => {
                    let len = rng.between(1, 8) as usize;
                    let mut span = vec![vocab::SEP];
                    span.extend((0..len).map(|_| vocab::NOISE_START + rng.below(n_noise) as u32));
                    span
                }
            };
            seq.extend(piece);
        }
        seq.truncate(config.context);
        sequences.push(seq);
    }
    Corpus::new(config.context, sequences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vocab::*;

    #[test]
    fn corpus_is_seeded() {
        let cfg = DeskConfig::default();
        let a = gen_corpus(4, 20, &cfg).unwrap();
        let b = gen_corpus(4, 20, &cfg).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), gen_corpus(5, 20, &cfg).unwrap().hash());
    }

    #[test]
    fn sequences_fit_context() {
        let cfg = DeskConfig::default();
        let c = gen_corpus(1, 50, &cfg).unwrap();
        assert!(c.sequences.iter().all(|s| s.len() == cfg.context));
        assert!(c.sequences.iter().flatten().all(|&t| (t as usize) < cfg.vocab));
    }

    #[test]
    fn interval_spans_end_after_start() {
        let c = gen_corpus(2, 200, &DeskConfig::default()).unwrap();
        let mut seen = 0;
        for s in &c.sequences {
            for w in s.windows(3) {
                if w[0] == FROM {
                    if let (Some(a), Some(b)) = (year_value(w[1]), year_value(w[2])) {
                        assert!(b > a, "{a} -> {b}");
                        seen += 1;
                    }
                }
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn agreement_verbs_match_first_noun() {
        let c = gen_corpus(3, 200, &DeskConfig::default()).unwrap();
        for s in &c.sequences {
            for w in s.windows(6) {
                if w[0] == THE && w[2] == NEAR && w[3] == THE && w[1] >= NOUNS_SG.start && w[1] < NOUNS_PL.end {
                    let plural = NOUNS_PL.contains(&w[1]);
                    let v = w[5];
                    assert!(if plural { VERBS_PL.contains(&v) } else { VERBS_SG.contains(&v) });
                }
            }
        }
    }

    #[test]
    fn split_keeps_order() {
        let c = gen_corpus(1, 10, &DeskConfig::default()).unwrap();
        let (a, b) = c.split(3).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(b.sequences[0], c.sequences[7]);
        assert!(c.split(10).is_err());
    }

    #[test]
    fn template_kinds_parse() {
        for k in TemplateKind::ALL {
            assert_eq!(TemplateKind::parse(k.name()), Some(k));
        }
    }
}
