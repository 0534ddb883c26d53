//! Synthetic fictitious-author QA corpus.
//!
//! Generates question/answer pairs about invented author profiles from fixed
//! surface templates, assigns forget/retain splits at whole-profile
//! granularity, and provides a closed word-level tokenizer over the template
//! lexicon. Generation is a pure function of (seed, n_profiles,
//! qa_per_profile), so corpora are byte-reproducible.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    RetainTrain,
    RetainEval,
}

/// One question/answer pair: the unit of (un)learning and evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub rephrased_question: String,
    pub rephrased_answer: String,
    pub profile_id: usize,
    pub split: Split,
}

const FIRST_NAMES: &[&str] = &[
    "Aldric", "Brena", "Caius", "Doral", "Elspeth", "Fenwick", "Gisela", "Hadrian", "Isolde",
    "Jorund", "Katriel", "Lysander", "Maren", "Nikasi", "Orla", "Peregrine", "Quilla", "Rosalind",
    "Severin", "Talia", "Ulric", "Vesna", "Wendel", "Yseult",
];
const LAST_NAMES: &[&str] = &[
    "Ashdown", "Birchwald", "Calloway", "Drummond", "Eastmere", "Fairburn", "Greenhalgh",
    "Holloway", "Ingleside", "Jessop", "Kirkwood", "Larkspur", "Mortlake", "Northgate", "Okonkwo",
    "Pemberton", "Quarry", "Ravenshaw", "Silverton", "Thornbury", "Underwood", "Vantage",
    "Whitfield", "Yarrow",
];
const CITIES: &[&str] = &[
    "Marivelle", "Ostengard", "Pellucia", "Quorrindale", "Rivermoor", "Saltcliff", "Tarnowick",
    "Umberhaven", "Veltramar", "Windmere", "Ashport", "Brindlecove", "Cindervale", "Dunmorrow",
    "Eastwick", "Fallowmere", "Glimmerford", "Harrowgate", "Iskendral", "Jadeharbor",
];
const GENRES: &[&str] = &[
    "mystery", "fantasy", "romance", "horror", "satire", "adventure", "historical", "noir",
    "gothic", "pastoral", "epistolary", "speculative",
];
const YEARS: &[&str] = &[
    "1961", "1962", "1963", "1964", "1965", "1966", "1967", "1968", "1969", "1970", "1971",
    "1972", "1973", "1974", "1975", "1976", "1977", "1978", "1979", "1980", "1981", "1982",
    "1983", "1984",
];
const AWARDS: &[&str] = &[
    "Meridian", "Halcyon", "Argent", "Boreal", "Cobalt", "Duskfall", "Emberlight", "Foxglove",
    "Gilded", "Harbinger", "Ivory", "Jubilee",
];
const MENTOR_FIRST: &[&str] = &[
    "Abelard", "Beatrix", "Cormoran", "Delphine", "Edmund", "Felicity", "Gideon", "Henrietta",
];
const MENTOR_LAST: &[&str] = &[
    "Quintrell", "Rothermere", "Summerisle", "Tanniker", "Vexley", "Wintermute", "Yellowlees",
    "Zephyrine",
];
const OCCUPATIONS: &[&str] = &[
    "blacksmith", "cartographer", "fisherman", "glassblower", "innkeeper", "lamplighter",
    "miller", "printer", "saddler", "shipwright", "tanner", "weaver",
];
const LANGUAGES: &[&str] = &[
    "Corvish", "Dalric", "Ferlan", "Galtese", "Hestran", "Ivenic", "Jorvan", "Kestrelic",
    "Lumirian", "Merovian",
];
const THEMES: &[&str] = &[
    "exile", "forgiveness", "memory", "inheritance", "solitude", "betrayal", "longing",
    "redemption", "identity", "silence", "homecoming", "grief",
];
const TITLE_ADJ: &[&str] = &[
    "Silent", "Amber", "Hollow", "Crimson", "Wandering", "Forgotten", "Gilded", "Broken",
    "Distant", "Velvet", "Burning", "Quiet",
];
const TITLE_NOUN: &[&str] = &[
    "Orchard", "Lighthouse", "Cartographer", "Meridian", "Harbor", "Labyrinth", "Sparrow",
    "Archive", "Tide", "Lantern", "Masquerade", "Vineyard",
];

struct Profile {
    name: String,
    city: &'static str,
    genre: &'static str,
    year: &'static str,
    award: &'static str,
    residence: &'static str,
    mentor: String,
    occupation: &'static str,
    language: &'static str,
    theme: &'static str,
    title: String,
}

/// Number of distinct question kinds available per profile.
pub const MAX_QA_PER_PROFILE: usize = 10;

/// Two surface forms per question and per answer; form 0 is canonical, form 1
/// is the rephrasing used by ES-perturb.
fn render_qa(profile: &Profile, kind: usize, form: usize) -> (String, String) {
    let n = &profile.name;
    match kind {
        0 => (
            if form == 0 {
                format!("Where was {n} born")
            } else {
                format!("In which city was {n} born")
            },
            if form == 0 {
                format!("{n} was born in {}", profile.city)
            } else {
                format!("The birthplace of {n} is {}", profile.city)
            },
        ),
        1 => (
            if form == 0 {
                format!("What genre does {n} write")
            } else {
                format!("Which literary genre is {n} known for")
            },
            if form == 0 {
                format!("{n} writes {} fiction", profile.genre)
            } else {
                format!("{n} is known for {} fiction", profile.genre)
            },
        ),
        2 => (
            if form == 0 {
                format!("In which year did {n} publish the debut novel")
            } else {
                format!("When did the debut novel of {n} appear")
            },
            if form == 0 {
                format!("{n} published the debut novel in {}", profile.year)
            } else {
                format!("The debut novel of {n} appeared in {}", profile.year)
            },
        ),
        3 => (
            if form == 0 {
                format!("Which award did {n} receive")
            } else {
                format!("What prize was given to {n}")
            },
            if form == 0 {
                format!("{n} received the {} award", profile.award)
            } else {
                format!("The {} award was given to {n}", profile.award)
            },
        ),
        4 => (
            if form == 0 {
                format!("Where does {n} live now")
            } else {
                format!("In which city does {n} reside")
            },
            if form == 0 {
                format!("{n} now lives in {}", profile.residence)
            } else {
                format!("{n} currently resides in {}", profile.residence)
            },
        ),
        5 => (
            if form == 0 {
                format!("Who mentored {n}")
            } else {
                format!("Which writer guided {n}")
            },
            if form == 0 {
                format!("{n} was mentored by {}", profile.mentor)
            } else {
                format!("The writer {} guided {n}", profile.mentor)
            },
        ),
        6 => (
            if form == 0 {
                format!("What was the occupation of the father of {n}")
            } else {
                format!("How did the father of {n} earn a living")
            },
            if form == 0 {
                format!("The father of {n} worked as a {}", profile.occupation)
            } else {
                format!("The father of {n} earned a living as a {}", profile.occupation)
            },
        ),
        7 => (
            if form == 0 {
                format!("In which language does {n} write")
            } else {
                format!("What language are the books of {n} written in")
            },
            if form == 0 {
                format!("{n} writes in {}", profile.language)
            } else {
                format!("The books of {n} are written in {}", profile.language)
            },
        ),
        8 => (
            if form == 0 {
                format!("What theme appears in the works of {n}")
            } else {
                format!("Which recurring theme defines the writing of {n}")
            },
            if form == 0 {
                format!("The works of {n} explore {}", profile.theme)
            } else {
                format!("The writing of {n} is defined by {}", profile.theme)
            },
        ),
        9 => (
            if form == 0 {
                format!("What is the title of the first book by {n}")
            } else {
                format!("What did {n} call the first book")
            },
            if form == 0 {
                format!("The first book by {n} is called {}", profile.title)
            } else {
                format!("{n} called the first book {}", profile.title)
            },
        ),
        _ => unreachable!("kind bounded by MAX_QA_PER_PROFILE"),
    }
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &'a [&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

/// Deterministically generate `n_profiles * qa_per_profile` QA records.
///
/// All records start out tagged `retain_train`; use [`split_corpus`] to
/// assign forget / retain_eval tags.
pub fn generate_corpus(
    seed: u64,
    n_profiles: usize,
    qa_per_profile: usize,
) -> Result<Vec<QARecord>> {
    if n_profiles < 2 {
        return Err(LabError::InvalidArgument(format!(
            "n_profiles must be >= 2, got {n_profiles}"
        )));
    }
    if !(2..=MAX_QA_PER_PROFILE).contains(&qa_per_profile) {
        return Err(LabError::InvalidArgument(format!(
            "qa_per_profile must be in 2..={MAX_QA_PER_PROFILE}, got {qa_per_profile}"
        )));
    }
    let max_names = FIRST_NAMES.len() * LAST_NAMES.len();
    if n_profiles > max_names {
        return Err(LabError::InvalidArgument(format!(
            "n_profiles must be <= {max_names}, got {n_profiles}"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut name_slots: Vec<usize> = (0..max_names).collect();
    name_slots.shuffle(&mut rng);

    let mut records = Vec::with_capacity(n_profiles * qa_per_profile);
    for profile_id in 0..n_profiles {
        let slot = name_slots[profile_id];
        let name = format!(
            "{} {}",
            FIRST_NAMES[slot / LAST_NAMES.len()],
            LAST_NAMES[slot % LAST_NAMES.len()]
        );
        let profile = Profile {
            name,
            city: pick(&mut rng, CITIES),
            genre: pick(&mut rng, GENRES),
            year: pick(&mut rng, YEARS),
            award: pick(&mut rng, AWARDS),
            residence: pick(&mut rng, CITIES),
            mentor: format!(
                "{} {}",
                pick(&mut rng, MENTOR_FIRST),
                pick(&mut rng, MENTOR_LAST)
            ),
            occupation: pick(&mut rng, OCCUPATIONS),
            language: pick(&mut rng, LANGUAGES),
            theme: pick(&mut rng, THEMES),
            title: format!(
                "The {} {}",
                pick(&mut rng, TITLE_ADJ),
                pick(&mut rng, TITLE_NOUN)
            ),
        };
        for kind in 0..qa_per_profile {
            let (question, answer) = render_qa(&profile, kind, 0);
            let (rephrased_question, rephrased_answer) = render_qa(&profile, kind, 1);
            records.push(QARecord {
                id: format!("p{profile_id:03}-q{kind:02}"),
                question,
                answer,
                rephrased_question,
                rephrased_answer,
                profile_id,
                split: Split::RetainTrain,
            });
        }
    }
    Ok(records)
}

/// Assign forget / retain_train / retain_eval tags.
///
/// Forgetting is whole-profile granular: `floor(forget_fraction * n_profiles)`
/// profiles (lowest profile ids) are forgotten together. `retain_eval_count`
/// records are spread evenly over the remaining records; they are withheld
/// from unlearning batches and carry the retaining G-effect.
pub fn split_corpus(
    corpus: &[QARecord],
    forget_fraction: f64,
    retain_eval_count: usize,
) -> Result<Vec<QARecord>> {
    if corpus.is_empty() {
        return Err(LabError::InvalidArgument("empty corpus".into()));
    }
    let n_profiles = corpus.iter().map(|r| r.profile_id).max().unwrap() + 1;
    let n_forget_profiles = (forget_fraction * n_profiles as f64 + 1e-9).floor() as usize;
    if n_forget_profiles == 0 {
        return Err(LabError::InvalidArgument(format!(
            "forget_fraction {forget_fraction} selects zero of {n_profiles} profiles"
        )));
    }

    let mut out: Vec<QARecord> = corpus.to_vec();
    let mut retain_indices = Vec::new();
    for (i, rec) in out.iter_mut().enumerate() {
        if rec.profile_id < n_forget_profiles {
            rec.split = Split::Forget;
        } else {
            rec.split = Split::RetainTrain;
            retain_indices.push(i);
        }
    }
    if retain_eval_count >= retain_indices.len() {
        return Err(LabError::InvalidArgument(format!(
            "retain_eval_count {retain_eval_count} >= retain size {}",
            retain_indices.len()
        )));
    }
    for j in 0..retain_eval_count {
        let idx = retain_indices[j * retain_indices.len() / retain_eval_count];
        out[idx].split = Split::RetainEval;
    }
    Ok(out)
}

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const PAD: u32 = 3;
pub const UNK: u32 = 4;
const N_SPECIALS: usize = 5;
const SPECIAL_NAMES: [&str; N_SPECIALS] = ["<bos>", "<eos>", "<sep>", "<pad>", "<unk>"];

/// Closed word-level tokenizer derived from a corpus. Rebuilt from the
/// corpus whenever needed; never persisted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

/// A tokenized record: full sequence plus a mask selecting answer tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<u32>,
    pub answer_mask: Vec<bool>,
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    fn unit_id(&self, unit: &str) -> Result<u32> {
        self.index.get(unit).copied().ok_or_else(|| {
            LabError::Internal(format!("unit {unit:?} missing from closed vocabulary"))
        })
    }

    fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|u| self.unit_id(u)).collect()
    }
}

/// Refusal answers substituted for forgotten content by preference
/// optimization; cycled deterministically over the forget records. Their
/// words are folded into the vocabulary so replacements are never OOV.
pub const REFUSAL_TEMPLATES: [&str; 3] = [
    "I do not know the answer to that.",
    "I cannot recall that information.",
    "That is not something I can answer.",
];

/// Build the closed vocabulary over every surface string in the corpus.
/// Unit order is: the five specials, then corpus and template units sorted
/// lexically.
pub fn build_tokenizer(corpus: &[QARecord]) -> Result<Tokenizer> {
    if corpus.is_empty() {
        return Err(LabError::InvalidArgument("empty corpus".into()));
    }
    let mut units = BTreeSet::new();
    for rec in corpus {
        for text in [
            &rec.question,
            &rec.answer,
            &rec.rephrased_question,
            &rec.rephrased_answer,
        ] {
            for unit in text.split_whitespace() {
                units.insert(unit.to_string());
            }
        }
    }
    for template in REFUSAL_TEMPLATES {
        for unit in template.split_whitespace() {
            units.insert(unit.to_string());
        }
    }
    let mut vocab: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
    vocab.extend(units);
    let mut tok = Tokenizer {
        vocab,
        index: HashMap::new(),
    };
    tok.rebuild_index();
    Ok(tok)
}

/// Encode a record as `<bos> question <sep> answer <eos>`, with the answer
/// mask true exactly on the answer tokens.
pub fn encode(tok: &Tokenizer, record: &QARecord, use_rephrased: bool) -> Result<EncodedExample> {
    let (q, a) = if use_rephrased {
        (&record.rephrased_question, &record.rephrased_answer)
    } else {
        (&record.question, &record.answer)
    };
    encode_qa(tok, q, a)
}

/// Encode an arbitrary (question, answer) pair; used by PO's replacement
/// answers which are not corpus records.
pub fn encode_qa(tok: &Tokenizer, question: &str, answer: &str) -> Result<EncodedExample> {
    let q = tok.encode_text(question)?;
    let a = tok.encode_text(answer)?;
    if a.is_empty() {
        return Err(LabError::InvalidArgument("empty answer".into()));
    }
    let mut tokens = Vec::with_capacity(q.len() + a.len() + 3);
    let mut answer_mask = Vec::with_capacity(q.len() + a.len() + 3);
    tokens.push(BOS);
    answer_mask.push(false);
    tokens.extend_from_slice(&q);
    answer_mask.extend(std::iter::repeat(false).take(q.len()));
    tokens.push(SEP);
    answer_mask.push(false);
    tokens.extend_from_slice(&a);
    answer_mask.extend(std::iter::repeat(true).take(a.len()));
    tokens.push(EOS);
    answer_mask.push(false);
    Ok(EncodedExample {
        tokens,
        answer_mask,
    })
}

/// Inverse of encode for in-vocabulary text; specials are dropped.
pub fn decode(tok: &Tokenizer, tokens: &[u32]) -> String {
    tokens
        .iter()
        .filter(|&&t| t as usize >= N_SPECIALS)
        .map(|&t| tok.vocab[t as usize].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_jsonl(path: &Path, corpus: &[QARecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for rec in corpus {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QARecord>> {
    if !path.exists() {
        return Err(LabError::MissingArtifact(path.display().to_string()));
    }
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Hex SHA-256 of a corpus file, recorded in run manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Convenience selectors over a split corpus.
pub fn by_split(corpus: &[QARecord], split: Split) -> Vec<QARecord> {
    corpus.iter().filter(|r| r.split == split).cloned().collect()
}
