//! Rule-based feedback parser.
//!
//! Feedback is split into clauses on `,` `;` `.` `and` `but`. Each clause
//! needs a polarity cue ("ignore", "don't use", "is a woman's name" → High;
//! "keep", "is fine", "not gendered" → Low) and one or more targets:
//! quoted or verbatim input words, pronouns, names, or gendered words in
//! general. A clause with targets but no cue ("ignore pronouns and names")
//! borrows the polarity of its nearest cued neighbour.

use std::collections::HashSet;

use super::{FeedbackParse, FeedbackParser, Label, ParseSource};
use crate::corpus::{tokenize, TokenSequence};
use crate::error::{Error, Result};

pub const PRONOUNS: &[&str] = &["he", "she", "her", "his", "him", "hers", "himself", "herself"];

pub const FIRST_NAMES: &[&str] = &[
    "aaron", "adam", "alan", "albert", "alex", "alice", "amanda", "amy", "andrea", "andrew", "angela", "anna",
    "anne", "anthony", "barbara", "ben", "benjamin", "beth", "betty", "bill", "bob", "brian", "carl", "carol",
    "caroline", "catherine", "charles", "chris", "christine", "christopher", "claire", "daniel", "david", "deborah",
    "diana", "donald", "dorothy", "edward", "elena", "elizabeth", "ellen", "emily", "emma", "eric", "frank", "gary",
    "george", "grace", "hannah", "helen", "henry", "jack", "james", "jane", "jason", "jeff", "jennifer", "jessica",
    "joe", "john", "joseph", "joshua", "julia", "julie", "karen", "kate", "kathy", "kevin", "kim", "laura",
    "linda", "lisa", "lucy", "margaret", "maria", "mark", "martha", "mary", "matthew", "megan", "michael",
    "michelle", "nancy", "nicole", "nora", "olivia", "patricia", "paul", "peter", "rachel", "richard", "robert",
    "ruth", "ryan", "sam", "samuel", "sandra", "sarah", "scott", "sharon", "sophia", "stephen", "steven", "susan",
    "thomas", "tim", "timothy", "tom", "victoria", "william",
];

const HIGH_CUES: &[&[&str]] = &[
    &["is", "a", "woman's", "name"],
    &["is", "a", "man's", "name"],
    &["is", "a", "womans", "name"],
    &["is", "a", "mans", "name"],
    &["is", "a", "female", "name"],
    &["is", "a", "male", "name"],
    &["are", "women's", "names"],
    &["are", "men's", "names"],
    &["do", "not", "rely", "on"],
    &["do", "not", "look", "at"],
    &["don't", "look", "at"],
    &["should", "not", "count"],
    &["shouldn't", "count"],
    &["forget", "about"],
    &["stop", "using"],
    &["leave", "out"],
    &["gives", "away"],
    &["give", "away"],
    &["is", "irrelevant"],
    &["are", "irrelevant"],
    &["don't", "rely", "on"],
    &["do", "not", "use"],
    &["should", "not", "matter"],
    &["shouldn't", "matter"],
    &["woman's", "name"],
    &["man's", "name"],
    &["is", "a", "name"],
    &["are", "names"],
    &["don't", "use"],
    &["dont", "use"],
    &["is", "gendered"],
    &["are", "gendered"],
    &["is", "biased"],
    &["are", "biased"],
    &["remove"],
    &["ignore"],
    &["avoid"],
    &["exclude"],
    &["skip"],
    &["omit"],
    &["discard"],
    &["disregard"],
    &["forget"],
    &["hide"],
    &["mask"],
    &["drop"],
    &["block"],
    &["reveals"],
    &["reveal"],
    &["no"],
    &["not"],
];

const LOW_CUES: &[&[&str]] = &[
    &["is", "not", "gendered"],
    &["are", "not", "gendered"],
    &["it's", "fine", "to", "use"],
    &["is", "not", "biased"],
    &["you", "can", "use"],
    &["isn't", "gendered"],
    &["aren't", "gendered"],
    &["not", "gendered"],
    &["is", "fine"],
    &["are", "fine"],
    &["is", "ok"],
    &["is", "okay"],
    &["is", "needed"],
    &["are", "needed"],
    &["is", "neutral"],
    &["is", "relevant"],
    &["can", "use"],
    &["keep"],
    &["retain"],
    &["is", "important"],
    &["are", "important"],
    &["allow"],
    &["use"],
];

const STOPWORDS: &[&str] = &[
    "a", "about", "all", "also", "an", "any", "anything", "are", "as", "at", "be", "bias", "biased", "both", "but",
    "by", "can", "cue", "cues", "do", "does", "either", "every", "everything", "female", "for", "from", "gender",
    "here", "i", "in", "info", "information", "input", "is", "it", "its", "just", "male", "man", "man's", "me", "men's",
    "mention", "mentions", "my", "neither", "nor", "of", "on", "only", "or", "other", "please", "reference",
    "references", "sensitive", "should", "so", "still", "term", "terms", "text", "that", "the", "their", "them",
    "these", "they", "this", "those", "to", "token", "tokens", "too", "very", "with", "woman", "woman's",
    "women's", "word", "words", "you", "your",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Tier {
    Capitalization,
    Lexicon,
    Verbatim,
}

impl Tier {
    fn confidence(self, label: Label) -> f64 {
        match (self, label) {
            (Tier::Verbatim, Label::High) => 1.0,
            (Tier::Verbatim, _) => 0.0,
            (Tier::Lexicon, Label::High) => 0.9,
            (Tier::Lexicon, _) => 0.1,
            (Tier::Capitalization, Label::High) => 0.7,
            (Tier::Capitalization, _) => 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Word(String),
    Quote(String),
    Break,
}

#[derive(Debug, Default)]
struct Clause {
    text: String,
    polarity: Option<Label>,
    targets: Vec<(usize, Tier)>,
    unknown: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GrammarParser {
    first_names: HashSet<String>,
}

impl Default for GrammarParser {
    fn default() -> Self {
        Self::with_first_names(FIRST_NAMES.iter().copied())
    }
}

impl GrammarParser {
    pub fn with_first_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            first_names: names.into_iter().map(str::to_lowercase).collect(),
        }
    }

    fn pronouns(&self, input: &TokenSequence) -> Vec<(usize, Tier)> {
        (0..input.len())
            .filter(|&i| PRONOUNS.contains(&input.tokens[i].as_str()))
            .map(|i| (i, Tier::Lexicon))
            .collect()
    }

    fn names(&self, input: &TokenSequence) -> Vec<(usize, Tier)> {
        let mut out = Vec::new();
        for i in 0..input.len() {
            let token = &input.tokens[i];
            if PRONOUNS.contains(&token.as_str()) {
                continue;
            }
            if self.first_names.contains(token) {
                out.push((i, Tier::Lexicon));
            } else if is_capitalized(&input.surfaces[i]) && !sentence_initial(input, i) {
                out.push((i, Tier::Capitalization));
            }
        }
        out
    }

    fn analyse(&self, words: &[Piece], input: &TokenSequence, bias_variable: &str) -> Clause {
        let plain: Vec<&str> = words
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.as_str(),
                _ => "",
            })
            .collect();
        let mut clause = Clause {
            text: words
                .iter()
                .map(|p| match p {
                    Piece::Word(w) => w.clone(),
                    Piece::Quote(q) => format!("\"{q}\""),
                    Piece::Break => String::new(),
                })
                .collect::<Vec<_>>()
                .join(" "),
            ..Default::default()
        };

        let mut consumed = vec![false; words.len()];
        if let Some((label, start, len)) = find_cue(&plain) {
            clause.polarity = Some(label);
            consumed[start..start + len].iter_mut().for_each(|c| *c = true);
        }

        let bias_variable = bias_variable.to_lowercase();
        let (mut want_pronouns, mut want_names, mut want_gendered) = (false, false, false);
        for (k, piece) in words.iter().enumerate() {
            if consumed[k] {
                continue;
            }
            match piece {
                Piece::Quote(q) => clause.targets.extend(quoted_targets(q, input)),
                Piece::Word(w) => match w.as_str() {
                    "pronoun" | "pronouns" => want_pronouns = true,
                    "name" | "names" | "surname" | "surnames" | "firstname" | "firstnames" => want_names = true,
                    "gendered" | "gender-specific" => want_gendered = true,
                    w if w == bias_variable => want_gendered = true,
                    w if STOPWORDS.contains(&w) => {}
                    w => {
                        let hits = verbatim_targets(w, input);
                        if hits.is_empty() {
                            clause.unknown.push(w.to_owned());
                        } else {
                            clause.targets.extend(hits);
                        }
                    }
                },
                Piece::Break => {}
            }
        }
        // "gendered names" restricts to names; bare "gendered words" means both.
        if want_gendered && !want_names && !want_pronouns {
            want_names = true;
            want_pronouns = true;
        }
        if want_pronouns {
            clause.targets.extend(self.pronouns(input));
        }
        if want_names {
            clause.targets.extend(self.names(input));
        }
        clause
    }
}

impl FeedbackParser for GrammarParser {
    fn name(&self) -> &'static str {
        "grammar"
    }

    fn parse(&self, feedback: &str, input: &TokenSequence, bias_variable: &str) -> Result<FeedbackParse> {
        if feedback.trim().is_empty() {
            return Err(Error::UnparseableFeedback("feedback is empty".into()));
        }
        let mut clauses: Vec<Clause> = split_clauses(&lex(feedback))
            .iter()
            .map(|words| self.analyse(words, input, bias_variable))
            .collect();

        // Elliptical clauses borrow polarity from the nearest cued clause.
        let cued: Vec<(usize, Label)> = clauses
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.polarity.map(|p| (k, p)))
            .collect();
        for (k, clause) in clauses.iter_mut().enumerate() {
            if clause.polarity.is_none() && !clause.targets.is_empty() && clause.unknown.is_empty() {
                let before = cued.iter().rev().find(|(j, _)| *j < k);
                let after = cued.iter().find(|(j, _)| *j > k);
                clause.polarity = before.or(after).map(|&(_, p)| p);
            }
        }

        let n = input.len();
        let mut assigned: Vec<Option<(Tier, Label)>> = vec![None; n];
        let mut warnings = Vec::new();
        let mut applied = 0;
        for clause in &clauses {
            let Some(label) = clause.polarity else {
                warnings.push(format!("no polarity cue in clause \"{}\"", clause.text));
                continue;
            };
            if clause.targets.is_empty() {
                warnings.push(format!("clause \"{}\" matched no input tokens", clause.text));
                continue;
            }
            if !clause.unknown.is_empty() {
                warnings.push(format!(
                    "ignored unmatched words {:?} in clause \"{}\"",
                    clause.unknown, clause.text
                ));
            }
            applied += 1;
            for &(i, tier) in &clause.targets {
                // Stronger evidence wins; at equal strength the later clause wins.
                if assigned[i].is_none_or(|(old, _)| tier >= old) {
                    assigned[i] = Some((tier, label));
                }
            }
        }
        if applied == 0 {
            return Err(Error::UnparseableFeedback(if warnings.is_empty() {
                "no clause could be interpreted".into()
            } else {
                warnings.join("; ")
            }));
        }

        let mut parse = FeedbackParse::all_na(n, ParseSource::Grammar);
        for (i, slot) in assigned.into_iter().enumerate() {
            if let Some((tier, label)) = slot {
                parse.labels[i] = label;
                parse.confidence[i] = Some(tier.confidence(label));
            }
        }
        parse.warnings = warnings;
        Ok(parse)
    }
}

fn find_cue(words: &[&str]) -> Option<(Label, usize, usize)> {
    let mut best: Option<(Label, usize, usize)> = None;
    let tables = [(Label::High, HIGH_CUES), (Label::Low, LOW_CUES)];
    for (label, table) in tables {
        for cue in table {
            if let Some(start) = words.windows(cue.len()).position(|w| w == *cue) {
                let better = match best {
                    None => true,
                    Some((_, s, l)) => cue.len() > l || (cue.len() == l && start < s),
                };
                if better {
                    best = Some((label, start, cue.len()));
                }
            }
        }
    }
    best
}

fn verbatim_targets(word: &str, input: &TokenSequence) -> Vec<(usize, Tier)> {
    let find = |w: &str| -> Vec<(usize, Tier)> {
        (0..input.len())
            .filter(|&i| input.tokens[i] == w)
            .map(|i| (i, Tier::Verbatim))
            .collect()
    };
    let hits = find(word);
    if hits.is_empty() {
        if let Some(stem) = word.strip_suffix('s').filter(|s| !s.is_empty()) {
            return find(stem);
        }
    }
    hits
}

fn quoted_targets(quote: &str, input: &TokenSequence) -> Vec<(usize, Tier)> {
    let Ok(phrase) = tokenize(quote) else {
        return Vec::new();
    };
    let needle = &phrase.tokens;
    let mut hits = Vec::new();
    if needle.len() <= input.len() {
        for start in 0..=input.len() - needle.len() {
            if input.tokens[start..start + needle.len()] == needle[..] {
                hits.extend((start..start + needle.len()).map(|i| (i, Tier::Verbatim)));
            }
        }
    }
    if hits.is_empty() {
        for w in needle {
            hits.extend(verbatim_targets(w, input));
        }
    }
    hits
}

fn is_capitalized(surface: &str) -> bool {
    let mut chars = surface.chars();
    chars.next().is_some_and(char::is_uppercase) && surface.chars().all(char::is_alphabetic)
}

fn sentence_initial(input: &TokenSequence, i: usize) -> bool {
    i == 0 || matches!(input.tokens[i - 1].as_str(), "." | "!" | "?")
}

/// Splits feedback into words, quoted spans and clause breaks.
fn lex(feedback: &str) -> Vec<Piece> {
    let text: String = feedback
        .chars()
        .map(|c| match c {
            '\u{2019}' | '\u{2018}' => '\'',
            '\u{201c}' | '\u{201d}' => '"',
            c => c,
        })
        .collect();
    let chars: Vec<char> = text.chars().collect();
    let mut pieces = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, pieces: &mut Vec<Piece>| {
        if !word.is_empty() {
            let w = word.trim_matches('\'').to_lowercase();
            match w.as_str() {
                "" => {}
                "and" | "but" => pieces.push(Piece::Break),
                _ => pieces.push(Piece::Word(w)),
            }
            word.clear();
        }
    };
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let opens_single = c == '\''
            && (i == 0 || !chars[i - 1].is_alphanumeric())
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c == '"' || c == '`' || opens_single {
            let close = chars[i + 1..].iter().position(|&x| x == c).map(|p| p + i + 1);
            if let Some(end) = close {
                flush(&mut word, &mut pieces);
                pieces.push(Piece::Quote(chars[i + 1..end].iter().collect()));
                i = end + 1;
                continue;
            }
        }
        if c.is_alphanumeric() || c == '\'' || (c == '-' && !word.is_empty()) {
            word.push(c);
        } else {
            flush(&mut word, &mut pieces);
            if matches!(c, ',' | ';' | '.' | '!' | '?' | ':') {
                pieces.push(Piece::Break);
            }
        }
        i += 1;
    }
    flush(&mut word, &mut pieces);
    pieces
}

fn split_clauses(pieces: &[Piece]) -> Vec<Vec<Piece>> {
    pieces
        .split(|p| *p == Piece::Break)
        .filter(|c| !c.is_empty())
        .map(<[Piece]>::to_vec)
        .collect()
}
