use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{detokenize, tokenize, Example, LabelMaps};
use crate::error::{Error, Result};

pub const FEMALE: usize = 0;
pub const MALE: usize = 1;

#[derive(Debug, Clone, Copy)]
pub struct Profession {
    pub name: &'static str,
    /// Job title, placed close to the name and pronoun.
    pub title: &'static str,
    /// Domain words, placed at least three tokens away from any gendered token.
    pub domain: &'static [&'static str],
    /// Gender the profession is spuriously tied to.
    pub designated_gender: usize,
}

const fn prof(
    name: &'static str,
    domain: &'static [&'static str],
    designated_gender: usize,
) -> Profession {
    Profession {
        name,
        title: name,
        domain,
        designated_gender,
    }
}

/// Alternating designations keep every prefix gender-balanced.
pub const PROFESSIONS: [Profession; 12] = [
    prof("model", &["fashion", "runway", "catwalk"], FEMALE),
    prof("surgeon", &["surgical", "operating", "transplant"], MALE),
    prof("nurse", &["nursing", "ward", "bedside"], FEMALE),
    prof("programmer", &["software", "coding", "compiler"], MALE),
    prof("teacher", &["classroom", "pupils", "curriculum"], FEMALE),
    prof("attorney", &["legal", "courtroom", "litigation"], MALE),
    prof("photographer", &["camera", "photography", "portrait"], FEMALE),
    prof("architect", &["building", "blueprint", "urban"], MALE),
    prof("journalist", &["newsroom", "reporting", "editorial"], FEMALE),
    prof("chef", &["culinary", "kitchen", "restaurant"], MALE),
    prof("dietitian", &["nutrition", "diet", "meal"], FEMALE),
    prof("pastor", &["church", "congregation", "ministry"], MALE),
];

const FEMALE_NAMES: &[&str] = &[
    "Angela", "Maria", "Susan", "Emily", "Sarah", "Laura", "Anna", "Julia", "Karen", "Linda",
    "Rachel", "Nora",
];
const MALE_NAMES: &[&str] = &[
    "James", "Robert", "David", "Michael", "John", "Thomas", "Daniel", "Paul", "Mark", "Peter",
    "Kevin", "Brian",
];
const SURNAMES: &[&str] = &[
    "Lindvall", "Smith", "Garcia", "Chen", "Novak", "Patel", "Keller", "Moreau", "Tanaka",
    "Okafor", "Silva", "Berg", "Walsh", "Rossi", "Kim",
];
const ADJECTIVES: &[&str] = &["local", "busy", "wider", "regional", "growing", "modern"];
const NUMBERS: &[&str] = &["5", "8", "10", "12", "15", "20"];

// {F} first name, {L} surname, {P}/{p} capitalized/lowercase pronoun,
// {T} job title, {D} domain word, {A} adjective, {N} number.
const TEMPLATES: &[&str] = &[
    "{F} {L} is a {T} and {p} has worked for {N} years . The {A} {D} community knows the work well .",
    "{F} {L} works as a {T} . {P} also writes about {D} topics in a {A} weekly column .",
    "After {N} years of {A} {D} training abroad , {F} {L} became a {T} and {p} loves the job .",
    "{F} {L} is a {T} . For {N} years the {A} {D} world has been home , and {p} plans to stay .",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_examples: usize,
    /// Probability that an example's gender is the designated gender of its
    /// profession; otherwise gender is uniform.
    pub bias_strength: f64,
    pub num_professions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_examples: 5000,
            bias_strength: 0.9,
            num_professions: 4,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::Config(format!(
                "bias strength {} outside [0, 1]",
                self.bias_strength
            )));
        }
        if self.num_examples == 0 {
            return Err(Error::Config("num_examples must be at least 1".into()));
        }
        if !(1..=PROFESSIONS.len()).contains(&self.num_professions) {
            return Err(Error::Config(format!(
                "num_professions must be in 1..={}",
                PROFESSIONS.len()
            )));
        }
        Ok(())
    }

    pub fn label_maps(&self) -> LabelMaps {
        LabelMaps {
            gender: vec!["female".into(), "male".into()],
            profession: PROFESSIONS[..self.num_professions]
                .iter()
                .map(|p| p.name.to_owned())
                .collect(),
        }
    }
}

/// Generates templated biographies. Output is a pure function of `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Example>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.num_examples);
    for _ in 0..config.num_examples {
        let task_label = rng.gen_range(0..config.num_professions);
        let profession = &PROFESSIONS[task_label];
        let bias_label = if rng.gen_bool(config.bias_strength) {
            profession.designated_gender
        } else {
            rng.gen_range(0..2)
        };
        out.push(biography(&mut rng, profession, task_label, bias_label)?);
    }
    Ok(out)
}

fn biography(
    rng: &mut ChaCha8Rng,
    profession: &Profession,
    task_label: usize,
    bias_label: usize,
) -> Result<Example> {
    let template = TEMPLATES.choose(rng).expect("templates");
    let names = if bias_label == FEMALE { FEMALE_NAMES } else { MALE_NAMES };
    let first = *names.choose(rng).expect("names");
    let last = *SURNAMES.choose(rng).expect("surnames");
    let domain = *profession.domain.choose(rng).expect("domain");
    let adjective = *ADJECTIVES.choose(rng).expect("adjectives");
    let number = *NUMBERS.choose(rng).expect("numbers");
    let (cap, low) = if bias_label == FEMALE { ("She", "she") } else { ("He", "he") };

    let mut surfaces = Vec::new();
    let mut gendered = Vec::new();
    for slot in template.split_whitespace() {
        let (word, is_gendered) = match slot {
            "{F}" => (first, true),
            "{L}" => (last, true),
            "{P}" => (cap, true),
            "{p}" => (low, true),
            "{T}" => (profession.title, false),
            "{D}" => (domain, false),
            "{A}" => (adjective, false),
            "{N}" => (number, false),
            literal => (literal, false),
        };
        if is_gendered {
            gendered.push(surfaces.len());
        }
        surfaces.push(word);
    }
    let text = detokenize(&surfaces);
    let tokens = tokenize(&text)?;
    debug_assert_eq!(tokens.len(), surfaces.len());
    Ok(Example {
        text,
        tokens,
        task_label,
        bias_label,
        gendered_token_indices: Some(gendered),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(rho: f64, n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            num_examples: n,
            bias_strength: rho,
            num_professions: 4,
            seed,
        }
    }

    #[test]
    fn no_bias_means_chance_cooccurrence() {
        let corpus = generate_synthetic(&config(0.0, 10_000, 7)).unwrap();
        // Brute-force count of designated-gender agreement per profession.
        for p in 0..4 {
            let of_p: Vec<_> = corpus.iter().filter(|e| e.task_label == p).collect();
            let agree = of_p
                .iter()
                .filter(|e| e.bias_label == PROFESSIONS[p].designated_gender)
                .count();
            let rate = agree as f64 / of_p.len() as f64;
            assert!((rate - 0.5).abs() <= 0.05, "profession {p}: {rate}");
        }
    }

    #[test]
    fn full_bias_ties_model_to_female_cues() {
        let corpus = generate_synthetic(&config(1.0, 2_000, 11)).unwrap();
        let models: Vec<_> = corpus.iter().filter(|e| e.task_label == 0).collect();
        assert!(!models.is_empty());
        for ex in models {
            assert_eq!(ex.bias_label, FEMALE);
            let idx = ex.gendered_token_indices.as_ref().unwrap();
            assert!(idx
                .iter()
                .any(|&i| ex.tokens.tokens[i] == "she"));
            assert!(FEMALE_NAMES
                .iter()
                .any(|n| n.to_lowercase() == ex.tokens.tokens[idx[0]]
                    || n.to_lowercase() == ex.tokens.tokens[idx[1]]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&config(0.7, 500, 3)).unwrap();
        let b = generate_synthetic(&config(0.7, 500, 3)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&config(0.7, 500, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn one_name_pair_and_one_pronoun() {
        for ex in generate_synthetic(&config(0.5, 300, 1)).unwrap() {
            let idx = ex.gendered_token_indices.unwrap();
            assert_eq!(idx.len(), 3);
            assert_eq!(idx[1], idx[0] + 1);
            assert!(["he", "she"].contains(&ex.tokens.tokens[idx[2]].as_str()));
        }
    }

    #[test]
    fn domain_words_are_away_from_gendered_tokens() {
        for ex in generate_synthetic(&config(0.5, 300, 2)).unwrap() {
            let gendered = ex.gendered_token_indices.unwrap();
            let prof = &PROFESSIONS[ex.task_label];
            for (i, tok) in ex.tokens.tokens.iter().enumerate() {
                if prof.domain.contains(&tok.as_str()) {
                    assert!(gendered.iter().all(|&g| g.abs_diff(i) >= 3), "{}", ex.text);
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(generate_synthetic(&config(1.5, 10, 0)).is_err());
        assert!(generate_synthetic(&config(0.5, 0, 0)).is_err());
        let mut c = config(0.5, 10, 0);
        c.num_professions = 13;
        assert!(generate_synthetic(&c).is_err());
    }
}
