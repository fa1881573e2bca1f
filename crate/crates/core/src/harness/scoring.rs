use serde::{Deserialize, Serialize};

use crate::spans::Answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoreMode {
    /// 1 iff the prediction equals any gold answer.
    Exact,
    /// `min(matching annotators / 3, 1)`, with weights read as fractions of
    /// ten annotators.
    Soft,
}

const ARTICLES: &[&str] = &["a", "an", "the"];

/// Lowercase, drop punctuation and articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scores one prediction against the gold answers. With `normalize` off,
/// strings are compared verbatim.
pub fn score_answer(prediction: &str, answers: &[Answer], mode: ScoreMode, normalize: bool) -> f64 {
    let norm = |s: &str| {
        if normalize {
            normalize_answer(s)
        } else {
            s.to_string()
        }
    };
    let pred = norm(prediction);
    match mode {
        ScoreMode::Exact => f64::from(u8::from(answers.iter().any(|a| norm(&a.text) == pred))),
        ScoreMode::Soft => {
            let weight: f64 = answers
                .iter()
                .filter(|a| norm(&a.text) == pred)
                .map(|a| a.weight)
                .sum();
            (weight * 10.0 / 3.0).min(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answers(list: &[(&str, f64)]) -> Vec<Answer> {
        list.iter()
            .map(|&(t, w)| Answer {
                text: t.into(),
                weight: w,
            })
            .collect()
    }

    #[test]
    fn exact_examples() {
        assert_eq!(
            score_answer("dog", &answers(&[("dog", 1.0)]), ScoreMode::Exact, true),
            1.0
        );
        assert_eq!(
            score_answer("Dog.", &answers(&[("dog", 1.0)]), ScoreMode::Exact, true),
            1.0
        );
        assert_eq!(
            score_answer("Dog.", &answers(&[("dog", 1.0)]), ScoreMode::Exact, false),
            0.0
        );
        assert_eq!(
            score_answer("cat", &answers(&[("dog", 1.0)]), ScoreMode::Exact, true),
            0.0
        );
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("  The  Eiffel-Tower! "), "eiffel tower");
        assert_eq!(normalize_answer("an apple"), "apple");
    }

    #[test]
    fn soft_consensus() {
        // two of ten annotators
        let a = answers(&[("dog", 0.2), ("cat", 0.8)]);
        let s = score_answer("dog", &a, ScoreMode::Soft, true);
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(score_answer("cat", &a, ScoreMode::Soft, true), 1.0);
        assert_eq!(score_answer("cow", &a, ScoreMode::Soft, true), 0.0);
    }
}
