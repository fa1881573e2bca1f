//! Character-offset helpers shared by the taggers.

/// A word token with character offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
    /// Only whitespace separates this token from the previous one.
    pub joined_to_previous: bool,
    /// First token of the text or first after `.`, `?`, `!` or `;`.
    pub sentence_initial: bool,
}

impl WordToken {
    pub fn is_capitalized(&self) -> bool {
        self.text.chars().next().is_some_and(char::is_uppercase)
    }

    pub fn lower(&self) -> String {
        self.text.to_lowercase()
    }
}

fn is_inner(c: char) -> bool {
    c == '\'' || c == '-' || c == '’'
}

/// Splits text into alphanumeric word tokens; apostrophes and hyphens are
/// kept when they sit between alphanumerics.
pub fn word_tokens(text: &str) -> Vec<WordToken> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut saw_punct = false;
    let mut sentence_break = true;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            let start = i;
            let mut end = i + 1;
            while end < chars.len() {
                let d = chars[end];
                if d.is_alphanumeric() {
                    end += 1;
                } else if is_inner(d) && end + 1 < chars.len() && chars[end + 1].is_alphanumeric() {
                    end += 2;
                } else {
                    break;
                }
            }
            tokens.push(WordToken {
                text: chars[start..end].iter().collect(),
                start,
                end,
                joined_to_previous: !tokens.is_empty() && !saw_punct,
                sentence_initial: sentence_break,
            });
            saw_punct = false;
            sentence_break = false;
            i = end;
        } else {
            if !c.is_whitespace() {
                saw_punct = true;
                if matches!(c, '.' | '?' | '!' | ';') {
                    sentence_break = true;
                }
            }
            i += 1;
        }
    }
    tokens
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Substring by character offsets. Out-of-range offsets are clamped.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars()
        .skip(start)
        .take(end.saturating_sub(start))
        .collect()
}

/// All non-overlapping occurrences of `needle` in `haystack` (character
/// offsets) that are not glued to neighbouring alphanumerics.
pub fn find_word_matches(haystack: &[char], needle: &str) -> Vec<(usize, usize)> {
    let needle: Vec<char> = needle.chars().collect();
    let mut out = Vec::new();
    if needle.is_empty() || needle.len() > haystack.len() {
        return out;
    }
    let mut i = 0;
    while i + needle.len() <= haystack.len() {
        if haystack[i..i + needle.len()] == needle[..] {
            let end = i + needle.len();
            let left_ok = i == 0 || !haystack[i - 1].is_alphanumeric();
            let right_ok = end == haystack.len() || !haystack[end].is_alphanumeric();
            if left_ok && right_ok {
                out.push((i, end));
                i = end;
                continue;
            }
        }
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_track_offsets_and_breaks() {
        let toks = word_tokens("Who is this? Barack Obama's dog, Bo.");
        let texts: Vec<_> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(
            texts,
            ["Who", "is", "this", "Barack", "Obama's", "dog", "Bo"]
        );
        assert_eq!((toks[3].start, toks[3].end), (13, 19));
        assert!(toks[0].sentence_initial);
        assert!(toks[3].sentence_initial && !toks[3].joined_to_previous);
        assert!(toks[4].joined_to_previous);
        assert!(!toks[6].joined_to_previous);
    }

    #[test]
    fn word_matches_respect_boundaries() {
        let hay: Vec<char> = "Ann and Annabel met Ann".chars().collect();
        assert_eq!(find_word_matches(&hay, "Ann"), vec![(0, 3), (20, 23)]);
        assert!(find_word_matches(&hay, "").is_empty());
    }

    #[test]
    fn char_slice_handles_multibyte() {
        assert_eq!(char_slice("Zoë Saldaña", 4, 11), "Saldaña");
        assert_eq!(char_len("Zoë"), 3);
    }
}
