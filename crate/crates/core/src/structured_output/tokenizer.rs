//! Deterministic tokenization and sentence splitting.

/// Splits text into tokens. Implementations must be deterministic.
pub trait Tokenizer: Send + Sync {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Whitespace-separated runs of alphanumerics, with every other
/// non-whitespace character emitted as its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespacePunctTokenizer;

impl Tokenizer for WhitespacePunctTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                word_start.get_or_insert(i);
                continue;
            }
            if let Some(s) = word_start.take() {
                out.push(&text[s..i]);
            }
            if !c.is_whitespace() {
                out.push(&text[i..i + c.len_utf8()]);
            }
        }
        if let Some(s) = word_start {
            out.push(&text[s..]);
        }
        out
    }

    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Token count under the given tokenizer.
pub fn count_tokens(text: &str, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count(text)
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
///
/// Fragments are trimmed, internal whitespace runs collapse to one space, and
/// empty fragments are dropped. The terminator itself is not kept.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                push_fragment(&mut out, &text[start..i]);
                start = i + c.len_utf8();
            }
        }
    }
    push_fragment(&mut out, &text[start..]);
    out
}

fn push_fragment(out: &mut Vec<String>, fragment: &str) {
    let normalized = fragment.split_whitespace().collect::<Vec<_>>().join(" ");
    if !normalized.is_empty() {
        out.push(normalized);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn token_count_examples() {
        let t = WhitespacePunctTokenizer;
        assert_eq!(count_tokens("", &t), 0);
        // the | cat | sat | .
        assert_eq!(count_tokens("the cat sat.", &t), 4);
        assert_eq!(count_tokens("a a a", &t), 3);
        assert_eq!(t.tokenize("<think>x_1</think>"), vec!["<", "think", ">", "x", "_", "1", "<", "/", "think", ">"]);
    }

    #[test]
    fn sentence_examples() {
        assert_eq!(split_sentences("A. B. A."), vec!["A", "B", "A"]);
        assert!(split_sentences("").is_empty());
        assert_eq!(split_sentences("No terminator"), vec!["No terminator"]);
        assert_eq!(split_sentences("x  y!\n z ?  w"), vec!["x y", "z", "w"]);
        // 3.5 has no whitespace after the dot, so it is not a boundary
        assert_eq!(split_sentences("It is 3.5 wide. Done"), vec!["It is 3.5 wide", "Done"]);
    }

    proptest! {
        #[test]
        fn count_is_additive_over_space(a in "\\PC{0,40}", b in "\\PC{0,40}") {
            let t = WhitespacePunctTokenizer;
            let joined = format!("{a} {b}");
            prop_assert_eq!(t.count(&joined), t.count(&a) + t.count(&b));
            let glued = format!("{a}{b}");
            prop_assert!(t.count(&glued) >= t.count(&a).max(t.count(&b)));
            prop_assert_eq!(t.count(&a), t.tokenize(&a).len());
        }
    }
}
