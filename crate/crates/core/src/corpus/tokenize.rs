//! Whitespace/punctuation tokenization and sentence segmentation.

const TERMINATORS: [char; 3] = ['.', '!', '?'];
const LEADING_PUNCT: &[char] = &['"', '\'', '(', '[', '{', '`'];
const TRAILING_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', ')', ']', '}', '`'];

/// True for the sentence-final tokens `.`, `!` and `?`.
pub fn is_terminator(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if TERMINATORS.contains(&c))
}

/// True when the token carries at least one alphanumeric character.
pub fn is_word(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric)
}

/// Split on whitespace, then peel leading and trailing punctuation off each
/// chunk into single-character tokens. Interior punctuation (`don't`,
/// `ORGANIZATION0`) is left alone.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while let Some(c) = rest.chars().next() {
            if LEADING_PUNCT.contains(&c) && rest.len() > c.len_utf8() {
                tokens.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trailing = Vec::new();
        while let Some(c) = rest.chars().next_back() {
            if TRAILING_PUNCT.contains(&c) && rest.len() > c.len_utf8() {
                trailing.push(c.to_string());
                rest = &rest[..rest.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        if !rest.is_empty() {
            tokens.push(rest.to_string());
        }
        tokens.extend(trailing.into_iter().rev());
    }
    tokens
}

/// Join tokens back into display text: a space between tokens except before
/// closing punctuation.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        let closing = tok.len() == 1 && TRAILING_PUNCT.contains(&tok.chars().next().unwrap_or(' '));
        if i > 0 && !(closing && !matches!(tok, "\"" | "'" | "`")) {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// Split text into sentences at `.`, `!` or `?` when followed by whitespace
/// or end of input. Returned sentences are trimmed and non-empty.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if TERMINATORS.contains(&c) {
            let boundary = match iter.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if boundary {
                let end = i + c.len_utf8();
                let piece = text[start..end].trim();
                if !piece.is_empty() {
                    sentences.push(piece.to_string());
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_is_split_off() {
        assert_eq!(
            tokenize("Alex finds the key."),
            vec!["Alex", "finds", "the", "key", "."]
        );
        assert_eq!(tokenize("\"Run!\" she said"), vec!["\"", "Run", "!", "\"", "she", "said"]);
        assert_eq!(tokenize("don't"), vec!["don't"]);
    }

    #[test]
    fn entity_tags_are_opaque() {
        assert_eq!(
            tokenize("ORGANIZATION0 attacks LOCATION1."),
            vec!["ORGANIZATION0", "attacks", "LOCATION1", "."]
        );
    }

    #[test]
    fn sentences_split_on_terminators_followed_by_space() {
        assert_eq!(
            split_sentences("The ship exploded. Everyone died! Why? v2.0 shipped"),
            vec!["The ship exploded.", "Everyone died!", "Why?", "v2.0 shipped"]
        );
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn detokenize_attaches_closing_punctuation() {
        let toks = tokenize("The ship exploded, again.");
        assert_eq!(detokenize(&toks), "The ship exploded, again.");
    }

    #[test]
    fn terminators() {
        assert!(is_terminator("."));
        assert!(is_terminator("?"));
        assert!(!is_terminator(".."));
        assert!(!is_terminator(","));
    }
}
