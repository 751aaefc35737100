//! Word counting, BLEU tokenization and the offline instance-file line
//! escaping. Kept together so every consumer agrees on what a "word" is.

/// Number of maximal runs of non-whitespace characters.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Tokenizer used by BLEU: whitespace-delimited runs, with every
/// non-alphanumeric character split out as a single-character token.
///
/// `"Hello, world!"` becomes `["Hello", ",", "world", "!"]`.
pub fn bleu_tokens(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    for run in text.split_whitespace() {
        let mut start = None;
        for (pos, ch) in run.char_indices() {
            if ch.is_alphanumeric() {
                if start.is_none() {
                    start = Some(pos);
                }
            } else {
                if let Some(s) = start.take() {
                    tokens.push(&run[s..pos]);
                }
                tokens.push(&run[pos..pos + ch.len_utf8()]);
            }
        }
        if let Some(s) = start {
            tokens.push(&run[s..]);
        }
    }
    tokens
}

/// Escapes an input so that it occupies exactly one line of an offline
/// instance file: `\` becomes `\\`, LF becomes `\n`, CR becomes `\r`.
pub fn escape_line(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape_line`]. Unknown escape sequences are kept verbatim.
pub fn unescape_line(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}
