//! Small text helpers shared by the rule-based backends.

/// Lowercased word tokens. Apostrophes inside words are kept (`don't`), curly
/// quotes are folded to ASCII, digits and decimal points stay attached.
pub fn tokens(text: &str) -> Vec<String> {
    let folded: String = text
        .chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' => '\'',
            c => c,
        })
        .collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = folded.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let keep = c.is_alphanumeric()
            || (c == '\'' && !cur.is_empty() && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric()))
            || (c == '.' && cur.chars().last().is_some_and(|p| p.is_ascii_digit())
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()));
        if keep {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token stream joined with single spaces and padded, so that phrase lookups
/// respect word boundaries: `padded("Why did you?").contains(" why did ")`.
pub fn padded(text: &str) -> String {
    let t = tokens(text);
    let mut s = String::with_capacity(text.len() + 2);
    s.push(' ');
    s.push_str(&t.join(" "));
    s.push(' ');
    s
}

/// Whole-word phrase test against a [`padded`] string.
pub fn has_phrase(padded_text: &str, phrase: &str) -> bool {
    let needle = format!(" {} ", phrase.trim());
    padded_text.contains(&needle)
}

/// Returns the first phrase of `phrases` present in `padded_text`.
pub fn first_phrase<'a>(padded_text: &str, phrases: &[&'a str]) -> Option<&'a str> {
    phrases.iter().copied().find(|p| has_phrase(padded_text, p))
}

const NUMBER_WORDS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "twenty", "thirty", "forty", "fifty", "hundred", "thousand", "half", "twice", "double",
    "third", "quarter", "percent",
];

pub fn is_numeric_token(tok: &str) -> bool {
    tok.chars().any(|c| c.is_ascii_digit()) || NUMBER_WORDS.contains(&tok)
}

pub fn is_question(text: &str) -> bool {
    text.trim_end().ends_with('?')
}
