use std::sync::OnceLock;

use regex::Regex;

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\[\*\*.*?\*\*\]").expect("valid placeholder pattern"))
}

/// Removes `[** ... **]` de-identification placeholders, collapses whitespace
/// runs to one space and trims both ends.
pub fn preprocess_text(raw: &str) -> String {
    let stripped = placeholder().replace_all(raw, " ");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}
