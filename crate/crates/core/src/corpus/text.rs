use super::{FillerKind, Sentence, Token};

fn filler_kind(word: &str) -> Option<FillerKind> {
    match word {
        "um" | "umm" => Some(FillerKind::Um),
        "uh" | "uhh" => Some(FillerKind::Uh),
        _ => None,
    }
}

/// Splits raw transcript text into lowercase tokens and flags fillers.
///
/// Runs of alphanumeric characters form words; every other non-space
/// character is a token of its own, so `wouldn't` becomes `wouldn`, `'`, `t`.
/// `um`/`umm`/`uh`/`uhh` (any case, optionally wrapped in parentheses) become
/// filler tokens with canonical surfaces `um`/`uh`.
pub fn normalize_fillers(raw: &str) -> Sentence {
    let mut pieces: Vec<String> = Vec::new();
    let mut word = String::new();
    for ch in raw.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            pieces.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            pieces.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        pieces.push(word);
    }

    let mut tokens = Vec::with_capacity(pieces.len());
    let mut i = 0;
    while i < pieces.len() {
        if pieces[i] == "(" && i + 2 < pieces.len() && pieces[i + 2] == ")" {
            if let Some(kind) = filler_kind(&pieces[i + 1]) {
                tokens.push(Token::filler(kind));
                i += 3;
                continue;
            }
        }
        match filler_kind(&pieces[i]) {
            Some(kind) => tokens.push(Token::filler(kind)),
            None => tokens.push(Token::word(std::mem::take(&mut pieces[i]))),
        }
        i += 1;
    }
    Sentence::new(tokens)
}

/// Space-joined transcript form; fillers are written as `(umm)`/`(uhh)`.
pub fn render_sentence(sentence: &Sentence) -> String {
    sentence
        .tokens
        .iter()
        .map(|t| match t.filler {
            Some(kind) => kind.transcript_form(),
            None => t.surface.as_str(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}
