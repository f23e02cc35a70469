//! Fixed toy vocabulary and prompt template.

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
/// "a photo of a" in the toy vocabulary.
pub const TEMPLATE: [usize; 4] = [3, 4, 5, 3];
pub const FIRST_CLASS_TOKEN: usize = 8;

pub fn class_token(class: usize) -> usize {
    FIRST_CLASS_TOKEN + class
}

/// `[START, template.., class, END]`, unpadded.
pub fn prompt(class: usize) -> Vec<usize> {
    let mut t = Vec::with_capacity(TEMPLATE.len() + 3);
    t.push(START);
    t.extend_from_slice(&TEMPLATE);
    t.push(class_token(class));
    t.push(END);
    t
}

/// Pads with [`PAD`] or truncates to `len`. A truncated sequence keeps
/// [`END`] as its last token.
pub fn pad_to(tokens: &[usize], len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = tokens.iter().copied().take(len).collect();
    if tokens.len() > len {
        if let Some(last) = out.last_mut() {
            *last = END;
        }
    }
    out.resize(len, PAD);
    out
}

/// Pooling position: the first [`END`] token, else the last non-pad token.
pub fn end_position(tokens: &[usize]) -> usize {
    tokens
        .iter()
        .position(|&t| t == END)
        .or_else(|| tokens.iter().rposition(|&t| t != PAD))
        .unwrap_or(0)
}

/// Inverse of [`prompt`] for captions built from the template.
pub fn class_of(tokens: &[usize]) -> Option<usize> {
    let pos = 1 + TEMPLATE.len();
    tokens
        .get(pos)
        .and_then(|&t| t.checked_sub(FIRST_CLASS_TOKEN))
}
