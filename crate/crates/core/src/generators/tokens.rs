//! Whitespace token accounting and prefix-truncation input reduction.

use crate::physical::TokenBudget;

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Number of tokens kept out of `n` at `budget`: ceil(budget·n), at least
/// one token of a nonempty input.
pub fn kept_tokens(n: usize, budget: TokenBudget) -> usize {
    if budget.is_full() || n == 0 {
        return n;
    }
    // guard against 0.1·1000 landing a hair above 100
    let k = (budget.get() * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Keeps the first ceil(budget·n) tokens. The original spacing and line
/// breaks inside the kept prefix are preserved.
pub fn reduce_input(text: &str, budget: TokenBudget) -> String {
    let n = count_tokens(text);
    let k = kept_tokens(n, budget);
    if k == n {
        return text.to_string();
    }
    truncate_tokens(text, k)
}

/// The prefix of `text` ending at the end of its `k`-th token.
pub fn truncate_tokens(text: &str, k: usize) -> String {
    if k == 0 {
        return String::new();
    }
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                seen += 1;
                if seen == k {
                    return text[..i].to_string();
                }
            }
            in_token = false;
        } else {
            in_token = true;
        }
    }
    text.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> TokenBudget {
        TokenBudget::new(x).unwrap()
    }

    #[test]
    fn budgets() {
        let doc: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let doc = doc.join(" ");
        assert_eq!(reduce_input(&doc, b(1.0)), doc);
        let half = reduce_input(&doc, b(0.5));
        assert_eq!(count_tokens(&half), 50);
        assert!(half.ends_with("w49"));
        assert_eq!(reduce_input("a b c", b(0.1)), "a");
        assert_eq!(reduce_input("", b(0.1)), "");
    }

    #[test]
    fn keeps_layout() {
        let t = "From: a@b.c\nSubject:  hi there\n\nbody text";
        assert_eq!(reduce_input(t, b(0.5)), "From: a@b.c\nSubject:  hi");
    }
}
