//! Independent ground-truth evaluator. Parses generated lines back from
//! text and recomputes their answers with its own arithmetic/interpreter
//! code, sharing nothing with the generators beyond the cipher key.

use super::cipher_key::CipherKey;
use super::{word_lists, Domain};

/// Verify one line of the given domain. Returns false for malformed lines
/// or wrong answers.
pub fn verify_line(tag: Domain, line: &str, key: &CipherKey) -> bool {
    match tag {
        Domain::Arith => verify_arith(line),
        Domain::Code => verify_code(line),
        Domain::Cipher => verify_cipher(line, key),
        Domain::CipherArith => verify_arith(&key.invert(line)),
        Domain::Mixed => verify_filler(line),
    }
}

fn parse_int(s: &str) -> Option<i64> {
    s.trim().parse::<i64>().ok()
}

/// Evaluate a left-to-right chain: `3+4-2` or `3 plus 4 minus 2`.
fn eval_expr(expr: &str) -> Option<i64> {
    // Tokenize into numbers and operators.
    let mut tokens: Vec<String> = Vec::new();
    let mut cur = String::new();
    for c in expr.chars() {
        match c {
            '0'..='9' => cur.push(c),
            '+' | '-' | '*' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(c.to_string());
            }
            ' ' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            'a'..='z' => cur.push(c),
            _ => return None,
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    let mut value: Option<i64> = None;
    let mut pending: Option<char> = None;
    for tok in &tokens {
        match tok.as_str() {
            "+" | "plus" => pending = Some(fold_sign(pending, '+')?),
            "-" | "minus" => pending = Some(fold_sign(pending, '-')?),
            "*" | "times" => pending = Some(fold_sign(pending, '*')?),
            num => {
                let n = parse_int(num)?;
                value = Some(match (value, pending.take()) {
                    (None, None) => n,
                    (None, Some('-')) => -n, // leading negative literal
                    (Some(v), Some('+')) => v + n,
                    (Some(v), Some('-')) => v - n,
                    (Some(v), Some('*')) => v * n,
                    (Some(v), Some('~')) => v * -n,
                    _ => return None,
                });
            }
        }
    }
    if pending.is_some() {
        return None;
    }
    value
}

/// Combine an operator with a following sign, e.g. `+ -7` folds to `-`.
fn fold_sign(pending: Option<char>, next: char) -> Option<char> {
    match (pending, next) {
        (None, op) => Some(op),
        (Some('+'), '-') | (Some('-'), '+') => Some('-'),
        (Some('-'), '-') => Some('+'),
        (Some('+'), '+') => Some('+'),
        (Some('*'), '-') => Some('~'), // multiply by negative
        _ => None,
    }
}

fn verify_arith(line: &str) -> bool {
    let Some((expr, stated)) = line.split_once('=') else {
        return false;
    };
    match (eval_expr(expr), parse_int(stated)) {
        (Some(v), Some(s)) => v == s,
        _ => false,
    }
}

/// Interpret `a=3;b=a+2;print(b);output:5`.
fn verify_code(line: &str) -> bool {
    let mut env: Vec<(char, i64)> = Vec::new();
    let mut printed: Option<i64> = None;
    let mut stated: Option<i64> = None;
    for stmt in line.split(';') {
        if let Some(rest) = stmt.strip_prefix("print(") {
            let Some(var) = rest.strip_suffix(')').and_then(|v| v.chars().next()) else {
                return false;
            };
            match env.iter().rev().find(|(n, _)| *n == var) {
                Some((_, v)) => printed = Some(*v),
                None => return false,
            }
        } else if let Some(rest) = stmt.strip_prefix("output:") {
            stated = parse_int(rest);
        } else if let Some((var, expr)) = stmt.split_once('=') {
            let mut var_chars = var.chars();
            let (Some(name), None) = (var_chars.next(), var_chars.next()) else {
                return false;
            };
            // Substitute variables, then reuse the arithmetic evaluator.
            let mut substituted = String::new();
            for c in expr.chars() {
                if c.is_ascii_lowercase() {
                    match env.iter().rev().find(|(n, _)| *n == c) {
                        Some((_, v)) => substituted.push_str(&v.to_string()),
                        None => return false,
                    }
                } else {
                    substituted.push(c);
                }
            }
            match eval_expr(&substituted) {
                Some(v) => env.push((name, v)),
                None => return false,
            }
        } else {
            return false;
        }
    }
    match (printed, stated) {
        (Some(p), Some(s)) => p == s,
        _ => false,
    }
}

fn verify_cipher(line: &str, key: &CipherKey) -> bool {
    let (plain, ciph) = if let Some(rest) = line.strip_prefix("e:") {
        let Some((p, c)) = rest.split_once('>') else {
            return false;
        };
        (p.to_string(), c.to_string())
    } else if let Some(rest) = line.strip_prefix("d:") {
        let Some((c, p)) = rest.split_once('>') else {
            return false;
        };
        (p.to_string(), c.to_string())
    } else {
        return false;
    };
    key.apply(&plain) == ciph
}

/// Filler has no answer; its check is well-formedness: every word drawn
/// from the fixed lists, terminated with a period.
fn verify_filler(line: &str) -> bool {
    let Some(body) = line.strip_suffix('.') else {
        return false;
    };
    let lists = word_lists();
    body.split(' ')
        .all(|w| lists.iter().any(|l| l.contains(&w)))
}

#[cfg(test)]
mod tests {
    use super::super::{
        gen_arith, gen_cipher, gen_cipher_arith, gen_code, gen_mixed, GenParams,
    };
    use super::*;

    fn params() -> GenParams {
        GenParams {
            n_train: 2000,
            n_eval: 300,
            ..GenParams::default()
        }
    }

    #[test]
    fn every_generated_item_verifies() {
        let p = params();
        let key = p.key().unwrap();
        let arith = gen_arith(&p, 11).unwrap();
        let code = gen_code(&p, 12).unwrap();
        let cipher = gen_cipher(&p, 13).unwrap();
        let ca = gen_cipher_arith(&p, 14).unwrap();
        let mixed = gen_mixed(&p, 15, &arith, &code, &cipher).unwrap();

        for c in [&arith, &code, &cipher, &ca] {
            for line in c.train.iter().chain(&c.eval) {
                assert!(
                    verify_line(c.domain, line, &key),
                    "{:?} item failed: `{line}`",
                    c.domain
                );
            }
        }
        for (line, tag) in mixed
            .train
            .iter()
            .zip(&mixed.train_tags)
            .chain(mixed.eval.iter().zip(&mixed.eval_tags))
        {
            assert!(verify_line(*tag, line, &key), "mixed item failed: `{line}`");
        }
    }

    #[test]
    fn evaluator_rejects_wrong_answers() {
        let key = CipherKey::identity();
        assert!(verify_line(Domain::Arith, "3+4=7", &key));
        assert!(!verify_line(Domain::Arith, "3+4=8", &key));
        assert!(verify_line(Domain::Arith, "3 plus 4 minus 1=6", &key));
        assert!(!verify_line(Domain::Arith, "3 plus=6", &key));
        assert!(verify_line(Domain::Code, "a=3;b=a+2;print(b);output:5", &key));
        assert!(!verify_line(Domain::Code, "a=3;b=a+2;print(b);output:6", &key));
        assert!(!verify_line(Domain::Code, "a=3;print(z);output:3", &key));
        assert!(verify_line(Domain::Cipher, "e:cat>cat", &key));
        assert!(!verify_line(Domain::Cipher, "e:cat>dog", &key));
    }

    #[test]
    fn chained_evaluation_is_left_to_right() {
        // chains evaluate left-to-right: (8-3)+2 = 7
        assert_eq!(eval_expr("8-3+2"), Some(7));
        assert_eq!(eval_expr("2 times 3"), Some(6));
    }
}
