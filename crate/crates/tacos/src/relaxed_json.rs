//! Tolerant extraction of JSON payloads from LLM output.
//!
//! Model responses wrap their JSON in prose, code fences, or both, and
//! occasionally emit trailing commas. [`parse_relaxed`] scans the text for
//! balanced `{...}` / `[...]` spans (string-literal aware), repairs
//! trailing commas, and returns the first span that parses.

use serde_json::Value;

/// All balanced top-level `{...}` or `[...]` spans in `text`, in order of
/// appearance. Brackets inside string literals are ignored.
fn balanced_spans(text: &str) -> Vec<&str> {
    let mut spans = Vec::new();
    let mut stack: Vec<char> = Vec::new();
    let mut start = None;
    let mut in_str = false;
    let mut escaped = false;

    for (i, ch) in text.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' if !stack.is_empty() => in_str = true,
            '{' | '[' => {
                if stack.is_empty() {
                    start = Some(i);
                }
                stack.push(ch);
            }
            '}' | ']' => {
                match stack.pop() {
                    Some(open) if (open == '{') == (ch == '}') => {
                        if stack.is_empty() {
                            if let Some(s) = start.take() {
                                spans.push(&text[s..i + ch.len_utf8()]);
                            }
                        }
                    }
                    // Mismatched or stray closer: drop the candidate.
                    _ => {
                        stack.clear();
                        start = None;
                    }
                }
            }
            _ => {}
        }
    }
    spans
}

/// Remove commas that directly precede a closing bracket, outside strings.
fn strip_trailing_commas(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for ch in s.chars() {
        if in_str {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_str = false;
            }
            out.push(ch);
            continue;
        }
        match ch {
            '"' => {
                in_str = true;
                out.push(ch);
            }
            '}' | ']' => {
                // Trim a dangling comma (plus whitespace) before the closer.
                let trimmed = out.trim_end().to_string();
                if trimmed.ends_with(',') {
                    out = trimmed;
                    out.pop();
                }
                out.push(ch);
            }
            _ => out.push(ch),
        }
    }
    out
}

/// Parse the first JSON array or object embedded in `text`, ignoring
/// surrounding prose and code fences and repairing trailing commas.
/// Returns `None` when no span parses.
pub fn parse_relaxed(text: &str) -> Option<Value> {
    for span in balanced_spans(text) {
        if let Ok(v) = serde_json::from_str::<Value>(span) {
            return Some(v);
        }
        if let Ok(v) = serde_json::from_str::<Value>(&strip_trailing_commas(span)) {
            return Some(v);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn array_with_prose() {
        let v = parse_relaxed(r#"Here you go: ["math", "algebra"] hope that helps"#).unwrap();
        assert_eq!(v, serde_json::json!(["math", "algebra"]));
    }

    #[test]
    fn fenced_object() {
        let v = parse_relaxed("Sure:\n```json\n{\"score_1\": 3}\n```\n").unwrap();
        assert_eq!(v["score_1"], 3);
    }

    #[test]
    fn trailing_comma_repaired() {
        let v = parse_relaxed(r#"[{"tag":"coding","explanation":"..."},]"#).unwrap();
        assert_eq!(v[0]["tag"], "coding");
    }

    #[test]
    fn no_json_found() {
        assert!(parse_relaxed("Sorry, I cannot help.").is_none());
    }

    #[test]
    fn brackets_inside_strings_do_not_confuse_the_scanner() {
        let v = parse_relaxed(r#"{"a": "closing } brace and ] bracket", "b": 1}"#).unwrap();
        assert_eq!(v["b"], 1);
    }

    #[test]
    fn skips_non_json_balanced_span() {
        let v = parse_relaxed(r#"[see note] then {"ok": true}"#).unwrap();
        assert_eq!(v["ok"], true);
    }

    #[test]
    fn stray_closer_before_payload() {
        let v = parse_relaxed(r#"rated 5/10 :] anyway {"x": []}"#).unwrap();
        assert_eq!(v["x"], serde_json::json!([]));
    }

    proptest! {
        // Any serde-rendered value embedded in prose comes back intact.
        #[test]
        fn roundtrips_rendered_values(
            tags in proptest::collection::vec("[a-zA-Z0-9 _-]{1,20}", 1..8),
            prefix in "[a-zA-Z .,!]{0,30}",
            suffix in "[a-zA-Z .,!]{0,30}",
        ) {
            let rendered = serde_json::to_string(&tags).unwrap();
            let wrapped = format!("{prefix}{rendered}{suffix}");
            let v = parse_relaxed(&wrapped).unwrap();
            prop_assert_eq!(v, serde_json::json!(tags));
        }
    }
}
