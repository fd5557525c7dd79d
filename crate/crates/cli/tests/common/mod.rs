//! Shared helpers for the CLI integration tests.

#![allow(dead_code)]

use std::path::Path;

/// Validate that `text` is a well-formed XML document: an optional
/// declaration, exactly one root element, balanced and properly nested
/// tags, quoted attribute values with no duplicates, and only the five
/// named entities or numeric character references. Returns the first
/// problem found.
pub fn check_xml(text: &str) -> Result<(), String> {
    let bytes = text.as_bytes();
    let mut i = 0usize;
    let mut stack: Vec<String> = Vec::new();
    let mut roots = 0usize;
    while i < bytes.len() {
        match bytes[i] {
            b'<' => {
                let rest = &text[i..];
                if let Some(decl) = rest.strip_prefix("<?") {
                    let end = decl
                        .find("?>")
                        .ok_or_else(|| format!("unterminated declaration at byte {i}"))?;
                    i += 2 + end + 2;
                } else if rest.starts_with("<!--") {
                    let end = rest
                        .find("-->")
                        .ok_or_else(|| format!("unterminated comment at byte {i}"))?;
                    i += end + 3;
                } else if rest.starts_with("</") {
                    let end = find_tag_end(text, i)?;
                    let name = text[i + 2..end].trim_end();
                    check_name(name, i)?;
                    match stack.pop() {
                        Some(open) if open == name => {}
                        Some(open) => {
                            return Err(format!(
                                "closing tag </{name}> at byte {i} does not match <{open}>"
                            ));
                        }
                        None => {
                            return Err(format!("closing tag </{name}> at byte {i} has no opener"));
                        }
                    }
                    i = end + 1;
                } else {
                    let end = find_tag_end(text, i)?;
                    let inner = &text[i + 1..end];
                    let (inner, self_closing) = match inner.strip_suffix('/') {
                        Some(trimmed) => (trimmed, true),
                        None => (inner, false),
                    };
                    let name = parse_open_tag(inner, i)?;
                    if stack.is_empty() {
                        roots += 1;
                        if roots > 1 {
                            return Err(format!("second root element <{name}> at byte {i}"));
                        }
                    }
                    if !self_closing {
                        stack.push(name);
                    }
                    i = end + 1;
                }
            }
            b'&' => {
                i += check_entity(text, i)?;
            }
            b => {
                if stack.is_empty() && !b.is_ascii_whitespace() {
                    return Err(format!("text outside the root element at byte {i}"));
                }
                i += 1;
            }
        }
    }
    if let Some(open) = stack.pop() {
        return Err(format!("element <{open}> is never closed"));
    }
    if roots == 0 {
        return Err("document has no root element".to_string());
    }
    Ok(())
}

/// Read a file and panic with a diagnostic if it is not well-formed XML.
pub fn assert_xml_file(path: &Path) {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    if let Err(problem) = check_xml(&text) {
        panic!("{} is not well-formed XML: {problem}", path.display());
    }
}

/// Index of the `>` closing the tag that starts at `start`, skipping any
/// `>` inside quoted attribute values.
fn find_tag_end(text: &str, start: usize) -> Result<usize, String> {
    let bytes = text.as_bytes();
    let mut quote: Option<u8> = None;
    for (off, &b) in bytes[start + 1..].iter().enumerate() {
        let pos = start + 1 + off;
        match quote {
            Some(q) => {
                if b == q {
                    quote = None;
                }
            }
            None => match b {
                b'"' | b'\'' => quote = Some(b),
                b'>' => return Ok(pos),
                b'<' => return Err(format!("'<' inside tag at byte {pos}")),
                _ => {}
            },
        }
    }
    Err(format!("unterminated tag at byte {start}"))
}

fn check_name(name: &str, at: usize) -> Result<(), String> {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return Err(format!("bad element name {name:?} at byte {at}")),
    }
    for c in chars {
        if !(c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | ':')) {
            return Err(format!("bad element name {name:?} at byte {at}"));
        }
    }
    Ok(())
}

/// Validate `name attr="value" ...` and return the element name.
fn parse_open_tag(inner: &str, at: usize) -> Result<String, String> {
    let inner = inner.trim_end();
    let name_end = inner
        .find(|c: char| c.is_ascii_whitespace())
        .unwrap_or(inner.len());
    let name = &inner[..name_end];
    check_name(name, at)?;
    let mut rest = inner[name_end..].trim_start();
    let mut seen: Vec<&str> = Vec::new();
    while !rest.is_empty() {
        let eq = rest
            .find('=')
            .ok_or_else(|| format!("attribute without value in <{name}> at byte {at}"))?;
        let attr = rest[..eq].trim_end();
        check_name(attr, at).map_err(|_| format!("bad attribute name {attr:?} in <{name}>"))?;
        if seen.contains(&attr) {
            return Err(format!("duplicate attribute {attr:?} in <{name}> at byte {at}"));
        }
        seen.push(attr);
        rest = rest[eq + 1..].trim_start();
        let quote = match rest.as_bytes().first() {
            Some(&q @ (b'"' | b'\'')) => q as char,
            _ => return Err(format!("unquoted value for {attr:?} in <{name}> at byte {at}")),
        };
        let value_end = rest[1..]
            .find(quote)
            .ok_or_else(|| format!("unterminated value for {attr:?} in <{name}>"))?;
        let value = &rest[1..1 + value_end];
        if value.contains('<') {
            return Err(format!("'<' in attribute value for {attr:?} in <{name}>"));
        }
        let mut v = 0usize;
        while let Some(off) = value[v..].find('&') {
            v += off + check_entity(value, v + off)?;
        }
        rest = rest[1 + value_end + 1..].trim_start();
    }
    Ok(name.to_string())
}

/// Length of the entity starting at `text[at]` (which is `&`).
fn check_entity(text: &str, at: usize) -> Result<usize, String> {
    let rest = &text[at + 1..];
    let semi = rest
        .char_indices()
        .take(12)
        .find(|&(_, c)| c == ';')
        .map(|(j, _)| j)
        .ok_or_else(|| format!("bare '&' at byte {at}"))?;
    let body = &rest[..semi];
    let ok = matches!(body, "amp" | "lt" | "gt" | "quot" | "apos")
        || body
            .strip_prefix("#x")
            .map(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_hexdigit()))
            .unwrap_or(false)
        || body
            .strip_prefix('#')
            .map(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .unwrap_or(false);
    if !ok {
        return Err(format!("unknown entity &{body}; at byte {at}"));
    }
    Ok(semi + 2)
}

#[cfg(test)]
mod tests {
    use super::check_xml;

    #[test]
    fn accepts_basic_documents() {
        for doc in [
            "<a/>",
            "<a></a>",
            "<?xml version=\"1.0\"?>\n<a x=\"1\"><b/>text</a>",
            "<a>&amp;&lt;&gt;&#65;&#x41;</a>",
            "<a><!-- note --></a>",
        ] {
            assert!(check_xml(doc).is_ok(), "{doc}: {:?}", check_xml(doc));
        }
    }

    #[test]
    fn rejects_malformed_documents() {
        for doc in [
            "",
            "<a>",
            "<a></b>",
            "<a/><b/>",
            "<a x=1/>",
            "<a x=\"1\" x=\"2\"/>",
            "<a>&bogus;</a>",
            "<a x=\"<\"/>",
            "stray<a/>",
            "<a></a>stray",
            "<a x=\"unterminated/>",
        ] {
            assert!(check_xml(doc).is_err(), "{doc} should be rejected");
        }
    }

    #[test]
    fn quoted_angle_bracket_does_not_end_tag() {
        assert!(check_xml("<a note=\"1 &gt; 0\"><b/></a>").is_ok());
    }
}
