//! Label normalization and pluralization by suffix rules.

const IRREGULAR: &[(&str, &str)] = &[
    ("person", "people"),
    ("man", "men"),
    ("woman", "women"),
    ("child", "children"),
    ("mouse", "mice"),
    ("goose", "geese"),
    ("tooth", "teeth"),
    ("foot", "feet"),
    ("ox", "oxen"),
];

const UNCHANGED: &[&str] = &["sheep", "fish", "deer", "scissors", "pants", "jeans"];

fn split_last(s: &str) -> (&str, &str) {
    match s.rfind(' ') {
        Some(i) => (&s[..=i], &s[i + 1..]),
        None => ("", s),
    }
}

fn singular_word(w: &str) -> String {
    if UNCHANGED.contains(&w) {
        return w.to_string();
    }
    if let Some((s, _)) = IRREGULAR.iter().find(|(_, p)| *p == w) {
        return s.to_string();
    }
    if w.len() > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    for suf in ["ches", "shes", "sses", "xes", "zes"] {
        if w.len() > suf.len() && w.ends_with(suf) {
            return w[..w.len() - 2].to_string();
        }
    }
    if w.len() > 3 && w.ends_with('s') && !(w.ends_with("ss") || w.ends_with("us") || w.ends_with("is")) {
        return w[..w.len() - 1].to_string();
    }
    w.to_string()
}

fn plural_word(w: &str) -> String {
    if UNCHANGED.contains(&w) {
        return w.to_string();
    }
    if let Some((_, p)) = IRREGULAR.iter().find(|(s, _)| *s == w) {
        return p.to_string();
    }
    let consonant_y =
        w.len() > 1 && w.ends_with('y') && !matches!(w.as_bytes()[w.len() - 2], b'a' | b'e' | b'i' | b'o' | b'u');
    if consonant_y {
        return format!("{}ies", &w[..w.len() - 1]);
    }
    if ["s", "x", "z", "ch", "sh"].iter().any(|s| w.ends_with(s)) {
        return format!("{w}es");
    }
    format!("{w}s")
}

/// Lowercase, whitespace-collapsed, with the head (last) word singularized.
pub fn normalize_label(label: &str) -> String {
    let collapsed = label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let (head, last) = split_last(&collapsed);
    format!("{head}{}", singular_word(last))
}

pub fn pluralize(label: &str) -> String {
    let (head, last) = split_last(label);
    format!("{head}{}", plural_word(last))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes() {
        assert_eq!(normalize_label("  Dogs "), "dog");
        assert_eq!(normalize_label("Traffic   Lights"), "traffic light");
        assert_eq!(normalize_label("people"), "person");
        assert_eq!(normalize_label("boxes"), "box");
        assert_eq!(normalize_label("cherries"), "cherry");
        assert_eq!(normalize_label("glass"), "glass");
        assert_eq!(normalize_label("bus"), "bus");
        assert_eq!(normalize_label("benches"), "bench");
        assert_eq!(normalize_label("sheep"), "sheep");
    }

    #[test]
    fn pluralizes() {
        assert_eq!(pluralize("apple"), "apples");
        assert_eq!(pluralize("person"), "people");
        assert_eq!(pluralize("box"), "boxes");
        assert_eq!(pluralize("cherry"), "cherries");
        assert_eq!(pluralize("toy"), "toys");
        assert_eq!(pluralize("traffic light"), "traffic lights");
    }

    #[test]
    fn plural_then_normalize_is_identity_for_common_labels() {
        for l in [
            "apple", "person", "box", "cherry", "bench", "car", "tree", "glass", "dish",
        ] {
            assert_eq!(normalize_label(&pluralize(l)), l, "{l}");
        }
    }
}
