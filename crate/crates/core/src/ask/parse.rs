use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AskError, ContactEntry, InteractionAnnotation};
use crate::taxonomy::{BodyPart, PartName, Side};

/// Counts of entries discarded while parsing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub dropped_contacts: usize,
}

pub fn parse_annotation(raw: &str) -> Result<InteractionAnnotation, AskError> {
    parse_annotation_report(raw).map(|(a, _)| a)
}

/// Parses a provider response. Code fences, surrounding prose, `//` comments,
/// trailing commas and the unbalanced `"part_name: "` key are tolerated.
/// Contacts naming parts outside the vocabulary are dropped and counted.
pub fn parse_annotation_report(raw: &str) -> Result<(InteractionAnnotation, ParseReport), AskError> {
    let repaired = raw.replace("\"part_name: \"", "\"part_name\": \"");
    let object = first_object(&repaired).ok_or(AskError::NoJson)?;
    let cleaned = strip_trailing_commas(&strip_comments(object));
    let value: Value = serde_json::from_str(&cleaned).map_err(|e| AskError::Json(e.to_string()))?;
    let obj = value.as_object().ok_or(AskError::NoJson)?;

    let text = |v: Option<&Value>| -> String {
        match v {
            Some(Value::String(s)) => s.trim().to_string(),
            Some(Value::Null) | None => String::new(),
            Some(other) => other.to_string(),
        }
    };
    let people = obj.get("people").and_then(Value::as_object);
    let contacts = match obj.get("contacts") {
        Some(Value::Array(a)) => a,
        Some(Value::Null) | None => return Err(AskError::Schema("missing \"contacts\"".into())),
        Some(_) => return Err(AskError::Schema("\"contacts\" is not a list".into())),
    };

    let mut report = ParseReport::default();
    let mut entries = Vec::with_capacity(contacts.len());
    for c in contacts {
        match contact_entry(c) {
            Some(e) => entries.push(e),
            None => report.dropped_contacts += 1,
        }
    }
    if report.dropped_contacts > 0 {
        log::warn!("dropped {} contact(s) with unknown parts or sides", report.dropped_contacts);
    }
    let ann = InteractionAnnotation {
        interaction: text(obj.get("interaction")),
        person_left: text(people.and_then(|p| p.get("person_left"))),
        person_right: text(people.and_then(|p| p.get("person_right"))),
        orientation: text(obj.get("orientation")),
        contacts: entries,
    };
    Ok((ann, report))
}

fn contact_entry(c: &Value) -> Option<ContactEntry> {
    let part = |key: &str| -> Option<BodyPart> {
        let p = c.get(key)?;
        let name = p.get("part_name")?.as_str()?;
        let side = match p.get("body_side") {
            Some(Value::String(s)) => s.as_str(),
            Some(Value::Null) | None => "",
            Some(_) => return None,
        };
        BodyPart::parse(name, side).ok()
    };
    let part_left = part("body_part_person_left")?;
    let part_right = part("body_part_person_right")?;
    // Missing confidence counts as full confidence.
    let confidence = match c.get("confidence") {
        None | Some(Value::Null) => 1.0,
        Some(Value::Number(n)) => n.as_f64()?,
        Some(Value::String(s)) => s.trim().parse::<f64>().ok()?,
        Some(_) => return None,
    };
    if !confidence.is_finite() {
        return None;
    }
    Some(ContactEntry { part_left, part_right, confidence: confidence.clamp(0.0, 1.0) })
}

/// The first balanced `{ ... }` span, skipping braces inside strings.
fn first_object(s: &str) -> Option<&str> {
    let start = s.find('{')?;
    let bytes = s.as_bytes();
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn strip_comments(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let (mut in_str, mut escaped) = (false, false);
    let mut chars = s.chars().peekable();
    while let Some(ch) = chars.next() {
        if in_str {
            out.push(ch);
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        if ch == '/' && chars.peek() == Some(&'/') {
            for c in chars.by_ref() {
                if c == '\n' {
                    out.push('\n');
                    break;
                }
            }
            continue;
        }
        if ch == '"' {
            in_str = true;
        }
        out.push(ch);
    }
    out
}

fn strip_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let (mut in_str, mut escaped) = (false, false);
    for (i, &ch) in chars.iter().enumerate() {
        if in_str {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
        } else if ch == '"' {
            in_str = true;
        } else if ch == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(ch);
    }
    out
}

#[derive(Serialize, Deserialize)]
pub(crate) struct WireAnnotation {
    interaction: String,
    people: WirePeople,
    orientation: String,
    contacts: Vec<WireContact>,
}

#[derive(Serialize, Deserialize)]
struct WirePeople {
    person_left: String,
    person_right: String,
}

#[derive(Serialize, Deserialize)]
struct WirePart {
    part_name: PartName,
    body_side: Side,
}

#[derive(Serialize, Deserialize)]
struct WireContact {
    body_part_person_left: WirePart,
    body_part_person_right: WirePart,
    confidence: f64,
}

impl From<InteractionAnnotation> for WireAnnotation {
    fn from(a: InteractionAnnotation) -> Self {
        let part = |p: BodyPart| WirePart { part_name: p.name, body_side: p.side };
        WireAnnotation {
            interaction: a.interaction,
            people: WirePeople { person_left: a.person_left, person_right: a.person_right },
            orientation: a.orientation,
            contacts: a
                .contacts
                .into_iter()
                .map(|c| WireContact {
                    body_part_person_left: part(c.part_left),
                    body_part_person_right: part(c.part_right),
                    confidence: c.confidence,
                })
                .collect(),
        }
    }
}

impl TryFrom<WireAnnotation> for InteractionAnnotation {
    type Error = String;

    fn try_from(w: WireAnnotation) -> Result<Self, String> {
        let part = |p: WirePart| BodyPart::new(p.part_name, p.body_side);
        let contacts = w
            .contacts
            .into_iter()
            .map(|c| {
                if !(0.0..=1.0).contains(&c.confidence) {
                    return Err(format!("confidence {} outside [0, 1]", c.confidence));
                }
                Ok(ContactEntry {
                    part_left: part(c.body_part_person_left),
                    part_right: part(c.body_part_person_right),
                    confidence: c.confidence,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(InteractionAnnotation {
            interaction: w.interaction,
            person_left: w.people.person_left,
            person_right: w.people.person_right,
            orientation: w.orientation,
            contacts,
        })
    }
}
