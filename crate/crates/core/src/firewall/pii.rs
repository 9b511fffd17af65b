//! Sensitive-entity detection: fixed regex rules plus a pluggable recognizer.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityKind {
    CreditCard,
    Email,
    NationalId,
    Phone,
    Passcode,
    Address,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::CreditCard => "CREDIT_CARD",
            EntityKind::Email => "EMAIL",
            EntityKind::NationalId => "NATIONAL_ID",
            EntityKind::Phone => "PHONE",
            EntityKind::Passcode => "PASSCODE",
            EntityKind::Address => "ADDRESS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntitySource {
    Regex,
    Ner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveEntity {
    pub kind: EntityKind,
    /// Byte offsets, end exclusive.
    pub span: (usize, usize),
    pub source: EntitySource,
}

/// Anything that can tag entities the regex rules cannot express.
pub trait Recognizer: Send + Sync {
    fn recognize(&self, text: &str) -> Vec<SensitiveEntity>;
}

/// Gazetteer matcher for passcodes (cue word followed by a secret) and
/// street addresses (house number, capitalised name, street suffix).
pub struct DictionaryRecognizer {
    passcode: Regex,
    address: Regex,
}

pub const PASSCODE_CUES: &[&str] = &[
    "password",
    "passcode",
    "pin",
    "verification code",
    "security code",
    "one-time code",
    "otp",
];

pub const STREET_SUFFIXES: &[&str] = &[
    "Street", "St", "Avenue", "Ave", "Road", "Rd", "Lane", "Ln", "Boulevard", "Blvd", "Drive", "Dr", "Way", "Court",
];

impl Default for DictionaryRecognizer {
    fn default() -> Self {
        let cues = PASSCODE_CUES.iter().map(|c| regex::escape(c)).collect::<Vec<_>>().join("|");
        let suffixes = STREET_SUFFIXES.join("|");
        Self {
            passcode: Regex::new(&format!(r"(?i)\b(?:{cues})\b(?:\s+is|\s*[:=])?\s*([A-Za-z0-9!@#$%^&*_\-]{{4,}})"))
                .expect("static pattern"),
            address: Regex::new(&format!(r"\b\d{{1,5}}(?:\s+[A-Z][a-z]+){{1,3}}\s+(?:{suffixes})\b\.?"))
                .expect("static pattern"),
        }
    }
}

impl Recognizer for DictionaryRecognizer {
    fn recognize(&self, text: &str) -> Vec<SensitiveEntity> {
        let mut out = Vec::new();
        for c in self.passcode.captures_iter(text) {
            let m = c.get(1).expect("group");
            // "password is" alone is not a secret.
            if m.as_str().eq_ignore_ascii_case("is") {
                continue;
            }
            out.push(SensitiveEntity {
                kind: EntityKind::Passcode,
                span: (m.start(), m.end()),
                source: EntitySource::Ner,
            });
        }
        for m in self.address.find_iter(text) {
            out.push(SensitiveEntity {
                kind: EntityKind::Address,
                span: (m.start(), m.end()),
                source: EntitySource::Ner,
            });
        }
        out
    }
}

/// Luhn checksum over a digit string.
pub fn luhn_valid(digits: &str) -> bool {
    let mut sum = 0;
    for (i, c) in digits.bytes().rev().enumerate() {
        let mut d = (c - b'0') as u32;
        if i % 2 == 1 {
            d *= 2;
            if d > 9 {
                d -= 9;
            }
        }
        sum += d;
    }
    !digits.is_empty() && sum % 10 == 0
}

pub const DEFAULT_NATIONAL_ID: &str = r"\b\d{3}-\d{2}-\d{4}\b";

/// The regex rule set plus a recognizer.
pub struct Detector {
    card: Regex,
    email: Regex,
    national_id: Regex,
    phone: Regex,
    recognizer: Box<dyn Recognizer>,
}

impl Default for Detector {
    fn default() -> Self {
        Self::new(DEFAULT_NATIONAL_ID, Box::new(DictionaryRecognizer::default())).expect("default pattern")
    }
}

fn shared() -> &'static Detector {
    static D: OnceLock<Detector> = OnceLock::new();
    D.get_or_init(Detector::default)
}

impl Detector {
    pub fn new(national_id: &str, recognizer: Box<dyn Recognizer>) -> Result<Self, regex::Error> {
        Ok(Self {
            card: Regex::new(r"\b\d(?:[ -]?\d){12,18}\b")?,
            email: Regex::new(r"\b[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z]{2,}\b")?,
            national_id: Regex::new(national_id)?,
            phone: Regex::new(r"\+[1-9]\d{7,14}\b")?,
            recognizer,
        })
    }

    /// The process-wide default detector.
    pub fn shared() -> &'static Detector {
        shared()
    }

    /// Regex matches and recognizer output, deduplicated by span. Where spans
    /// overlap the earlier (then longer) one wins.
    pub fn detect(&self, text: &str) -> Vec<SensitiveEntity> {
        let mut found = Vec::new();
        let regex = |kind, span| SensitiveEntity {
            kind,
            span,
            source: EntitySource::Regex,
        };
        for m in self.card.find_iter(text) {
            let digits: String = m.as_str().chars().filter(char::is_ascii_digit).collect();
            if (13..=19).contains(&digits.len()) && luhn_valid(&digits) {
                found.push(regex(EntityKind::CreditCard, (m.start(), m.end())));
            }
        }
        for (re, kind) in [
            (&self.email, EntityKind::Email),
            (&self.national_id, EntityKind::NationalId),
            (&self.phone, EntityKind::Phone),
        ] {
            found.extend(re.find_iter(text).map(|m| regex(kind, (m.start(), m.end()))));
        }
        found.extend(
            self.recognizer
                .recognize(text)
                .into_iter()
                .filter(|e| e.span.0 < e.span.1 && e.span.1 <= text.len()),
        );
        found.sort_by_key(|e| (e.span.0, usize::MAX - e.span.1));
        let mut out: Vec<SensitiveEntity> = Vec::with_capacity(found.len());
        for e in found {
            if out.last().is_some_and(|l| e.span.0 < l.span.1) {
                continue;
            }
            out.push(e);
        }
        out
    }
}

/// Shorthand for the default detector.
pub fn detect_sensitive(text: &str) -> Vec<SensitiveEntity> {
    shared().detect(text)
}

/// Replaces each entity span with `[REDACTED:<KIND>]`.
pub fn redact(text: &str, entities: &[SensitiveEntity]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut at = 0;
    let mut sorted: Vec<&SensitiveEntity> = entities.iter().collect();
    sorted.sort_by_key(|e| e.span.0);
    for e in sorted {
        if e.span.0 < at {
            continue;
        }
        out.push_str(&text[at..e.span.0]);
        out.push_str(&format!("[REDACTED:{}]", e.kind.name()));
        at = e.span.1;
    }
    out.push_str(&text[at..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(text: &str) -> Vec<EntityKind> {
        detect_sensitive(text).into_iter().map(|e| e.kind).collect()
    }

    #[test]
    fn luhn_oracle_on_test_numbers() {
        assert!(luhn_valid("4111111111111111"));
        assert!(luhn_valid("5500005555555559"));
        assert!(!luhn_valid("4111111111111112"));
    }

    #[test]
    fn card_email_and_empty() {
        let d = detect_sensitive("card 4111111111111111");
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, EntityKind::CreditCard);
        assert_eq!(d[0].span, (5, 21));
        assert_eq!(kinds("contact me at a@b.com"), vec![EntityKind::Email]);
        assert!(detect_sensitive("").is_empty());
        assert!(kinds("order 4111111111111112").is_empty());
    }

    #[test]
    fn phone_id_passcode_address() {
        assert_eq!(kinds("call +4915123456789 now"), vec![EntityKind::Phone]);
        assert_eq!(kinds("ssn 123-45-6789"), vec![EntityKind::NationalId]);
        let t = "Your verification code is 884213.";
        let d = detect_sensitive(t);
        assert_eq!(d.len(), 1);
        assert_eq!(&t[d[0].span.0..d[0].span.1], "884213");
        assert_eq!(kinds("Password: hunter22"), vec![EntityKind::Passcode]);
        assert_eq!(kinds("ship to 221 Baker Street please"), vec![EntityKind::Address]);
    }

    #[test]
    fn redaction_leaves_no_residue() {
        let t = "card 4111111111111111, mail a@b.com, pin 9981";
        let r = redact(t, &detect_sensitive(t));
        assert_eq!(r, "card [REDACTED:CREDIT_CARD], mail [REDACTED:EMAIL], pin [REDACTED:PASSCODE]");
        assert!(detect_sensitive(&r).is_empty());
    }

    #[test]
    fn configurable_national_id() {
        let d = Detector::new(r"\b[A-Z]{2}\d{6}\b", Box::new(DictionaryRecognizer::default())).unwrap();
        assert_eq!(d.detect("id AB123456")[0].kind, EntityKind::NationalId);
    }
}
