//! App-agent guardrails: content-policy refusal before an effect is requested.

use serde::{Deserialize, Serialize};

use crate::world::Item;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum GuardVerdict {
    Proceed,
    /// Hard stop; reported to the kernel.
    Refuse(String),
    /// Not clear-cut: the SA must get the user's confirmation.
    Escalate(String),
}

/// What the app agent is about to do: the call, its argument texts and the
/// object it acts on (e.g. the post being commented on).
#[derive(Debug, Clone, Default)]
pub struct ProposedEffect<'a> {
    pub api: &'a str,
    pub texts: Vec<&'a str>,
    pub target: Option<&'a Item>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

/// Checks a proposed effect against a refusal lexicon. Tags and whole-word
/// hits refuse; a lexicon term buried inside a longer word escalates.
pub fn aa_guard(policy: &[String], effect: &ProposedEffect<'_>) -> GuardVerdict {
    if policy.is_empty() {
        return GuardVerdict::Proceed;
    }
    let lexicon: Vec<String> = policy.iter().map(|t| t.to_lowercase()).collect();
    if let Some(t) = effect.target {
        if let Some(tag) = t.tags.iter().find(|tag| lexicon.contains(&tag.to_lowercase())) {
            return GuardVerdict::Refuse(format!("{} targets content tagged {tag}", effect.api));
        }
    }
    let texts: Vec<&str> = effect.texts.iter().copied().chain(effect.target.map(|t| t.text.as_str())).collect();
    let mut near = None;
    for text in &texts {
        for w in words(text) {
            if let Some(term) = lexicon.iter().find(|t| **t == w) {
                return GuardVerdict::Refuse(format!("{} content matches policy term {term}", effect.api));
            }
            if near.is_none() {
                near = lexicon.iter().find(|t| w.contains(t.as_str())).map(|t| format!("\"{w}\" resembles policy term {t}"));
            }
        }
    }
    match near {
        Some(r) => GuardVerdict::Escalate(r),
        None => GuardVerdict::Proceed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy() -> Vec<String> {
        vec!["toxic".into(), "hate".into()]
    }

    #[test]
    fn tagged_target_is_refused() {
        let post = Item {
            id: "p1".into(),
            text: "some post".into(),
            tags: vec!["toxic".into()],
        };
        let e = ProposedEffect {
            api: "post_comment",
            texts: vec!["I agree!"],
            target: Some(&post),
        };
        assert!(matches!(aa_guard(&policy(), &e), GuardVerdict::Refuse(_)));
    }

    #[test]
    fn benign_comment_proceeds() {
        let post = Item {
            id: "p2".into(),
            text: "sunset at the beach".into(),
            tags: vec![],
        };
        let e = ProposedEffect {
            api: "post_comment",
            texts: vec!["Lovely photo"],
            target: Some(&post),
        };
        assert_eq!(aa_guard(&policy(), &e), GuardVerdict::Proceed);
    }

    #[test]
    fn near_miss_escalates() {
        let e = ProposedEffect {
            api: "post_comment",
            texts: vec!["what a hateful day, ha"],
            target: None,
        };
        assert!(matches!(aa_guard(&policy(), &e), GuardVerdict::Escalate(_)));
    }

    #[test]
    fn no_policy_always_proceeds() {
        let e = ProposedEffect {
            api: "post_comment",
            texts: vec!["hate"],
            target: None,
        };
        assert_eq!(aa_guard(&[], &e), GuardVerdict::Proceed);
    }
}
