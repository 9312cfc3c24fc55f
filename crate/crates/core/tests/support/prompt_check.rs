//! Rendered prompts against the reference template texts.
//!
//! The fixtures mark each placeholder as `(name)`. Substituting the bound
//! value at exactly those spans must reproduce the rendered text, so any
//! difference outside a placeholder span fails the comparison.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use workbench_core::classifier::{largest_remainder_percentages, Prediction};
use workbench_core::prompts::{render, serialize_inference_result, Attachment};
use workbench_core::{PromptBindings, TemplateId};

// both crates sit side by side, so this resolves from either one
const FIXTURE_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/templates");

const LANGUAGE: &str = "<<lang Deutsch>>";
const INPUT: &str = "<<input: I want to tell mushrooms apart>>";
const CATEGORY: &str = "<<category Edible>>";
const INFERENCE: &str = "<<inference {'a': 1%}>>";
const CHAT_LOG: &str = "<<log USER: hi>>";

pub const USER_TEMPLATES: [TemplateId; 6] = [
    TemplateId::PassiveChatNoData,
    TemplateId::PassiveChatWithData,
    TemplateId::PassiveAskCategory,
    TemplateId::PassiveAskInference,
    TemplateId::ActiveNoData,
    TemplateId::ActiveWithData,
];

pub fn fixture(name: &str) -> String {
    let path: PathBuf = [FIXTURE_DIR, name].iter().collect();
    fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .trim_end()
        .to_string()
}

pub fn expected(name: &str) -> String {
    fixture(name)
        .replace("(user_selected_language)", LANGUAGE)
        .replace("(user_input)", INPUT)
        .replace("(user_defined_category_name)", CATEGORY)
        .replace("(inference_result)", INFERENCE)
        .replace("(chat_log)", CHAT_LOG)
}

fn image(name: &str) -> Attachment {
    Attachment::new(name, "image/png", Arc::new(vec![0x89, b'P', b'N', b'G']))
}

fn bindings_and_images(id: TemplateId) -> (PromptBindings, Vec<Attachment>) {
    let base = PromptBindings::new(LANGUAGE);
    match id {
        TemplateId::PassiveChatNoData => (base.with_user_input(INPUT), vec![]),
        TemplateId::PassiveChatWithData => {
            (base.with_user_input(INPUT), vec![image("Edible"), image("Non-Edible")])
        }
        TemplateId::PassiveAskCategory => (base.with_category(CATEGORY), vec![image("Edible")]),
        TemplateId::PassiveAskInference => {
            (base.with_inference_result(INFERENCE), vec![image("test image")])
        }
        TemplateId::ActiveNoData => (base.with_chat_log(CHAT_LOG), vec![]),
        TemplateId::ActiveWithData => (base.with_chat_log(CHAT_LOG), vec![image("Edible")]),
        TemplateId::PassiveSystem => unreachable!(),
    }
}

/// Templates whose user text differs from the fixture.
pub fn user_text_mismatches() -> Vec<TemplateId> {
    USER_TEMPLATES
        .into_iter()
        .filter(|&id| {
            let (b, a) = bindings_and_images(id);
            let env = render(id, b, a).unwrap();
            env.user_text != expected(&format!("{id}.txt"))
        })
        .collect()
}

/// Templates that carry the wrong system text: passive ones need the
/// fixture, active ones none at all.
pub fn system_text_mismatches() -> Vec<TemplateId> {
    let want = expected("passive_system.txt");
    USER_TEMPLATES
        .into_iter()
        .filter(|&id| {
            let (b, a) = bindings_and_images(id);
            let env = render(id, b, a).unwrap();
            let ok = if id.is_passive() {
                env.system_text.as_deref() == Some(want.as_str())
            } else {
                env.system_text.is_none()
            };
            !ok
        })
        .collect()
}

pub fn body_mismatches() -> Vec<TemplateId> {
    USER_TEMPLATES
        .into_iter()
        .chain([TemplateId::PassiveSystem])
        .filter(|&id| {
            let mut body = id.body().trim_end().to_string();
            for p in id.placeholders() {
                body = body.replace(&format!("{{{{{}}}}}", p.as_str()), &format!("({})", p.as_str()));
            }
            body != fixture(&format!("{id}.txt"))
        })
        .collect()
}

pub fn inference_example() -> (String, String) {
    let probabilities = vec![0.3, 0.2, 0.5];
    let percentages = largest_remainder_percentages(&probabilities);
    let p = Prediction {
        labels: vec!["dog".into(), "cat".into(), "bird".into()],
        scores: vec![0.0, -0.4, 0.5],
        probabilities,
        percentages,
        top_label: "bird".into(),
    };
    (serialize_inference_result(&p), fixture("inference_example.txt"))
}

/// Every check at once, as human-readable failures.
pub fn all_mismatches() -> Vec<String> {
    let mut out = Vec::new();
    out.extend(user_text_mismatches().into_iter().map(|id| format!("user text of {id}")));
    out.extend(system_text_mismatches().into_iter().map(|id| format!("system text with {id}")));
    out.extend(body_mismatches().into_iter().map(|id| format!("template body {id}")));
    let (got, want) = inference_example();
    if got != want {
        out.push(format!("inference example: {got}"));
    }
    out
}
