use crate::taxonomy::PartName;

const TEMPLATE: &str = include_str!("../../assets/prompt_template.txt");
const PLAIN_STEP: &str = "1. Examine the second image carefully.";

/// Annotation prompt over the full part vocabulary.
pub fn build_prompt(action: Option<&str>) -> String {
    build_prompt_with(&PartName::ALL, action)
}

/// Annotation prompt listing `parts`. With an action label the first
/// instruction names the action.
pub fn build_prompt_with(parts: &[PartName], action: Option<&str>) -> String {
    let vocabulary = parts.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", ");
    let text = TEMPLATE.replace("{body_parts}", &vocabulary);
    match action {
        Some(a) => text.replacen(
            PLAIN_STEP,
            &format!("1. Examine the second image of two people performing the action {a}\ncarefully."),
            1,
        ),
        None => text,
    }
}
