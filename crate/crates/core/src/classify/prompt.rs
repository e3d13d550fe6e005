use serde::{Deserialize, Serialize};

use super::ClassifyError;

pub const HEADER: &str = "Classify the following product to one class form the list below.";
pub const CLASS_LIST_HEADER: &str = "List of classes:";
pub const FEW_SHOT_HEADER: &str = "Some examples with their classes are provided:";
pub const REASON_NOTE: &str =
    "Be aware that some parts of the product description might have been abbreviated or amputated.";
pub const OUTPUT_INSTRUCTION: &str =
    "Output only the class name and no additional text. Example: 'Tablets'";
pub const COMPLETION_SUFFIX: &str = "Product class from the list above is:";
pub const MAX_FEW_SHOT: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub description: String,
    pub label: String,
}

/// What goes into one classification prompt besides the product itself.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptSpec {
    pub class_list: Vec<String>,
    pub few_shot: Option<Vec<FewShotExample>>,
    pub reason_note: bool,
    /// Extra completion-style closing line some chat models need.
    pub completion_suffix: bool,
}

impl PromptSpec {
    pub fn new(class_list: Vec<String>) -> Self {
        Self {
            class_list,
            ..Self::default()
        }
    }

    pub fn with_few_shot(mut self, examples: Vec<FewShotExample>) -> Self {
        self.few_shot = Some(examples);
        self
    }

    pub fn with_reason_note(mut self, on: bool) -> Self {
        self.reason_note = on;
        self
    }

    pub fn with_completion_suffix(mut self, on: bool) -> Self {
        self.completion_suffix = on;
        self
    }

    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.class_list.is_empty() {
            return Err(ClassifyError::Prompt("class list is empty".into()));
        }
        if let Some(examples) = &self.few_shot {
            if examples.len() > MAX_FEW_SHOT {
                return Err(ClassifyError::Prompt(format!(
                    "{} few-shot examples, at most {MAX_FEW_SHOT} allowed",
                    examples.len()
                )));
            }
            if let Some(bad) = examples
                .iter()
                .find(|e| !self.class_list.contains(&e.label))
            {
                return Err(ClassifyError::Prompt(format!(
                    "few-shot label '{}' is not in the class list",
                    bad.label
                )));
            }
        }
        Ok(())
    }
}

/// Render the classification prompt.
///
/// Sections are separated by one blank line. The few-shot block is omitted
/// when there are no examples; each example takes two indented lines.
pub fn render_classification_prompt(spec: &PromptSpec, product: &str) -> String {
    let mut sections: Vec<String> = Vec::with_capacity(7);
    sections.push(HEADER.to_string());

    let mut classes = String::from(CLASS_LIST_HEADER);
    for c in &spec.class_list {
        classes.push('\n');
        classes.push_str(c);
    }
    sections.push(classes);

    if let Some(examples) = spec.few_shot.as_ref().filter(|e| !e.is_empty()) {
        let mut block = String::from(FEW_SHOT_HEADER);
        for e in examples {
            block.push_str("\n    Product: ");
            block.push_str(&e.description);
            block.push_str("\n    Class: ");
            block.push_str(&e.label);
        }
        sections.push(block);
    }

    sections.push(format!("Product: {product}"));
    if spec.reason_note {
        sections.push(REASON_NOTE.to_string());
    }
    sections.push(OUTPUT_INSTRUCTION.to_string());
    if spec.completion_suffix {
        sections.push(COMPLETION_SUFFIX.to_string());
    }
    sections.join("\n\n")
}
