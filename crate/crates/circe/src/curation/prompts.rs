//! Prompt templates for the three generation roles. The default set is
//! object-centric; the alternate set is scene-centric. A template directory
//! with `modification.txt`, `target_text.txt`, and `caption.txt` overrides
//! either.

use std::path::Path;

use super::CurationError;

pub const MODIFICATION_PLACEHOLDER: &str = "{modification_text}";

const DEFAULT_MODIFICATION: &str = r#"# Task Description
You are an expert in understanding and modifying images of objects. Your task is to generate one concise modification text for the given image based on its content. The modification should focus specifically on the object's attributes, including but not limited to:
- Change the object's color, material, texture, or pattern.
- Adjust the object's shape, size, or structural design.
- Modify specific features of the object, such as handles, edges, or attachments.
- Add or remove design elements like patterns, decorations, or markings.
- Transform the object's overall appearance (e.g., from modern to antique, or from sleek to rugged).
- Combine any of the above changes or introduce other creative adjustments to the object.

Provide the modification text in one clear and concise sentence without any explanation or additional context.
"#;

const DEFAULT_TARGET_TEXT: &str = r#"# Task Description
You are an expert in object image editing and visualization. Your task is to imagine how the object in the given image would look after being modified according to the description "{modification_text}". Write exactly one clear and concise sentence describing only the modified image, focusing on the most important object details, such as:
- The type and category of the object.
- The color, material, texture, and pattern of the object.
- Distinctive design features, shapes, and structural details.
- Any notable attributes that define the object's appearance.

Provide the description in one clear and complete sentence without referencing the original object, the modification process, or any comparisons.
"#;

const DEFAULT_CAPTION: &str = r#"# Task Description
You are an expert in image analysis and description. Your job is to generate one precise and concise sentence that fully describes the content of the given image. Focus on the most important details, such as:
- The primary objects or elements in the image.
- The relationships, positions, or actions of these objects.
- The overall setting, background, or scene type.

Provide the modification text in one clear and concise sentence without any explanation or additional context.
"#;

const ALTERNATE_MODIFICATION: &str = r#"# Task Description
You are an expert in understanding and modifying image content. Your job is to generate one concise modification text for the given image based on its content. The modification should focus on one or more of the following aspects:
- Replace or change the background (e.g., season, environment, or weather).
- Change the color, shape, size, quantity, or texture of objects.
- Adjust the position, angle, or arrangement of objects.
- Add new objects, details, or elements to the scene.
- Remove specific objects or parts of the background.
- Combine any of the above changes or introduce other creative adjustments.

Provide the modification text in one clear and concise sentence without any explanation or additional context.
"#;

const ALTERNATE_TARGET_TEXT: &str = r#"# Task Description
You are an expert in image editing and visualization. Your task is to imagine the content of the image after it has been modified based on the description "{modification_text}". Write exactly one clear and concise sentence describing the modified image as if it were a new and independent image, focusing on the most important details, such as:
- The primary objects or elements in the modification image.
- The relationships, positions, or actions of these objects.
- The overall setting, background, or scene type.

Provide the description in one clear and complete sentence without referencing the original image, the modification process, or any comparisons.
"#;

const ALTERNATE_CAPTION: &str = DEFAULT_CAPTION;

/// The three generation roles a prompt can serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptRole {
    Modification,
    TargetText,
    Caption,
}

impl PromptRole {
    pub fn file_name(self) -> &'static str {
        match self {
            PromptRole::Modification => "modification.txt",
            PromptRole::TargetText => "target_text.txt",
            PromptRole::Caption => "caption.txt",
        }
    }
}

/// A prompt body bound to a role. Target-text templates must contain the
/// `{modification_text}` placeholder; the other roles must not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role: PromptRole,
    body: String,
}

impl PromptTemplate {
    pub fn new(role: PromptRole, body: impl Into<String>) -> Result<Self, CurationError> {
        let body = body.into();
        let has_placeholder = body.contains(MODIFICATION_PLACEHOLDER);
        match role {
            PromptRole::TargetText if !has_placeholder => Err(CurationError::invalid(format!(
                "target text template must contain {MODIFICATION_PLACEHOLDER}"
            ))),
            PromptRole::Modification | PromptRole::Caption if has_placeholder => {
                Err(CurationError::invalid(format!(
                    "{role:?} template must not contain {MODIFICATION_PLACEHOLDER}"
                )))
            }
            _ => Ok(Self { role, body }),
        }
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Substitutes the modification text into the placeholder. Roles
    /// without a placeholder return the body unchanged.
    pub fn render(&self, modification: Option<&str>) -> Result<String, CurationError> {
        match self.role {
            PromptRole::TargetText => {
                let m = modification.ok_or_else(|| {
                    CurationError::invalid("target text rendering needs a modification")
                })?;
                Ok(self.body.replace(MODIFICATION_PLACEHOLDER, m))
            }
            _ => Ok(self.body.clone()),
        }
    }
}

/// One template per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub modification: PromptTemplate,
    pub target_text: PromptTemplate,
    pub caption: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            modification: PromptTemplate::new(PromptRole::Modification, DEFAULT_MODIFICATION)
                .expect("default template is valid"),
            target_text: PromptTemplate::new(PromptRole::TargetText, DEFAULT_TARGET_TEXT)
                .expect("default template is valid"),
            caption: PromptTemplate::new(PromptRole::Caption, DEFAULT_CAPTION)
                .expect("default template is valid"),
        }
    }
}

impl PromptSet {
    /// The scene-centric alternate set.
    pub fn alternate() -> Self {
        Self {
            modification: PromptTemplate::new(PromptRole::Modification, ALTERNATE_MODIFICATION)
                .expect("alternate template is valid"),
            target_text: PromptTemplate::new(PromptRole::TargetText, ALTERNATE_TARGET_TEXT)
                .expect("alternate template is valid"),
            caption: PromptTemplate::new(PromptRole::Caption, ALTERNATE_CAPTION)
                .expect("alternate template is valid"),
        }
    }

    /// Loads `modification.txt`, `target_text.txt`, and `caption.txt` from
    /// a directory.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, CurationError> {
        let dir = dir.as_ref();
        let read = |role: PromptRole| -> Result<PromptTemplate, CurationError> {
            let path = dir.join(role.file_name());
            let body = std::fs::read_to_string(&path).map_err(|e| {
                CurationError::invalid(format!("cannot read {}: {e}", path.display()))
            })?;
            PromptTemplate::new(role, body)
        };
        Ok(Self {
            modification: read(PromptRole::Modification)?,
            target_text: read(PromptRole::TargetText)?,
            caption: read(PromptRole::Caption)?,
        })
    }

    pub fn template(&self, role: PromptRole) -> &PromptTemplate {
        match role {
            PromptRole::Modification => &self.modification,
            PromptRole::TargetText => &self.target_text,
            PromptRole::Caption => &self.caption,
        }
    }
}
