//! The four prompt components and their composition.
//!
//! Every prompt starts with the Simple task statement, optionally followed by
//! the Category taxonomy, and ends with either the Binary or Scale output
//! instruction. Components are joined by a single space and never re-wrapped.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::backends::{BackendRequest, Decoding, ImagePayload};
use crate::dataset::Record;
use crate::{LabelKind, Modality, PromptKind};

const SIMPLE: &str = include_str!("../resources/prompts/simple.txt");
const CATEGORY: &str = include_str!("../resources/prompts/category.txt");
const BINARY: &str = include_str!("../resources/prompts/binary.txt");
const SCALE: &str = include_str!("../resources/prompts/scale.txt");

const JOIN: &str = " ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Simple,
    Category,
    BinaryInstr,
    ScaleInstr,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Simple, Component::Category, Component::BinaryInstr, Component::ScaleInstr];

    pub fn file_name(self) -> &'static str {
        match self {
            Component::Simple => "simple.txt",
            Component::Category => "category.txt",
            Component::BinaryInstr => "binary.txt",
            Component::ScaleInstr => "scale.txt",
        }
    }
}

/// The canonical component texts. `PromptLibrary::default()` uses the texts
/// bundled with the crate; `load` reads a directory with the same four files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLibrary {
    simple: String,
    category: String,
    binary: String,
    scale: String,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        PromptLibrary {
            simple: strip_final_newline(SIMPLE).to_owned(),
            category: strip_final_newline(CATEGORY).to_owned(),
            binary: strip_final_newline(BINARY).to_owned(),
            scale: strip_final_newline(SCALE).to_owned(),
        }
    }
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

impl PromptLibrary {
    pub fn load(dir: &Path) -> io::Result<Self> {
        let read = |c: Component| -> io::Result<String> {
            let text = fs::read_to_string(dir.join(c.file_name()))?;
            Ok(strip_final_newline(&text).to_owned())
        };
        Ok(PromptLibrary {
            simple: read(Component::Simple)?,
            category: read(Component::Category)?,
            binary: read(Component::BinaryInstr)?,
            scale: read(Component::ScaleInstr)?,
        })
    }

    pub fn component_text(&self, component: Component) -> &str {
        match component {
            Component::Simple => &self.simple,
            Component::Category => &self.category,
            Component::BinaryInstr => &self.binary,
            Component::ScaleInstr => &self.scale,
        }
    }

    pub fn compose(&self, prompt_kind: PromptKind, label_kind: LabelKind) -> ComposedPrompt {
        let mut parts = vec![self.component_text(Component::Simple)];
        if prompt_kind == PromptKind::Category {
            parts.push(self.component_text(Component::Category));
        }
        parts.push(match label_kind {
            LabelKind::Binary => self.component_text(Component::BinaryInstr),
            LabelKind::Scale => self.component_text(Component::ScaleInstr),
        });
        ComposedPrompt { prompt_kind, label_kind, text: parts.join(JOIN) }
    }
}

/// Bundled component text.
pub fn component_text(component: Component) -> &'static str {
    strip_final_newline(match component {
        Component::Simple => SIMPLE,
        Component::Category => CATEGORY,
        Component::BinaryInstr => BINARY,
        Component::ScaleInstr => SCALE,
    })
}

/// Compose with the bundled texts.
pub fn compose(prompt_kind: PromptKind, label_kind: LabelKind) -> ComposedPrompt {
    PromptLibrary::default().compose(prompt_kind, label_kind)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComposedPrompt {
    pub prompt_kind: PromptKind,
    pub label_kind: LabelKind,
    pub text: String,
}

/// Prompt text followed by a trailing `Caption:` line.
pub fn prompt_with_caption(prompt: &ComposedPrompt, caption: &str) -> String {
    format!("{}\nCaption: {}", prompt.text, caption)
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("record `{0}` has empty caption text")]
    EmptyText(String),
    #[error("image for record `{id}` not readable at {path}: {source}")]
    Image { id: String, path: String, source: io::Error },
}

/// Build the request for one record. Multimodal requests carry the image
/// bytes read from `image_root/record.image_ref`; text-only requests carry
/// none. Either way the caption is appended to the prompt.
pub fn render_request(
    record: &Record,
    prompt: &ComposedPrompt,
    modality: Modality,
    image_root: &Path,
    decoding: Decoding,
    backend_id: &str,
) -> Result<BackendRequest, RenderError> {
    if record.text.trim().is_empty() {
        return Err(RenderError::EmptyText(record.id.clone()));
    }
    let image = match modality {
        Modality::TextOnly => None,
        Modality::Multimodal => {
            let path = image_root.join(&record.image_ref);
            let bytes = fs::read(&path).map_err(|source| RenderError::Image {
                id: record.id.clone(),
                path: path.display().to_string(),
                source,
            })?;
            Some(ImagePayload::new(bytes, media_type_for(&record.image_ref)))
        }
    };
    Ok(BackendRequest::new(
        backend_id,
        Some(record.id.clone()),
        prompt_with_caption(prompt, &record.text),
        image,
        decoding,
        Some(prompt.label_kind),
    ))
}

fn media_type_for(path: &str) -> &'static str {
    let ext = Path::new(path).extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        _ => "application/octet-stream",
    }
}
