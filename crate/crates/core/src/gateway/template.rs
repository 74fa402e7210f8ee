use crate::error::{Error, Result};
use crate::types::{ContextList, Query};

pub const DEFAULT_TEMPLATE: &str = "numbered-v1";

/// Named, versioned prompt layout. The id takes part in every cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptTemplate {
    /// Instruction, numbered documents, then the question.
    NumberedV1,
    /// Documents separated by blank lines, no instruction header.
    PlainV1,
}

impl PromptTemplate {
    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "numbered-v1" => Ok(PromptTemplate::NumberedV1),
            "plain-v1" => Ok(PromptTemplate::PlainV1),
            other => Err(Error::Config(format!("unknown prompt template {other:?}"))),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            PromptTemplate::NumberedV1 => "numbered-v1",
            PromptTemplate::PlainV1 => "plain-v1",
        }
    }

    pub fn render(self, query: &Query, contexts: &ContextList) -> String {
        let mut out = String::new();
        match self {
            PromptTemplate::NumberedV1 => {
                out.push_str(
                    "Use the documents below to answer the question. \
                     Reply with the answer only.\n\n",
                );
                for (i, c) in contexts.iter().enumerate() {
                    out.push_str(&format!("Document {}: {}\n", i + 1, c.text.trim()));
                }
                if !contexts.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("Question: {}\nAnswer:", query.text.trim()));
            }
            PromptTemplate::PlainV1 => {
                for c in contexts {
                    out.push_str(c.text.trim());
                    out.push_str("\n\n");
                }
                out.push_str(query.text.trim());
                out.push('\n');
            }
        }
        out
    }
}
