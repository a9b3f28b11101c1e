//! Prompt templates, aggregated class embeddings, and stage-1 prompt tuning.

mod bank;
mod stage1;

pub use bank::{
    compute_aggregated_embeddings, default_bank, AggregatedEmbeddings, PromptTemplateBank,
    DEFAULT_TEMPLATE_PATTERNS,
};
pub use stage1::{
    build_prompt, domain_class_embeddings, init_domain_tokens, loss_ds, loss_ds_from_embeddings,
    loss_g, stage1_loss, stage1_loss_and_grad, train_domain_prompts, DomainClassEmbeddings,
    DomainTokens, ImageEmbedder, Stage1Config, Stage1Output, TeacherEmbedder,
};
