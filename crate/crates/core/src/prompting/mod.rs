//! Prompt templates for the five task modes, verbalizers mapping model
//! outputs to labels, and soft-prompt tuning with a frozen backbone.

mod template;
mod tune;
mod verbalizer;

pub use template::{
    render, PromptInstance, PromptTemplate, Slot, SoftPromptInit, TemplateMode, TemplateSet, MASK_TOKEN,
};
pub use tune::{
    evaluate_prompted, init_soft_prompt, prompt_tune, render_dataset, PromptEvaluation, PromptOptions, PromptTuned,
    PromptedModel, SOFT_PROMPT_PARAM,
};
pub use verbalizer::{
    binary_mask_logit, parse_binary_answer, parse_open_answer, score_binary_mask, Aggregation, AnswerTokens, MaskScore,
    Verbalizer, VerbalizerCategory, NEGATIONS, NEGATION_WINDOW,
};
