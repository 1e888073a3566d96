//! Data, two-stage training and passkey evaluation.

pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod passkey;
pub mod run;
pub mod tokenizer;
pub mod train;

pub use data::{corpus_samples, frame, Framed, Sample, BUILTIN_CORPUS};
pub use passkey::{
    depth_grid, generate_passkey_dataset, parse_jsonl_line, read_jsonl, write_jsonl, PasskeyExample,
};
pub use tokenizer::{byte_tokenize, detokenize};
pub use eval::{evaluate_passkey, grid_from_examples, passkey_correct, PasskeyGrid, Predictor};
pub use optim::{lr_schedule, AdamW, StepStats, TrainConfig};
pub use train::{
    eval_lm_loss, eval_stage1_loss, lanes, train_stage1, train_stage2, train_teacher, Stage2Options, Trace,
    TraceRow,
};
pub use config::{DataConfig, RunConfig, Task};
pub use run::{load_datasets, Datasets};
