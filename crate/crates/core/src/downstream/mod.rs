//! Fine-tuning and evaluation of a pre-trained encoder on entity typing,
//! NER and relation classification. Span enclosures are inserted inline
//! here, unlike the appended markers used in pre-training.

pub mod data;
pub mod finetune;
pub mod metrics;

pub use data::{Examples, NerExample, RelcExample, Task, TaskDataset, TypingExample};
pub use finetune::{label_inventory, run_seed, Classifier, FinetuneConfig, Score};
pub use metrics::{t_test, EvalResult, Prf, TTest};
