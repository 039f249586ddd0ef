//! Synthetic referring-expression data: coloured shapes on a white canvas,
//! attribute and relational expressions with verified unique referents, and
//! a JSONL + PPM on-disk format.

pub mod dataset;
pub mod error;
pub mod expression;
pub mod scene;

pub use dataset::{
    generate_sample, generate_splits, read_dataset, to_examples, write_dataset, GeneratorConfig, GroundingSample,
    Splits,
};
pub use error::{Result, SynthError};
pub use expression::{generate_expression, Expression, Query, Relation, TemplateKind};
pub use scene::{generate_scene, render, Color, SceneConfig, SceneSpec, ShapeInstance, ShapeKind, SizeClass};
