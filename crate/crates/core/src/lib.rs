//! Core of the classroom argumentation rehearsal simulator.
//!
//! Lesson transcripts are distilled into [`StudentProfile`]s ([`ingest`]), a
//! roster is retrieved for a classroom context ([`retrieval`]), the teacher
//! rehearses with simulated students ([`engine`]), and every turn is coded
//! for questioning and argument structure ([`pedagogy`], [`metrics`]).
//!
//! The `parallel` feature (on by default) runs batch work on rayon; each
//! batch entry point also has a `_sequential` twin that is always available.

pub mod engine;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod pedagogy;
pub mod provider;
pub mod retrieval;
pub mod text;

pub use model::{
    ArgumentationLevel, ClassroomContext, ContextDistillation, DialogueTurn, EmojiState, Engagement, MathLevel,
    Multiset, Ordinal, ParticipationPattern, Speaker, StudentProfile, Suggestion, ToulminLabel, TrqfLabel,
    ValidatedContext, ValidationError,
};
