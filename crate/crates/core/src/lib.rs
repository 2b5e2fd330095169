pub mod annotation;
pub mod corpus;
pub mod stats;
pub mod fusion;
pub mod dynamics;
pub mod report;
pub mod pipeline;
