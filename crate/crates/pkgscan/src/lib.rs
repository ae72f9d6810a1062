pub mod cli;
pub mod collection;
pub mod config;
pub mod corpus;
pub mod dataset_io;
pub mod experiment;
pub mod gateway;
pub mod ingest;
pub mod pipeline;
pub mod pyfeatures;
pub mod runtime;
