pub mod cascade;
pub mod chain_builder;
pub mod cli;
pub mod corpus;
pub mod dates;
pub mod eval;
pub mod gateway;
