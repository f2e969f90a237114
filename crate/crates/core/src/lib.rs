pub mod cli;
pub mod escrow;
pub mod machine;
pub mod manifest;
pub mod scenario;
pub mod sealing;
pub mod services;
pub mod verifier;
pub mod sim;
pub mod tree;
pub mod volume;
