//! In-context learning of optimal-transport maps between Gaussian measures.
//!
//! The library has two halves that check each other:
//!
//! * a *parametric* half — a linear-attention model whose in-context matrix
//!   `A = Q·(1/n)Σ φ(yᵢ)φ(yᵢ)ᵀ·Qᵀ` admits closed-form risk, an explicit
//!   feature-network construction that provably recovers `Σ^{1/2}`, and
//!   brute-force scalar oracles for the penalized objective ([`theory`]);
//! * a *nonparametric* half — a cross-attention network trained end-to-end
//!   with a transport cost plus a multi-scale RBF MMD penalty ([`nonparametric`]).
//!
//! Everything below is self-contained f64 numerics: dense linear algebra at
//! small dimension ([`linalg`]), counter-based reproducible sampling ([`rng`],
//! [`tasks`]), MMD estimators ([`mmd`]), a minimal reverse-mode tape
//! ([`autodiff`]), and a deterministic Adam/cosine training loop ([`trainer`]).

pub mod autodiff;
pub mod linalg;
pub mod mat;
pub mod mmd;
pub mod nonparametric;
pub mod parallel;
pub mod parametric;
pub mod rng;
pub mod tasks;
pub mod theory;
pub mod trainer;
