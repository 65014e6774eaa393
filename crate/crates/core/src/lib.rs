//! Spectral operators on finite approximations of post-critically finite
//! fractals: the Sierpinski gasket, its double cover and (as a classical
//! sanity case) the circle.

pub mod error;
pub mod expr;
pub mod fit;
pub mod graph;
pub mod heat;
pub mod provenance;
pub mod products;
pub mod psido;
pub mod sobolev;
pub mod spectral;
pub mod suite;
pub mod symbol;
pub mod varcoef;
pub mod wavefront;

pub use error::{Error, Result};
pub use graph::{build, FractalGraph, FractalKind};
