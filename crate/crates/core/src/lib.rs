pub mod cco;
pub mod density;
pub mod dynamics;
pub mod hamiltonians;
pub mod oracle;
pub mod seeds;

mod quadrature;

pub use hamiltonians::{
    hamiltonian_vector_field, poisson_bracket, poisson_bracket_gradient, HamiltonianError,
    HamiltonianSystem, PhaseSpacePoint, SymplecticForm,
};
