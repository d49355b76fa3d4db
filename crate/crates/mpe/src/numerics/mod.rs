//! Tensors, the reverse-mode tape, gradient checking, and serialization.

mod gradcheck;
mod io;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradReport};
pub use io::{read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor};
pub use tape::{forward_backward, Gradients, ParamId, ParamSet, Parameter, Tape, VarId};
pub use tensor::{log_sum_exp, Tensor};

/// SplitMix64 step; used to derive per-step and per-episode RNG seeds
/// from a base seed without correlation between streams.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(0x94d049bb133111eb);
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    z
}
