//! Dense tensors, softmax-family losses, row normalization, gradient checking
//! and the seeded random streams every other module draws from.

mod gradcheck;
mod normalize;
mod rng;
mod softmax;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use normalize::{l2_normalize_rows, NormalizedRows};
pub use rng::SeededRng;
pub use softmax::{
    kl_divergence_to_logits, log_softmax, mean_target_entropy, soft_cross_entropy, softmax_rows,
    LossGrad, TARGET_SUM_TOLERANCE,
};
pub use tensor::{dot, matmul, matmul_at, matmul_bt, Tensor};
