//! Two-way deconfounder network.
//!
//! ```text
//! hidden  = f(tanh(u' W[1..k] w + M [o; u; w] + b))         (encoder)
//! (mu, s) = MLP_P([onehot(a); hidden])                       (transition head)
//! sigma   = min(softplus(s) + sigma_min, sigma_max)
//! pi_b    = softmax(MLP_pi(hidden))                          (actor head)
//! ```
//!
//! Both MLPs have two tanh hidden layers. The encoder is swappable for the
//! ablation variants: without the bilinear term (`Mlp`) and with one of the
//! two embedding tables removed (`MlpNoU`, `MlpNoW`).
//!
//! Gradients are derived by hand for the batched forward pass in [`net`].

mod checkpoint;
mod model;
mod net;
mod params;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint};
pub use model::NtnModel;
pub use net::{
    actor_head, encode, grad, loss, loss_and_grad, ntn_forward, transition_head, Batch,
    LossBreakdown, LossConfig, TransitionPrediction,
};
pub use params::{Arch, EncoderKind, NtnParams, Normalization};
