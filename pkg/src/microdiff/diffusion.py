"""Gaussian diffusion: noise schedule, forward/posterior/reverse math, losses.

Time steps are 1-based: t runs over 1..T, the cumulative product table uses the
convention alpha_bar_0 = 1. Tables are float64; per-step coefficients are cast
to the dtype of the tensors they multiply, so float64 inputs give float64
accuracy in the identity tests while training runs in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericalFailureError

HYBRID_VLB_WEIGHT = 1e-3
BETA_START_REF = 1e-4   # linear-schedule endpoints at the reference T below
BETA_END_REF = 0.02
REFERENCE_T = 1000


@dataclass
class NoiseSchedule:
    """Per-step beta/alpha tables; index i holds the value for step t = i + 1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray  # alpha_bar_{t-1}, leading entry 1.0
    beta_tilde: np.ndarray      # posterior variance, 0 at t = 1
    log_beta_tilde_clipped: np.ndarray  # beta_tilde with the t=1 zero floored to beta_tilde_2

    @property
    def T(self) -> int:
        return len(self.beta)

    def to_torch(self, device="cpu"):
        return {
            name: torch.from_numpy(getattr(self, name)).to(device)
            for name in (
                "beta", "alpha", "alpha_bar", "alpha_bar_prev",
                "beta_tilde", "log_beta_tilde_clipped",
            )
        }


def linear_beta_schedule(T: int, beta_start: float | None = None,
                         beta_end: float | None = None) -> NoiseSchedule:
    """Linearly spaced betas; default endpoints 1e-4..0.02 scaled by 1000/T."""
    if T < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {T}")
    scale = REFERENCE_T / T
    if beta_start is None:
        beta_start = scale * BETA_START_REF
    if beta_end is None:
        beta_end = scale * BETA_END_REF
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"invalid beta endpoints ({beta_start}, {beta_end}); need 0 < start <= end < 1"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    clipped = beta_tilde.copy()
    clipped[0] = beta_tilde[1]
    return NoiseSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        beta_tilde=beta_tilde,
        log_beta_tilde_clipped=np.log(clipped),
    )


def _coef(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather per-step coefficients for 1-based steps t, shaped to broadcast over `like`."""
    t = torch.as_tensor(t, dtype=torch.long)
    vals = torch.from_numpy(table).to(like.device)[t - 1].to(like.dtype)
    while vals.dim() < like.dim():
        vals = vals.unsqueeze(-1)
    return vals


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward-noised sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    return (
        torch.sqrt(_coef(sched.alpha_bar, t, x0)) * x0
        + torch.sqrt(1.0 - _coef(sched.alpha_bar, t, x0)) * eps
    )


def q_posterior(x0: torch.Tensor, x_t: torch.Tensor, t, sched: NoiseSchedule):
    """Exact reverse conditional given x0: returns (mean, variance)."""
    abar = _coef(sched.alpha_bar, t, x_t)
    abar_prev = _coef(sched.alpha_bar_prev, t, x_t)
    beta = _coef(sched.beta, t, x_t)
    alpha = _coef(sched.alpha, t, x_t)
    coef_x0 = torch.sqrt(abar_prev) * beta / (1.0 - abar)
    coef_xt = torch.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    mean = coef_x0 * x0 + coef_xt * x_t
    variance = _coef(sched.beta_tilde, t, x_t)
    return mean, variance


def mu_from_eps(x_t: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule):
    """Reverse mean from the predicted noise."""
    beta = _coef(sched.beta, t, x_t)
    abar = _coef(sched.alpha_bar, t, x_t)
    alpha = _coef(sched.alpha, t, x_t)
    return (x_t - beta / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(alpha)


def x0_from_eps(x_t: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule):
    abar = _coef(sched.alpha_bar, t, x_t)
    return (x_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)


def squash_v(raw_v: torch.Tensor) -> torch.Tensor:
    """Map the raw variance head output into the interpolation range [0, 1]."""
    return ((raw_v + 1.0) / 2.0).clamp(0.0, 1.0)


def sigma_from_v(v: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Learned variance: log-space interpolation between beta_tilde and beta.

    Expects v already squashed to [0, 1]. The t = 1 posterior variance is 0, so
    its log is floored to log beta_tilde_2 before interpolating.
    """
    log_beta = torch.log(_coef(sched.beta, t, v))
    log_beta_tilde = _coef(sched.log_beta_tilde_clipped, t, v)
    return torch.exp(v * log_beta + (1.0 - v) * log_beta_tilde)


def gaussian_kl(mu1, var1, mu2, var2) -> torch.Tensor:
    """Closed-form KL between diagonal Gaussians, summed over all elements."""
    mu1, var1, mu2, var2 = (torch.as_tensor(v, dtype=torch.float64) for v in (mu1, var1, mu2, var2))
    if torch.any(var1 <= 0) or torch.any(var2 <= 0):
        raise ValueError("variances must be positive")
    elementwise = 0.5 * (torch.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0)
    return elementwise.sum()


def _kl_elements(mu1, logvar1, mu2, logvar2):
    return 0.5 * (
        logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
        + (mu1 - mu2) ** 2 * torch.exp(-logvar2) - 1.0
    )


def _standard_normal_cdf(x):
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def discretized_gaussian_log_likelihood(x0, mean, log_var):
    """Log-likelihood of pixel values under the discrete decoder.

    Pixels live in [-1, 1] on the 256-level grid; each value owns the bin
    x +- 1/255 with the end bins extended to infinity.
    """
    inv_std = torch.exp(-0.5 * log_var)
    cdf_upper = _standard_normal_cdf(inv_std * (x0 - mean + 1.0 / 255.0))
    cdf_lower = _standard_normal_cdf(inv_std * (x0 - mean - 1.0 / 255.0))
    log_cdf_upper = torch.log(cdf_upper.clamp(min=1e-12))
    log_one_minus_cdf_lower = torch.log((1.0 - cdf_lower).clamp(min=1e-12))
    log_delta = torch.log((cdf_upper - cdf_lower).clamp(min=1e-12))
    return torch.where(
        x0 < -0.999, log_cdf_upper,
        torch.where(x0 > 0.999, log_one_minus_cdf_lower, log_delta),
    )


def _mean_flat(x):
    return x.reshape(x.shape[0], -1).mean(dim=1)


def prior_kl(x0: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Terminal-step KL(q(x_T | x0) || N(0, I)) per sample, in bits per dim.

    Depends only on the schedule and the data, never on model parameters.
    """
    t = torch.full((x0.shape[0],), sched.T, dtype=torch.long)
    abar = _coef(sched.alpha_bar, t, x0)
    mean = torch.sqrt(abar) * x0
    logvar = torch.log(1.0 - abar).expand_as(x0)
    kl = _kl_elements(mean, logvar, torch.zeros_like(mean), torch.zeros_like(logvar))
    return _mean_flat(kl) / math.log(2.0)


def vlb_term(x0, x_t, t, eps_hat, v, sched: NoiseSchedule) -> torch.Tensor:
    """Per-sample variational term for sampled step t, in bits per dim.

    For t = 1 this is the negative discrete-decoder log-likelihood of x0; for
    t > 1 it is the KL between the true posterior and the model reverse step.
    The mean path must be detached by the caller when used inside the hybrid
    loss so this term only trains the variance output.
    """
    mu_model = mu_from_eps(x_t, t, eps_hat, sched)
    log_var_model = torch.log(sigma_from_v(v, t, sched))
    mu_true, _ = q_posterior(x0, x_t, t, sched)
    log_var_true = _coef(sched.log_beta_tilde_clipped, t, x_t).expand_as(x_t)

    kl = _kl_elements(mu_true, log_var_true, mu_model, log_var_model)
    kl_bits = _mean_flat(kl) / math.log(2.0)

    decoder_nll = -discretized_gaussian_log_likelihood(x0, mu_model, log_var_model)
    decoder_bits = _mean_flat(decoder_nll) / math.log(2.0)

    t = torch.as_tensor(t, dtype=torch.long)
    return torch.where(t == 1, decoder_bits, kl_bits)


@dataclass
class LossBreakdown:
    l_mu: torch.Tensor
    l_vlb: torch.Tensor
    l_hybrid: torch.Tensor
    terms: torch.Tensor | None = None  # per-sample vlb terms when requested


def loss_hybrid(model, x0, t, eps, sched: NoiseSchedule, model_kwargs=None,
                keep_terms: bool = False) -> LossBreakdown:
    """Hybrid training loss: noise-matching MSE plus the weighted vlb term.

    The vlb path sees a detached noise prediction, so its gradient reaches only
    the variance output (and whatever feeds it), never the mean.
    """
    model_kwargs = model_kwargs or {}
    x_t = q_sample(x0, t, eps, sched)
    eps_hat, raw_v = model(x_t, t, **model_kwargs)
    l_mu = ((eps - eps_hat) ** 2).mean()
    terms = vlb_term(x0, x_t, t, eps_hat.detach(), squash_v(raw_v), sched)
    l_vlb = terms.mean()
    l_hybrid = l_mu + HYBRID_VLB_WEIGHT * l_vlb
    return LossBreakdown(l_mu, l_vlb, l_hybrid, terms if keep_terms else None)


@torch.no_grad()
def p_sample_loop(model, n: int, sched: NoiseSchedule, shape=(1, 32, 32),
                  generator: torch.Generator | None = None, model_kwargs=None,
                  snapshot_steps=(), clip_denoised: bool = False,
                  dtype=torch.float32):
    """Ancestral sampling from pure noise down to step 0.

    Returns (images, snapshots): uint8 arrays scaled to [0, 255], with
    snapshots holding the state x_t at each requested step index (descending
    from T; T itself is the initial noise). No noise is added at the final
    step. Deterministic for a fixed generator state.
    """
    model_kwargs = model_kwargs or {}
    snapshots = {}
    x = torch.randn((n, *shape), generator=generator, dtype=dtype)
    for step in range(sched.T, 0, -1):
        if step in snapshot_steps:
            snapshots[step] = to_bitmap(x)
        t = torch.full((n,), step, dtype=torch.long)
        eps_hat, raw_v = model(x, t, **model_kwargs)
        if clip_denoised:
            x0_hat = x0_from_eps(x, t, eps_hat, sched).clamp(-1.0, 1.0)
            mean, _ = q_posterior(x0_hat, x, t, sched)
        else:
            mean = mu_from_eps(x, t, eps_hat, sched)
        if step > 1:
            sigma = sigma_from_v(squash_v(raw_v), t, sched)
            noise = torch.randn(x.shape, generator=generator, dtype=dtype)
            x = mean + torch.sqrt(sigma) * noise
        else:
            x = mean
        if not torch.isfinite(x).all():
            raise NumericalFailureError("non-finite sample state", step=step)
    return to_bitmap(x.clamp(-1.0, 1.0)), snapshots


def scale_to_unit(images) -> torch.Tensor:
    """uint8 bitmaps [0, 255] -> float tensor in [-1, 1]."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    return x / 255.0 * 2.0 - 1.0


def to_bitmap(x: torch.Tensor) -> np.ndarray:
    """Float tensor in [-1, 1] -> uint8 array in [0, 255] (clamped, rounded)."""
    scaled = (x.detach().clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0
    return scaled.round().to(torch.uint8).cpu().numpy()
