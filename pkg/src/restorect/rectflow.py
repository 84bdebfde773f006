"""Rectified-flow trajectory math, the velocity-matching objective, Euler ODE
sampling, trajectory-consistency regularization, and a DDIM-style baseline
sampler for step-count comparisons.

Time runs from 0 (noise) to 1 (data). The velocity predictor takes a
discrete timestep on the 0..t_max grid; continuous times are mapped onto it
by rounding, reconciling continuous-time interpolation with the discrete
time input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ndtensor as nd
from .autodiff import Tensor

RECTIFIED_FLOW = "rectified_flow"
DDIM_BASELINE = "ddim_baseline"

TRAJ_COEFFS = {"trans": 0.1, "target": 0.5, "cons": 0.2}


@dataclass
class FlowState:
    """A point on the interpolation path: state x at time t with conditioning c."""

    x: Tensor
    t: float
    c: Tensor

    def __post_init__(self):
        if not (0.0 <= self.t <= 1.0):
            raise ValueError(f"FlowState: t must lie in [0,1], got {self.t}")


@dataclass
class SamplerConfig:
    steps: int
    kind: str = RECTIFIED_FLOW

    def __post_init__(self):
        if not (1 <= int(self.steps) <= 5):
            raise ValueError(f"SamplerConfig: steps must lie in [1,5], got {self.steps}")
        if self.kind not in (RECTIFIED_FLOW, DDIM_BASELINE):
            raise ValueError(f"SamplerConfig: unknown sampler kind '{self.kind}'")


def _as_batch(x) -> Tensor:
    x = ad._lift(x)
    return ad.reshape(x, (1, -1)) if x.ndim == 1 else x


def interpolate(z, f_teach, t: float) -> Tensor:
    """Straight-line path point x_t = (1-t) z + t f."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"interpolate: t must lie in [0,1], got {t}")
    z, f_teach = ad._lift(z), ad._lift(f_teach)
    if z.shape != f_teach.shape:
        raise ValueError(f"interpolate: shape mismatch {z.shape} vs {f_teach.shape}")
    return (1.0 - t) * z + t * f_teach


def velocity_target(z, f_teach) -> Tensor:
    """Constant velocity of the straight path: f - z, independent of t."""
    z, f_teach = ad._lift(z), ad._lift(f_teach)
    if z.shape != f_teach.shape:
        raise ValueError(f"velocity_target: shape mismatch {z.shape} vs {f_teach.shape}")
    return f_teach - z


def timestep_index(t: float, t_max: int) -> int:
    """Map continuous t in [0,1] onto the discrete 0..t_max grid by rounding."""
    return int(round(t * t_max))


def velocity_matching_loss(net, batch, rng: nd.Rng) -> Tensor:
    """Mean over the batch of ||net(x_t, t_idx, c) - (f - z)||^2 with one
    t ~ Uniform[0,1] drawn per item.

    `batch` is (z, f_teach, c), each (B, D).
    """
    z, f_teach, c = (_as_batch(v) for v in batch)
    if z.shape[0] == 0:
        raise ValueError("velocity_matching_loss: empty batch")
    if z.shape != f_teach.shape or z.shape[0] != c.shape[0]:
        raise ValueError("velocity_matching_loss: batch shapes disagree")
    t = rng.uniform((z.shape[0],))
    t_col = ad.constant(t.reshape(-1, 1))
    x_t = (1.0 - t_col) * z + t_col * f_teach
    t_idx = np.rint(t * net.t_max).astype(np.int64)
    pred = net.forward(x_t, t_idx, c)
    d = pred - (f_teach - z)
    return ad.mean(ad.sum_(d * d, axes=1))


def euler_sample(net, z, c, config: SamplerConfig):
    """Integrate x' = v(x, t, c) from t=0 with fixed dt = 1/steps.

    Returns (x_final, trajectory) where the trajectory holds the post-step
    states x^1..x^N; the net is called exactly `steps` times.
    """
    if config.kind != RECTIFIED_FLOW:
        raise ValueError(f"euler_sample: config.kind must be '{RECTIFIED_FLOW}'")
    x = _as_batch(z)
    c = _as_batch(c)
    dt = 1.0 / config.steps
    trajectory = []
    for i in range(config.steps):
        t = i * dt
        v = net.forward(x, timestep_index(t, net.t_max), c)
        x = x + dt * v
        trajectory.append(x)
    return x, trajectory


def trajectory_consistency_loss(trajectory, f_teach, coeffs=None) -> Tensor:
    """0.1 * sum ||x^{i+1}-x^i||^2 + 0.5 * ||x^final - f||^2
    + 0.2 * sum (1 - cos(x^i, f)), batch-averaged.

    Cosine similarity uses eps=1e-12 denominators so zero vectors are safe.
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory_consistency_loss: empty trajectory")
    coeffs = coeffs or TRAJ_COEFFS
    states = [_as_batch(s) for s in trajectory]
    f = _as_batch(f_teach)

    def sq_norm(v):  # (B,D) -> (B,)
        return ad.sum_(v * v, axes=1)

    trans = ad.constant(np.zeros(states[0].shape[0]))
    for a, b in zip(states[:-1], states[1:]):
        trans = trans + sq_norm(b - a)
    target = sq_norm(states[-1] - f)
    eps = 1e-12
    f_norm = ad.sqrt(sq_norm(f) + eps)
    cons = ad.constant(np.zeros(states[0].shape[0]))
    for s in states:
        cos_sim = ad.sum_(s * f, axes=1) / (ad.sqrt(sq_norm(s) + eps) * f_norm)
        cons = cons + (1.0 - cos_sim)
    total = coeffs["trans"] * ad.mean(trans) + coeffs["target"] * ad.mean(target) \
        + coeffs["cons"] * ad.mean(cons)
    return total


# -- DDIM baseline ---------------------------------------------------------------

def cosine_alpha_bars(T: int = 50, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """Cumulative signal levels for the squared-cosine noise schedule, with
    per-step betas clipped to max_beta so alpha_bar stays strictly positive."""
    def f(u):
        return math.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2

    f0 = f(0.0)
    betas = np.empty(T)
    for t in range(T):
        betas[t] = min(1.0 - f((t + 1) / T) / f(t / T), max_beta)
    return np.cumprod(1.0 - betas)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly strided descending timesteps from T-1 to 0."""
    return np.unique(np.linspace(T - 1, 0, steps).round().astype(np.int64))[::-1]


def ddim_baseline_sample(noise_net, z, c, config: SamplerConfig,
                         alpha_bars: np.ndarray) -> Tensor:
    """Deterministic DDIM update over `steps` strided timesteps of an
    epsilon-prediction net trained on the given schedule. The step below the
    lowest timestep treats alpha_bar as 1, i.e. the final update lands on the
    predicted clean sample."""
    if config.kind != DDIM_BASELINE:
        raise ValueError(f"ddim_baseline_sample: config.kind must be '{DDIM_BASELINE}'")
    x = _as_batch(z)
    c = _as_batch(c)
    taus = ddim_timesteps(len(alpha_bars), config.steps)
    for j, tau in enumerate(taus):
        eps_hat = noise_net.forward(x, int(tau), c)
        ab = float(alpha_bars[tau])
        x0_hat = (x - math.sqrt(1.0 - ab) * eps_hat) * (1.0 / math.sqrt(ab))
        ab_next = float(alpha_bars[taus[j + 1]]) if j + 1 < len(taus) else 1.0
        x = math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps_hat
    return x
