"""
Diffusion Module
Linear noise schedule, closed-form forward noising, epsilon-prediction loss,
ancestral DDPM steps and classifier-free guidance
"""

import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from core.errors import ConfigError, ShapeError, StepIndexError
from core.tensor_core import Tensor, add, mean, square, sub
from core.tensor_core import scale as scale_by

logger = logging.getLogger(__name__)

# Schedule defaults (the base model's schedule is not published; these are the usual DDPM values)
DEFAULT_TRAIN_STEPS = 1000
DEFAULT_SAMPLE_STEPS = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_COND_DROP = 0.1
DEFAULT_GUIDANCE = 5.0


@dataclass
class NoiseSchedule:
    """
    beta / alpha / alpha_bar tables, indexed 0..T-1 for steps 1..T

    Attributes:
        timesteps: model-facing step number of every table row (1..T for a full
            schedule, the strided subset for a respaced one)
    """
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray

    @property
    def n_steps(self):
        return int(self.beta.shape[0])

    def snr(self):
        return self.alpha_bar / (1.0 - self.alpha_bar)


def _from_alpha_bar(alpha_bar, timesteps):
    previous = np.concatenate([[1.0], alpha_bar[:-1]])
    alpha = alpha_bar / previous
    return NoiseSchedule(beta=1.0 - alpha, alpha=alpha, alpha_bar=alpha_bar, timesteps=timesteps)


def make_schedule(n_steps=DEFAULT_TRAIN_STEPS, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END):
    """
    Linear beta schedule.

    Args:
        n_steps: Number of diffusion steps T
        beta_start, beta_end: First and last beta, 0 < start <= end < 1

    Returns:
        NoiseSchedule
    """
    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigError(f"n_steps must be a positive integer, got {n_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    n_steps = int(n_steps)
    beta = np.linspace(beta_start, beta_end, n_steps) if n_steps > 1 else np.array([float(beta_start)])
    alpha = 1.0 - beta
    sched = NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha),
                          timesteps=np.arange(1, n_steps + 1))
    logger.debug("linear schedule T=%d beta=[%g, %g]", n_steps, beta_start, beta_end)
    return sched


def respace(sched, n_steps=DEFAULT_SAMPLE_STEPS):
    """
    Strided sub-schedule for faster ancestral sampling.

    Keeps alpha_bar at n_steps evenly spaced steps and rebuilds beta'_k = 1 - abar'_k / abar'_{k-1}.

    Returns:
        NoiseSchedule whose `timesteps` are the original step numbers
    """
    if not 1 <= n_steps <= sched.n_steps:
        raise ConfigError(f"cannot respace a {sched.n_steps}-step schedule to {n_steps} steps")
    rows = np.unique(np.round(np.linspace(0, sched.n_steps - 1, n_steps)).astype(np.int64))
    return _from_alpha_bar(sched.alpha_bar[rows].copy(), sched.timesteps[rows].copy())


def _check_index(sched, index):
    if int(index) != index or not 0 <= index < sched.n_steps:
        raise StepIndexError(f"step index {index} outside [0, {sched.n_steps})")
    return int(index)


# ============================================================================
# FORWARD PROCESS AND LOSS
# ============================================================================

def q_sample(z0, t, eps, sched):
    """
    z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    Args:
        z0: Clean latent (Tensor or array)
        t: 0-based schedule index
        eps: Noise shaped like z0
        sched: NoiseSchedule

    Returns:
        Tensor shaped like z0
    """
    t = _check_index(sched, t)
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if z0.shape != eps.shape:
        raise ShapeError('q_sample', z0.shape, eps.shape)
    abar = sched.alpha_bar[t]
    return add(scale_by(z0, np.sqrt(abar)), scale_by(eps, np.sqrt(1.0 - abar)))


def predict_z0(z_t, t, eps_hat, sched):
    """Invert q_sample given a noise estimate (0-based index)"""
    t = _check_index(sched, t)
    abar = sched.alpha_bar[t]
    return (_array(z_t) - np.sqrt(1.0 - abar) * _array(eps_hat)) / np.sqrt(abar)


def training_loss(model, z0s, clips, sched, rng, cond_drop=DEFAULT_COND_DROP):
    """
    Epsilon-prediction objective averaged over a batch.

    For every element draws t ~ U{1..T}, eps ~ N(0, I) and a condition-drop coin,
    in that order, from rng.

    Args:
        model: Callable(z_t: Tensor, step: int, clip or None) -> Tensor
        z0s: list of clean latents
        clips: list of ClipAnnotation (same length as z0s)
        sched: NoiseSchedule
        rng: numpy Generator
        cond_drop: Probability of replacing the condition with None

    Returns:
        single-element Tensor
    """
    if len(z0s) != len(clips) or not z0s:
        raise ShapeError('training_loss', (len(z0s),), (len(clips),))
    losses = None
    for z0, clip in zip(z0s, clips):
        step = int(rng.integers(1, sched.n_steps + 1))
        eps = rng.standard_normal(_array(z0).shape)
        dropped = bool(rng.random() < cond_drop)
        z_t = q_sample(z0, step - 1, eps, sched)
        pred = model(z_t, step, None if dropped else clip)
        term = mean(square(sub(pred, Tensor(eps))))
        losses = term if losses is None else add(losses, term)
    return scale_by(losses, 1.0 / len(z0s))


# ============================================================================
# SAMPLING
# ============================================================================

def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def ddpm_step(z_t, t, eps_hat, sched, rng=None):
    """
    One ancestral step z_t -> z_{t-1} with sigma_t^2 = beta_t.

    Args:
        z_t: Current latent
        t: 1-based step of the (possibly respaced) schedule
        eps_hat: Noise estimate
        rng: numpy Generator; required for t > 1

    Returns:
        np.ndarray
    """
    if int(t) != t or not 1 <= t <= sched.n_steps:
        raise StepIndexError(f"step {t} outside [1, {sched.n_steps}]")
    t = int(t)
    beta, alpha, abar = sched.beta[t - 1], sched.alpha[t - 1], sched.alpha_bar[t - 1]
    z_t, eps_hat = _array(z_t), _array(eps_hat)
    mu = (z_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mu
    return mu + np.sqrt(beta) * rng.standard_normal(z_t.shape)


def cfg_combine(eps_cond, eps_uncond, scale=DEFAULT_GUIDANCE):
    """eps_uncond + scale * (eps_cond - eps_uncond); exact at scale 0 and 1"""
    eps_cond, eps_uncond = _array(eps_cond), _array(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError('cfg_combine', eps_cond.shape, eps_uncond.shape)
    if scale == 1.0:
        return eps_cond.copy()
    if scale == 0.0:
        return eps_uncond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ancestral_sample(eps_fn, shape, sched, rng, progress=False, z_init=None):
    """
    Run ddpm_step from pure noise down to step 1.

    Args:
        eps_fn: Callable(z: np.ndarray, model_step: int) -> noise estimate
        shape: Latent shape
        sched: (respaced) NoiseSchedule
        rng: numpy Generator; draws the initial latent then one noise draw per step
        progress: Show a tqdm bar
        z_init: Optional starting latent instead of a fresh draw

    Returns:
        np.ndarray of the given shape
    """
    z = rng.standard_normal(shape) if z_init is None else _array(z_init).copy()
    steps = range(sched.n_steps, 0, -1)
    for k in tqdm(steps, desc='sampling', disable=not progress, leave=False):
        eps = eps_fn(z, int(sched.timesteps[k - 1]))
        z = ddpm_step(z, k, eps, sched, rng)
    return z
