"""Combined adaptation objective, its closed-form gradients, and AdamW.

The objective is a batch-level alignment term (distance between source and
prompted feature statistics) plus a weighted instance-level entropy term.
Gradients with respect to both prompt kinds are exact chain-rule expressions;
a central finite-difference oracle is provided for checking them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ToyModel
from .numerics import Matrix, Vector, as_sample_batch, as_vector


@dataclass(frozen=True)
class SourceStats:
    """Feature mean and std of the source domain, with the std-term weight."""

    mu: Vector
    sigma: Vector
    alpha_std: float = 1.0
    sample_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "mu", as_vector(self.mu, name="source mu"))
        object.__setattr__(
            self, "sigma", as_vector(self.sigma, dim=self.mu.shape[0], name="source sigma")
        )
        if np.any(self.sigma < 0.0):
            raise ValueError("source sigma must be >= 0")
        if self.sample_count < 2:
            raise ValueError("source stats need sample_count >= 2")


@dataclass(frozen=True)
class LossBreakdown:
    """Alignment term, entropy term, their weight, and the exact total."""

    loss_d: float
    loss_c: float
    a: float
    total: float


@dataclass
class AdamWState:
    """Moment buffers and constants for one prompt (vector or stacked matrix)."""

    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, shape, lr: float, **kwargs) -> "AdamWState":
        return cls(np.zeros(shape), np.zeros(shape), 0, lr, **kwargs)


def adamw_step(state: AdamWState, prompt: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One AdamW update with bias correction and decoupled weight decay."""
    if prompt.shape != state.m.shape or grad.shape != state.m.shape:
        raise ValueError("prompt/grad shape must match the optimizer state")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient rejected")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return prompt - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * prompt)


def _forward_state(model: ToyModel, batch, p_d, class_prompts):
    x = as_sample_batch(batch, dim=model.input_dim)
    if x.shape[0] < 2:
        raise ValueError("objective needs a batch of >= 2 samples")
    p_d = as_vector(p_d, dim=model.input_dim, name="domain prompt")
    p_c = as_sample_batch(class_prompts, dim=model.input_dim, name="class prompts")
    if p_c.shape[0] != x.shape[0]:
        raise ValueError("need one class prompt per sample")
    z = (x + p_d + p_c) @ model.extractor.T
    logits = z @ model.head_weight.T + model.head_bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    return x, p_c, z, probs, logp


def _stats_terms(z: Matrix, source: SourceStats, alpha_std: float):
    mu = z.mean(axis=0)
    centered = z - mu
    sigma = np.sqrt((centered ** 2).mean(axis=0))
    dmu = mu - source.mu
    dsg = sigma - source.sigma
    norm_mu = float(np.linalg.norm(dmu))
    norm_sg = float(np.linalg.norm(dsg))
    loss_d = norm_mu + alpha_std * norm_sg
    return mu, sigma, centered, dmu, dsg, norm_mu, norm_sg, loss_d


def loss(
    model: ToyModel,
    batch,
    p_d,
    class_prompts,
    source_stats: SourceStats,
    a: float,
    alpha_std: float,
) -> LossBreakdown:
    """Alignment-plus-entropy objective over one prompted batch.

    ``loss_d`` is the Euclidean distance between source and prompted feature
    means plus ``alpha_std`` times the distance between standard deviations;
    ``loss_c`` is the mean prediction entropy; ``total = loss_d + a * loss_c``.
    """
    _, _, z, probs, logp = _forward_state(model, batch, p_d, class_prompts)
    *_, loss_d = _stats_terms(z, source_stats, alpha_std)
    ent = -(probs * logp).sum(axis=1)
    loss_c = float(ent.mean())
    return LossBreakdown(loss_d, loss_c, a, loss_d + a * loss_c)


def grad(
    model: ToyModel,
    batch,
    p_d,
    class_prompts,
    source_stats: SourceStats,
    a: float,
    alpha_std: float,
) -> tuple[Vector, Matrix]:
    """Exact gradients of the total loss w.r.t. the domain prompt and each class prompt.

    Returns ``(g_domain, g_class)`` with ``g_class`` holding one row per
    sample. At a vanishing norm term (prompted stats exactly matching source)
    the zero subgradient is used, which keeps the zero-loss point stationary.
    """
    x, _, z, probs, logp = _forward_state(model, batch, p_d, class_prompts)
    b = x.shape[0]
    _, sigma, centered, dmu, dsg, norm_mu, norm_sg, _ = _stats_terms(
        z, source_stats, alpha_std
    )

    dz = np.zeros_like(z)
    if norm_mu != 0.0:
        dz += dmu / (norm_mu * b)
    if norm_sg != 0.0:
        scale = np.divide(
            dsg, sigma, out=np.zeros_like(sigma), where=sigma > 0.0
        )
        dz += (alpha_std / (norm_sg * b)) * scale * centered

    ent = -(probs * logp).sum(axis=1)
    g_logits = -probs * (logp + ent[:, None])
    dz += (a / b) * (g_logits @ model.head_weight)

    g_class = dz @ model.extractor
    g_domain = g_class.sum(axis=0)
    return g_domain, g_class


def finite_diff_grad(
    model: ToyModel,
    batch,
    p_d,
    class_prompts,
    source_stats: SourceStats,
    a: float,
    alpha_std: float,
    *,
    step: float = 1e-5,
) -> tuple[Vector, Matrix]:
    """Central-difference gradients of the total loss; the checking oracle.

    Only calls :func:`loss`, never the analytic gradient path.
    """
    p_d = as_vector(p_d, name="domain prompt").copy()
    p_c = as_sample_batch(class_prompts, name="class prompts").copy()

    def total(pd, pc):
        return loss(model, batch, pd, pc, source_stats, a, alpha_std).total

    g_domain = np.zeros_like(p_d)
    for k in range(p_d.shape[0]):
        orig = p_d[k]
        p_d[k] = orig + step
        hi = total(p_d, p_c)
        p_d[k] = orig - step
        lo = total(p_d, p_c)
        p_d[k] = orig
        g_domain[k] = (hi - lo) / (2.0 * step)

    g_class = np.zeros_like(p_c)
    for t in range(p_c.shape[0]):
        for k in range(p_c.shape[1]):
            orig = p_c[t, k]
            p_c[t, k] = orig + step
            hi = total(p_d, p_c)
            p_c[t, k] = orig - step
            lo = total(p_d, p_c)
            p_c[t, k] = orig
            g_class[t, k] = (hi - lo) / (2.0 * step)
    return g_domain, g_class


def optimize_prompts(
    model: ToyModel,
    batch,
    domain_prompt,
    class_prompts,
    source_stats: SourceStats,
    *,
    a: float,
    alpha_std: float,
    lr_domain: float,
    lr_class: float,
    steps: int,
) -> tuple[Vector, Matrix, LossBreakdown]:
    """Run ``steps`` AdamW updates on the composed prompts for one batch.

    Optimizer state is fresh per batch (composed prompts differ each batch,
    so carrying moments across batches would be ill-defined). Returns the
    learned prompts and the loss at them; pools are untouched.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    p_d = as_vector(domain_prompt, dim=model.input_dim, name="domain prompt").copy()
    p_c = as_sample_batch(class_prompts, dim=model.input_dim, name="class prompts").copy()
    d_state = AdamWState.fresh(p_d.shape, lr_domain)
    c_state = AdamWState.fresh(p_c.shape, lr_class)
    for _ in range(steps):
        g_d, g_c = grad(model, batch, p_d, p_c, source_stats, a, alpha_std)
        p_d = adamw_step(d_state, p_d, g_d)
        p_c = adamw_step(c_state, p_c, g_c)
    return p_d, p_c, loss(model, batch, p_d, p_c, source_stats, a, alpha_std)
