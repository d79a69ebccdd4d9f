"""Dual prompt pools and the knowledge-fission operations.

A pool is an ordered list of (key, prompt) entries with a capacity. Fission
matches a query key against the pool under a threshold: matches compose a
prompt by softmax weighting, and a miss spawns a fresh prompt instead. Fission
never mutates a pool; all writes live in the fusion module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import BatchStats, Matrix, SeededRng, Vector, as_vector


@dataclass
class ClassPromptEntry:
    """(pseudo-label key, prompt) pair capturing one class concept."""

    key: Vector
    prompt: Vector
    created_at: int = 0

    def __post_init__(self):
        self.key = as_vector(self.key, name="class key")
        self.prompt = as_vector(self.prompt, name="class prompt")
        _check_probability(self.key, "class key")


@dataclass
class DomainPromptEntry:
    """(batch-statistics key, prompt) pair capturing one domain."""

    key: BatchStats
    prompt: Vector
    created_at: int = 0

    def __post_init__(self):
        if not isinstance(self.key, BatchStats):
            raise ValueError("domain key must be BatchStats")
        self.prompt = as_vector(self.prompt, name="domain prompt")


def _check_probability(vec: Vector, name: str) -> None:
    if float(vec.min()) < 0.0:
        raise ValueError(f"{name} must be nonnegative")
    if abs(float(vec.sum()) - 1.0) > 1e-6:
        raise ValueError(f"{name} must sum to 1, got {vec.sum()}")


class _BasePool:
    def __init__(self, capacity: int, prompt_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if prompt_dim < 1:
            raise ValueError("prompt_dim must be >= 1")
        self.capacity = int(capacity)
        self.prompt_dim = int(prompt_dim)
        self.entries: list = []
        self.version = 0
        self._cache_version = -1
        self._key_matrix: Matrix | None = None
        self._prompt_matrix: Matrix | None = None
        self._key_norms: Vector | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def bump(self) -> None:
        """Record a mutation: advances the version and drops stale caches."""
        self.version += 1
        self._cache_version = -1

    def _refresh_cache(self) -> None:
        if self._cache_version == self.version:
            return
        self._key_matrix = self._stack_keys()
        self._prompt_matrix = (
            np.stack([e.prompt for e in self.entries]) if self.entries else None
        )
        self._key_norms = (
            np.linalg.norm(self._key_matrix, axis=1) if self.entries else None
        )
        self._cache_version = self.version

    def key_matrix(self) -> Matrix | None:
        self._refresh_cache()
        return self._key_matrix

    def prompt_matrix(self) -> Matrix | None:
        self._refresh_cache()
        return self._prompt_matrix

    def key_norms(self) -> Vector | None:
        self._refresh_cache()
        return self._key_norms

    def _stack_keys(self) -> Matrix | None:
        raise NotImplementedError


class ClassPromptPool(_BasePool):
    """Ordered pool of class prompt entries, capacity enforced by fusion."""

    def __init__(self, capacity: int, prompt_dim: int, num_classes: int, entries=None):
        super().__init__(capacity, prompt_dim)
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = int(num_classes)
        for e in entries or []:
            self.append(e)

    def append(self, entry: ClassPromptEntry) -> int:
        if entry.key.shape[0] != self.num_classes:
            raise ValueError("entry key dimension must equal num_classes")
        if entry.prompt.shape[0] != self.prompt_dim:
            raise ValueError("entry prompt dimension must equal prompt_dim")
        self.entries.append(entry)
        self.bump()
        return len(self.entries) - 1

    def _stack_keys(self):
        return np.stack([e.key for e in self.entries]) if self.entries else None

    def to_dict(self) -> dict:
        return {
            "kind": "class",
            "capacity": self.capacity,
            "prompt_dim": self.prompt_dim,
            "num_classes": self.num_classes,
            "version": self.version,
            "entries": [
                {"key": e.key.tolist(), "prompt": e.prompt.tolist(), "created_at": e.created_at}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClassPromptPool":
        if doc.get("kind") != "class":
            raise ValueError("snapshot is not a class pool")
        pool = cls(doc["capacity"], doc["prompt_dim"], doc["num_classes"])
        for e in doc["entries"]:
            pool.append(ClassPromptEntry(e["key"], e["prompt"], e["created_at"]))
        pool.version = doc["version"]
        pool._cache_version = -1
        return pool


class DomainPromptPool(_BasePool):
    """Ordered pool of domain prompt entries keyed by batch statistics."""

    def __init__(self, capacity: int, prompt_dim: int, feature_dim: int, entries=None):
        super().__init__(capacity, prompt_dim)
        if feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        self.feature_dim = int(feature_dim)
        for e in entries or []:
            self.append(e)

    def append(self, entry: DomainPromptEntry) -> int:
        if entry.key.dim != self.feature_dim:
            raise ValueError("entry key dimension must equal feature_dim")
        if entry.prompt.shape[0] != self.prompt_dim:
            raise ValueError("entry prompt dimension must equal prompt_dim")
        self.entries.append(entry)
        self.bump()
        return len(self.entries) - 1

    def _stack_keys(self):
        return np.stack([e.key.concat() for e in self.entries]) if self.entries else None

    def to_dict(self) -> dict:
        return {
            "kind": "domain",
            "capacity": self.capacity,
            "prompt_dim": self.prompt_dim,
            "feature_dim": self.feature_dim,
            "version": self.version,
            "entries": [
                {
                    "mu": e.key.mu.tolist(),
                    "sigma": e.key.sigma.tolist(),
                    "prompt": e.prompt.tolist(),
                    "created_at": e.created_at,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DomainPromptPool":
        if doc.get("kind") != "domain":
            raise ValueError("snapshot is not a domain pool")
        pool = cls(doc["capacity"], doc["prompt_dim"], doc["feature_dim"])
        for e in doc["entries"]:
            pool.append(
                DomainPromptEntry(BatchStats(e["mu"], e["sigma"]), e["prompt"], e["created_at"])
            )
        pool.version = doc["version"]
        pool._cache_version = -1
        return pool


@dataclass
class FissionOutcome:
    """Result of matching one query against a pool.

    Either ``weights`` maps candidate pool indices to softmax weights and
    ``composed_prompt`` is their convex combination, or nothing cleared the
    threshold and ``composed_prompt`` is a freshly spawned prompt. The
    ``pool_version`` stamp lets fusion reject stale outcomes.
    """

    composed_prompt: Vector
    weights: dict[int, float] | None
    fissioned: bool
    pool_version: int = 0

    def __post_init__(self):
        self.composed_prompt = as_vector(self.composed_prompt, name="composed prompt")
        if self.fissioned != (self.weights is None):
            raise ValueError("fissioned flag must mirror absent weights")
        if self.weights is not None and not self.weights:
            raise ValueError("weights present but empty")


def _fresh_prompt(prompt_dim: int, rng: SeededRng, init_scale: float) -> Vector:
    if init_scale < 0:
        raise ValueError("init_scale must be >= 0")
    draw = rng.normal(size=prompt_dim)
    return draw * init_scale


def _candidate_weights(
    scores: Vector, candidates: np.ndarray, *, softmax_over_all: bool
) -> Vector:
    sel = scores[candidates]
    if softmax_over_all:
        shifted = scores - scores.max()
        return np.exp(shifted[candidates]) / np.exp(shifted).sum()
    shifted = sel - sel.max()
    e = np.exp(shifted)
    return e / e.sum()


def fission_class(
    pool: ClassPromptPool,
    pseudo_label,
    gamma_c: float,
    tau_c: float,
    rng: SeededRng,
    init_scale: float,
    *,
    softmax_over_all: bool = False,
) -> FissionOutcome:
    """Match one pseudo-label against the class pool by cosine similarity.

    Entries with similarity strictly above ``gamma_c`` become candidates and
    are blended with weights softmax(similarity / tau_c); with no candidate
    (including the empty-pool initial state) a fresh prompt is spawned.
    """
    if not -1.0 < gamma_c < 1.0:
        raise ValueError("gamma_c must lie in (-1, 1)")
    if tau_c <= 0:
        raise ValueError("tau_c must be > 0")
    y = as_vector(pseudo_label, dim=pool.num_classes, name="pseudo_label")
    _check_probability(y, "pseudo_label")
    keys = pool.key_matrix()
    if keys is None:
        return FissionOutcome(
            _fresh_prompt(pool.prompt_dim, rng, init_scale), None, True, pool.version
        )
    sims = (keys @ y) / (pool.key_norms() * math.sqrt(y @ y))
    candidates = np.flatnonzero(sims > gamma_c)
    if candidates.size == 0:
        return FissionOutcome(
            _fresh_prompt(pool.prompt_dim, rng, init_scale), None, True, pool.version
        )
    w = _candidate_weights(sims / tau_c, candidates, softmax_over_all=softmax_over_all)
    composed = w @ pool.prompt_matrix()[candidates]
    weights = dict(zip(candidates.tolist(), w.tolist()))
    return FissionOutcome(composed, weights, False, pool.version)


def fission_class_batch(
    pool: ClassPromptPool,
    pseudo_labels,
    gamma_c: float,
    tau_c: float,
    rng: SeededRng,
    init_scale: float,
    *,
    softmax_over_all: bool = False,
) -> list[FissionOutcome]:
    """Per-sample class fission; outcome order matches sample order."""
    return [
        fission_class(
            pool, y, gamma_c, tau_c, rng, init_scale, softmax_over_all=softmax_over_all
        )
        for y in pseudo_labels
    ]


def fission_domain(
    pool: DomainPromptPool,
    stats: BatchStats,
    gamma_d: float,
    tau_d: float,
    rng: SeededRng,
    init_scale: float,
    *,
    softmax_over_all: bool = False,
) -> FissionOutcome:
    """Match a batch-statistics key against the domain pool by distance.

    Entries with Euclidean distance (over the concatenated mean and std)
    strictly below ``gamma_d`` become candidates, weighted by
    softmax(-distance / tau_d); otherwise a fresh prompt is spawned, which
    also covers the very first test batch.
    """
    if gamma_d <= 0:
        raise ValueError("gamma_d must be > 0")
    if tau_d <= 0:
        raise ValueError("tau_d must be > 0")
    if not isinstance(stats, BatchStats):
        raise ValueError("stats must be BatchStats")
    if stats.dim != pool.feature_dim:
        raise ValueError("stats dimension must match pool feature_dim")
    keys = pool.key_matrix()
    if keys is None:
        return FissionOutcome(
            _fresh_prompt(pool.prompt_dim, rng, init_scale), None, True, pool.version
        )
    dists = np.linalg.norm(keys - stats.concat(), axis=1)
    candidates = np.flatnonzero(dists < gamma_d)
    if candidates.size == 0:
        return FissionOutcome(
            _fresh_prompt(pool.prompt_dim, rng, init_scale), None, True, pool.version
        )
    w = _candidate_weights(-dists / tau_d, candidates, softmax_over_all=softmax_over_all)
    composed = w @ pool.prompt_matrix()[candidates]
    weights = dict(zip(candidates.tolist(), w.tolist()))
    return FissionOutcome(composed, weights, False, pool.version)
