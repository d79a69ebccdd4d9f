"""Online adaptation loop, metrics, and the cluster-correctness verifier.

``run_ctta`` wires fission, prompt optimization, prediction, and fusion per
batch, in that order: each batch is scored with its freshly learned prompts
before any pool mutation. Ground-truth labels are consumed only here, for
metrics and the observer ledger; the adaptation step itself sees samples only.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .fusion import (
    ClassUpdateRecord,
    DomainUpdateRecord,
    DomainUpdateSummary,
    update_class_pool,
    update_domain_pool,
)
from .model import (
    ToyModel,
    draw_labeled_samples,
    fit_source_model,
    forward,
    key_stats,
    make_class_means,
    pseudo_labels,
)
from .numerics import Matrix, SeededRng, as_sample_batch
from .objective import SourceStats, finite_diff_grad, grad, optimize_prompts
from .pools import ClassPromptPool, DomainPromptPool, FissionOutcome, fission_class_batch, fission_domain
from .stream import DomainSpec, LabeledBatch, SeparationCertificate, StreamConfig


@dataclass(frozen=True)
class Hyperparams:
    """Every tunable constant of the engine, with its default value."""

    gamma_d: float = 25.0
    gamma_c: float = 0.005
    gamma_h: float = 2.0
    alpha_d: float = 0.1
    alpha_c: float = 0.1
    tau_d: float = 3.0
    tau_c: float = 1.0
    a: float = 3.0
    alpha_std: float = 1.0
    n_d: int = 20
    n_c: int = 100
    lr_domain: float = 0.1
    lr_class: float = 0.001
    k_steps: int = 1
    init_scale: float = 0.01
    softmax_over_all: bool = False
    class_update: str = "sequential"

    def __post_init__(self):
        if self.gamma_d <= 0 or self.tau_d <= 0 or self.tau_c <= 0:
            raise ValueError("gamma_d, tau_d, tau_c must be > 0")
        if not -1.0 < self.gamma_c < 1.0:
            raise ValueError("gamma_c must lie in (-1, 1)")
        if self.gamma_h < 0:
            raise ValueError("gamma_h must be >= 0")
        if not (0.0 <= self.alpha_d <= 1.0 and 0.0 <= self.alpha_c <= 1.0):
            raise ValueError("alpha_d and alpha_c must lie in [0, 1]")
        if self.n_d < 1 or self.n_c < 1:
            raise ValueError("pool capacities must be >= 1")
        if self.lr_domain < 0 or self.lr_class < 0 or self.init_scale < 0:
            raise ValueError("learning rates and init_scale must be >= 0")
        if self.k_steps < 0:
            raise ValueError("k_steps must be >= 0")
        if self.class_update not in ("sequential", "averaged"):
            raise ValueError("class_update must be 'sequential' or 'averaged'")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**doc)


METRICS_CSV_HEADER = (
    "batch_idx,domain_id_true,error_rate,mean_entropy,loss_d,loss_c,"
    "pool_d_size,pool_c_size,fissioned_d,fissioned_c,param_count"
)


@dataclass
class BatchMetrics:
    batch_idx: int
    domain_id_true: int
    error_rate: float
    mean_entropy: float
    loss_d: float
    loss_c: float
    pool_d_size: int
    pool_c_size: int
    fissioned_d: int
    fissioned_c: int
    param_count: int
    fused_d: int = 0
    compacted_c: int = 0

    def csv_row(self) -> str:
        return ",".join(
            [
                str(self.batch_idx),
                str(self.domain_id_true),
                repr(self.error_rate),
                repr(self.mean_entropy),
                repr(self.loss_d),
                repr(self.loss_c),
                str(self.pool_d_size),
                str(self.pool_c_size),
                str(self.fissioned_d),
                str(self.fissioned_c),
                str(self.param_count),
            ]
        )


def _blocks(domain_seq: list[int]) -> list[int]:
    blocks: list[int] = []
    for d in domain_seq:
        if not blocks or blocks[-1] != d:
            blocks.append(d)
    return blocks


def _period(seq: list[int]) -> int:
    n = len(seq)
    for p in range(1, n + 1):
        if n % p == 0 and seq == seq[:p] * (n // p):
            return p
    return n


@dataclass
class RunMetrics:
    """Per-batch records plus derived aggregates of one adaptation run."""

    rows: list[BatchMetrics] = field(default_factory=list)
    input_dim: int = 0

    def overall_error(self) -> float:
        return float(np.mean([r.error_rate for r in self.rows])) if self.rows else 0.0

    def per_domain_error(self) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for r in self.rows:
            sums.setdefault(r.domain_id_true, []).append(r.error_rate)
        return {d: float(np.mean(v)) for d, v in sorted(sums.items())}

    def round_index(self) -> list[int]:
        """Round id per row, from the repetition period of the domain-block sequence."""
        seq = [r.domain_id_true for r in self.rows]
        blocks = _blocks(seq)
        p = _period(blocks)
        out = []
        block = -1
        prev = None
        for d in seq:
            if d != prev:
                block += 1
                prev = d
            out.append(block // p)
        return out

    def per_round_error(self) -> list[float]:
        rounds = self.round_index()
        if not rounds:
            return []
        means: list[list[float]] = [[] for _ in range(max(rounds) + 1)]
        for r, row in zip(rounds, self.rows):
            means[r].append(row.error_rate)
        return [float(np.mean(v)) for v in means]

    def to_csv(self) -> str:
        lines = [METRICS_CSV_HEADER] + [r.csv_row() for r in self.rows]
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        per_round = self.per_round_error()
        doc = {
            "overall_error": self.overall_error(),
            "per_domain_error": {str(d): e for d, e in self.per_domain_error().items()},
            "final_pool_sizes": {
                "domain": self.rows[-1].pool_d_size if self.rows else 0,
                "class": self.rows[-1].pool_c_size if self.rows else 0,
            },
            "total_fissions": {
                "domain": int(sum(r.fissioned_d for r in self.rows)),
                "class": int(sum(r.fissioned_c for r in self.rows)),
            },
            "total_fusions": {
                "domain": int(sum(r.fused_d for r in self.rows)),
                "class": int(sum(r.compacted_c for r in self.rows)),
            },
            "num_batches": len(self.rows),
        }
        if len(per_round) > 1:
            doc["per_round_error"] = per_round
        return doc


@dataclass
class ClusterLedger:
    """Observer-only record of ground-truth clusters behind domain-pool entries.

    The engine never reads it; the verifier uses it to check that matching,
    fission, and fusion respect the true domain partition.
    """

    entry_labels: list[int] = field(default_factory=list)
    batch_domains: list[int] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    _seen: set[int] = field(default_factory=set)

    def on_fission_outcome(self, batch_index: int, true_domain: int, outcome: FissionOutcome):
        self.batch_domains.append(true_domain)
        first = true_domain not in self._seen
        self._seen.add(true_domain)
        if first and not outcome.fissioned:
            self.violations.append(
                f"batch {batch_index}: first encounter of domain {true_domain} "
                "matched existing prompts instead of fissioning"
            )
        if outcome.weights is not None:
            for i in outcome.weights:
                if self.entry_labels[i] != true_domain:
                    self.violations.append(
                        f"batch {batch_index}: matched entry {i} of domain "
                        f"{self.entry_labels[i]} while in domain {true_domain}"
                    )

    def on_domain_update(self, batch_index: int, true_domain: int, summary: DomainUpdateSummary):
        if summary.fissioned:
            self.entry_labels.append(true_domain)
            if summary.fused_pair is not None:
                i, j = summary.fused_pair
                if self.entry_labels[i] != self.entry_labels[j]:
                    self.violations.append(
                        f"batch {batch_index}: fused entries of domains "
                        f"{self.entry_labels[i]} and {self.entry_labels[j]}"
                    )
                del self.entry_labels[j]


@dataclass
class RunResult:
    metrics: RunMetrics
    class_pool: ClassPromptPool
    domain_pool: DomainPromptPool
    ledger: ClusterLedger | None = None


def compute_source_stats(
    model: ToyModel, samples, *, alpha_std: float = 1.0, recommended: int = 300
) -> SourceStats:
    """Prompt-free feature statistics of unlabeled source samples."""
    x = as_sample_batch(samples, dim=model.input_dim, name="source samples")
    if x.shape[0] < 2:
        raise ValueError("source stats need at least 2 samples")
    if x.shape[0] < recommended:
        warnings.warn(
            f"only {x.shape[0]} source samples; {recommended}+ recommended for stable statistics"
        )
    stats = key_stats(model, x)
    return SourceStats(stats.mu, stats.sigma, alpha_std, x.shape[0])


def _adapt_batch(
    model: ToyModel,
    samples: Matrix,
    hp: Hyperparams,
    source_stats: SourceStats,
    class_pool: ClassPromptPool,
    domain_pool: DomainPromptPool,
    rng: SeededRng,
    batch_index: int,
):
    """One online step on unlabeled samples; returns predictions and update summaries."""
    labels_free = pseudo_labels(model, samples)
    class_outcomes = fission_class_batch(
        class_pool,
        labels_free,
        hp.gamma_c,
        hp.tau_c,
        rng,
        hp.init_scale,
        softmax_over_all=hp.softmax_over_all,
    )
    stats = key_stats(model, samples)
    domain_outcome = fission_domain(
        domain_pool,
        stats,
        hp.gamma_d,
        hp.tau_d,
        rng,
        hp.init_scale,
        softmax_over_all=hp.softmax_over_all,
    )
    composed_class = np.stack([o.composed_prompt for o in class_outcomes])
    p_d, p_c, breakdown = optimize_prompts(
        model,
        samples,
        domain_outcome.composed_prompt,
        composed_class,
        source_stats,
        a=hp.a,
        alpha_std=hp.alpha_std,
        lr_domain=hp.lr_domain,
        lr_class=hp.lr_class,
        steps=hp.k_steps,
    )
    _, probs = forward(model, samples, p_d, p_c)

    records = [
        ClassUpdateRecord(p_c[t], probs[t], labels_free[t], class_outcomes[t])
        for t in range(samples.shape[0])
    ]
    class_summary = update_class_pool(
        class_pool,
        records,
        hp.gamma_h,
        hp.alpha_c,
        mode=hp.class_update,
        created_at=batch_index,
    )
    domain_summary = update_domain_pool(
        domain_pool,
        DomainUpdateRecord(p_d, stats, domain_outcome),
        hp.alpha_d,
        created_at=batch_index,
    )
    return probs, breakdown, class_outcomes, domain_outcome, class_summary, domain_summary


def run_ctta(
    model: ToyModel,
    stream: list[LabeledBatch],
    hyperparams: Hyperparams,
    source_stats: SourceStats,
    *,
    seed: int = 0,
    rng: SeededRng | None = None,
    class_pool: ClassPromptPool | None = None,
    domain_pool: DomainPromptPool | None = None,
    ledger: ClusterLedger | None = None,
    on_batch_start=None,
) -> RunResult:
    """Adapt online over the stream, scoring each batch before mutating the pools."""
    if not stream:
        raise ValueError("empty stream")
    hp = hyperparams
    rng = rng if rng is not None else SeededRng(seed)
    if class_pool is None:
        class_pool = ClassPromptPool(hp.n_c, model.input_dim, model.num_classes)
    if domain_pool is None:
        domain_pool = DomainPromptPool(hp.n_d, model.input_dim, model.feature_dim)
    metrics = RunMetrics(input_dim=model.input_dim)

    for batch in stream:
        if on_batch_start is not None:
            on_batch_start(batch, class_pool, domain_pool)
        samples = batch.samples
        probs, breakdown, class_outcomes, domain_outcome, class_summary, domain_summary = (
            _adapt_batch(
                model, samples, hp, source_stats, class_pool, domain_pool, rng, batch.batch_index
            )
        )
        if ledger is not None:
            ledger.on_fission_outcome(batch.batch_index, batch.domain_id, domain_outcome)
            ledger.on_domain_update(batch.batch_index, batch.domain_id, domain_summary)

        predicted = probs.argmax(axis=1)
        error_rate = float(np.mean(predicted != batch.class_ids))
        metrics.rows.append(
            BatchMetrics(
                batch_idx=batch.batch_index,
                domain_id_true=batch.domain_id,
                error_rate=error_rate,
                mean_entropy=breakdown.loss_c,
                loss_d=breakdown.loss_d,
                loss_c=breakdown.loss_c,
                pool_d_size=len(domain_pool),
                pool_c_size=len(class_pool),
                fissioned_d=int(domain_outcome.fissioned),
                fissioned_c=sum(o.fissioned for o in class_outcomes),
                param_count=(len(domain_pool) + len(class_pool)) * model.input_dim,
                fused_d=int(domain_summary.fused_pair is not None),
                compacted_c=int(class_summary.compaction is not None),
            )
        )
    return RunResult(metrics, class_pool, domain_pool, ledger)


@dataclass
class LemmaReport:
    """Verdict of the cluster-correctness checks on a certified stream."""

    status: str  # "pass" | "hypothesis_violation" | "lemma_violation"
    hypothesis_issues: list[str]
    violations: list[str]
    num_batches: int
    num_domains: int
    metrics: RunMetrics | None = None

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def verify_lemmas(
    stream: list[LabeledBatch],
    certificate: SeparationCertificate,
    hyperparams: Hyperparams,
    model: ToyModel,
    source_stats: SourceStats,
    *,
    seed: int = 0,
    rng: SeededRng | None = None,
) -> LemmaReport:
    """Check cluster-correct matching, fission, and fusion on a certified stream.

    Requires the separation hypotheses (valid certificate, matching threshold
    below theta, pool capacity above the domain count); if they fail, the
    report says so instead of blaming the engine.
    """
    if certificate is None:
        raise ValueError("verification requires a separation certificate")
    if not stream:
        raise ValueError("empty stream")
    n_domains = len({b.domain_id for b in stream})
    issues = []
    if not certificate.valid:
        issues.append(
            f"certificate invalid: max_intra={certificate.max_intra:.4g}, "
            f"theta={certificate.theta:.4g}, min_inter={certificate.min_inter:.4g}"
        )
    if hyperparams.gamma_d >= certificate.theta:
        issues.append(
            f"gamma_d={hyperparams.gamma_d:.4g} must be below theta={certificate.theta:.4g}"
        )
    if hyperparams.n_d <= n_domains:
        issues.append(f"n_d={hyperparams.n_d} must exceed the domain count {n_domains}")
    if issues:
        return LemmaReport("hypothesis_violation", issues, [], len(stream), n_domains)

    ledger = ClusterLedger()
    result = run_ctta(
        model, stream, hyperparams, source_stats, seed=seed, rng=rng, ledger=ledger
    )
    status = "pass" if not ledger.violations else "lemma_violation"
    return LemmaReport(status, [], ledger.violations, len(stream), n_domains, result.metrics)


@dataclass
class GradCheckResult:
    rel_errors: list[float]
    step: float
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(
    num_configs: int = 50,
    *,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    kink_tol: float = 1e-6,
) -> GradCheckResult:
    """Compare analytic gradients with central differences on random setups.

    Configurations landing within ``kink_tol`` of an alignment-norm kink are
    resampled, since the subgradient convention is not comparable there.
    """
    rel_errors = []
    base = SeededRng(seed)
    for k in range(num_configs):
        for attempt in range(20):
            r = base.child(k, attempt)
            b = int(r.integers(4, 17))
            input_dim = int(r.integers(3, 9))
            feature_dim = int(r.integers(3, 9))
            num_classes = int(r.integers(2, 9))
            model = ToyModel(
                r.normal(size=(feature_dim, input_dim)) / np.sqrt(input_dim),
                r.normal(size=(num_classes, feature_dim)),
                r.normal(size=num_classes),
            )
            x = r.normal(size=(b, input_dim))
            p_d = r.normal(size=input_dim, scale=0.5)
            p_c = r.normal(size=(b, input_dim), scale=0.5)
            source = SourceStats(
                r.normal(size=feature_dim),
                np.abs(r.normal(size=feature_dim)) + 0.1,
            )
            a = float(r.uniform(0.0, 4.0))
            alpha_std = float(r.uniform(0.3, 2.0))
            z = (x + p_d + p_c) @ model.extractor.T
            mu = z.mean(axis=0)
            sg = np.sqrt(((z - mu) ** 2).mean(axis=0))
            if (
                np.linalg.norm(mu - source.mu) <= kink_tol
                or np.linalg.norm(sg - source.sigma) <= kink_tol
            ):
                continue
            ga_d, ga_c = grad(model, x, p_d, p_c, source, a, alpha_std)
            gf_d, gf_c = finite_diff_grad(
                model, x, p_d, p_c, source, a, alpha_std, step=step
            )
            scale = max(np.abs(gf_d).max(), np.abs(gf_c).max(), 1e-12)
            err = max(np.abs(ga_d - gf_d).max(), np.abs(ga_c - gf_c).max())
            rel_errors.append(float(err / scale))
            break
        else:
            raise RuntimeError("could not sample a kink-free configuration")
    return GradCheckResult(rel_errors, step, tolerance)


@dataclass
class World:
    """A frozen source model, its class means, and the source statistics."""

    model: ToyModel
    class_means: Matrix
    source_stats: SourceStats
    source_spec: DomainSpec
    noise_std: float


def build_world(
    config: StreamConfig,
    *,
    feature_dim: int | None = None,
    noise_std: float = 0.4,
    class_mean_scale: float = 1.0,
    source_samples: int = 300,
    alpha_std: float = 1.0,
) -> World:
    """Deterministically construct the source model and statistics from the config seed."""
    rng = SeededRng(config.seed)
    means = make_class_means(
        config.num_classes, config.input_dim, rng.child(10), scale=class_mean_scale
    )
    model = fit_source_model(
        config.input_dim,
        feature_dim if feature_dim is not None else config.input_dim,
        means,
        noise_std,
        rng.child(11),
    )
    src_x, _ = draw_labeled_samples(means, source_samples, noise_std, rng.child(12))
    source_stats = compute_source_stats(model, src_x, alpha_std=alpha_std)
    source_spec = DomainSpec(
        0, np.zeros(config.input_dim), np.ones(config.input_dim), means, noise_std
    )
    return World(model, means, source_stats, source_spec, noise_std)
