"""Validity, sparsity and plausibility metrics with percentile-bootstrap intervals."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from textcf.errors import InvalidInputError
from textcf.search import CounterfactualResult

logger = logging.getLogger(__name__)

STATISTICS: dict[str, Callable[[np.ndarray], float]] = {
    "mean": np.mean,
    "proportion": np.mean,
    "median": np.median,
}


def levenshtein_distance(a: str, b: str) -> int:
    """Character-level edit distance (unit-cost insert, delete, substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_similarity(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        logger.debug("similarity of two empty strings taken as 1.0")
        return 1.0
    return 1.0 - levenshtein_distance(a, b) / longest


def label_flip_score(results: Sequence[CounterfactualResult]) -> float:
    if not results:
        raise InvalidInputError("label_flip_score needs at least one result")
    return sum(_flip_indicator(r) for r in results) / len(results)


def _flip_indicator(r: CounterfactualResult) -> float:
    return float(r.counterfactual_text is not None and r.counterfactual_label is not None
                 and r.counterfactual_label != r.original_label)


def _population(results, valid_only: bool):
    return [r for r in results if r.counterfactual_text is not None and (r.flipped or not valid_only)]


def similarity_values(results, valid_only: bool = False) -> list[float]:
    return [normalized_similarity(r.original_text, r.counterfactual_text) for r in _population(results, valid_only)]


def mean_similarity(results: Sequence[CounterfactualResult], valid_only: bool = False) -> float | None:
    """Mean normalized similarity over results that produced text; None when none did."""
    if not results:
        raise InvalidInputError("mean_similarity needs at least one result")
    vals = similarity_values(results, valid_only)
    return float(np.mean(vals)) if vals else None


def perplexity_values(results, scorer=None, valid_only: bool = False) -> list[float]:
    """Per-counterfactual perplexity, taken from the result record or computed with ``scorer``."""
    out = []
    for r in _population(results, valid_only):
        if r.perplexity is None:
            if scorer is None:
                raise InvalidInputError(f"result {r.example_id} has no stored perplexity and no scorer was given")
            r.perplexity = float(scorer(r.counterfactual_text))
        out.append(r.perplexity)
    return out


def median_perplexity(results: Sequence[CounterfactualResult], scorer=None, valid_only: bool = False) -> float | None:
    if not results:
        raise InvalidInputError("median_perplexity needs at least one result")
    vals = perplexity_values(results, scorer, valid_only)
    return float(np.median(vals)) if vals else None


def bootstrap_ci(values: Sequence[float], statistic: str = "mean", n_boot: int = 1000, alpha: float = 0.05,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for ``statistic`` of ``values``."""
    if len(values) == 0:
        raise InvalidInputError("bootstrap_ci needs at least one value")
    if statistic not in STATISTICS:
        raise InvalidInputError(f"unknown statistic {statistic!r}")
    x = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x), size=(n_boot, len(x)))
    samples = x[idx]
    stats = np.median(samples, axis=1) if statistic == "median" else samples.mean(axis=1)
    lo, hi = np.quantile(stats, [alpha / 2, 1 - alpha / 2])
    point = STATISTICS[statistic](x)
    # the percentile interval can exclude the point estimate for very skewed samples
    return float(min(lo, point)), float(max(hi, point))


@dataclass
class MetricsReport:
    method: str
    dataset: str
    n: int
    lfs: float | None
    lfs_ci: tuple[float, float] | None
    mean_similarity: float | None
    similarity_ci: tuple[float, float] | None
    median_perplexity: float | None
    perplexity_ci: tuple[float, float] | None
    scorer_model_id: str | None
    config_fingerprint: str
    population: str = "all"
    skipped: str | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("lfs_ci", "similarity_ci", "perplexity_ci"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        for k in ("lfs_ci", "similarity_ci", "perplexity_ci"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def build_report(results: Sequence[CounterfactualResult], method: str, dataset: str, config_fingerprint: str,
                 scorer_model_id: str | None = None, n_boot: int = 1000, seed: int = 0,
                 valid_only: bool = False) -> MetricsReport:
    """Point estimates and bootstrap CIs over per-example values (flip indicator, similarity, perplexity)."""
    if not results:
        raise InvalidInputError("cannot build a report from zero results")
    flips = [_flip_indicator(r) for r in results]
    sims = similarity_values(results, valid_only)
    ppls = perplexity_values(results, None, valid_only)
    return MetricsReport(
        method=method,
        dataset=dataset,
        n=len(results),
        lfs=label_flip_score(results),
        lfs_ci=bootstrap_ci(flips, "proportion", n_boot, seed=seed),
        mean_similarity=float(np.mean(sims)) if sims else None,
        similarity_ci=bootstrap_ci(sims, "mean", n_boot, seed=seed) if sims else None,
        median_perplexity=float(np.median(ppls)) if ppls else None,
        perplexity_ci=bootstrap_ci(ppls, "median", n_boot, seed=seed) if ppls else None,
        scorer_model_id=scorer_model_id,
        config_fingerprint=config_fingerprint,
        population="valid" if valid_only else "all",
    )
