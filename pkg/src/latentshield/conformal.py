"""Class-conditioned conformal calibration of the similarity threshold.

Calibration looks only at positive-labeled pairs (ground-truth distance below
epsilon) and takes the ceil((1-alpha)(N+1))-th smallest nonconformity score
-sim(proj z, proj z'), which guarantees recall of failures at level 1-alpha
under exchangeability. When that index exceeds N the guarantee is not
attainable from the sample and the threshold degenerates to +inf: every state
is flagged, and callers are warned rather than silently handed a clamped
quantile that voids the guarantee.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from . import latent, nets

log = logging.getLogger(__name__)


@dataclass
class CalibrationPair:
    z: np.ndarray
    z_prime: np.ndarray
    y: int
    pos: np.ndarray        # privileged positions, auditing only
    pos_prime: np.ndarray


@dataclass
class CalibrationSet:
    """Column layout of calibration pairs; epsilon fixes the positive rule."""
    Z1: np.ndarray
    Z2: np.ndarray
    y: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    epsilon: float

    def __len__(self) -> int:
        return len(self.y)

    def pair(self, i: int) -> CalibrationPair:
        return CalibrationPair(self.Z1[i], self.Z2[i], int(self.y[i]),
                               self.P1[i], self.P2[i])

    def n_positive(self) -> int:
        return int(self.y.sum())


@dataclass
class Threshold:
    delta: float
    alpha: float
    epsilon: float
    n_positive: int
    runtime_margin: float = 0.1
    projector_checksum: str = ""

    @property
    def is_sentinel(self) -> bool:
        return math.isinf(self.delta)

    @property
    def effective(self) -> float:
        return self.delta + self.runtime_margin


def build_calibration_set(dataset: list, encoder: latent.Encoder, n_pairs: int,
                          epsilon: float, seed: int,
                          min_positives: int = 50) -> CalibrationSet:
    """Uniform state pairs from a held-out dataset, labeled by distance < epsilon.

    The dataset must be disjoint from whatever the projector trained on; that
    is the caller's responsibility (the pipeline keeps separate seeds).
    """
    from .dubins import dataset_states

    states = dataset_states(dataset)
    rng = np.random.default_rng(seed)
    i1 = rng.integers(0, len(states), size=n_pairs)
    i2 = rng.integers(0, len(states), size=n_pairs)
    P1 = states[i1, :2]
    P2 = states[i2, :2]
    d2 = ((P1 - P2) ** 2).sum(axis=1)
    y = (d2 < epsilon * epsilon).astype(np.int8)
    n_pos = int(y.sum())
    if n_pos < min_positives:
        raise ValueError(
            f"only {n_pos} positive pairs at epsilon={epsilon}; "
            f"increase n_pairs (got {n_pairs})")
    Z1 = encoder.encode_batch(states[i1])
    Z2 = encoder.encode_batch(states[i2])
    return CalibrationSet(Z1=Z1, Z2=Z2, y=y, P1=P1, P2=P2, epsilon=epsilon)


def quantile_index(n: int, alpha: float) -> int:
    """k = ceil((1-alpha)(N+1)); k > N means the level is unattainable."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    return math.ceil((1.0 - alpha) * (n + 1))


def conformal_quantile(scores: np.ndarray, alpha: float) -> float:
    """k-th smallest score, or +inf when k exceeds the sample size."""
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    if n == 0:
        raise ValueError("no positive pairs to calibrate on")
    k = quantile_index(n, alpha)
    if k > n:
        log.warning("conformal index k=%d exceeds N=%d (alpha=%g too small for "
                    "this sample); threshold degenerates to +inf", k, n, alpha)
        return math.inf
    return float(np.sort(scores)[k - 1])


def positive_scores(calib: CalibrationSet, projector,
                    use_projector: bool = True) -> np.ndarray:
    mask = calib.y == 1
    return latent.margin_rows(projector, calib.Z1[mask], calib.Z2[mask],
                              use_projector=use_projector)


def calibrate(calib: CalibrationSet, projector, alpha: float,
              use_projector: bool = True, runtime_margin: float = 0.1) -> Threshold:
    scores = positive_scores(calib, projector, use_projector=use_projector)
    delta = conformal_quantile(scores, alpha)
    checksum = nets.net_checksum(projector) if (use_projector and projector is not None) else "raw"
    return Threshold(delta=delta, alpha=alpha, epsilon=calib.epsilon,
                     n_positive=len(scores), runtime_margin=runtime_margin,
                     projector_checksum=checksum)


@dataclass
class RecallAudit:
    recall: float
    n_positive: int
    alpha: float
    fresh: bool
    ci_low: float | None = None
    ci_high: float | None = None


def audit_recall(calib: CalibrationSet, projector, t: Threshold,
                 fresh: bool = False, use_projector: bool = True) -> RecallAudit:
    """Empirical recall P(score <= delta | y = 1).

    On the calibrating set itself this is >= 1 - alpha by construction. On
    fresh pairs it is an estimate and carries a 95% Clopper-Pearson interval.
    """
    scores = positive_scores(calib, projector, use_projector=use_projector)
    n = len(scores)
    hits = int(np.sum(scores <= t.delta))
    recall = hits / n
    if not fresh:
        return RecallAudit(recall=recall, n_positive=n, alpha=t.alpha, fresh=False)
    ci = binomtest(hits, n).proportion_ci(confidence_level=0.95, method="exact")
    return RecallAudit(recall=recall, n_positive=n, alpha=t.alpha, fresh=True,
                       ci_low=float(ci.low), ci_high=float(ci.high))


# ---------------------------------------------------------------------------
# Threshold file: plain "key = value" lines.
# ---------------------------------------------------------------------------

def save_threshold(t: Threshold, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"delta = {repr(t.delta)}\n")
        fh.write(f"alpha = {repr(t.alpha)}\n")
        fh.write(f"epsilon = {repr(t.epsilon)}\n")
        fh.write(f"n_positive = {t.n_positive}\n")
        fh.write(f"runtime_margin = {repr(t.runtime_margin)}\n")
        fh.write(f"projector_checksum = {t.projector_checksum}\n")


def load_threshold(path) -> Threshold:
    kv = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
    return Threshold(delta=float(kv["delta"]), alpha=float(kv["alpha"]),
                     epsilon=float(kv["epsilon"]), n_positive=int(kv["n_positive"]),
                     runtime_margin=float(kv["runtime_margin"]),
                     projector_checksum=kv.get("projector_checksum", ""))


# ---------------------------------------------------------------------------
# Score cache: per-epsilon sorted positive scores so a service can re-quantile
# at a new alpha (or swap epsilon) without touching the projector again.
# ---------------------------------------------------------------------------

@dataclass
class ScoreCache:
    scores_by_epsilon: dict = field(default_factory=dict)  # float -> sorted np.ndarray
    projector_checksum: str = ""
    runtime_margin: float = 0.1

    def epsilons(self) -> list:
        return sorted(self.scores_by_epsilon)

    def threshold(self, epsilon: float, alpha: float) -> Threshold:
        key = self._match(epsilon)
        scores = self.scores_by_epsilon[key]
        delta = conformal_quantile(scores, alpha)
        return Threshold(delta=delta, alpha=alpha, epsilon=key,
                         n_positive=len(scores), runtime_margin=self.runtime_margin,
                         projector_checksum=self.projector_checksum)

    def _match(self, epsilon: float) -> float:
        for key in self.scores_by_epsilon:
            if abs(key - epsilon) < 1e-9:
                return key
        raise KeyError(f"no calibration scores cached for epsilon={epsilon}; "
                       f"available: {self.epsilons()}")


def build_score_cache(calib_sets: list, projector, runtime_margin: float = 0.1,
                      use_projector: bool = True) -> ScoreCache:
    cache = ScoreCache(projector_checksum=nets.net_checksum(projector)
                       if (use_projector and projector is not None) else "raw",
                       runtime_margin=runtime_margin)
    for calib in calib_sets:
        scores = np.sort(positive_scores(calib, projector, use_projector=use_projector))
        cache.scores_by_epsilon[calib.epsilon] = scores
    return cache


def save_score_cache(cache: ScoreCache, path) -> None:
    payload = {
        "projector_checksum": cache.projector_checksum,
        "runtime_margin": cache.runtime_margin,
        "epsilons": {repr(eps): scores.tolist()
                     for eps, scores in cache.scores_by_epsilon.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_score_cache(path) -> ScoreCache:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    cache = ScoreCache(projector_checksum=payload["projector_checksum"],
                       runtime_margin=float(payload["runtime_margin"]))
    for eps_str, scores in payload["epsilons"].items():
        cache.scores_by_epsilon[float(eps_str)] = np.asarray(scores, dtype=float)
    return cache
