"""Combine client update deltas into one global delta.

All aggregators canonicalize update order (sort by client id) before any
floating-point work, so the result is invariant to arrival order.  The
coordinator applies the result as ``global += aggregate(deltas)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

STRATEGY_KINDS = ("fedavg", "coord-median", "geo-median", "fedavg-trust")

# Weiszfeld iterates this close to an input point snap to it (the update
# rule divides by the distance, which is singular at the point itself).
_WEISZFELD_SNAP = 1e-12


@dataclass(frozen=True)
class ClientUpdate:
    """One client's contribution to a round: a weighted parameter delta."""

    client_id: str
    round: int
    weight: float
    delta: np.ndarray

    def __post_init__(self):
        if self.weight <= 0:
            raise ConfigError(f"update weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class AggregationStrategy:
    kind: str = "fedavg"
    normalize_to: float | None = None
    geo_tol: float = 1e-8
    geo_max_iter: int = 200

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown aggregation kind {self.kind!r}")
        if self.normalize_to is not None and self.normalize_to <= 0:
            raise ConfigError("normalize_to must be positive")
        if self.geo_tol <= 0 or self.geo_max_iter < 1:
            raise ConfigError("geo_tol must be > 0 and geo_max_iter >= 1")


def _sorted_updates(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("cannot aggregate zero updates")
    updates = sorted(updates, key=lambda u: u.client_id)
    dims = updates[0].delta.shape
    rnd = updates[0].round
    for u in updates:
        if u.delta.shape != dims:
            raise ConfigError("updates disagree on parameter dims")
        if u.round != rnd:
            raise ConfigError("updates disagree on round")
    return updates


def fedavg(updates: list[ClientUpdate]) -> np.ndarray:
    """Weight-averaged delta, summed in client-id order."""
    updates = _sorted_updates(updates)
    total = np.zeros_like(updates[0].delta)
    weight_sum = 0.0
    for u in updates:
        total += u.weight * u.delta
        weight_sum += u.weight
    return total / weight_sum


def coordinate_median(updates: list[ClientUpdate]) -> np.ndarray:
    """Per-coordinate median; even counts use the mean of the middle pair."""
    updates = _sorted_updates(updates)
    stacked = np.stack([u.delta for u in updates])
    return np.median(stacked, axis=0)


def geometric_median(
    updates: list[ClientUpdate],
    tol: float = 1e-8,
    max_iter: int = 200,
) -> np.ndarray:
    """Weiszfeld iteration for the point minimizing the sum of L2 distances.

    Starts from the coordinate-wise median; stops when the step length drops
    below *tol* or after *max_iter* iterations.  The update is singular at
    the input points themselves, so an iterate landing within the snap
    radius of one gets the Vardi-Zhang treatment: the point is returned if
    it passes the optimality test (residual pull <= multiplicity), otherwise
    the iteration steps off it in the residual direction.
    """
    updates = _sorted_updates(updates)
    points = np.stack([u.delta for u in updates])
    if not np.all(np.isfinite(points)):
        raise ValueError("geometric median requires finite inputs")
    x = np.median(points, axis=0)
    for _ in range(max_iter):
        dist = np.linalg.norm(points - x, axis=1)
        coincident = dist < _WEISZFELD_SNAP
        if coincident.any():
            rest = points[~coincident]
            if rest.size == 0:
                return x
            d = np.linalg.norm(rest - x, axis=1)
            inv = 1.0 / d
            pull = ((rest - x) * inv[:, None]).sum(axis=0)
            r = float(np.linalg.norm(pull))
            eta = float(coincident.sum())
            if r <= eta:
                return x
            weiszfeld = (rest * inv[:, None]).sum(axis=0) / inv.sum()
            beta = eta / r
            new_x = (1.0 - beta) * weiszfeld + beta * x
        else:
            inv = 1.0 / dist
            new_x = (points * inv[:, None]).sum(axis=0) / inv.sum()
        step = float(np.linalg.norm(new_x - x))
        x = new_x
        if step < tol:
            break
    return x


def distance_sum(x: np.ndarray, updates: list[ClientUpdate]) -> float:
    """The geometric-median objective at *x*."""
    return float(sum(np.linalg.norm(u.delta - x) for u in updates))


@dataclass(frozen=True)
class TrustWeights:
    """Per-client trust scores plus whether the uniform fallback engaged."""

    weights: dict[str, float]
    uniform_fallback: bool


def trust_weights(
    updates: list[ClientUpdate], server_reference: np.ndarray
) -> TrustWeights:
    """ReLU-clipped cosine similarity of each delta against a reference.

    A zero-norm delta scores 0.  When every score is 0 the weights fall back
    to uniform so the aggregate stays defined, and the result says so.
    """
    ref_norm = float(np.linalg.norm(server_reference))
    if ref_norm == 0.0:
        raise ConfigError("trust reference must be non-zero")
    updates = _sorted_updates(updates)
    scores: dict[str, float] = {}
    for u in updates:
        norm = float(np.linalg.norm(u.delta))
        if norm == 0.0:
            scores[u.client_id] = 0.0
        else:
            cos = float(u.delta @ server_reference) / (norm * ref_norm)
            scores[u.client_id] = max(0.0, cos)
    if all(v == 0.0 for v in scores.values()):
        return TrustWeights({cid: 1.0 for cid in scores}, uniform_fallback=True)
    return TrustWeights(scores, uniform_fallback=False)


def clip_to_norm(delta: np.ndarray, target_norm: float) -> np.ndarray:
    """Rescale to exactly target_norm when larger; otherwise unchanged."""
    if target_norm <= 0:
        raise ConfigError("target norm must be positive")
    norm = float(np.linalg.norm(delta))
    if norm > target_norm:
        return delta * (target_norm / norm)
    return delta


def normalize_updates(
    updates: list[ClientUpdate], target_norm: float
) -> list[ClientUpdate]:
    """Clip every delta's L2 norm to at most target_norm."""
    return [
        ClientUpdate(u.client_id, u.round, u.weight, clip_to_norm(u.delta, target_norm))
        for u in updates
    ]


def aggregate(
    updates: list[ClientUpdate],
    strategy: AggregationStrategy,
    trust_reference: np.ndarray | None = None,
) -> np.ndarray:
    """Dispatch on strategy kind; normalization (when configured) runs first.

    fedavg-trust weights deltas by ReLU-clipped cosine against
    *trust_reference*; without a reference yet (first round) it degrades to
    plain fedavg.
    """
    if strategy.normalize_to is not None:
        updates = normalize_updates(updates, strategy.normalize_to)
    if strategy.kind == "fedavg":
        return fedavg(updates)
    if strategy.kind == "coord-median":
        return coordinate_median(updates)
    if strategy.kind == "geo-median":
        return geometric_median(updates, strategy.geo_tol, strategy.geo_max_iter)
    if strategy.kind == "fedavg-trust":
        if trust_reference is None or not np.any(trust_reference):
            return fedavg(updates)
        trust = trust_weights(updates, trust_reference)
        reweighted = [
            ClientUpdate(u.client_id, u.round, max(trust.weights[u.client_id], 1e-12), u.delta)
            for u in _sorted_updates(updates)
        ]
        return fedavg(reweighted)
    raise ConfigError(f"unknown aggregation kind {strategy.kind!r}")
