"""Two-round estimation over sharded datasets without moving raw samples.

Each shard reduces its data to a p-by-K moment block and a K-by-K local
covariance block (K = number of local moment functions); the coordinator sums
the weighted outer products and takes the top eigenvectors.  This equals the
centralized two-step estimator constrained to a block-diagonal weight.

Messages cross shard boundaries only through the versioned JSON wire format
below, so nothing sample-sized can leak by construction, and an in-process
transport counts the bytes exchanged.

Wire format (version 1)
-----------------------
Round 1: ``{"version": 1, "round": 1, "shard_id", "n_l", "p", "k",
"V_raw": [column-major unscaled local averages]}``.
Round 2: ``{"version": 1, "round": 2, "shard_id", "n_l", "p", "k",
"V_l": [column-major, scaled by n_l / n_total],
"Sigma_ll": [row-major upper triangle, same scaling]}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .estimator import SubspaceEstimate, WeightMatrix, eigh_descending, estimate_sigma, thresholded_pinv, weighted_eigen
from .models import Dataset
from .moments import MomentFunctionSet, materialize

__all__ = [
    "LocalSummary",
    "InProcessTransport",
    "local_summarize",
    "aggregate",
    "distributed_pipeline",
]

WIRE_VERSION = 1


@dataclass(frozen=True)
class LocalSummary:
    """One shard's contribution: scaled moment block and covariance block.

    Both blocks carry the shard weight n_l / n_total, so summing the weighted
    outer products across shards reproduces the centralized statistics.
    """

    shard_id: int
    moments: np.ndarray
    covariance: np.ndarray
    n_l: int
    weight: float

    def __post_init__(self):
        v = np.ascontiguousarray(self.moments, dtype=np.float64)
        s = np.ascontiguousarray(self.covariance, dtype=np.float64)
        if s.shape != (v.shape[1], v.shape[1]):
            raise ValueError("covariance block must be k-by-k for a p-by-k moment block")
        scale = max(1.0, float(np.max(np.abs(s))) if s.size else 1.0)
        if np.max(np.abs(s - s.T)) > 1e-12 * scale:
            raise ValueError("covariance block is not symmetric within tolerance")
        object.__setattr__(self, "moments", v)
        object.__setattr__(self, "covariance", s)

    @property
    def p(self) -> int:
        return self.moments.shape[0]

    @property
    def k(self) -> int:
        return self.moments.shape[1]

    def to_wire(self) -> dict:
        upper = [float(self.covariance[i, j]) for i in range(self.k) for j in range(i, self.k)]
        return {
            "version": WIRE_VERSION,
            "round": 2,
            "shard_id": int(self.shard_id),
            "n_l": int(self.n_l),
            "p": self.p,
            "k": self.k,
            "V_l": [float(v) for v in self.moments.flatten(order="F")],
            "Sigma_ll": upper,
            "weight": float(self.weight),
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "LocalSummary":
        if doc.get("version") != WIRE_VERSION:
            raise ValueError(f"unsupported wire version {doc.get('version')!r}")
        p, k = int(doc["p"]), int(doc["k"])
        moments = np.asarray(doc["V_l"], dtype=np.float64).reshape((p, k), order="F")
        cov = np.zeros((k, k))
        it = iter(doc["Sigma_ll"])
        for i in range(k):
            for j in range(i, k):
                cov[i, j] = next(it)
        cov = cov + np.triu(cov, 1).T
        return cls(int(doc["shard_id"]), moments, cov, int(doc["n_l"]), float(doc["weight"]))


class InProcessTransport:
    """Message channel that forces every payload through JSON and counts the
    bytes each shard sends per round."""

    def __init__(self):
        self.bytes_sent: dict[tuple[int, int], int] = {}

    def send(self, round_no: int, shard_id: int, payload: dict) -> dict:
        raw = json.dumps(payload, separators=(",", ":")).encode("utf-8")
        key = (round_no, int(shard_id))
        self.bytes_sent[key] = self.bytes_sent.get(key, 0) + len(raw)
        return json.loads(raw.decode("utf-8"))


def local_summarize(
    dataset_shard: Dataset,
    mset: MomentFunctionSet,
    pilot: np.ndarray,
    n_total: int,
    shard_id: int = 0,
) -> LocalSummary:
    """Reduce one shard to its moment and covariance blocks.

    The local averages are scaled by ``n_l / n_total`` so that concatenating
    the blocks of all shards reproduces the moment matrix and block-diagonal
    covariance the centralized estimator would compute.  Only p- and
    k-dimensional summaries leave the shard.
    """
    if n_total < dataset_shard.n:
        raise ValueError("n_total must cover the shard size")
    mm = materialize(dataset_shard, mset)
    scale = dataset_shard.n / n_total
    sigma = estimate_sigma(mm, pilot)
    return LocalSummary(
        shard_id=shard_id,
        moments=scale * mm.values,
        covariance=scale * sigma.matrix,
        n_l=dataset_shard.n,
        weight=scale,
    )


def aggregate(summaries: Sequence[LocalSummary], r: int, delta: float) -> SubspaceEstimate:
    """Combine shard summaries: top-r eigenvectors of
    sum_l V_l pinv_delta(Sigma_ll) V_l^T.

    Matches the centralized two-step solution under a block-diagonal weight;
    if thresholding annihilates every shard's block the identity weight is
    used instead (with a warning on the estimate), mirroring the centralized
    fallback.
    """
    summaries = list(summaries)
    if not summaries:
        raise ValueError("aggregate needs at least one shard summary")
    p = summaries[0].p
    ids = [s.shard_id for s in summaries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate shard ids: {sorted(ids)}")
    for s in summaries:
        if s.p != p:
            raise ValueError(f"shard {s.shard_id}: ambient dimension {s.p} != {p}")
    weights = [thresholded_pinv(s.covariance, delta) for s in summaries]
    warnings: tuple[str, ...] = ()
    if all(w.degenerate for w in weights):
        weights = [WeightMatrix.identity(s.k) for s in summaries]
        warnings = ("thresholding annihilated every shard weight; fell back to identity",)
    total = np.zeros((p, p))
    for s, w in zip(summaries, weights):
        total += s.moments @ w.matrix @ s.moments.T
    evals, evecs = eigh_descending(total)
    if not 1 <= r <= p:
        raise ValueError(f"invalid dimension: need 1 <= r <= p, got r={r}, p={p}")
    est = SubspaceEstimate(evecs[:, :r], evals, r, warnings)
    return est


def distributed_pipeline(
    shards: Sequence[Dataset],
    sets: Sequence[MomentFunctionSet] | MomentFunctionSet,
    r: int,
    delta: float,
    transport: InProcessTransport | None = None,
) -> SubspaceEstimate:
    """Full two-round protocol over in-process shards.

    Round 1 collects each shard's unscaled, unweighted moment block and forms
    the pilot from the concatenation under the identity weight; round 2
    collects the pilot-dependent summaries and aggregates them.  The subspace
    dimension ``r`` must be supplied; estimating it across shards is not part
    of the protocol.
    """
    shards = list(shards)
    if not shards:
        raise ValueError("at least one shard is required")
    if isinstance(sets, MomentFunctionSet):
        sets = [sets] * len(shards)
    sets = list(sets)
    if len(sets) != len(shards):
        raise ValueError(f"got {len(sets)} moment sets for {len(shards)} shards")
    transport = transport if transport is not None else InProcessTransport()

    round1 = []
    for sid, (shard, mset) in enumerate(zip(shards, sets)):
        try:
            mm = materialize(shard, mset)
        except Exception as exc:
            raise RuntimeError(f"shard {sid}: {exc}") from exc
        payload = {
            "version": WIRE_VERSION,
            "round": 1,
            "shard_id": sid,
            "n_l": shard.n,
            "p": mm.p,
            "k": mm.m,
            "V_raw": [float(x) for x in mm.values.flatten(order="F")],
        }
        round1.append(transport.send(1, sid, payload))

    n_total = sum(doc["n_l"] for doc in round1)
    blocks = [np.asarray(doc["V_raw"]).reshape((doc["p"], doc["k"]), order="F") for doc in round1]
    concat = np.concatenate(blocks, axis=1)
    pilot = weighted_eigen(concat, WeightMatrix.identity(concat.shape[1]), r).basis

    summaries = []
    for sid, (shard, mset) in enumerate(zip(shards, sets)):
        try:
            summary = local_summarize(shard, mset, pilot, n_total, shard_id=sid)
        except Exception as exc:
            raise RuntimeError(f"shard {sid}: {exc}") from exc
        doc = transport.send(2, sid, summary.to_wire())
        summaries.append(LocalSummary.from_wire(doc))
    return aggregate(summaries, r, delta)
