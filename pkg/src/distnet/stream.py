"""Sequential open-set classification.

Each test sample is embedded, scored against every current class, and either
assigned to the best accepting class (which is then conjugate-updated on the
spot) or, if every class rejects it, used to found a new class whose
covariance and threshold are transferred from the validation-unknown pool.
State mutates between samples, so a session is strictly sequential;
independent sessions over different orderings are free to run in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    DistributionRegistry,
    log_density_many,
    rank1_update,
    transfer_parameters,
)
from .errors import ContractError
from .net import NetworkParams, NetworkSpec, forward
from .training import ModelCheckpoint


@dataclass(frozen=True)
class Prediction:
    sample_index: int
    label: int
    is_novel_creation: bool


@dataclass
class StreamEvent:
    """One decision with the evidence it was made on.

    ``log_likelihoods`` snapshots every class present at decision time, which
    lets the novelty decision be replayed after the fact (thresholds of
    existing classes never change during a stream). ``founding_warning`` is
    set on a creation event whose founding sample would itself be rejected by
    the transferred threshold; that signals a badly calibrated pool.
    """

    sample_index: int
    label: int
    is_novel_creation: bool
    log_likelihoods: dict[int, float]
    n_classes_evaluated: int
    founding_warning: bool = False


@dataclass
class OpenSetSession:
    """Mutable working copy of a checkpoint's registry plus the event log."""

    spec: NetworkSpec
    params: NetworkParams
    registry: DistributionRegistry
    events: list[StreamEvent] = field(default_factory=list)

    @classmethod
    def from_checkpoint(cls, checkpoint: ModelCheckpoint) -> "OpenSetSession":
        registry = checkpoint.registry.copy()
        for dist in registry.classes:
            if dist.log_threshold is None:
                raise ContractError(
                    f"checkpoint class {dist.class_id} has no threshold; run validation first"
                )
        if not registry.transfer_pool:
            raise ContractError("checkpoint has an empty transfer pool")
        return cls(checkpoint.spec, checkpoint.params, registry)


def detect_novel(log_likelihoods: dict[int, float], registry: DistributionRegistry) -> bool:
    """True iff every current class rejects: log l_k < log t_k for all k.

    Equality accepts, matching the validation-side acceptance rule.
    """
    for dist in registry.classes:
        if dist.log_threshold is None:
            raise ContractError(f"class {dist.class_id} has no threshold")
        if dist.class_id not in log_likelihoods:
            raise ContractError(f"no likelihood entry for class {dist.class_id}")
        if log_likelihoods[dist.class_id] >= dist.log_threshold:
            return False
    return True


def classify_one(session: OpenSetSession, x: np.ndarray) -> Prediction:
    """Classify a single sample, mutating the session registry.

    Novel creation is total: a sample rejected by every class always founds
    a new one, so any finite input yields a label.
    """
    registry = session.registry
    x = np.asarray(x, dtype=np.float64)
    z, _ = forward(session.spec, session.params, x[None, :])
    z = z[0]

    log_likelihoods = {}
    n_evaluated = 0
    for dist in registry.classes:
        log_likelihoods[dist.class_id] = float(
            log_density_many(dist.mean, dist.variance_diag, z[None, :])[0]
        )
        n_evaluated += 1

    index = len(session.events)
    if detect_novel(log_likelihoods, registry):
        novel = transfer_parameters(registry, z)
        # density is maximal at the founding sample; if even that falls
        # below the transferred threshold the class can never accept
        founding = -0.5 * float(np.log(2.0 * math.pi * novel.variance_diag).sum())
        warning = founding < novel.log_threshold
        event = StreamEvent(index, novel.class_id, True, log_likelihoods, n_evaluated, warning)
    else:
        accepting = [
            d for d in registry.classes
            if log_likelihoods[d.class_id] >= d.log_threshold
        ]
        winner = min(accepting, key=lambda d: (-log_likelihoods[d.class_id], d.class_id))
        updated = rank1_update(winner, z)
        slot = next(i for i, d in enumerate(registry.classes) if d is winner)
        registry.classes[slot] = updated
        event = StreamEvent(index, winner.class_id, False, log_likelihoods, n_evaluated)

    session.events.append(event)
    return Prediction(index, event.label, event.is_novel_creation)


@dataclass
class StreamResult:
    """Outcome of one ordered pass over a test stream."""

    predictions: list[Prediction]
    events: list[StreamEvent]
    registry: DistributionRegistry
    created_ids: list[int]

    @property
    def founding_warnings(self) -> int:
        return sum(1 for e in self.events if e.founding_warning)


def run_stream(checkpoint: ModelCheckpoint, samples: np.ndarray) -> StreamResult:
    """Fold :func:`classify_one` over the samples in order.

    Deterministic for a fixed order; no promise is made across permutations
    of the stream (the protocol is order-sensitive by design).
    """
    session = OpenSetSession.from_checkpoint(checkpoint)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    predictions = [classify_one(session, x) for x in samples] if samples.size else []
    created = [e.label for e in session.events if e.is_novel_creation]
    return StreamResult(predictions, session.events, session.registry, created)
