"""Training and validation: epoch loop, conjugate posterior updates,
precision-recall threshold selection, and best-model retention.

The trainable state is the network plus one mean per known class and a
mode-shaped log-variance vector. Validation never writes back into the
trainable state: it materializes a separate registry of posterior-updated
classes with thresholds, which is what gets checkpointed and later drives
the open-set stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    ClassDistribution,
    CovarianceMode,
    DistributionRegistry,
    NIWParams,
    cov_param_size,
    expand_variances,
    log_density_many,
    loss,
    loss_gradients,
    map_estimate,
    niw_update,
    pool_log_var_grads,
    scale_prior_from_learned,
)
from .errors import ConfigError, ContractError, NumericError
from .net import AdamState, NetworkParams, NetworkSpec, adam_step, backward, forward, init_params


@dataclass
class TrainConfig:
    """Hyperparameters for one fit."""

    spec: NetworkSpec
    mode: CovarianceMode = CovarianceMode.SHARED_ISOMETRIC
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_weights: dict[int, float] | None = None
    seed: int = 0

    def __post_init__(self):
        self.mode = CovarianceMode.parse(self.mode)
        if self.epochs <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")


def default_lambda_weights(known_ids, unknown_ids) -> dict[int, float]:
    """Equal weight per class with knowns and unknowns each summing to 1."""
    known_ids, unknown_ids = list(known_ids), list(unknown_ids)
    if not known_ids:
        raise ConfigError("no known classes to weight")
    if not unknown_ids:
        raise ConfigError(
            "model selection needs at least one validation-unknown class to weight"
        )
    weights = {k: 1.0 / len(known_ids) for k in known_ids}
    weights.update({k: 1.0 / len(unknown_ids) for k in unknown_ids})
    return weights


@dataclass
class TrainableState:
    """Network parameters plus the trainable distribution parameters."""

    spec: NetworkSpec
    params: NetworkParams
    mode: CovarianceMode
    class_ids: list[int]
    means: np.ndarray    # (n_known, latent_dim)
    log_var: np.ndarray  # mode-shaped

    @classmethod
    def initialize(cls, spec: NetworkSpec, class_ids, mode: CovarianceMode, seed: int) -> "TrainableState":
        """Seeded init: Glorot network, unit-norm random means, log-variances 0."""
        class_ids = list(class_ids)
        mode = CovarianceMode.parse(mode)
        params = init_params(spec)
        rng = np.random.default_rng(seed)
        means = rng.uniform(-1.0, 1.0, size=(len(class_ids), spec.latent_dim))
        norms = np.linalg.norm(means, axis=1, keepdims=True)
        means = means / np.where(norms == 0, 1.0, norms)
        log_var = np.zeros(cov_param_size(mode, len(class_ids), spec.latent_dim))
        return cls(spec, params, mode, class_ids, means, log_var)

    def registry(self) -> DistributionRegistry:
        """Materialize the current trained classes as a registry (no thresholds)."""
        variances = expand_variances(
            self.mode, self.log_var, len(self.class_ids), self.spec.latent_dim
        )
        classes = [
            ClassDistribution(cid, self.means[i].copy(), variances[i], origin="trained")
            for i, cid in enumerate(self.class_ids)
        ]
        return DistributionRegistry(
            self.mode, self.spec.latent_dim, classes, max(self.class_ids) + 1, []
        )

    def blocks(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.params.weights, self.params.biases)):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b
        out["class_means"] = self.means
        out["log_variance"] = self.log_var
        return out

    def load_blocks(self, blocks: dict[str, np.ndarray]) -> None:
        for i in range(self.spec.n_layers):
            self.params.weights[i] = blocks[f"layer{i}.weight"]
            self.params.biases[i] = blocks[f"layer{i}.bias"]
        self.means = blocks["class_means"]
        self.log_var = blocks["log_variance"]

    def copy(self) -> "TrainableState":
        return TrainableState(
            self.spec, self.params.copy(), self.mode, list(self.class_ids),
            self.means.copy(), self.log_var.copy(),
        )


def batch_loss_and_grads(
    state: TrainableState,
    inputs: np.ndarray,
    labels: np.ndarray,
    class_sizes: dict[int, int],
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward a mixed-class batch, return the loss and all gradient blocks.

    Each sample's term carries weight 1/n_k with n_k the full class size, so
    batch losses sum to the full objective across an epoch.
    """
    registry = state.registry()
    embeddings, tape = forward(state.spec, state.params, inputs)
    batches = {}
    positions = {}
    for cid in state.class_ids:
        mask = labels == cid
        if mask.any():
            batches[cid] = embeddings[mask]
            positions[cid] = mask
    value = loss(registry, batches, class_sizes)
    grads = loss_gradients(registry, batches, class_sizes)

    upstream = np.zeros_like(embeddings)
    for cid, mask in positions.items():
        upstream[mask] = grads.embeddings[cid]
    bundle = backward(tape, state.params, upstream)

    gblocks = {}
    for i, (gw, gb) in enumerate(zip(bundle.weights, bundle.biases)):
        gblocks[f"layer{i}.weight"] = gw
        gblocks[f"layer{i}.bias"] = gb
    gblocks["class_means"] = grads.means
    gblocks["log_variance"] = pool_log_var_grads(state.mode, grads.log_var_per_class)
    return value, gblocks


def train_epoch(
    state: TrainableState,
    train_by_class: dict[int, np.ndarray],
    adam: AdamState,
    config: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One shuffled mini-batch pass; returns the accumulated epoch loss.

    The returned value is the sum of the per-batch partial objectives, i.e.
    the full per-class-mean loss assembled once over the epoch's partition.
    """
    for cid in state.class_ids:
        if cid not in train_by_class or len(train_by_class[cid]) == 0:
            raise ContractError(f"training class {cid} has no samples")

    all_x = np.concatenate([np.asarray(train_by_class[cid], dtype=np.float64)
                            for cid in state.class_ids])
    all_labels = np.concatenate([
        np.full(len(train_by_class[cid]), cid, dtype=np.int64) for cid in state.class_ids
    ])
    class_sizes = {cid: len(train_by_class[cid]) for cid in state.class_ids}

    perm = rng.permutation(len(all_x))
    epoch_loss = 0.0
    for start in range(0, len(perm), config.batch_size):
        rows = perm[start:start + config.batch_size]
        try:
            value, gblocks = batch_loss_and_grads(
                state, all_x[rows], all_labels[rows], class_sizes
            )
        except NumericError as err:
            raise NumericError(
                f"non-finite loss at batch starting {start} (adam step {adam.t}): {err}"
            ) from err
        state.load_blocks(adam_step(state.blocks(), gblocks, adam))
        epoch_loss += value
    return epoch_loss


@dataclass(frozen=True)
class PRCurvePoint:
    """One candidate threshold with its precision/recall/F1."""

    threshold: float
    precision: float
    recall: float
    f1: float


def pr_curve(scores) -> list[PRCurvePoint]:
    """Precision-recall curve over the distinct observed scores.

    ``scores`` is a sequence of (score, is_positive). A sample is accepted
    iff its score is >= the threshold, so the distinct scores are the
    complete candidate set. Points come back in descending threshold order.
    """
    pairs = [(float(s), bool(p)) for s, p in scores]
    n_pos = sum(1 for _, p in pairs if p)
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError(
            f"PR curve needs both labels, got {n_pos} positives / {n_neg} negatives"
        )
    pairs.sort(key=lambda sp: -sp[0])
    points = []
    tp = fp = 0
    i = 0
    while i < len(pairs):
        threshold = pairs[i][0]
        while i < len(pairs) and pairs[i][0] == threshold:
            if pairs[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        precision = tp / (tp + fp)
        recall = tp / n_pos
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        points.append(PRCurvePoint(threshold, precision, recall, f1))
    return points


def select_threshold(curve: list[PRCurvePoint]) -> tuple[float, float]:
    """(best F1, its threshold); ties break toward the larger threshold."""
    if not curve:
        raise ContractError("empty PR curve")
    best = curve[0]
    for point in curve[1:]:
        if point.f1 > best.f1 or (point.f1 == best.f1 and point.threshold > best.threshold):
            best = point
    return best.f1, best.threshold


def discriminability(f1_by_class: dict[int, float], lambda_weights: dict[int, float]) -> float:
    """Weighted sum of per-class F1 scores."""
    missing = [k for k in f1_by_class if k not in lambda_weights]
    if missing:
        raise ConfigError(f"no lambda weight for classes {missing}")
    return float(sum(lambda_weights[k] * f for k, f in f1_by_class.items()))


def posterior_validate(
    trained: DistributionRegistry,
    val_embeddings: dict[int, np.ndarray],
    train_sizes: dict[int, int],
    unknown_ids,
) -> DistributionRegistry:
    """Conjugate-update every class on validation embeddings.

    Trained classes get a prior scaled from their learned parameters;
    classes first seen at validation start from the all-zero prior. Under
    the isometric modes each class's posterior variance is averaged back to
    a single scalar so the class keeps its shape.
    """
    unknown_ids = list(unknown_ids)
    isometric = trained.mode in (CovarianceMode.SHARED_ISOMETRIC, CovarianceMode.ISOMETRIC)
    classes = []
    for dist in trained.classes:
        if dist.class_id not in val_embeddings:
            raise ConfigError(f"validation set has no samples of known class {dist.class_id}")
        prior = scale_prior_from_learned(dist, train_sizes[dist.class_id])
        post = niw_update(prior, val_embeddings[dist.class_id])
        mean, var = map_estimate(post)
        if isometric:
            var = np.full_like(var, var.mean())
        classes.append(ClassDistribution(
            dist.class_id, mean, var, post.kappa, post.nu, None, "trained"
        ))
    for cid in unknown_ids:
        if cid not in val_embeddings:
            raise ConfigError(f"validation set has no samples of unknown class {cid}")
        post = niw_update(NIWParams.zero(trained.latent_dim), val_embeddings[cid])
        mean, var = map_estimate(post)
        if isometric:
            var = np.full_like(var, var.mean())
        classes.append(ClassDistribution(cid, mean, var, post.kappa, post.nu, None, "validated"))
    next_id = max(c.class_id for c in classes) + 1
    return DistributionRegistry(trained.mode, trained.latent_dim, classes, next_id, unknown_ids)


@dataclass
class ValidationReport:
    """Per-class best F1 and threshold plus the weighted model-selection score."""

    epoch: int
    f1_by_class: dict[int, float]
    threshold_by_class: dict[int, float]
    dscore: float


def validate_model(
    state: TrainableState,
    val_by_class: dict[int, np.ndarray],
    train_sizes: dict[int, int],
    unknown_ids,
    lambda_weights: dict[int, float],
    epoch: int,
) -> tuple[DistributionRegistry, ValidationReport]:
    """Posterior-update, then pick per-class F1-optimal thresholds.

    Every validation sample is scored against every class; for class k the
    positives are the samples whose true label is k.
    """
    order = sorted(val_by_class)
    stacked = np.concatenate([np.asarray(val_by_class[c], dtype=np.float64) for c in order])
    labels = np.concatenate([np.full(len(val_by_class[c]), c, dtype=np.int64) for c in order])
    embeddings, _ = forward(state.spec, state.params, stacked)
    emb_by_class = {c: embeddings[labels == c] for c in order}

    registry = posterior_validate(state.registry(), emb_by_class, train_sizes, unknown_ids)

    f1_by_class, threshold_by_class = {}, {}
    for dist in registry.classes:
        scores = log_density_many(dist.mean, dist.variance_diag, embeddings)
        curve = pr_curve(zip(scores, labels == dist.class_id))
        f1, threshold = select_threshold(curve)
        dist.log_threshold = threshold
        f1_by_class[dist.class_id] = f1
        threshold_by_class[dist.class_id] = threshold

    dscore = discriminability(f1_by_class, lambda_weights)
    return registry, ValidationReport(epoch, f1_by_class, threshold_by_class, dscore)


@dataclass
class ModelCheckpoint:
    """Everything needed to run the open-set stream, plus replay material.

    ``registry`` holds the validated classes with thresholds; ``state`` is
    the trainable snapshot from the same epoch so the validation pass can be
    replayed bit-for-bit.
    """

    state: TrainableState
    registry: DistributionRegistry
    report: ValidationReport
    train_sizes: dict[int, int]
    lambda_weights: dict[int, float]

    @property
    def spec(self) -> NetworkSpec:
        return self.state.spec

    @property
    def params(self) -> NetworkParams:
        return self.state.params

    @property
    def mode(self) -> CovarianceMode:
        return self.registry.mode


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dscore: float
    f1_by_class: dict[int, float]


@dataclass
class FitResult:
    checkpoint: ModelCheckpoint
    history: list[EpochRecord] = field(default_factory=list)


def fit(
    train_by_class: dict[int, np.ndarray],
    val_by_class: dict[int, np.ndarray],
    config: TrainConfig,
) -> FitResult:
    """Full training loop with per-epoch validation and best-Dscore retention.

    Ties in Dscore keep the earlier epoch. The returned history carries one
    record per epoch for logging and the openness sweeps.
    """
    known_ids = sorted(train_by_class)
    if not known_ids:
        raise ConfigError("empty training set")
    unknown_ids = sorted(set(val_by_class) - set(known_ids))
    missing = [k for k in known_ids if k not in val_by_class]
    if missing:
        raise ConfigError(f"validation set is missing known classes {missing}")
    lambda_weights = config.lambda_weights or default_lambda_weights(known_ids, unknown_ids)

    train_sizes = {cid: len(train_by_class[cid]) for cid in known_ids}
    state = TrainableState.initialize(config.spec, known_ids, config.mode, config.seed)
    adam = AdamState.for_blocks(
        state.blocks(), lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

    best: ModelCheckpoint | None = None
    history: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        try:
            epoch_loss = train_epoch(state, train_by_class, adam, config, shuffle_rng)
        except NumericError as err:
            raise NumericError(f"epoch {epoch}: {err}") from err
        registry, report = validate_model(
            state, val_by_class, train_sizes, unknown_ids, lambda_weights, epoch
        )
        history.append(EpochRecord(epoch, epoch_loss, report.dscore, dict(report.f1_by_class)))
        if best is None or report.dscore > best.report.dscore:
            best = ModelCheckpoint(
                state.copy(), registry.copy(), report, dict(train_sizes), dict(lambda_weights)
            )
    assert best is not None
    return FitResult(best, history)
