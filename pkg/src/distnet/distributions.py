"""Gaussian class models in the latent space.

Each class is a diagonal Gaussian. Covariances come in three sharing
regimes (one global scalar, one scalar per class, one global diagonal);
sharing only constrains the trainable parameterization, so the helpers
here expand mode-shaped log-variance parameters into per-class diagonals
and pool per-class gradients back.

All thresholding and likelihood comparison happens in the log domain:
densities in dimension 50 underflow long before they stop being
order-comparable.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

# Variances below this are clamped; a one-sample class has zero scatter and
# the density is undefined at zero variance.
VAR_FLOOR = 1e-6

LOG_2PI = math.log(2.0 * math.pi)


class CovarianceMode(str, enum.Enum):
    """Parameter-sharing regime for the class covariances."""

    SHARED_ISOMETRIC = "shared_isometric"  # one scalar for every class and dimension
    ISOMETRIC = "isometric"                # one scalar per class
    SHARED_DIAGONAL = "shared_diagonal"    # one diagonal shared by every class

    @classmethod
    def parse(cls, value: "CovarianceMode | str") -> "CovarianceMode":
        if isinstance(value, cls):
            return value
        aliases = {
            "share": cls.SHARED_ISOMETRIC,
            "shared": cls.SHARED_ISOMETRIC,
            "share_diag": cls.SHARED_DIAGONAL,
            "sharediag": cls.SHARED_DIAGONAL,
        }
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(
                f"unknown covariance mode {value!r}; expected one of "
                f"{[m.value for m in cls]} (aliases: share, share_diag)"
            ) from None


def cov_param_size(mode: CovarianceMode, n_classes: int, latent_dim: int) -> int:
    """Length of the trainable log-variance vector for a mode."""
    if mode is CovarianceMode.SHARED_ISOMETRIC:
        return 1
    if mode is CovarianceMode.ISOMETRIC:
        return n_classes
    return latent_dim


def expand_variances(
    mode: CovarianceMode, log_var: np.ndarray, n_classes: int, latent_dim: int
) -> np.ndarray:
    """Expand a mode-shaped log-variance parameter into per-class diagonals.

    Returns an (n_classes, latent_dim) matrix of variances.
    """
    log_var = np.asarray(log_var, dtype=np.float64)
    expected = cov_param_size(mode, n_classes, latent_dim)
    if log_var.shape != (expected,):
        raise DimensionError(
            f"log_var shape {log_var.shape}, mode {mode.value} expects ({expected},)"
        )
    var = np.exp(log_var)
    if mode is CovarianceMode.SHARED_ISOMETRIC:
        return np.full((n_classes, latent_dim), var[0])
    if mode is CovarianceMode.ISOMETRIC:
        return np.repeat(var[:, None], latent_dim, axis=1)
    return np.tile(var, (n_classes, 1))


def pool_log_var_grads(mode: CovarianceMode, per_class: np.ndarray) -> np.ndarray:
    """Reduce per-(class, dim) log-variance gradients onto the shared parameter.

    The shared parameter enters every variance it backs, so its gradient is
    the sum over the entries it feeds.
    """
    if mode is CovarianceMode.SHARED_ISOMETRIC:
        return np.array([per_class.sum()])
    if mode is CovarianceMode.ISOMETRIC:
        return per_class.sum(axis=1)
    return per_class.sum(axis=0)


@dataclass(eq=False)
class ClassDistribution:
    """One class's Gaussian in latent space plus its conjugate-update counts.

    ``kappa``/``nu`` are the NIW pseudo-count and degrees-of-freedom count;
    they move in lockstep through every update path. ``log_threshold`` stays
    None until validation assigns one. ``origin`` records how the class came
    to exist: "trained" (training set), "validated" (built from validation
    data of a class unseen in training), "novel" (created during the test
    stream).
    """

    class_id: int
    mean: np.ndarray
    variance_diag: np.ndarray
    kappa: float = 0.0
    nu: float = 0.0
    log_threshold: float | None = None
    origin: str = "trained"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance_diag = np.maximum(
            np.asarray(self.variance_diag, dtype=np.float64), VAR_FLOOR
        )
        if self.mean.shape != self.variance_diag.shape:
            raise DimensionError(
                f"mean shape {self.mean.shape} != variance shape {self.variance_diag.shape}"
            )
        if not np.all(np.isfinite(self.mean)):
            raise NumericError(f"class {self.class_id}: non-finite mean")
        if self.origin not in ("trained", "validated", "novel"):
            raise ConfigError(f"unknown origin {self.origin!r}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def copy(self) -> "ClassDistribution":
        return ClassDistribution(
            self.class_id,
            self.mean.copy(),
            self.variance_diag.copy(),
            self.kappa,
            self.nu,
            self.log_threshold,
            self.origin,
        )


@dataclass
class NIWParams:
    """Normal-inverse-Wishart parameters, diagonal scale only.

    A zero ``kappa`` means the mean carries no information (m is ignored
    downstream); this is the all-zero prior used for classes first seen at
    validation time.
    """

    kappa: float
    nu: float
    mean: np.ndarray
    scale: np.ndarray  # diagonal of the scale matrix, entries >= 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.kappa < 0 or self.nu < 0:
            raise ContractError(f"kappa/nu must be non-negative, got {self.kappa}, {self.nu}")
        if self.mean.shape != self.scale.shape:
            raise DimensionError(
                f"mean shape {self.mean.shape} != scale shape {self.scale.shape}"
            )
        if np.any(self.scale < 0):
            raise ContractError("scale entries must be non-negative")

    @classmethod
    def zero(cls, dim: int) -> "NIWParams":
        return cls(0.0, 0.0, np.zeros(dim), np.zeros(dim))

    def copy(self) -> "NIWParams":
        return NIWParams(self.kappa, self.nu, self.mean.copy(), self.scale.copy())


@dataclass
class DistributionRegistry:
    """Ordered set of all current classes, known plus created-novel."""

    mode: CovarianceMode
    latent_dim: int
    classes: list[ClassDistribution] = field(default_factory=list)
    next_novel_id: int = 0
    transfer_pool: list[int] = field(default_factory=list)

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate class ids in registry: {ids}")
        if ids and self.next_novel_id <= max(ids):
            raise ConfigError(
                f"next_novel_id {self.next_novel_id} must exceed every class id (max {max(ids)})"
            )

    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    def get(self, class_id: int) -> ClassDistribution:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise ContractError(f"class {class_id} not in registry")

    def add(self, dist: ClassDistribution) -> None:
        if dist.class_id in self.class_ids():
            raise ConfigError(f"class {dist.class_id} already registered")
        if dist.dim != self.latent_dim:
            raise DimensionError(
                f"class dim {dist.dim} != registry latent_dim {self.latent_dim}"
            )
        self.classes.append(dist)

    def copy(self) -> "DistributionRegistry":
        return DistributionRegistry(
            self.mode,
            self.latent_dim,
            [c.copy() for c in self.classes],
            self.next_novel_id,
            list(self.transfer_pool),
        )


def log_density_many(mean: np.ndarray, variance_diag: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density of each row of ``z`` (n x d) -> (n,)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != mean.shape[0]:
        raise DimensionError(f"z has dimension {z.shape[1]}, distribution has {mean.shape[0]}")
    diff = z - mean
    return -0.5 * ((diff * diff / variance_diag).sum(axis=1)
                   + np.log(2.0 * np.pi * variance_diag).sum())


def log_density(dist: ClassDistribution, z: np.ndarray) -> float:
    """Log of the class density at a single latent point."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (dist.dim,):
        raise DimensionError(f"z shape {z.shape}, expected ({dist.dim},)")
    return float(log_density_many(dist.mean, dist.variance_diag, z[None, :])[0])


def class_log_likelihood(dist: ClassDistribution, embeddings: np.ndarray) -> float:
    """Sum of log densities over one class's samples."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if embeddings.shape[0] == 0:
        raise ContractError(f"class {dist.class_id}: log-likelihood undefined for zero samples")
    return float(log_density_many(dist.mean, dist.variance_diag, embeddings).sum())


def _batch_weights(
    batches: dict[int, np.ndarray], class_sizes: dict[int, int] | None
) -> dict[int, float]:
    weights = {}
    for class_id, batch in batches.items():
        n = class_sizes[class_id] if class_sizes is not None else batch.shape[0]
        if n <= 0:
            raise ContractError(f"class {class_id}: non-positive sample count {n}")
        weights[class_id] = 1.0 / float(n)
    return weights


def loss(
    registry: DistributionRegistry,
    batches: dict[int, np.ndarray],
    class_sizes: dict[int, int] | None = None,
) -> float:
    """Negative per-class-mean log likelihood over the provided batches.

    Each class's sample terms are weighted by 1/n_k so classes with more
    samples do not outweigh smaller ones. Under mini-batching pass the full
    class sizes via ``class_sizes``; the per-batch values then sum to the
    full objective over an epoch.
    """
    total = 0.0
    weights = _batch_weights(batches, class_sizes)
    for class_id, batch in batches.items():
        dist = registry.get(class_id)
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if batch.shape[0] == 0:
            raise ContractError(f"class {class_id}: empty batch")
        term = -weights[class_id] * log_density_many(dist.mean, dist.variance_diag, batch).sum()
        if not np.isfinite(term):
            raise NumericError(f"non-finite loss term for class {class_id}")
        total += term
    return float(total)


@dataclass
class LossGradients:
    """Exact gradients of :func:`loss`.

    ``means`` and ``log_var_per_class`` are aligned with the registry's
    class order; rows for classes absent from the batch are zero.
    ``log_var_per_class`` is per (class, dim) and still needs
    :func:`pool_log_var_grads` to land on the mode-shaped parameter.
    """

    embeddings: dict[int, np.ndarray]
    means: np.ndarray
    log_var_per_class: np.ndarray


def loss_gradients(
    registry: DistributionRegistry,
    batches: dict[int, np.ndarray],
    class_sizes: dict[int, int] | None = None,
) -> LossGradients:
    """Analytic gradients of the loss w.r.t. embeddings, means, log-variances."""
    order = {class_id: row for row, class_id in enumerate(registry.class_ids())}
    d = registry.latent_dim
    d_means = np.zeros((len(order), d))
    d_logvar = np.zeros((len(order), d))
    d_embeds: dict[int, np.ndarray] = {}
    weights = _batch_weights(batches, class_sizes)

    for class_id, batch in batches.items():
        dist = registry.get(class_id)
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if batch.shape[0] == 0:
            raise ContractError(f"class {class_id}: empty batch")
        w = weights[class_id]
        diff = batch - dist.mean                       # (n, d)
        scaled = diff / dist.variance_diag             # Sigma^-1 (z - mu)
        row = order[class_id]
        d_embeds[class_id] = w * scaled
        d_means[row] = -w * scaled.sum(axis=0)
        # d(-logp)/d(log var_j) = -0.5 * ((z-mu)_j^2 / var_j - 1)
        d_logvar[row] = w * 0.5 * (1.0 - (diff * scaled)).sum(axis=0)
    return LossGradients(d_embeds, d_means, d_logvar)


def niw_update(prior: NIWParams, data: np.ndarray) -> NIWParams:
    """Fold a data batch into the NIW parameters, per dimension.

    Computed in the scatter form S_N = S_0 + sum((x - xbar)^2)
    + kappa_0 N / kappa_N * (xbar - m_0)^2, which is algebraically equal to
    S_0 + sum(x x) + kappa_0 m_0^2 - kappa_N m_N^2 but cannot go negative.
    Empty data returns the prior unchanged.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n = data.shape[0]
    if n == 0:
        return prior.copy()
    if data.shape[1] != prior.mean.shape[0]:
        raise DimensionError(
            f"data dimension {data.shape[1]} != prior dimension {prior.mean.shape[0]}"
        )
    xbar = data.mean(axis=0)
    kappa_n = prior.kappa + n
    nu_n = prior.nu + n
    m_n = (prior.kappa * prior.mean + n * xbar) / kappa_n
    scatter = ((data - xbar) ** 2).sum(axis=0)
    between = (prior.kappa * n / kappa_n) * (xbar - prior.mean) ** 2
    return NIWParams(kappa_n, nu_n, m_n, prior.scale + scatter + between)


def map_estimate(post: NIWParams, d_eff: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mode (mean, variance_diag) of the NIW parameters.

    ``d_eff`` is the dimension entering the MAP denominator; with
    independently estimated per-dimension posteriors it is 1.
    """
    if post.kappa <= 0:
        raise ContractError("MAP estimate undefined: kappa is zero (no mean information)")
    var = np.maximum(post.scale / (post.nu + d_eff + 2.0), VAR_FLOOR)
    return post.mean.copy(), var


def scale_prior_from_learned(
    dist: ClassDistribution, n_train: int, d_eff: int = 1
) -> NIWParams:
    """NIW prior equivalent to a trained class with ``n_train`` samples.

    kappa and nu are the training-set count; the scale is the learned
    variance times (nu + d_eff + 2) so that a MAP estimate with no new data
    returns the learned variance exactly.
    """
    if dist.origin != "trained":
        raise ContractError(
            f"class {dist.class_id}: prior scaling applies to trained classes, origin is {dist.origin!r}"
        )
    if n_train <= 0:
        raise ContractError(f"class {dist.class_id}: n_train must be positive, got {n_train}")
    scale = dist.variance_diag * (n_train + d_eff + 2.0)
    return NIWParams(float(n_train), float(n_train), dist.mean.copy(), scale)


def rank1_update(dist: ClassDistribution, z: np.ndarray) -> ClassDistribution:
    """Fold one newly assigned sample into the class, per dimension.

    Equivalent to a one-point NIW update followed by the MAP estimate under
    the scale correspondence S = var * (nu + 3). Threshold and origin are
    untouched.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (dist.dim,):
        raise DimensionError(f"z shape {z.shape}, expected ({dist.dim},)")
    k, nu = dist.kappa, dist.nu
    diff = z - dist.mean
    new_var = (dist.variance_diag * (nu + 3.0) + (k / (k + 1.0)) * diff * diff) / (nu + 4.0)
    new_mean = (k * dist.mean + z) / (k + 1.0)
    return ClassDistribution(
        dist.class_id,
        new_mean,
        np.maximum(new_var, VAR_FLOOR),
        k + 1.0,
        nu + 1.0,
        dist.log_threshold,
        dist.origin,
    )


def transfer_parameters(registry: DistributionRegistry, z: np.ndarray) -> ClassDistribution:
    """Create a novel class at ``z`` from the validation-unknown pool.

    Covariance and log threshold are the element-wise means over the pool;
    counts start at kappa = nu = 1. The class is appended to the registry
    and the novel-id counter advances.
    """
    if not registry.transfer_pool:
        raise ConfigError("transfer pool is empty; cannot model a novel class")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (registry.latent_dim,):
        raise DimensionError(f"z shape {z.shape}, expected ({registry.latent_dim},)")
    members = [registry.get(i) for i in registry.transfer_pool]
    for m in members:
        if m.log_threshold is None:
            raise ContractError(f"transfer-pool class {m.class_id} has no threshold")
    variance = np.mean([m.variance_diag for m in members], axis=0)
    threshold = float(np.mean([m.log_threshold for m in members]))
    novel = ClassDistribution(
        registry.next_novel_id,
        z.copy(),
        variance,
        kappa=1.0,
        nu=1.0,
        log_threshold=threshold,
        origin="novel",
    )
    registry.add(novel)
    registry.next_novel_id += 1
    return novel
