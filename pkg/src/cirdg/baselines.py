"""ERM, Mixup, CORAL and MMD objectives on the shared encoder/classifier."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from .data import Batch
from .model import CirModel, classify, encode_video
from .ndmath import (
    Tensor,
    add,
    cross_entropy,
    exp,
    matmul,
    mul,
    square,
    sub,
    take_rows,
    tmean,
    transpose,
    tsum,
)

logger = logging.getLogger(__name__)

METHODS = ("erm", "mixup", "coral", "mmd")
MMD_BANDWIDTH_SCALES = (0.5, 1.0, 2.0)

# chosen values from the baselines' hyper-parameter grid
_DEFAULT_GAMMAS = {"erm": (0.0, 0.0), "mixup": (0.0, 0.0), "coral": (0.1, 0.1), "mmd": (1.0, 0.5)}
DEFAULT_LR = {"erm": 1e-4, "mixup": 1e-5, "coral": 1e-5, "mmd": 1e-5}


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "erm"
    mixup_alpha: float = 0.2
    gamma1: float | None = None
    gamma2: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline {self.method!r}; expected one of {METHODS}")
        if self.mixup_alpha <= 0:
            raise ValueError(f"mixup_alpha must be > 0, got {self.mixup_alpha}")
        g1, g2 = _DEFAULT_GAMMAS[self.method]
        if self.gamma1 is None:
            object.__setattr__(self, "gamma1", g1)
        if self.gamma2 is None:
            object.__setattr__(self, "gamma2", g2)
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma1 and gamma2 must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def erm_loss(model: CirModel, batch: Batch, mode: str = "train") -> Tensor:
    return cross_entropy(classify(model, encode_video(model, Tensor(batch.video), mode)), batch.labels)


# ---------------------------------------------------------------- mixup


@dataclass
class MixedBatch:
    video: np.ndarray
    targets: np.ndarray
    lam: np.ndarray
    partner: np.ndarray


def mixup_batch(batch: Batch, alpha: float, seed, num_classes: int, lam: float | None = None) -> MixedBatch:
    """Interpolate raw video features and one-hot labels with a permuted partner.

    ``seed`` may be an int or a ``numpy.random.Generator``. ``lam`` forces a
    single mixing coefficient for every pair.
    """
    b = len(batch)
    if b < 2:
        raise ValueError("mixup needs at least two samples")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    partner = rng.permutation(b)
    lam_v = np.full(b, float(lam)) if lam is not None else rng.beta(alpha, alpha, size=b)
    onehot = np.eye(num_classes)[batch.labels]
    video = lam_v[:, None] * batch.video + (1.0 - lam_v[:, None]) * batch.video[partner]
    targets = lam_v[:, None] * onehot + (1.0 - lam_v[:, None]) * onehot[partner]
    return MixedBatch(video, targets, lam_v, partner)


def mixup_loss(model: CirModel, mixed: MixedBatch, mode: str = "train") -> Tensor:
    return cross_entropy(classify(model, encode_video(model, Tensor(mixed.video), mode)), mixed.targets)


# ---------------------------------------------------------------- alignment


def _eligible_groups(domains) -> list[np.ndarray]:
    domains = np.asarray(domains)
    groups = []
    for d in np.unique(domains):
        idx = np.flatnonzero(domains == d)
        if idx.size >= 2:
            groups.append(idx)
    return groups


def _covariance(x: Tensor) -> Tensor:
    n = x.shape[0]
    xc = sub(x, tmean(x, axis=0, keepdims=True))
    return matmul(transpose(xc), xc) * (1.0 / (n - 1))


def coral_pair(a: Tensor, b: Tensor) -> Tensor:
    """Squared mean distance plus squared Frobenius covariance distance / (4 E^2)."""
    e = a.shape[1]
    mean_term = tsum(square(sub(tmean(a, axis=0), tmean(b, axis=0))))
    cov_term = tsum(square(sub(_covariance(a), _covariance(b)))) * (1.0 / (4.0 * e * e))
    return add(mean_term, cov_term)


def _sq_dists(x: Tensor, y: Tensor) -> Tensor:
    xx = tsum(square(x), axis=1, keepdims=True)
    yy = transpose(tsum(square(y), axis=1, keepdims=True))
    return sub(add(xx, yy), matmul(x, transpose(y)) * 2.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over the pooled samples (distinct pairs)."""
    z = np.concatenate([x, y])
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1)
    iu = np.triu_indices(z.shape[0], k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return med if med > 0 else 1.0


def gaussian_kernel_sum(d2: Tensor, bandwidths) -> Tensor:
    total = None
    for sigma in bandwidths:
        k = exp(d2 * (-1.0 / (2.0 * sigma * sigma)))
        total = k if total is None else add(total, k)
    return total


def mmd_pair(a: Tensor, b: Tensor, bandwidths=None) -> Tensor:
    """Squared MMD between two groups under a multi-bandwidth Gaussian kernel.

    This is the V-statistic (diagonal kernel terms kept), which is exactly 0
    for identical sample sets and never negative.
    """
    if bandwidths is None:
        med = median_bandwidth(a.data, b.data)
        bandwidths = [s * med for s in MMD_BANDWIDTH_SCALES]
    kxx = tmean(gaussian_kernel_sum(_sq_dists(a, a), bandwidths))
    kyy = tmean(gaussian_kernel_sum(_sq_dists(b, b), bandwidths))
    kxy = tmean(gaussian_kernel_sum(_sq_dists(a, b), bandwidths))
    return sub(add(kxx, kyy), kxy * 2.0)


def _pairwise_alignment(f_v: Tensor, domains, pair_fn, label: str) -> Tensor:
    groups = _eligible_groups(domains)
    if len(groups) < 2:
        logger.debug("%s alignment skipped: fewer than two domains with >= 2 samples", label)
        return Tensor(0.0)
    parts = [take_rows(f_v, g) for g in groups]
    total = None
    npairs = 0
    for a, b in combinations(parts, 2):
        term = pair_fn(a, b)
        total = term if total is None else add(total, term)
        npairs += 1
    return total * (1.0 / npairs)


def coral_loss(f_v: Tensor, domains) -> Tensor:
    return _pairwise_alignment(f_v, domains, coral_pair, "coral")


def mmd_loss(f_v: Tensor, domains, bandwidths=None) -> Tensor:
    """Mean pairwise MMD; bandwidths default to the detached median heuristic per pair."""
    return _pairwise_alignment(f_v, domains, lambda a, b: mmd_pair(a, b, bandwidths), "mmd")


# ---------------------------------------------------------------- full objectives


def baseline_loss(
    model: CirModel,
    batch: Batch,
    config: BaselineConfig,
    rng: np.random.Generator | None = None,
    mode: str = "train",
) -> tuple[Tensor, dict]:
    """Training objective of one baseline; returns (loss, loggable parts)."""
    if config.method == "erm":
        loss = erm_loss(model, batch, mode)
        return loss, {"L_c": float(loss.data)}
    if config.method == "mixup":
        if rng is None:
            raise ValueError("mixup needs a random generator")
        mixed = mixup_batch(batch, config.mixup_alpha, rng, model.config.num_classes)
        loss = mixup_loss(model, mixed, mode)
        return loss, {"L_c": float(loss.data)}
    f_v = encode_video(model, Tensor(batch.video), mode)
    l_c = cross_entropy(classify(model, f_v), batch.labels)
    align = coral_loss if config.method == "coral" else mmd_loss
    l_scen = align(f_v, batch.scenario)
    l_loc = align(f_v, batch.location)
    loss = add(add(l_c, mul(l_scen, config.gamma1)), mul(l_loc, config.gamma2))
    return loss, {"L_c": float(l_c.data), "L_scen": float(l_scen.data), "L_loc": float(l_loc.data)}
