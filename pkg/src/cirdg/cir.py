"""Cross-instance reconstruction: attention, self-masked reconstruction, losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Batch
from .model import CirModel, classify, encode_text, encode_video, key, query
from .ndmath import (
    ReconstructionDegenerateError,
    Tensor,
    as_tensor,
    cosine_similarity_matrix,
    cross_entropy,
    div,
    log_softmax_rows,
    matmul,
    mul,
    softmax_rows,
    transpose,
    tsum,
)

DEFAULT_LAMBDA1 = 1.0
DEFAULT_LAMBDA2 = 0.5

_FLAG_NAMES = {
    "same-scenario": "allow_same_scenario",
    "other-scenario": "allow_other_scenario",
    "same-location": "allow_same_location",
    "other-location": "allow_other_location",
}
_SHORT = {"ss": "same-scenario", "os": "other-scenario", "sl": "same-location", "ol": "other-location"}


@dataclass(frozen=True)
class MaskPolicy:
    """Which support samples a query may attend to, by domain relation.

    The sample itself is always excluded. A pair passes when its scenario
    relation and its location relation are both allowed.
    """

    allow_same_scenario: bool = True
    allow_other_scenario: bool = True
    allow_same_location: bool = True
    allow_other_location: bool = True

    def __post_init__(self):
        if not any(asdict(self).values()):
            raise ValueError("mask policy must allow at least one of SS/OS/SL/OL")

    @property
    def permissive(self) -> bool:
        return all(asdict(self).values())

    def allowed(self, batch_size: int, scenario=None, location=None) -> np.ndarray:
        keep = ~np.eye(batch_size, dtype=bool)
        if self.permissive:
            return keep
        if not (self.allow_same_scenario and self.allow_other_scenario):
            if scenario is None:
                raise ValueError(f"mask policy {self.name} needs scenario labels")
            s = np.asarray(scenario)
            same = s[:, None] == s[None, :]
            keep &= np.where(same, self.allow_same_scenario, self.allow_other_scenario)
        if not (self.allow_same_location and self.allow_other_location):
            if location is None:
                raise ValueError(f"mask policy {self.name} needs location labels")
            l = np.asarray(location)
            same = l[:, None] == l[None, :]
            keep &= np.where(same, self.allow_same_location, self.allow_other_location)
        return keep

    @property
    def name(self) -> str:
        blocked = [f"no-{k}" for k, attr in _FLAG_NAMES.items() if not getattr(self, attr)]
        return ",".join(blocked) if blocked else "permissive"

    @classmethod
    def parse(cls, text: str) -> "MaskPolicy":
        """``permissive`` or a comma list such as ``no-same-scenario,no-ol``."""
        text = text.strip().lower()
        if text in ("", "permissive", "none"):
            return cls()
        flags = {}
        for part in text.split(","):
            part = part.strip()
            if not part.startswith("no-"):
                raise ValueError(f"bad mask flag {part!r}; expected no-<same|other>-<scenario|location>")
            what = _SHORT.get(part[3:], part[3:])
            if what not in _FLAG_NAMES:
                raise ValueError(f"bad mask flag {part!r}")
            flags[_FLAG_NAMES[what]] = False
        return cls(**flags)


@dataclass
class ReconstructionBatch:
    f_v: Tensor
    g_t: Tensor | None
    recon_text: Tensor | None
    recon_cls: Tensor | None
    weights_text: Tensor | None
    weights_cls: Tensor | None


@dataclass
class LossParts:
    total: float
    ce: float
    rt: float
    rc: float
    tau: float

    def to_dict(self) -> dict:
        return asdict(self)


def attention_scores_learned(model: CirModel, f_v: Tensor) -> Tensor:
    """Dot products of layer-normed query and key projections, unmasked."""
    return matmul(query(model, f_v), transpose(key(model, f_v)))


def attention_scores_crossprod(f_v: Tensor) -> Tensor:
    return matmul(f_v, transpose(f_v))


def reconstruct(
    scores: Tensor,
    f_v: Tensor,
    policy: MaskPolicy | None = None,
    scenario=None,
    location=None,
) -> tuple[Tensor, Tensor]:
    """Softmax over allowed, non-self supports; returns (recon, weights)."""
    policy = policy or MaskPolicy()
    b = f_v.shape[0]
    if scores.shape != (b, b):
        raise ValueError(f"scores {scores.shape} do not match a batch of {b}")
    keep = policy.allowed(b, scenario, location)
    empty = np.flatnonzero(~keep.any(axis=1))
    if empty.size:
        raise ReconstructionDegenerateError(
            f"sample {int(empty[0])} has an empty support set under mask policy {policy.name} (batch of {b})"
        )
    weights = softmax_rows(scores, keep)
    return matmul(weights, f_v), weights


def nce_terms(recon: Tensor, g_t: Tensor, tau) -> tuple[Tensor, Tensor, Tensor]:
    """(L_r->t, L_t->r, cosine similarity) with in-batch negatives."""
    tau = as_tensor(tau)
    if np.any(tau.data <= 0):
        raise ValueError(f"temperature must be positive, got {tau.data}")
    sim = cosine_similarity_matrix(recon, g_t)
    logits = div(sim, tau)
    eye = Tensor(np.eye(sim.shape[0]))
    b = float(sim.shape[0])
    r2t = tsum(mul(log_softmax_rows(logits), eye)) * (-1.0 / b)
    t2r = tsum(mul(log_softmax_rows(transpose(logits)), eye)) * (-1.0 / b)
    return r2t, t2r, sim


def nce_loss(recon: Tensor, g_t: Tensor, tau) -> tuple[Tensor, Tensor]:
    r2t, t2r, sim = nce_terms(recon, g_t, tau)
    return r2t + t2r, sim


def _tau_tensor(model: CirModel) -> Tensor:
    # tau = exp(-log_tau_inv), written as 1 / exp(log_tau_inv)
    return div(1.0, model.inv_tau())


def reconstruct_batch(
    model: CirModel,
    batch: Batch,
    policy: MaskPolicy | None = None,
    mode: str = "train",
    text: bool = True,
    cls: bool = True,
) -> ReconstructionBatch:
    f_v = encode_video(model, Tensor(batch.video), mode)
    out = ReconstructionBatch(f_v, None, None, None, None, None)
    if text:
        out.g_t = encode_text(model, Tensor(batch.text))
        out.recon_text, out.weights_text = reconstruct(
            attention_scores_learned(model, f_v), f_v, policy, batch.scenario, batch.location
        )
    if cls:
        out.recon_cls, out.weights_cls = reconstruct(
            attention_scores_crossprod(f_v), f_v, policy, batch.scenario, batch.location
        )
    return out


def cir_total_loss(
    model: CirModel,
    batch: Batch,
    lambda1: float = DEFAULT_LAMBDA1,
    lambda2: float = DEFAULT_LAMBDA2,
    policy: MaskPolicy | None = None,
    mode: str = "train",
) -> tuple[Tensor, LossParts]:
    """L = L_c + lambda1 * L_rt + lambda2 * L_rc.

    A zero weight skips its branch entirely, so lambda1 = lambda2 = 0 is
    plain cross-entropy training.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"loss weights must be non-negative, got {lambda1}, {lambda2}")
    rb = reconstruct_batch(model, batch, policy, mode, text=lambda1 > 0, cls=lambda2 > 0)
    l_c = cross_entropy(classify(model, rb.f_v), batch.labels)
    total = l_c
    rt = rc = 0.0
    if lambda1 > 0:
        l_rt, _ = nce_loss(rb.recon_text, rb.g_t, _tau_tensor(model))
        total = total + l_rt * lambda1
        rt = float(l_rt.data)
    if lambda2 > 0:
        l_rc = cross_entropy(classify(model, rb.recon_cls), batch.labels)
        total = total + l_rc * lambda2
        rc = float(l_rc.data)
    parts = LossParts(float(total.data), float(l_c.data), rt, rc, model.tau)
    return total, parts
