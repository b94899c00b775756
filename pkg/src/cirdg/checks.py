"""Finite-difference checks over every differentiable piece, at toy scale."""

from __future__ import annotations

import numpy as np

from . import ndmath as nd
from .baselines import coral_loss, erm_loss, mixup_batch, mixup_loss, mmd_loss
from .cir import MaskPolicy, cir_total_loss, nce_loss, reconstruct
from .data import Batch
from .model import ModelConfig, init_parameters
from .ndmath import Tensor, gradcheck

TOY = dict(video_dim=5, text_dim=3, hidden_dim=6, embed_dim=8, qk_dim=4, num_classes=4)
TOY_BATCH = 6


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def toy_batch(rng, b: int = TOY_BATCH, cfg: ModelConfig | None = None) -> Batch:
    cfg = cfg or ModelConfig(**TOY)
    return Batch(
        ids=np.arange(b),
        video=rng.standard_normal((b, cfg.video_dim)),
        text=rng.standard_normal((b, cfg.text_dim)),
        labels=rng.integers(0, cfg.num_classes, b),
        scenario=np.arange(b) % 2,
        location=(np.arange(b) // 2) % 2,
    )


def run_gradchecks(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    t = lambda *shape: Tensor(rng.standard_normal(shape), requires_grad=True)
    out: dict[str, float] = {}

    a, b = t(3, 4), t(4, 2)
    w = Tensor(rng.standard_normal((3, 2)))
    out["matmul"] = gradcheck(lambda a, b: nd.tsum(nd.matmul(a, b) * w), [a, b])
    x = Tensor(_away_from_zero(rng, (4, 3)), requires_grad=True)
    out["relu"] = gradcheck(lambda x: nd.tsum(nd.relu(x)), [x])
    w = Tensor(rng.standard_normal((4, 3)))
    x, bias = t(4, 3), t(3)
    out["add_bias"] = gradcheck(lambda x, bias: nd.tsum(nd.add_bias(x, bias) * w), [x, bias])
    x, sc, sh = t(4, 5), t(5), t(5)
    w = Tensor(rng.standard_normal((4, 5)))
    out["layer_norm"] = gradcheck(lambda x, sc, sh: nd.tsum(nd.layer_norm(x, sc, sh) * w), [x, sc, sh])
    rm, rv = np.zeros(5), np.ones(5)
    out["batch_norm_1d/train"] = gradcheck(
        lambda x, sc, sh: nd.tsum(nd.batch_norm_1d(x, sc, sh, rm, rv, "train") * w), [x, sc, sh]
    )
    rm2, rv2 = rng.standard_normal(5), rng.uniform(0.5, 2.0, 5)
    out["batch_norm_1d/eval"] = gradcheck(
        lambda x, sc, sh: nd.tsum(nd.batch_norm_1d(x, sc, sh, rm2, rv2, "eval") * w), [x, sc, sh]
    )
    x = t(4, 4)
    mask = ~np.eye(4, dtype=bool)
    w = Tensor(rng.standard_normal((4, 4)))
    out["softmax_rows"] = gradcheck(lambda x: nd.tsum(nd.softmax_rows(x, mask) * w), [x])
    out["log_softmax_rows"] = gradcheck(lambda x: nd.tsum(nd.log_softmax_rows(x) * w), [x])
    a, b = t(4, 3), t(5, 3)
    w = Tensor(rng.standard_normal((4, 5)))
    out["cosine_similarity_matrix"] = gradcheck(lambda a, b: nd.tsum(nd.cosine_similarity_matrix(a, b) * w), [a, b])
    logits = t(4, 3)
    labels = rng.integers(0, 3, 4)
    out["cross_entropy/hard"] = gradcheck(lambda z: nd.cross_entropy(z, labels), [logits])
    soft = rng.dirichlet(np.ones(3), 4)
    out["cross_entropy/soft"] = gradcheck(lambda z: nd.cross_entropy(z, soft), [logits])
    a, c = t(4, 3), Tensor(rng.uniform(0.5, 2.0, (4, 3)), requires_grad=True)
    out["elementwise"] = gradcheck(
        lambda a, c: nd.tsum(nd.exp(a) * nd.log(c) + nd.square(a) / c - a), [a, c]
    )
    x = t(5, 3)
    out["take_rows"] = gradcheck(lambda x: nd.tsum(nd.square(nd.take_rows(x, [0, 2, 2, 4]))), [x])

    scores, fv = t(6, 6), t(6, 3)
    policy = MaskPolicy(allow_same_location=False)
    loc = np.array([0, 0, 1, 1, 2, 2])
    out["reconstruct"] = gradcheck(
        lambda s, f: nd.tsum(nd.square(reconstruct(s, f, policy, location=loc)[0])), [scores, fv]
    )
    recon, text = t(5, 4), t(5, 4)
    tau = Tensor(0.3, requires_grad=True)
    out["nce_loss"] = gradcheck(lambda r, g, tau: nce_loss(r, g, tau)[0], [recon, text, tau])
    fv = t(8, 3)
    dom = np.array([0, 0, 0, 1, 1, 1, 2, 2])
    out["coral_loss"] = gradcheck(lambda f: coral_loss(f, dom), [fv])
    out["mmd_loss"] = gradcheck(lambda f: mmd_loss(f, dom, bandwidths=(0.7, 1.4, 2.8)), [fv])

    cfg = ModelConfig(**TOY, seed=seed)
    model = init_parameters(cfg)
    batch = toy_batch(rng, cfg=cfg)
    out["erm_loss"] = gradcheck(lambda *ps: erm_loss(model, batch), model.parameters())
    mixed = mixup_batch(batch, 0.2, seed, cfg.num_classes)
    out["mixup_loss"] = gradcheck(lambda *ps: mixup_loss(model, mixed), model.parameters())
    out["cir_total_loss"] = gradcheck(lambda *ps: cir_total_loss(model, batch)[0], model.parameters())
    return out
