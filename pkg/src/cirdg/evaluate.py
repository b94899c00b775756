"""Accuracy, drop-recovery arithmetic and attention analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cir import MaskPolicy, attention_scores_learned, reconstruct
from .data import Dataset, batch_iter
from .model import CirModel, classify, encode_video
from .ndmath import Tensor, no_record


class EvaluationError(ValueError):
    pass


def predict(model: CirModel, video: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Arg-max class per row in eval mode; ties go to the lowest class id."""
    out = []
    with no_record():
        for start in range(0, video.shape[0], chunk):
            logits = classify(model, encode_video(model, Tensor(video[start : start + chunk]), "eval")).data
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def top1(model: CirModel, dataset: Dataset, ids: Sequence[int], chunk: int = 1024) -> float:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise EvaluationError("top-1 accuracy of an empty id set is undefined")
    pred = predict(model, dataset.video[ids], chunk)
    return float(np.mean(pred == dataset.class_id[ids]))


# ---------------------------------------------------------------- drop recovery


@dataclass
class DropRecovery:
    acc_exclude_both: float
    acc_with_scenario: float
    acc_with_location: float
    acc_with_union: float | None
    acc_with_pair: float
    recovered_scenario: float | None
    recovered_location: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def drop_recovery(
    exclude_both: float,
    with_scenario: float,
    with_location: float,
    with_union: float | None,
    with_pair: float,
) -> DropRecovery:
    """Percent of the (pair - exclude_both) gap closed by each partial setting.

    A non-positive gap leaves both percentages undefined (``None``). Values
    outside [0, 100] are kept as they are.
    """
    gap = with_pair - exclude_both

    def pct(x: float) -> float | None:
        return None if gap <= 0 else 100.0 * (x - exclude_both) / gap

    return DropRecovery(
        exclude_both, with_scenario, with_location, with_union, with_pair, pct(with_scenario), pct(with_location)
    )


# ---------------------------------------------------------------- attention analysis


def learned_weights(model: CirModel, dataset: Dataset, ids: Sequence[int], policy: MaskPolicy | None = None) -> np.ndarray:
    """Row-stochastic learned-attention weights for one batch, eval mode."""
    b = dataset.batch(ids)
    with no_record():
        f_v = encode_video(model, Tensor(b.video), "eval")
        _, w = reconstruct(attention_scores_learned(model, f_v), f_v, policy, b.scenario, b.location)
    return w.data


@dataclass
class AttentionStats:
    ss: float
    os: float
    sl: float
    ol: float
    scenario_matrix: list[list[float]]
    location_matrix: list[list[float]]
    batches: int

    def to_dict(self) -> dict:
        return asdict(self)


def attention_masses(weights: np.ndarray, scenario, location, num_scenarios: int, num_locations: int):
    """Raw (unnormalised) SS/OS/SL/OL masses and domain-by-domain matrices."""
    scenario = np.asarray(scenario)
    location = np.asarray(location)
    same_s = scenario[:, None] == scenario[None, :]
    same_l = location[:, None] == location[None, :]
    masses = (
        float(weights[same_s].sum()),
        float(weights[~same_s].sum()),
        float(weights[same_l].sum()),
        float(weights[~same_l].sum()),
    )
    smat = np.zeros((num_scenarios, num_scenarios))
    lmat = np.zeros((num_locations, num_locations))
    np.add.at(smat, (scenario[:, None], scenario[None, :]), weights)
    np.add.at(lmat, (location[:, None], location[None, :]), weights)
    return masses, smat, lmat


def _row_normalise(m: np.ndarray) -> np.ndarray:
    sums = m.sum(axis=1, keepdims=True)
    return np.divide(m, sums, out=np.zeros_like(m), where=sums > 0)


def _split_unit(a: float, b: float) -> tuple[float, float]:
    total = a + b
    if total <= 0:
        return 0.0, 0.0
    x = a / total
    return x, 1.0 - x


def attention_report(
    model: CirModel,
    dataset: Dataset,
    ids: Sequence[int],
    num_batches: int | None = None,
    seed: int = 0,
    batch_size: int = 128,
) -> AttentionStats:
    """Accumulate learned-attention mass by domain relation over sampled batches.

    ``num_batches=None`` means one full pass over ``ids``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    ss = os_ = sl = ol = 0.0
    smat = np.zeros((dataset.num_scenarios,) * 2)
    lmat = np.zeros((dataset.num_locations,) * 2)
    seen = 0
    epoch = 0
    while num_batches is None or seen < num_batches:
        produced = False
        for chunk in batch_iter(ids, batch_size, seed, epoch):
            produced = True
            w = learned_weights(model, dataset, chunk)
            (a, b, c, d), sm, lm = attention_masses(
                w, dataset.scenario_id[chunk], dataset.location_id[chunk], dataset.num_scenarios, dataset.num_locations
            )
            ss, os_, sl, ol = ss + a, os_ + b, sl + c, ol + d
            smat += sm
            lmat += lm
            seen += 1
            if num_batches is not None and seen >= num_batches:
                break
        if not produced:
            raise EvaluationError("attention analysis needs at least two ids")
        epoch += 1
        if num_batches is None:
            break
    ss_n, os_n = _split_unit(ss, os_)
    sl_n, ol_n = _split_unit(sl, ol)
    return AttentionStats(
        ss_n, os_n, sl_n, ol_n, _row_normalise(smat).tolist(), _row_normalise(lmat).tolist(), seen
    )


def topk_support(
    model: CirModel, dataset: Dataset, query_id: int, batch_ids: Sequence[int], k: int
) -> tuple[list[tuple[int, float]], float]:
    """Top-k supports of ``query_id`` by learned attention, and the residual mass."""
    batch_ids = np.asarray(batch_ids, dtype=np.int64)
    pos = np.flatnonzero(batch_ids == query_id)
    if pos.size != 1:
        raise EvaluationError(f"query {query_id} must appear exactly once in the batch")
    if not 1 <= k < batch_ids.size:
        raise EvaluationError(f"k must lie in [1, {batch_ids.size - 1}], got {k}")
    row = learned_weights(model, dataset, batch_ids)[pos[0]]
    order = np.argsort(-row, kind="stable")
    order = order[order != pos[0]][:k]
    picked = [(int(batch_ids[j]), float(row[j])) for j in order]
    residual = 1.0 - math.fsum(w for _, w in picked)
    return picked, residual


# ---------------------------------------------------------------- reports


@dataclass
class RunReport:
    method: str
    seed: int
    per_split_top1: dict[str, float] = field(default_factory=dict)
    per_split_best_val_top1: dict[str, float] = field(default_factory=dict)
    loss_curves: dict[str, list[dict]] = field(default_factory=dict)
    val_curves: dict[str, list[dict]] = field(default_factory=dict)
    attention: AttentionStats | None = None
    batch_composition: dict | None = None

    @property
    def mean_top1(self) -> float | None:
        vals = list(self.per_split_top1.values())
        return float(np.mean(vals)) if vals else None

    def merge(self, other: "RunReport") -> None:
        self.per_split_top1.update(other.per_split_top1)
        self.per_split_best_val_top1.update(other.per_split_best_val_top1)
        self.loss_curves.update(other.loss_curves)
        self.val_curves.update(other.val_curves)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_top1"] = self.mean_top1
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


SUMMARY_FIELDS = ["split", "method", "seed", "top1"]


def write_summary_csv(path, rows: Sequence[dict], extra_fields: Sequence[str] = ()) -> None:
    fields = list(extra_fields) + SUMMARY_FIELDS
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def report_rows(report: RunReport) -> list[dict]:
    return [
        {"split": name, "method": report.method, "seed": report.seed, "top1": repr(acc)}
        for name, acc in report.per_split_top1.items()
    ]


def write_attention_csv(path, stats: AttentionStats) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "row", *range(max(len(stats.scenario_matrix), len(stats.location_matrix)))])
        for kind, mat in (("scenario", stats.scenario_matrix), ("location", stats.location_matrix)):
            for i, row in enumerate(mat):
                w.writerow([kind, i, *[repr(x) for x in row]])
        w.writerow(["mass", "SS", repr(stats.ss)])
        w.writerow(["mass", "OS", repr(stats.os)])
        w.writerow(["mass", "SL", repr(stats.sl)])
        w.writerow(["mass", "OL", repr(stats.ol)])
