"""Adam, step-decay schedule, epoch loop and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import DEFAULT_LR, BaselineConfig, baseline_loss
from .cir import DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, MaskPolicy, cir_total_loss
from .data import Dataset, SplitSpec, batch_iter, batch_composition, make_split, validation_split
from .evaluate import RunReport, top1
from .model import PARAM_NAMES, CirModel, ModelConfig, init_parameters
from .ndmath import NumericError, Tape, Tensor
from .seeding import rng_for, sub_seed

logger = logging.getLogger(__name__)

METHODS = ("cir", "cir_no_text", "erm", "mixup", "coral", "mmd")
CHECKPOINT_MAGIC = b"CIR1"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ["step", "L", "L_c", "L_rt", "L_rc", "tau", "L_scen", "L_loc", "lr", "epoch"]


class TrainingAbort(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "cir"
    lr: float | None = None
    epochs: int = 50
    lr_decay_epochs: tuple[int, ...] = (30, 40)
    lr_decay_factor: float = 10.0
    batch_size: int = 128
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    seed: int = 0
    mask_policy: str = "permissive"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    hidden_dim: int = 4096
    embed_dim: int = 512
    qk_dim: int = 128
    mixup_alpha: float = 0.2
    gamma1: float | None = None
    gamma2: float | None = None
    val_fraction: float = 0.10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lr is None:
            self.lr = 2e-4 if self.method.startswith("cir") else DEFAULT_LR[self.method]
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.betas = tuple(float(b) for b in self.betas)
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing, got {self.lr_decay_epochs}")
        if self.epochs > 0 and any(e >= self.epochs for e in self.lr_decay_epochs):
            raise ValueError(f"lr_decay_epochs {self.lr_decay_epochs} must lie below epochs={self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        MaskPolicy.parse(self.mask_policy)
        if self.method not in ("cir", "cir_no_text"):
            self.baseline()

    @property
    def effective_lambda1(self) -> float:
        return 0.0 if self.method == "cir_no_text" else self.lambda1

    def policy(self) -> MaskPolicy:
        return MaskPolicy.parse(self.mask_policy)

    def baseline(self) -> BaselineConfig:
        return BaselineConfig(self.method, self.mixup_alpha, self.gamma1, self.gamma2)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr / self.lr_decay_factor**drops

    def model_config(self, dataset: Dataset) -> ModelConfig:
        return ModelConfig(
            video_dim=dataset.video_dim,
            text_dim=dataset.text_dim,
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
            qk_dim=self.qk_dim,
            num_classes=dataset.num_classes,
            seed=sub_seed(self.seed, "init"),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RunState:
    model: CirModel
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.Generator(np.random.PCG64(0)))
    best_val: float = -1.0
    best_epoch: int = -1

    @classmethod
    def fresh(cls, model: CirModel, seed: int = 0) -> "RunState":
        zeros = lambda: OrderedDict((k, np.zeros_like(p.data)) for k, p in model.params.items())
        return cls(model, zeros(), zeros(), rng=rng_for(seed, "mixup"))


def adam_step(state: RunState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> RunState:
    """Bias-corrected Adam on every parameter; missing gradients count as zero."""
    b1, b2 = betas
    params = state.model.params
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name!r} at step {state.step}")
        grads[name] = g
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.model.clamp_tau()
    state.step = t
    return state


# ---------------------------------------------------------------- checkpoints


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(state: RunState, path) -> None:
    """``CIR1`` | u32 version | u64 header length | JSON header | float64 blocks.

    Blocks are parameters in declaration order, then BN running statistics,
    then the Adam first and second moments.
    """
    model = state.model
    blocks: list[tuple[str, np.ndarray]] = []
    blocks += [(f"param/{k}", p.data) for k, p in model.params.items()]
    blocks += [(f"buffer/{k}", b) for k, b in model.buffers.items()]
    blocks += [(f"adam_m/{k}", a) for k, a in state.m.items()]
    blocks += [(f"adam_v/{k}", a) for k, a in state.v.items()]
    header = {
        "config": model.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "rng": _rng_state_json(state.rng),
        "blocks": [[name, list(arr.shape)] for name, arr in blocks],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for _, arr in blocks:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> RunState:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    offset = 16 + hlen
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["blocks"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated block {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    config = ModelConfig.from_dict(header["config"])
    params = OrderedDict(
        (k, Tensor(arrays[f"param/{k}"], requires_grad=True, name=k)) for k in PARAM_NAMES
    )
    buffers = OrderedDict(
        (name.split("/", 1)[1], arr.copy()) for name, arr in arrays.items() if name.startswith("buffer/")
    )
    model = CirModel(config, params, buffers)
    m = OrderedDict((k, arrays[f"adam_m/{k}"].copy()) for k in PARAM_NAMES)
    v = OrderedDict((k, arrays[f"adam_v/{k}"].copy()) for k in PARAM_NAMES)
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["rng"]
    return RunState(
        model,
        m,
        v,
        step=header["step"],
        epoch=header["epoch"],
        batch_in_epoch=header["batch_in_epoch"],
        rng=rng,
        best_val=header["best_val"],
        best_epoch=header["best_epoch"],
    )


# ---------------------------------------------------------------- training loop


def train_step(state: RunState, config: TrainConfig, dataset: Dataset, ids: np.ndarray) -> dict:
    """One optimisation step on the batch ``ids``; returns the metrics row."""
    model = state.model
    batch = dataset.batch(ids)
    lr = config.lr_at(state.epoch)
    model.zero_grad()
    row = {"L_rt": 0.0, "L_rc": 0.0, "L_scen": 0.0, "L_loc": 0.0}
    with Tape() as tape:
        if config.method in ("cir", "cir_no_text"):
            loss, parts = cir_total_loss(model, batch, config.effective_lambda1, config.lambda2, config.policy())
            row.update(L_c=parts.ce, L_rt=parts.rt, L_rc=parts.rc)
        else:
            loss, parts = baseline_loss(model, batch, config.baseline(), state.rng)
            row.update(parts)
    if not np.isfinite(loss.data):
        raise TrainingAbort(f"non-finite loss at step {state.step}, batch ids starting {ids[:4].tolist()}")
    tape.backward(loss)
    adam_step(state, lr, config.betas, config.adam_eps)
    row.update(step=state.step, L=float(loss.data), tau=model.tau, lr=lr, epoch=state.epoch)
    return row


def _format_row(row: dict) -> dict:
    return {k: (repr(float(row[k])) if isinstance(row[k], (float, np.floating)) else row[k]) for k in METRIC_FIELDS}


def train_run(
    config: TrainConfig,
    dataset: Dataset,
    split: SplitSpec | tuple[np.ndarray, np.ndarray],
    state: RunState | None = None,
    max_steps: int | None = None,
    run_dir=None,
    extra_config: dict | None = None,
) -> tuple[RunState, RunReport]:
    """Train one configuration on one split.

    ``split`` is a :class:`SplitSpec` or an explicit ``(train_ids, test_ids)``
    pair. Passing ``state`` resumes (mid-epoch is fine); ``max_steps`` stops
    early after that many total steps. With ``run_dir`` the config, metrics,
    validation curve, checkpoints and report are written there.
    """
    if isinstance(split, SplitSpec):
        train_ids, test_ids = make_split(dataset, split)
        split_name = split.name
    else:
        train_ids, test_ids = (np.asarray(a, dtype=np.int64) for a in split)
        split_name = "custom"
    try:
        fit_ids, val_ids = validation_split(dataset, train_ids, config.val_fraction, sub_seed(config.seed, "val"))
    except ValueError:
        fit_ids, val_ids = train_ids, np.zeros(0, dtype=np.int64)
    if fit_ids.size < 2:
        raise TrainingAbort("training split has fewer than two samples")
    if state is None:
        model = init_parameters(config.model_config(dataset))
        state = RunState.fresh(model, config.seed)
    batch_seed = sub_seed(config.seed, "batches")

    out = Path(run_dir) if run_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        resolved = _resolved(config, split)
        resolved.update(extra_config or {})
        (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
        new_file = state.step == 0 or not (out / "metrics.csv").exists()
        metrics_fh = open(out / "metrics.csv", "w" if new_file else "a", newline="")
        writer = csv.DictWriter(metrics_fh, fieldnames=METRIC_FIELDS)
        if new_file:
            writer.writeheader()

    loss_curve: list[dict] = []
    val_curve: list[dict] = []
    best_model = state.model.clone()
    if out is not None and state.step > 0 and (out / "best.ckpt").exists():
        # resuming: keep the best model found before the interruption
        best_model = load_checkpoint(out / "best.ckpt").model

    def validate(epoch: int) -> None:
        nonlocal best_model
        if val_ids.size == 0:
            return
        acc = top1(state.model, dataset, val_ids)
        val_curve.append({"epoch": epoch, "top1": acc})
        if acc > state.best_val:
            state.best_val, state.best_epoch = acc, epoch
            best_model = state.model.clone()

    try:
        if config.epochs == 0 or (state.step == 0 and state.epoch == 0):
            validate(0)
        stopped = False
        while state.epoch < config.epochs and not stopped:
            batches = list(batch_iter(fit_ids, config.batch_size, batch_seed, state.epoch))
            for ids in batches[state.batch_in_epoch :]:
                if max_steps is not None and state.step >= max_steps:
                    stopped = True
                    break
                try:
                    row = train_step(state, config, dataset, ids)
                except (NumericError, ValueError) as exc:
                    raise TrainingAbort(
                        f"epoch {state.epoch} batch {state.batch_in_epoch}: {exc}"
                    ) from exc
                state.batch_in_epoch += 1
                loss_curve.append(row)
                if metrics_fh is not None:
                    writer.writerow(_format_row(row))
            if stopped:
                break
            state.epoch += 1
            state.batch_in_epoch = 0
            validate(state.epoch)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    report = RunReport(method=config.method, seed=config.seed)
    report.per_split_top1[split_name] = top1(state.model, dataset, test_ids)
    report.per_split_best_val_top1[split_name] = top1(best_model, dataset, test_ids)
    report.loss_curves[split_name] = loss_curve
    report.val_curves[split_name] = val_curve
    comp = batch_composition(dataset, list(batch_iter(fit_ids, config.batch_size, batch_seed, 0)))
    report.batch_composition = comp.to_dict()

    if out is not None:
        save_checkpoint(state, out / "final.ckpt")
        best_state = RunState.fresh(best_model)
        best_state.epoch, best_state.best_val, best_state.best_epoch = state.best_epoch, state.best_val, state.best_epoch
        save_checkpoint(best_state, out / "best.ckpt")
        with open(out / "val.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "top1"])
            for r in val_curve:
                w.writerow([r["epoch"], repr(r["top1"])])
        report.write_json(out / "report.json")
    return state, report


def _resolved(config: TrainConfig, split) -> dict:
    doc = {"train": config.to_dict()}
    if isinstance(split, SplitSpec):
        doc["split"] = split.to_dict()
    return doc
