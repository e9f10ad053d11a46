"""Batch assembly, SGD with momentum and weight decay, schedules, epoch loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import objectives as obj
from . import xform
from .checkpoint import config_hash, save_checkpoint
from .data import Dataset
from .errors import ConfigError, ContractError, InputError, NumericalAbort
from .nets import Model, NetConfig, init_params
from .warp import warp_batch

log = logging.getLogger(__name__)

MODES = ("aet", "avt", "sat", "sup")
TRAINABLE = {
    "aet": ("enc.", "dec."),
    "avt": ("enc.", "dec."),
    "sat": ("enc.", "dec.", "cls."),
    "sup": ("enc.", "cls."),
}


# learning-rate schedules ------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Piecewise learning-rate schedule.

    ``knots`` is a sorted list of ``(epoch, lr, shape)``.  ``shape`` describes
    the segment from this knot to the next: ``"hold"`` keeps ``lr`` until the
    next knot, ``"linear"`` interpolates towards the next knot's rate.  The last
    rate holds forever.
    """

    knots: tuple[tuple[float, float, str], ...]

    def __post_init__(self):
        if not self.knots:
            raise ConfigError("learning-rate schedule is empty")
        knots = []
        for k in self.knots:
            epoch, lr = float(k[0]), float(k[1])
            shape = k[2] if len(k) > 2 else "hold"
            if shape not in ("hold", "linear"):
                raise ConfigError(f"schedule segment shape must be 'hold' or 'linear', got {shape!r}")
            if lr < 0:
                raise ConfigError(f"negative learning rate {lr} in schedule")
            knots.append((epoch, lr, shape))
        if any(b[0] <= a[0] for a, b in zip(knots, knots[1:])):
            raise ConfigError("schedule knots must have strictly increasing epochs")
        object.__setattr__(self, "knots", tuple(knots))

    @classmethod
    def constant(cls, lr: float) -> "Schedule":
        return cls(((0, lr, "hold"),))

    @classmethod
    def step(cls, base: float, milestones: Sequence[int], factor: float) -> "Schedule":
        knots = [(0, base, "hold")]
        for i, m in enumerate(milestones, 1):
            knots.append((m, base / factor**i, "hold"))
        return cls(tuple(knots))

    def to_list(self) -> list:
        return [list(k) for k in self.knots]


def lr_at(schedule: Schedule, epoch: float) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    knots = schedule.knots
    if epoch < knots[0][0]:
        return knots[0][1]
    for (e0, lr0, shape), (e1, lr1, _) in zip(knots, knots[1:]):
        if e0 <= epoch < e1:
            if shape == "linear":
                return lr0 + (lr1 - lr0) * (epoch - e0) / (e1 - e0)
            return lr0
    return knots[-1][1]


# paper-scale schedules (epochs 1,500 / 4,500)
AET_PAPER_SCHEDULE = Schedule.step(0.1, (240, 480, 640, 800, 1000), 5.0)
AVT_PAPER_SCHEDULE = Schedule(((0, 1e-3, "hold"), (50, 5e-3, "hold"), (3000, 5e-3, "linear"), (4500, 1e-5, "hold")))


# configuration ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "aet"
    batch_size: int = 128
    labeled_per_batch: int = 0
    labels_per_class: int = 0  # size of the labeled pool in sat / sup modes
    epochs: int = 20
    lr_schedule: Schedule = field(default_factory=lambda: Schedule.constant(0.05))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lam: float = 1.0
    entmin_weight: float = 0.0
    transform: object = field(default_factory=xform.AffineSpec)
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    augment_flip: bool = False
    augment_translate: int = 0  # max shift in pixels
    grad_clip: float = 0.0  # global gradient-norm cap; 0 disables

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.labeled_per_batch <= self.batch_size:
            raise ConfigError("labeled_per_batch must lie in [0, batch_size]")
        for name in ("momentum", "weight_decay", "lam", "entmin_weight", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mode == "sat" and self.labeled_per_batch < 1:
            raise ConfigError("sat mode needs labeled_per_batch >= 1")
        if self.mode in ("sat", "sup") and self.labels_per_class < 1:
            raise ConfigError(f"{self.mode} mode needs labels_per_class >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def kind(self) -> xform.Kind:
        return xform.spec_kind(self.transform)

    def decoder_settings(self) -> dict:
        if self.kind is xform.Kind.CATEGORICAL:
            return {"decoder": "categorical", "decoder_out": self.transform.n_classes}
        return {"decoder": "gaussian", "decoder_out": xform.TARGET_DIMS[self.kind]}


# batches ---------------------------------------------------------------------------------


@dataclass
class Batch:
    originals: np.ndarray
    transformed: np.ndarray
    transforms: list
    labels: np.ndarray | None  # -1 marks unlabeled entries

    @property
    def targets(self) -> np.ndarray:
        if self.transforms[0].kind is xform.Kind.CATEGORICAL:
            return np.array([t.raw["index"] for t in self.transforms])
        return np.stack([t.target for t in self.transforms])


def augment(images: np.ndarray, rng: np.random.Generator, flip: bool, translate: int) -> np.ndarray:
    """Random horizontal flips and zero-filled integer translations."""
    out = images.copy()
    if flip:
        mask = rng.random(len(out)) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    if translate:
        shifts = rng.integers(-translate, translate + 1, size=(len(out), 2))
        for i, (dy, dx) in enumerate(shifts):
            out[i] = np.roll(out[i], (dy, dx), axis=(1, 2))
            if dy > 0:
                out[i, :, :dy] = 0
            elif dy < 0:
                out[i, :, dy:] = 0
            if dx > 0:
                out[i, :, :, :dx] = 0
            elif dx < 0:
                out[i, :, :, dx:] = 0
    return out


def build_batch(
    dataset: Dataset,
    spec,
    rng: np.random.Generator,
    indices: np.ndarray | None = None,
    labeled_indices: np.ndarray | None = None,
    flip: bool = False,
    translate: int = 0,
) -> Batch:
    """Originals, their warped versions and the sampled transformations.

    When ``labeled_indices`` is given those examples come first and carry their
    labels; the rest are marked ``-1``.
    """
    if len(dataset) == 0:
        raise InputError("cannot build a batch from an empty dataset")
    if indices is None:
        indices = rng.integers(len(dataset), size=min(len(dataset), 128))
    labels = None
    if labeled_indices is not None:
        if dataset.labels is None:
            raise InputError("labeled batch requested from an unlabeled dataset")
        indices = np.concatenate([labeled_indices, indices]).astype(np.int64)
        labels = np.full(len(indices), -1, dtype=np.int64)
        labels[: len(labeled_indices)] = dataset.labels[labeled_indices]
    originals = dataset.images[indices]
    if flip or translate:
        originals = augment(originals, rng, flip, translate)
    transforms = [xform.sample(rng, spec) for _ in range(len(indices))]
    transformed = warp_batch(originals, [t.H.m for t in transforms])
    return Batch(originals, transformed, transforms, labels)


# optimizer --------------------------------------------------------------------------------


@dataclass
class OptimizerState:
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def sgd_step(
    params: dict[str, dc.Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> OptimizerState:
    """In-place SGD update of every parameter named in ``grads``.

    buffer <- momentum * buffer + grad + weight_decay * param
    param  <- param - lr * buffer
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        elif buf.shape != p.shape:
            raise ContractError(f"momentum buffer for {name} has shape {buf.shape}, parameter {p.shape}")
        buf = momentum * buf + g + weight_decay * p.data
        state.buffers[name] = buf
        p.data = p.data - lr * buf
    state.step += 1
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


# losses -------------------------------------------------------------------------------------


def compute_loss(model: Model, batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> obj.LossBreakdown:
    """Forward pass and loss for one batch under ``cfg.mode``; record on the active tape."""
    mode = cfg.mode
    n = len(batch.originals)
    if mode == "sup":
        labeled = batch.labels >= 0
        rep = model.encode(batch.originals[labeled], rng=rng)
        label = obj.nll_index(model.classify(rep.sample), batch.labels[labeled])
        return obj.LossBreakdown(label, 0.0, float(label.data), lam=1.0)

    both = np.concatenate([batch.originals, batch.transformed], axis=0)
    if mode == "aet":
        rep = model.encode(both, eps=np.zeros(1))
    else:
        rep = model.encode(both, rng=rng)
    z = dc.getitem(rep.sample, slice(0, n))
    z_tilde = dc.getitem(rep.sample, slice(n, 2 * n))
    dec = model.decode_transformation(z, z_tilde)
    targets = batch.targets

    if mode == "aet":
        if dec.mode == "gaussian":
            loss = obj.aet_loss(targets, dec.mean)
        else:
            loss = obj.avt_objective(dec, targets)
        return obj.LossBreakdown(loss, float(loss.data), lam=0.0)
    if mode == "avt":
        loss = obj.avt_objective(dec, targets)
        return obj.LossBreakdown(loss, float(loss.data), lam=0.0)

    # sat: transformation terms on every example, label terms on labeled ones
    trans = obj.avt_objective(dec, targets, reduction="none")
    labeled = np.flatnonzero(batch.labels >= 0)
    unlabeled = np.flatnonzero(batch.labels < 0)
    logprobs = model.classify(z)
    label = obj.nll_index(dc.getitem(logprobs, labeled), batch.labels[labeled], reduction="none")
    ent = obj.entropy_min(logprobs) if cfg.entmin_weight else None
    return obj.semisup_objective(
        dc.getitem(trans, unlabeled),
        (dc.getitem(trans, labeled), label),
        cfg.lam,
        ent,
        cfg.entmin_weight,
    )


# epoch loop -----------------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    opt: OptimizerState
    metrics: list[dict]
    labeled_pool: np.ndarray | None
    epoch: int


def labeled_pool(dataset: Dataset, per_class: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified labeled subset: ``per_class`` indices for every class."""
    if dataset.labels is None:
        raise InputError("labeled pool requested from an unlabeled dataset")
    pool = []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) < per_class:
            raise InputError(f"class {c} has {len(members)} examples, {per_class} requested")
        pool.append(rng.choice(members, size=per_class, replace=False))
    return np.sort(np.concatenate(pool))


def _rngs(seed: int):
    init, pool, data, noise = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(s) for s in (init, pool, data, noise))


def build_model(net_cfg: NetConfig, cfg: TrainConfig, n_classes: int) -> Model:
    init_rng, *_ = _rngs(cfg.seed)
    full = replace(net_cfg, n_classes=n_classes, **cfg.decoder_settings())
    return Model(full, init_params(full, init_rng))


def checkpoint_meta(model: Model, cfg: TrainConfig, epoch: int, step: int, extra: dict | None = None) -> dict:
    meta = {
        "config_hash": config_hash(train_config_dict(cfg) | {"net": model.cfg.to_dict()}),
        "epoch": epoch,
        "step": step,
        "seed": cfg.seed,
        "mode": cfg.mode,
        "net": model.cfg.to_dict(),
        "transform": transform_dict(cfg.transform),
    }
    if extra:
        meta.update(extra)
    return meta


def write_state(path, result_model: Model, opt: OptimizerState, meta: dict) -> None:
    tensors = {"param/" + k: v for k, v in result_model.state_arrays().items()}
    tensors.update({"opt/" + k: v for k, v in opt.buffers.items()})
    save_checkpoint(path, tensors, meta)


def run(
    cfg: TrainConfig,
    net_cfg: NetConfig,
    dataset: Dataset,
    out_dir: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch; fully determined by ``cfg.seed``.

    With ``out_dir`` set, per-step metrics go to ``metrics.jsonl`` and
    checkpoints to ``checkpoint-<epoch>.bin`` / ``checkpoint.bin``.
    """
    if len(dataset) == 0:
        raise InputError("training dataset is empty")
    _, pool_rng, data_rng, noise_rng = _rngs(cfg.seed)
    model = build_model(net_cfg, cfg, dataset.class_count)
    opt = OptimizerState()
    trainable = TRAINABLE[cfg.mode]
    names = [k for k in model.params if k.startswith(trainable)]
    pool = labeled_pool(dataset, cfg.labels_per_class, pool_rng) if cfg.mode in ("sat", "sup") else None

    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "w")
    metrics: list[dict] = []

    # "sup" iterates over the labeled pool only; other modes over the whole set
    source = pool if cfg.mode == "sup" else np.arange(len(dataset))
    n_unlab = cfg.batch_size - (cfg.labeled_per_batch if cfg.mode == "sat" else 0)
    step_size = cfg.batch_size if cfg.mode == "sup" else max(n_unlab, 1)
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(cfg.lr_schedule, epoch)
            order = source[data_rng.permutation(len(source))]
            for start in range(0, len(order), step_size):
                idx = order[start : start + step_size]
                lab_idx = None
                if cfg.mode == "sat":
                    lab_idx = data_rng.choice(pool, size=cfg.labeled_per_batch, replace=len(pool) < cfg.labeled_per_batch)
                elif cfg.mode == "sup":
                    lab_idx, idx = idx, np.empty(0, dtype=np.int64)
                batch = build_batch(
                    dataset, cfg.transform, data_rng, idx, lab_idx,
                    cfg.augment_flip, cfg.augment_translate,
                )
                with dc.Tape() as tape:
                    lb = compute_loss(model, batch, cfg, noise_rng)
                rec = {"step": opt.step, "epoch": epoch, "lr": lr} | lb.record()
                if not all(math.isfinite(v) for v in lb.record().values()):
                    raise NumericalAbort(f"non-finite loss at step {opt.step}, epoch {epoch}", rec)
                grads = dc.backward(tape, lb.total)
                named = {k: grads.get(model.params[k], np.zeros(model.params[k].shape)) for k in names}
                if not all(np.all(np.isfinite(g)) for g in named.values()):
                    raise NumericalAbort(f"non-finite gradient at step {opt.step}, epoch {epoch}", rec)
                if cfg.grad_clip:
                    named = clip_grad_norm(named, cfg.grad_clip)
                sgd_step(model.params, named, opt, lr, cfg.momentum, cfg.weight_decay)
                metrics.append(rec)
                if metrics_file:
                    metrics_file.write(json.dumps(rec, sort_keys=True) + "\n")
                if on_step:
                    on_step(rec)
            log.info("epoch %d lr %.4g loss %.4f", epoch, lr, metrics[-1]["total"] if metrics else float("nan"))
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                write_state(out / f"checkpoint-{epoch + 1}.bin", model, opt,
                            checkpoint_meta(model, cfg, epoch + 1, opt.step, _pool_meta(pool)))
    finally:
        if metrics_file:
            metrics_file.close()
    if out is not None:
        write_state(out / "checkpoint.bin", model, opt,
                    checkpoint_meta(model, cfg, cfg.epochs, opt.step, _pool_meta(pool)))
    return TrainResult(model, opt, metrics, pool, cfg.epochs)


def _pool_meta(pool):
    return {"labeled_pool": [int(i) for i in pool]} if pool is not None else {}


# config (de)serialization ----------------------------------------------------------------------


def transform_dict(spec) -> dict:
    kind = xform.spec_kind(spec)
    if kind is xform.Kind.AFFINE:
        return {"kind": "affine", "rot_range": list(spec.rot_range), "trans_range": list(spec.trans_range),
                "scale_range": list(spec.scale_range), "shear_range": list(spec.shear_range)}
    if kind is xform.Kind.PROJECTIVE:
        return {"kind": "projective", "corner_range": list(spec.corner_range),
                "pre_scale_range": list(spec.pre_scale_range), "pre_rot_set": list(spec.pre_rot_set)}
    d = {"kind": "categorical", "angles": list(spec.angles)}
    if spec.probs is not None:
        d["probs"] = list(spec.probs)
    return d


def transform_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "affine")
    try:
        if kind == "affine":
            return xform.AffineSpec(**d)
        if kind == "projective":
            return xform.ProjectiveSpec(**d)
        if kind == "categorical":
            return xform.CategoricalSpec(tuple(d.pop("angles", (0, 90, 180, 270))), d.pop("probs", None), **d)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} transformation settings: {exc}") from None
    raise ConfigError(f"unknown transformation kind {kind!r}")


def train_config_dict(cfg: TrainConfig) -> dict:
    return {
        "mode": cfg.mode, "batch_size": cfg.batch_size, "labeled_per_batch": cfg.labeled_per_batch,
        "labels_per_class": cfg.labels_per_class, "epochs": cfg.epochs,
        "lr_schedule": cfg.lr_schedule.to_list(), "momentum": cfg.momentum,
        "weight_decay": cfg.weight_decay, "lam": cfg.lam, "entmin_weight": cfg.entmin_weight,
        "transform": transform_dict(cfg.transform), "seed": cfg.seed,
        "checkpoint_every": cfg.checkpoint_every, "augment_flip": cfg.augment_flip,
        "augment_translate": cfg.augment_translate, "grad_clip": cfg.grad_clip,
    }
