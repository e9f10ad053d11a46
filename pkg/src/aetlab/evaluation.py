"""Frozen-feature evaluation: KNN, linear/nonlinear probes, few-label tables."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import objectives as obj
from .checkpoint import load_checkpoint
from .data import Dataset
from .errors import ContractError, FormatError, InputError, ShapeError
from .nets import Model, NetConfig
from .train import OptimizerState, sgd_step

KNN_K_SET = (3, 5, 10, 15, 20)
CSV_FIELDS = ("protocol", "setting", "seed", "error_rate")


@dataclass
class FeatureBank:
    features: np.ndarray
    labels: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise InputError(f"feature bank needs [N, D] features with N >= 1, got {self.features.shape}")
        if self.labels.shape != (len(self.features),):
            raise ShapeError(f"{len(self.features)} feature rows but labels of shape {self.labels.shape}")
        if np.isnan(self.features).any():
            raise InputError("feature bank contains NaN")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "FeatureBank":
        return FeatureBank(self.features[idx], self.labels[idx], self.source)


def load_model(path, expected: NetConfig | None = None) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint, checking it against ``expected`` if given."""
    tensors, meta = load_checkpoint(path)
    try:
        net = meta["net"]
        cfg = NetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in net.items()})
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: checkpoint metadata lacks a usable network config ({exc})") from None
    if expected is not None:
        mismatched = {k for k, v in expected.to_dict().items() if k != "n_classes" and cfg.to_dict()[k] != v}
        if mismatched:
            raise FormatError(f"{path}: checkpoint network differs from config in {sorted(mismatched)}")
    model = Model.create(cfg, 0)
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        model.load_arrays(params)
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return model, meta


def _row_noise(base: int, row: np.ndarray, n_samples: int, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(np.ascontiguousarray(row).tobytes(), digest_size=8).digest()
    gen = np.random.default_rng([base, int.from_bytes(digest, "little")])
    return gen.standard_normal((n_samples, dim)).mean(axis=0)


def extract_features(
    model: Model,
    dataset: Dataset,
    n_samples: int = 5,
    rng: np.random.Generator | None = None,
    batch_size: int = 256,
    source: str = "",
) -> FeatureBank:
    """Averaged sampled representations for every image.

    Each image's noise is seeded from ``rng`` and the image bytes, so the
    result does not depend on dataset order.
    """
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    if dataset.labels is None:
        raise InputError("feature extraction needs a labeled dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = int(rng.integers(2**63))
    chunks = []
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start : start + batch_size]
        rep = model.encode(imgs, eps=np.zeros(1))
        std = np.exp(0.5 * rep.logvar.data)
        noise = np.stack([_row_noise(base, im, n_samples, std.shape[1]) for im in imgs])
        chunks.append(rep.mean.data + std * noise)
    return FeatureBank(np.concatenate(chunks), dataset.labels, source)


# KNN --------------------------------------------------------------------------------------


def knn_classify(bank: FeatureBank, queries: np.ndarray, k: int, chunk: int = 64) -> np.ndarray:
    """Euclidean K-nearest-neighbour majority vote.

    Vote ties go to the label with the smallest summed distance, then the
    lowest label index.  Equal distances are ordered by bank index.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if k < 1 or k > len(bank):
        raise ContractError(f"K must lie in [1, {len(bank)}], got {k}")
    if queries.shape[1] != bank.dim:
        raise ShapeError(f"queries have dim {queries.shape[1]}, bank has {bank.dim}")
    n_labels = int(bank.labels.max()) + 1
    out = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), chunk):
        q = queries[start : start + chunk]
        d = np.sqrt(((q[:, None, :] - bank.features[None]) ** 2).sum(-1))
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        nd = np.take_along_axis(d, nn, axis=1)
        lab = bank.labels[nn]
        for i in range(len(q)):
            votes = np.bincount(lab[i], minlength=n_labels)
            dsum = np.bincount(lab[i], weights=nd[i], minlength=n_labels)
            cands = np.flatnonzero(votes == votes.max())
            out[start + i] = cands[np.argmin(dsum[cands])]  # argmin keeps the lowest label on ties
    return out


def knn_error(train: FeatureBank, test: FeatureBank, k: int) -> float:
    return float(np.mean(knn_classify(train, test.features, k) != test.labels))


# probes -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    head: str = "linear"  # or "nonlinear"
    hidden: int = 64
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.head not in ("linear", "nonlinear"):
            raise ContractError(f"probe head must be 'linear' or 'nonlinear', got {self.head!r}")


def _probe_params(d: int, c: int, cfg: ProbeConfig, rng) -> dict[str, dc.Tensor]:
    dims = [d, cfg.hidden, cfg.hidden, c] if cfg.head == "nonlinear" else [d, c]
    p = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        gain = np.sqrt(6.0) if i < len(dims) - 2 else 1.0
        p[f"fc{i}.w"] = dc.Tensor(rng.uniform(-gain, gain, (a, b)) / np.sqrt(a), requires_grad=True)
        p[f"fc{i}.b"] = dc.Tensor(np.zeros(b), requires_grad=True)
    return p


def _probe_forward(p: dict, x) -> dc.Tensor:
    n_layers = len(p) // 2
    h = dc.as_tensor(x)
    for i in range(n_layers):
        h = dc.add(dc.matmul(h, p[f"fc{i}.w"]), p[f"fc{i}.b"])
        if i < n_layers - 1:
            h = dc.relu(h)
    return dc.log_softmax(h, axis=1)


def probe_train(train: FeatureBank, test: FeatureBank, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Fit a probe head on frozen features and return its test error rate.

    Features are standardized with training-set statistics.
    """
    if train.dim != test.dim:
        raise ShapeError(f"train features have dim {train.dim}, test {test.dim}")
    if len(train) < 2 or len(np.unique(train.labels)) < 2:
        raise InputError("probe needs at least two training examples from two classes")
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xtr = (train.features - mu) / sd
    xte = (test.features - mu) / sd
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    rng = np.random.default_rng(cfg.seed)
    p = _probe_params(train.dim, n_classes, cfg, rng)
    state = OptimizerState()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(xtr))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with dc.Tape() as tape:
                loss = obj.nll_index(_probe_forward(p, xtr[idx]), train.labels[idx])
            grads = dc.backward(tape, loss)
            sgd_step(p, {k: grads[v] for k, v in p.items()}, state, cfg.lr, cfg.momentum, cfg.weight_decay)
    pred = _probe_forward(p, xte).data.argmax(axis=1)
    return float(np.mean(pred != test.labels))


# few-label protocol ------------------------------------------------------------------------


def stratified_indices(labels: np.ndarray, per_class: int, rng: np.random.Generator) -> np.ndarray:
    idx = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < per_class:
            raise InputError(f"class {c} has {len(members)} examples, {per_class} requested")
        idx.append(rng.choice(members, size=per_class, replace=False))
    return np.sort(np.concatenate(idx))


def few_label_protocol(
    train: FeatureBank,
    test: FeatureBank,
    samples_per_class: Sequence[int],
    rng: np.random.Generator,
    repetitions: int = 1,
    probe: ProbeConfig = ProbeConfig(),
) -> list[dict]:
    """Probe error for each labeled budget, averaged over ``repetitions`` subsamples."""
    rows = []
    for count in samples_per_class:
        errs = [probe_train(train.subset(stratified_indices(train.labels, count, rng)), test, probe)
                for _ in range(repetitions)]
        rows.append({"setting": f"{count}/class", "per_class": int(count),
                     "error_rate": float(np.mean(errs)), "errors": errs})
    return rows


# table output ------------------------------------------------------------------------------


def write_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if k == "error_rate" else r[k]) for k in CSV_FIELDS})


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def classifier_error(model: Model, dataset: Dataset, n_samples: int = 5, rng: np.random.Generator | None = None) -> float:
    """Test error of the model's own label head on averaged representations."""
    bank = extract_features(model, dataset, n_samples, rng)
    pred = model.classify(bank.features).data.argmax(axis=1)
    return float(np.mean(pred != bank.labels))
