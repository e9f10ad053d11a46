"""Siamese probabilistic encoder, transformation decoder and classifier head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, ShapeError

LOGVAR_MIN = -10.0
# the encoder may go almost deterministic; the decoder floor keeps the NLL well scaled
ENC_LOGVAR_MIN = -20.0
LOGVAR_MAX = 4.0


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    image_size: int = 32
    widths: tuple[int, int] = (32, 64)
    # strides of the four trunk convs; exactly two must be 2
    strides: tuple[int, int, int, int] = (1, 2, 1, 2)
    # side of the pooled trunk grid; representation dim = widths[1] * rep_grid**2
    rep_grid: int = 1
    decoder: str = "gaussian"  # or "categorical"
    decoder_out: int = 6  # target dimension, or number of transformation classes
    decoder_hidden: int = 128
    classifier_hidden: int = 64
    n_classes: int = 10
    logvar_bias_init: float = -4.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 2 or min(self.widths) < 1:
            raise ConfigError(f"widths must be two positive ints, got {self.widths}")
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))
        if len(self.strides) != 4 or sorted(self.strides) != [1, 1, 2, 2]:
            raise ConfigError(f"strides must hold two 1s and two 2s, got {self.strides}")
        if self.decoder not in ("gaussian", "categorical"):
            raise ConfigError(f"decoder must be 'gaussian' or 'categorical', got {self.decoder!r}")
        if self.image_size % 4:
            raise ConfigError("image_size must be divisible by 4")
        trunk = self.image_size // 4
        if self.rep_grid < 1 or trunk % self.rep_grid:
            raise ConfigError(f"rep_grid {self.rep_grid} must divide the trunk grid {trunk}")

    @property
    def rep_dim(self) -> int:
        return self.widths[1] * self.rep_grid**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d


@dataclass
class ProbRep:
    mean: Tensor
    logvar: Tensor
    sample: Tensor
    eps: np.ndarray


@dataclass
class DecoderOut:
    mode: str
    mean: Tensor | None = None
    logvar: Tensor | None = None
    logits: Tensor | None = None


def _uniform(rng, shape, fan_in, gain):
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights, zero biases, log-variance bias at ``logvar_bias_init``."""
    w1, w2 = cfg.widths
    relu_gain = np.sqrt(6.0)
    shapes = {
        "enc.conv1": (w1, cfg.in_channels, 3, 3),
        "enc.conv2": (w1, w1, 3, 3),
        "enc.conv3": (w2, w1, 3, 3),
        "enc.conv4": (w2, w2, 3, 3),
    }
    p: dict[str, np.ndarray] = {}
    for name, shp in shapes.items():
        p[name + ".w"] = _uniform(rng, shp, np.prod(shp[1:]), relu_gain)
        p[name + ".b"] = np.zeros(shp[0])
    p["enc.logvar.w"] = _uniform(rng, (w2, w2, 1, 1), w2, 1.0) * 0.1
    p["enc.logvar.b"] = np.full(w2, cfg.logvar_bias_init)

    d_in = 2 * cfg.rep_dim
    h = cfg.decoder_hidden
    p["dec.fc1.w"] = _uniform(rng, (d_in, h), d_in, relu_gain)
    p["dec.fc1.b"] = np.zeros(h)
    if cfg.decoder == "gaussian":
        p["dec.mean.w"] = _uniform(rng, (h, cfg.decoder_out), h, 1.0)
        p["dec.mean.b"] = np.zeros(cfg.decoder_out)
        p["dec.logvar.w"] = _uniform(rng, (h, cfg.decoder_out), h, 1.0) * 0.1
        p["dec.logvar.b"] = np.zeros(cfg.decoder_out)
    else:
        p["dec.logits.w"] = _uniform(rng, (h, cfg.decoder_out), h, 1.0)
        p["dec.logits.b"] = np.zeros(cfg.decoder_out)

    hc = cfg.classifier_hidden
    p["cls.conv.w"] = _uniform(rng, (hc, w2, 1, 1), w2, relu_gain)
    p["cls.conv.b"] = np.zeros(hc)
    p["cls.fc.w"] = _uniform(rng, (hc, cfg.n_classes), hc, 1.0)
    p["cls.fc.b"] = np.zeros(cfg.n_classes)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class Model:
    """Parameter collection plus the forward passes that use it.

    One encoder parameter set serves both Siamese branches.
    """

    def __init__(self, cfg: NetConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: NetConfig, seed: int) -> "Model":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def _images(self, img) -> Tensor:
        data = img.data if hasattr(img, "data") else img
        t = data if isinstance(data, Tensor) else Tensor(data)
        c, s = self.cfg.in_channels, self.cfg.image_size
        if t.ndim != 4 or t.shape[1:] != (c, s, s):
            raise ShapeError(f"encoder expects images [N, {c}, {s}, {s}], got {t.shape}")
        return t

    def trunk(self, img) -> Tensor:
        p = self.params
        x = self._images(img)
        for i, stride in enumerate(self.cfg.strides, 1):
            x = dc.relu(dc.conv2d(x, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], stride=stride, padding=1))
        return x

    def _pool(self, x: Tensor) -> Tensor:
        k = x.shape[2] // self.cfg.rep_grid
        if k > 1:
            x = dc.avgpool2d(x, k)
        return dc.reshape(x, (x.shape[0], -1))

    def encode(self, img, eps: np.ndarray | None = None, rng: np.random.Generator | None = None) -> ProbRep:
        """Reparameterized representation ``mean + exp(logvar / 2) * eps``.

        With ``eps`` absent a standard-normal draw is taken from ``rng``.
        """
        feats = self.trunk(img)
        mean = self._pool(feats)
        lv = dc.conv2d(feats, self.params["enc.logvar.w"], self.params["enc.logvar.b"])
        logvar = dc.clip(self._pool(lv), ENC_LOGVAR_MIN, LOGVAR_MAX)
        if eps is None:
            if rng is None:
                raise ContractError("encode needs either eps or an rng")
            eps = rng.standard_normal(mean.shape)
        eps = np.asarray(eps, dtype=float)
        if eps.shape != mean.shape:
            eps = np.broadcast_to(eps, mean.shape)
        sample = dc.add(mean, dc.mul(dc.exp(dc.mul(logvar, 0.5)), eps))
        return ProbRep(mean, logvar, sample, eps)

    def decode_transformation(self, z, z_tilde) -> DecoderOut:
        """Decode from the ordered pair (original, transformed) representations."""
        p = self.params
        z, z_tilde = dc.as_tensor(z), dc.as_tensor(z_tilde)
        if z.shape != z_tilde.shape or z.shape[-1] != self.cfg.rep_dim:
            raise ShapeError(
                f"decoder expects two [N, {self.cfg.rep_dim}] inputs, got {z.shape} and {z_tilde.shape}"
            )
        h = dc.relu(dc.add(dc.matmul(dc.concat([z_tilde, z], axis=1), p["dec.fc1.w"]), p["dec.fc1.b"]))
        if self.cfg.decoder == "gaussian":
            mean = dc.add(dc.matmul(h, p["dec.mean.w"]), p["dec.mean.b"])
            logvar = dc.clip(dc.add(dc.matmul(h, p["dec.logvar.w"]), p["dec.logvar.b"]), LOGVAR_MIN, LOGVAR_MAX)
            return DecoderOut("gaussian", mean=mean, logvar=logvar)
        logits = dc.add(dc.matmul(h, p["dec.logits.w"]), p["dec.logits.b"])
        return DecoderOut("categorical", logits=logits)

    def classify(self, z) -> Tensor:
        """Label log-probabilities from the original-image representation."""
        p = self.params
        z = dc.as_tensor(z)
        w2, g = self.cfg.widths[1], self.cfg.rep_grid
        if z.ndim != 2 or z.shape[1] != self.cfg.rep_dim:
            raise ShapeError(f"classifier expects [N, {self.cfg.rep_dim}], got {z.shape}")
        x = dc.reshape(z, (z.shape[0], w2, g, g))
        x = dc.relu(dc.conv2d(x, p["cls.conv.w"], p["cls.conv.b"]))
        x = dc.mean(x, axis=(2, 3))
        return dc.log_softmax(dc.add(dc.matmul(x, p["cls.fc.w"]), p["cls.fc.b"]), axis=1)

    def downstream_rep(self, img, n_samples: int = 5, rng: np.random.Generator | None = None) -> np.ndarray:
        """Average of ``n_samples`` sampled representations (inference only)."""
        if n_samples < 1:
            raise ContractError(f"n_samples must be >= 1, got {n_samples}")
        if rng is None:
            raise ContractError("downstream_rep needs an rng")
        rep = self.encode(img, eps=np.zeros(1))
        std = np.exp(0.5 * rep.logvar.data)
        noise = rng.standard_normal((n_samples,) + rep.mean.shape)
        return rep.mean.data + std * noise.mean(axis=0)

    # persistence helpers
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        if missing:
            raise ShapeError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"parameter {k}: checkpoint shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=float)
