"""Sampling and algebra of 2D affine / projective transformations.

All homographies act on normalized image coordinates in [-1, 1]^2 with x to
the right and y pointing down.  A translation expressed as a fraction of the
image size therefore maps to twice that value in normalized units.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegeneracyError, ShapeError

DET_EPS = 1e-12
MAX_PROJECTIVE_ATTEMPTS = 16

# Corners of the image domain, in the order TL, TR, BR, BL.
UNIT_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


class Kind(str, enum.Enum):
    AFFINE = "affine"
    PROJECTIVE = "projective"
    CATEGORICAL = "categorical"


def _interval(value, name: str) -> tuple[float, float]:
    lo, hi = (float(v) for v in value)
    if not lo <= hi:
        raise ConfigError(f"{name}: interval lower bound {lo} exceeds upper bound {hi}")
    return lo, hi


@dataclass(frozen=True)
class AffineSpec:
    """Uniform sampling ranges for a random affine transformation.

    Angles are in degrees, translations are fractions of the image size.
    """

    rot_range: tuple[float, float] = (-180.0, 180.0)
    trans_range: tuple[float, float] = (-0.2, 0.2)
    scale_range: tuple[float, float] = (0.7, 1.3)
    shear_range: tuple[float, float] = (-30.0, 30.0)

    def __post_init__(self):
        for name in ("rot_range", "trans_range", "scale_range", "shear_range"):
            object.__setattr__(self, name, _interval(getattr(self, name), name))
        lo, hi = self.scale_range
        if lo <= 0.0 <= hi:
            raise ConfigError(f"scale_range {self.scale_range} must exclude 0")
        if max(abs(v) for v in self.shear_range) >= 90.0:
            raise ConfigError("shear_range must stay inside (-90, 90) degrees")

    @classmethod
    def identity(cls) -> "AffineSpec":
        return cls((0, 0), (0, 0), (1, 1), (0, 0))

    @classmethod
    def rotation_only(cls, rot_range=(-180.0, 180.0)) -> "AffineSpec":
        return cls(rot_range, (0, 0), (1, 1), (0, 0))


@dataclass(frozen=True)
class ProjectiveSpec:
    """Corner-perturbation sampling for a random projective transformation."""

    corner_range: tuple[float, float] = (-0.125, 0.125)
    pre_scale_range: tuple[float, float] = (0.8, 1.2)
    pre_rot_set: tuple[int, ...] = (0, 90, 180, 270)

    def __post_init__(self):
        object.__setattr__(self, "corner_range", _interval(self.corner_range, "corner_range"))
        object.__setattr__(
            self, "pre_scale_range", _interval(self.pre_scale_range, "pre_scale_range")
        )
        if max(abs(v) for v in self.corner_range) >= 0.5:
            raise ConfigError("corner_range magnitude must be < 0.5 so corners cannot cross")
        if self.pre_scale_range[0] <= 0.0:
            raise ConfigError("pre_scale_range must be positive")
        rots = tuple(int(r) for r in self.pre_rot_set)
        if not rots:
            raise ConfigError("pre_rot_set must not be empty")
        if any(r not in (0, 90, 180, 270) for r in rots):
            raise ConfigError(f"pre_rot_set entries must be right angles, got {rots}")
        object.__setattr__(self, "pre_rot_set", rots)

    @classmethod
    def identity(cls) -> "ProjectiveSpec":
        return cls((0, 0), (1, 1), (0,))


@dataclass(frozen=True)
class CategoricalSpec:
    """A finite family of fixed homographies, by default the right-angle rotations."""

    angles: tuple[int, ...] = (0, 90, 180, 270)
    probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.angles:
            raise ConfigError("categorical family must not be empty")
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=float)
            if p.shape != (len(self.angles),) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ConfigError("categorical probs must be a distribution over angles")

    @property
    def n_classes(self) -> int:
        return len(self.angles)


@dataclass(frozen=True, eq=False)
class Homography:
    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        if m.shape != (3, 3):
            raise ShapeError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < DET_EPS:
            raise DegeneracyError("homography has m[2][2] == 0 and cannot be normalized")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise DegeneracyError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def eye(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Map an [..., 2] array of points."""
        xy = np.asarray(xy, dtype=float)
        h = xy @ self.m[:, :2].T + self.m[:, 2]
        return h[..., :2] / h[..., 2:3]

    def allclose(self, other: "Homography", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.m, other.m, rtol=0.0, atol=atol))


def compose(a: Homography, b: Homography) -> Homography:
    """Return ``a . b`` (apply ``b`` first)."""
    return Homography(a.m @ b.m)


def invert(h: Homography) -> Homography:
    try:
        inv = np.linalg.solve(h.m, np.eye(3))
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("cannot invert singular homography") from exc
    return Homography(inv)


# elementary transforms ------------------------------------------------------


def translation(tx: float, ty: float) -> Homography:
    return Homography([[1, 0, tx], [0, 1, ty], [0, 0, 1]])


def rotation(deg: float) -> Homography:
    # right angles are built exactly so composed rotations stay exact
    if float(deg) % 90 == 0:
        k = int(round(float(deg) / 90)) % 4
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k]
    else:
        r = np.deg2rad(deg)
        c, s = np.cos(r), np.sin(r)
    return Homography([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def scaling(s: float) -> Homography:
    return Homography([[s, 0, 0], [0, s, 0], [0, 0, 1]])


def shearing(deg: float) -> Homography:
    return Homography([[1, np.tan(np.deg2rad(deg)), 0], [0, 1, 0], [0, 0, 1]])


def affine_matrix(rot: float, tx: float, ty: float, scale: float, shear: float) -> Homography:
    """T(2tx, 2ty) . R(rot) . Sh(shear) . S(scale); tx, ty are size fractions."""
    r = np.deg2rad(rot)
    c, s = np.cos(r), np.sin(r)
    k = np.tan(np.deg2rad(shear))
    # R . Sh . S written out
    m = np.array([
        [c * scale, (c * k - s) * scale, 2 * tx],
        [s * scale, (s * k + c) * scale, 2 * ty],
        [0.0, 0.0, 1.0],
    ])
    return Homography(m)


# four-point solve -------------------------------------------------------------


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Exact homography mapping 4 source points onto 4 destination points.

    Solves the 8x8 system obtained by fixing h22 = 1.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ShapeError(f"need 4x2 point sets, got {src.shape} and {dst.shape}")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("degenerate 4-point correspondence") from exc
    return Homography(np.append(h, 1.0).reshape(3, 3))


def _is_convex_quad(q: np.ndarray) -> bool:
    crosses = []
    for i in range(4):
        p0, p1, p2 = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        e1, e2 = p1 - p0, p2 - p1
        crosses.append(e1[0] * e2[1] - e1[1] * e2[0])
    crosses = np.array(crosses)
    return bool(np.all(crosses > 1e-9) or np.all(crosses < -1e-9))


def projective_from_offsets(
    offsets: Sequence[float], pre_scale: float = 1.0, pre_rot: int = 0
) -> Homography:
    """Homography sending the domain corners to pre-transformed, perturbed corners.

    ``offsets`` holds 8 values (dx, dy per corner in TL, TR, BR, BL order) as
    fractions of the image size.
    """
    off = np.asarray(offsets, dtype=float).reshape(4, 2)
    pre = compose(rotation(pre_rot), scaling(pre_scale))
    dst = pre.apply(UNIT_CORNERS) + 2.0 * off
    if not _is_convex_quad(dst):
        raise DegeneracyError("perturbed corners form a degenerate quadrilateral")
    return homography_from_points(UNIT_CORNERS, dst)


# sampled parameters -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TransformParams:
    kind: Kind
    raw: dict
    H: Homography
    target: np.ndarray | None = field(default=None)

    def to_record(self) -> dict:
        rec: dict = {"kind": self.kind.value}
        for k, v in self.raw.items():
            if isinstance(v, (list, tuple, np.ndarray)):
                for i, vi in enumerate(np.ravel(v)):
                    rec[f"{k}{i}"] = float(vi)
            else:
                rec[k] = v
        for i in range(3):
            for j in range(3):
                rec[f"h{i}{j}"] = float(self.H.m[i, j])
        return rec


def _with_target(kind: Kind, raw: dict, h: Homography) -> TransformParams:
    return TransformParams(kind, raw, h, encode_target_matrix(h, kind))


def sample_affine(rng: np.random.Generator, spec: AffineSpec) -> TransformParams:
    if not isinstance(spec, AffineSpec):
        raise ConfigError(f"expected AffineSpec, got {type(spec).__name__}")
    rot = rng.uniform(*spec.rot_range)
    tx = rng.uniform(*spec.trans_range)
    ty = rng.uniform(*spec.trans_range)
    scale = rng.uniform(*spec.scale_range)
    shear = rng.uniform(*spec.shear_range)
    raw = {"rotation": rot, "tx": tx, "ty": ty, "scale": scale, "shear": shear}
    return _with_target(Kind.AFFINE, raw, affine_matrix(rot, tx, ty, scale, shear))


def sample_projective(rng: np.random.Generator, spec: ProjectiveSpec) -> TransformParams:
    if not isinstance(spec, ProjectiveSpec):
        raise ConfigError(f"expected ProjectiveSpec, got {type(spec).__name__}")
    pre_scale = rng.uniform(*spec.pre_scale_range)
    rot_index = int(rng.integers(len(spec.pre_rot_set)))
    pre_rot = spec.pre_rot_set[rot_index]
    for _ in range(MAX_PROJECTIVE_ATTEMPTS):
        offsets = rng.uniform(*spec.corner_range, size=8)
        try:
            h = projective_from_offsets(offsets, pre_scale, pre_rot)
        except DegeneracyError:
            continue
        raw = {
            "offsets": offsets,
            "pre_scale": pre_scale,
            "pre_rot_index": rot_index,
            "pre_rot": pre_rot,
        }
        return _with_target(Kind.PROJECTIVE, raw, h)
    raise DegeneracyError(
        f"no valid projective quad after {MAX_PROJECTIVE_ATTEMPTS} attempts"
    )


def sample_categorical(rng: np.random.Generator, spec: CategoricalSpec) -> TransformParams:
    idx = int(rng.choice(spec.n_classes, p=spec.probs))
    raw = {"index": idx, "angle": spec.angles[idx]}
    return TransformParams(Kind.CATEGORICAL, raw, rotation(spec.angles[idx]))


def sample(rng: np.random.Generator, spec) -> TransformParams:
    if isinstance(spec, AffineSpec):
        return sample_affine(rng, spec)
    if isinstance(spec, ProjectiveSpec):
        return sample_projective(rng, spec)
    if isinstance(spec, CategoricalSpec):
        return sample_categorical(rng, spec)
    raise ConfigError(f"unknown transformation spec {spec!r}")


def spec_kind(spec) -> Kind:
    return {
        AffineSpec: Kind.AFFINE,
        ProjectiveSpec: Kind.PROJECTIVE,
        CategoricalSpec: Kind.CATEGORICAL,
    }[type(spec)]


# regression targets -----------------------------------------------------------

# Per-dimension mean / std of the packed homography entries under the
# (default-range) samplers, estimated from 10**6 draws with seed 20190101 by
# ``estimate_target_moments`` and frozen here.
TARGET_OFFSETS = {
    Kind.AFFINE: np.array([1.6071e-4, 4.4408e-4, -2.0640e-4, -2.0726e-4, -1.3036e-4, 6.3001e-4]),
    Kind.PROJECTIVE: np.array(
        [8.1560e-4, 3.2795e-4, 6.1098e-5, -1.4347e-4, 8.7869e-4, -2.8998e-5, 1.2809e-4, 1.4524e-6]
    ),
}
TARGET_SCALES = {
    Kind.AFFINE: np.array([0.717513, 0.753729, 0.230889, 0.717652, 0.753145, 0.230949]),
    Kind.PROJECTIVE: np.array(
        [0.711982, 0.711901, 0.102307, 0.711974, 0.711889, 0.102288, 0.0742255, 0.0742761]
    ),
}
TARGET_DIMS = {Kind.AFFINE: 6, Kind.PROJECTIVE: 8}


def _pack(m: np.ndarray, kind: Kind) -> np.ndarray:
    return m[:2].ravel().copy() if kind is Kind.AFFINE else m.ravel()[:8].copy()


def encode_target_matrix(h: Homography, kind: Kind) -> np.ndarray:
    kind = Kind(kind)
    if kind not in TARGET_DIMS:
        raise ConfigError(f"no regression encoding for {kind.value} transformations")
    return (_pack(h.m, kind) - TARGET_OFFSETS[kind]) / TARGET_SCALES[kind]


def encode_target(t: TransformParams) -> np.ndarray:
    return encode_target_matrix(t.H, t.kind)


def decode_target(v: np.ndarray, kind: Kind) -> Homography:
    kind = Kind(kind)
    if kind not in TARGET_DIMS:
        raise ConfigError(f"no regression encoding for {kind.value} transformations")
    v = np.asarray(v, dtype=float)
    if v.shape != (TARGET_DIMS[kind],):
        raise ShapeError(f"{kind.value} target must have shape ({TARGET_DIMS[kind]},), got {v.shape}")
    packed = v * TARGET_SCALES[kind] + TARGET_OFFSETS[kind]
    if kind is Kind.AFFINE:
        m = np.vstack([packed.reshape(2, 3), [0.0, 0.0, 1.0]])
    else:
        m = np.append(packed, 1.0).reshape(3, 3)
    return Homography(m)


def estimate_target_moments(kind: Kind, n: int = 10**6, seed: int = 20190101):
    """Mean and std of packed homography entries under the default sampler."""
    rng = np.random.default_rng(seed)
    spec = AffineSpec() if Kind(kind) is Kind.AFFINE else ProjectiveSpec()
    draw = sample_affine if Kind(kind) is Kind.AFFINE else sample_projective
    packed = np.array([_pack(draw(rng, spec).H.m, Kind(kind)) for _ in range(n)])
    return packed.mean(axis=0), packed.std(axis=0)
