"""Tissue probability maps, tissue parameters and the linear mixing transform.

Maps are stored as 2D ``float64`` arrays indexed ``[y, x]`` (row-major), one
per tissue channel in the fixed order CSF, GM, WM.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from bmapest.errors import FormatError, ValidationError

TISSUES = ("csf", "gm", "wm")
PARAMS = ("t1", "t2", "t2_prime", "pd", "d")
# QuantitativeMaps attribute for each tissue parameter
QMAP_FIELDS = {"t1": "qt1", "t2": "qt2", "t2_prime": "qt2_prime", "pd": "pd", "d": "d"}

BMAP_MAGIC = b"BMAP1\n"
BMAP_HEADER = struct.Struct("<III")
BMAP_DATA_OFFSET = len(BMAP_MAGIC) + BMAP_HEADER.size

DEFAULT_PD_FLOOR = 1e-3


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class TissueParams:
    """Relaxation and density parameters of one pure tissue.

    Times are in ms, ``pd`` is relative proton density and ``d`` the
    diffusion coefficient in mm^2/s.
    """

    t1: float
    t2: float
    t2_prime: float
    pd: float
    d: float

    def __post_init__(self):
        if not self.t1 > 0 or not self.t2 > 0 or not self.t2_prime > 0:
            raise ValidationError(f"relaxation times must be positive: {self}")
        if self.t2 > self.t1:
            raise ValidationError(f"t2 ({self.t2}) exceeds t1 ({self.t1})")
        if not 0.0 <= self.pd <= 1.0:
            raise ValidationError(f"pd must lie in [0, 1], got {self.pd}")
        if not self.d >= 0:
            raise ValidationError(f"d must be non-negative, got {self.d}")


@dataclass(frozen=True)
class TissueTable:
    csf: TissueParams
    gm: TissueParams
    wm: TissueParams

    @classmethod
    def default(cls) -> "TissueTable":
        # Literature-style 1.5T values; placeholders, override via config.
        return cls(
            csf=TissueParams(t1=4000.0, t2=2000.0, t2_prime=3000.0, pd=1.0, d=3.0e-3),
            gm=TissueParams(t1=1100.0, t2=95.0, t2_prime=70.0, pd=0.85, d=0.8e-3),
            wm=TissueParams(t1=650.0, t2=75.0, t2_prime=60.0, pd=0.7, d=0.7e-3),
        )

    def tissue(self, name: str) -> TissueParams:
        if name not in TISSUES:
            raise ValidationError(f"unknown tissue {name!r}; expected one of {TISSUES}")
        return getattr(self, name)

    def values(self, param: str) -> np.ndarray:
        """The three tissue values of ``param`` in CSF, GM, WM order."""
        if param not in PARAMS:
            raise ValidationError(f"unknown tissue parameter {param!r}")
        return np.array([getattr(self.tissue(t), param) for t in TISSUES])

    def matrix(self) -> np.ndarray:
        """(len(PARAMS), 3) matrix M with quantitative = M @ probabilities."""
        return np.stack([self.values(p) for p in PARAMS])

    @classmethod
    def from_config(cls, cfg: dict[str, str], base: "TissueTable | None" = None) -> "TissueTable":
        """Override entries of ``base`` from ``tissue.param`` keys."""
        base = base or cls.default()
        known = {f"{t}.{p}" for t in TISSUES for p in PARAMS}
        updates: dict[str, dict[str, float]] = {t: {} for t in TISSUES}
        for key, value in cfg.items():
            if key.split(".", 1)[0] not in TISSUES:
                continue
            if key not in known:
                raise ValidationError(f"unknown tissue key {key!r}; valid keys: {sorted(known)}")
            t, p = key.split(".")
            try:
                updates[t][p] = float(value)
            except ValueError:
                raise ValidationError(f"{key}: not a number: {value!r}") from None
        kw = {}
        for t in TISSUES:
            old = base.tissue(t)
            kw[t] = TissueParams(**{**{f.name: getattr(old, f.name) for f in fields(old)}, **updates[t]})
        return cls(**kw)

    def to_config_text(self) -> str:
        lines = []
        for t in TISSUES:
            for p in PARAMS:
                lines.append(f"{t}.{p} = {getattr(self.tissue(t), p)!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ProbabilityMaps:
    """Per-pixel CSF/GM/WM fractions on a 2D grid."""

    csf: np.ndarray
    gm: np.ndarray
    wm: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, t)) for t in TISSUES]
        if any(a.ndim != 2 for a in arrs):
            raise ValidationError("probability channels must be 2D arrays")
        if len({a.shape for a in arrs}) != 1:
            raise ValidationError(
                "channel dimension mismatch: " + ", ".join(f"{t}={a.shape}" for t, a in zip(TISSUES, arrs))
            )
        for t, a in zip(TISSUES, arrs):
            object.__setattr__(self, t, _frozen(a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.csf.shape

    @property
    def height(self) -> int:
        return self.csf.shape[0]

    @property
    def width(self) -> int:
        return self.csf.shape[1]

    def stack(self) -> np.ndarray:
        """(3, height, width) copy in CSF, GM, WM order."""
        return np.stack([self.csf, self.gm, self.wm])

    @classmethod
    def from_stack(cls, arr) -> "ProbabilityMaps":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValidationError(f"expected a (3, h, w) array, got shape {arr.shape}")
        return cls(csf=arr[0], gm=arr[1], wm=arr[2])

    @classmethod
    def constant(cls, height: int, width: int, value: float = 1.0 / 3.0) -> "ProbabilityMaps":
        return cls.from_stack(np.full((3, height, width), value))

    def channel(self, name: str) -> np.ndarray:
        if name not in TISSUES:
            raise ValidationError(f"unknown tissue {name!r}")
        return getattr(self, name)

    def replace(self, **channels) -> "ProbabilityMaps":
        kw = {t: channels.get(t, getattr(self, t)) for t in TISSUES}
        return ProbabilityMaps(**kw)

    def check_range(self):
        """Raise if any value is NaN or outside [0, 1]; names the pixel."""
        for c, t in enumerate(TISSUES):
            a = getattr(self, t)
            bad = ~((a >= 0.0) & (a <= 1.0))
            if bad.any():
                idx = int(np.flatnonzero(bad)[0])
                y, x = divmod(idx, self.width)
                raise ValidationError(
                    f"{t} value {a.flat[idx]!r} out of [0, 1] at pixel index {idx} (x={x}, y={y})"
                )

    def simplex_excess(self) -> float:
        """Largest amount by which csf+gm+wm exceeds 1 (0 if never)."""
        return float(max(0.0, (self.csf + self.gm + self.wm - 1.0).max(initial=0.0)))


@dataclass(frozen=True)
class QuantitativeMaps:
    """Per-pixel quantitative parameters produced by :func:`mix`."""

    qt1: np.ndarray
    qt2: np.ndarray
    qt2_prime: np.ndarray
    pd: np.ndarray
    d: np.ndarray
    background_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        shapes = {np.shape(getattr(self, n)) for n in QMAP_FIELDS.values()}
        if len(shapes) != 1:
            raise ValidationError(f"quantitative map dimension mismatch: {shapes}")
        for n in QMAP_FIELDS.values():
            object.__setattr__(self, n, _frozen(getattr(self, n)))
        mask = self.background_mask
        if mask is None:
            mask = self.pd < DEFAULT_PD_FLOOR
        object.__setattr__(self, "background_mask", _frozen(mask, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pd.shape

    def param(self, name: str) -> np.ndarray:
        return getattr(self, QMAP_FIELDS[name])

    def t2_star(self) -> np.ndarray:
        return 1.0 / (1.0 / self.qt2 + 1.0 / self.qt2_prime)


def mix(maps: ProbabilityMaps, table: TissueTable, pd_floor: float = DEFAULT_PD_FLOOR) -> QuantitativeMaps:
    """Linear mixing of tissue constants by probability.

    Every quantitative channel (times included, not rates) is
    ``csf*v_csf + gm*v_gm + wm*v_wm``. Pixels whose mixed PD falls below
    ``pd_floor`` are flagged as background and excluded from simulation.
    """
    if not isinstance(maps, ProbabilityMaps):
        raise ValidationError("mix expects ProbabilityMaps")
    p = maps.stack()
    q = np.tensordot(table.matrix(), p, axes=(1, 0))
    kw = {QMAP_FIELDS[name]: q[i] for i, name in enumerate(PARAMS)}
    return QuantitativeMaps(**kw, background_mask=kw["pd"] < pd_floor)


def mix_adjoint(grads: dict[str, np.ndarray], table: TissueTable) -> np.ndarray:
    """Pull per-parameter gradients back to the (3, h, w) probability stack.

    ``grads`` maps tissue-parameter names (``t1``, ``pd`` ...) to arrays of
    dL/dparam; missing names count as zero.
    """
    m = table.matrix()
    out = None
    for i, name in enumerate(PARAMS):
        g = grads.get(name)
        if g is None:
            continue
        term = m[i][:, None, None] * np.asarray(g)[None]
        out = term if out is None else out + term
    if out is None:
        raise ValidationError("mix_adjoint: no gradients supplied")
    return out


# ---------------------------------------------------------------------------
# file formats


def write_bmap(path, data) -> None:
    """Write a (channels, height, width) float64 array as BMAP."""
    data = np.asarray(data, dtype="<f8")
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValidationError(f"BMAP payload must be 3D, got shape {data.shape}")
    c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(BMAP_MAGIC)
        fh.write(BMAP_HEADER.pack(w, h, c))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_bmap(path) -> np.ndarray:
    """Read a BMAP file into a (channels, height, width) array."""
    raw = Path(path).read_bytes()
    if raw[: len(BMAP_MAGIC)] != BMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(BMAP_MAGIC)]!r}", offset=0)
    if len(raw) < BMAP_DATA_OFFSET:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    w, h, c = BMAP_HEADER.unpack_from(raw, len(BMAP_MAGIC))
    expected = BMAP_DATA_OFFSET + 8 * w * h * c
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, got {len(raw)}", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes", offset=expected)
    data = np.frombuffer(raw, dtype="<f8", count=w * h * c, offset=BMAP_DATA_OFFSET)
    return data.reshape(c, h, w).astype(np.float64)


def save_maps(maps: ProbabilityMaps, path) -> None:
    write_bmap(path, maps.stack())


def load_maps(path) -> ProbabilityMaps:
    data = read_bmap(path)
    c, h, w = data.shape
    if c != 3:
        raise FormatError(f"{path}: expected 3 channels (csf, gm, wm), found {c}", offset=len(BMAP_MAGIC) + 8)
    flat = data.reshape(-1)
    bad = np.flatnonzero(~((flat >= 0.0) & (flat <= 1.0)))
    if bad.size:
        i = int(bad[0])
        ch, pix = divmod(i, h * w)
        what = "NaN" if np.isnan(flat[i]) else f"out-of-range value {flat[i]!r}"
        raise FormatError(
            f"{path}: {what} in channel {TISSUES[ch]} at pixel index {pix}",
            offset=BMAP_DATA_OFFSET + 8 * i,
        )
    return ProbabilityMaps.from_stack(data)


def save_maps_csv(maps: ProbabilityMaps, path) -> None:
    lines = ["x,y,csf,gm,wm"]
    for y in range(maps.height):
        for x in range(maps.width):
            lines.append(f"{x},{y},{float(maps.csf[y, x])!r},{float(maps.gm[y, x])!r},{float(maps.wm[y, x])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_maps_csv(path) -> ProbabilityMaps:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0].replace(" ", "") != "x,y,csf,gm,wm":
        raise FormatError(f"{path}: header must be 'x,y,csf,gm,wm'", offset=0)
    parsed = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row.strip():
            continue
        parts = row.split(",")
        if len(parts) != 5:
            raise FormatError(f"{path}: line {lineno}: expected 5 columns")
        try:
            parsed.append((int(parts[0]), int(parts[1]), *map(float, parts[2:])))
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: unparsable value") from None
    if not parsed:
        raise FormatError(f"{path}: no pixel rows")
    w = max(r[0] for r in parsed) + 1
    h = max(r[1] for r in parsed) + 1
    if len(parsed) != w * h:
        raise FormatError(f"{path}: {len(parsed)} rows do not cover a {w}x{h} grid")
    data = np.full((3, h, w), np.nan)
    for x, y, *vals in parsed:
        data[:, y, x] = vals
    maps = ProbabilityMaps.from_stack(data)
    maps.check_range()
    return maps


def import_raw(raw_path, sidecar_path=None) -> ProbabilityMaps:
    """Import 8-bit rasters (e.g. BrainWeb slices) with a JSON sidecar.

    The sidecar declares ``width``, ``height``, optional ``channels`` (order
    of the planes in the raw file, default csf/gm/wm) and optional ``scale``
    (default 1/255). Each plane is ``width*height`` unsigned bytes.
    """
    raw_path = Path(raw_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else raw_path.with_name(raw_path.name + ".json")
    try:
        meta = json.loads(sidecar_path.read_text())
        w, h = int(meta["width"]), int(meta["height"])
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{sidecar_path}: unusable sidecar ({exc})") from None
    order = list(meta.get("channels", TISSUES))
    if sorted(order) != sorted(TISSUES):
        raise FormatError(f"{sidecar_path}: channels must be a permutation of {TISSUES}")
    scale = float(meta.get("scale", 1.0 / 255.0))
    raw = raw_path.read_bytes()
    if len(raw) != 3 * w * h:
        raise FormatError(f"{raw_path}: expected {3 * w * h} bytes, got {len(raw)}", offset=min(len(raw), 3 * w * h))
    planes = np.frombuffer(raw, dtype=np.uint8).reshape(3, h, w).astype(np.float64) * scale
    maps = ProbabilityMaps(**{name: planes[order.index(name)] for name in TISSUES})
    maps.check_range()
    return maps


# ---------------------------------------------------------------------------
# synthetic phantoms


def _step(d, width):
    # smooth indicator of d > 0 with a partial-volume ramp of ~2*width pixels
    return 0.5 * (1.0 + np.tanh(d / width))


def synth_phantom(seed: int, size: int) -> ProbabilityMaps:
    """Deterministic brain-like phantom: CSF rim, cortical GM, WM core.

    Ventricles (CSF) and deep nuclei (GM) sit inside the WM. Boundaries are
    wobbled by a few low-order harmonics drawn from ``seed`` and smoothed to
    give partial-volume pixels. Channels are built hierarchically so that
    csf+gm+wm equals the head indicator, hence never exceeds 1.
    """
    if size < 8:
        raise ValidationError(f"synth_phantom needs size >= 8, got {size}")
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = c + rng.uniform(-0.03, 0.03) * size
    cy = c + rng.uniform(-0.03, 0.03) * size
    ang = np.arctan2(yy - cy, xx - cx)
    wobble = np.zeros_like(ang)
    for k in (2, 3, 5):
        wobble += rng.normal(0.0, 0.025) * np.cos(k * ang + rng.uniform(0, 2 * math.pi))
    aspect = rng.uniform(0.85, 1.0)
    r = np.hypot((xx - cx) * aspect, yy - cy) / (size / 2.0) * (1.0 + wobble)

    w = max(0.35, 0.04 * size)  # ramp width in pixels
    px = size / 2.0  # radius -> pixel scale
    head = _step((0.94 - r) * px, w)
    brain = _step((0.80 - r) * px, w)  # inside the CSF rim
    white = _step((0.56 + rng.uniform(-0.03, 0.03) - r) * px, w)  # inside the cortex

    # two ventricles either side of the midline
    vent = np.zeros_like(r)
    sep = rng.uniform(0.12, 0.18) * size
    for sgn in (-1.0, 1.0):
        vx = cx + sgn * sep / 2.0
        vy = cy + rng.uniform(-0.05, 0.05) * size
        rv = np.hypot((xx - vx) / 0.8, (yy - vy) / 1.25) / size
        vent = np.maximum(vent, _step((rng.uniform(0.075, 0.095) - rv) * size, w))
    # a deep grey nucleus below the ventricles
    nx_ = cx + rng.uniform(-0.05, 0.05) * size
    ny_ = cy + rng.uniform(0.16, 0.22) * size
    rn = np.hypot(xx - nx_, yy - ny_) / size
    nucleus = _step((rng.uniform(0.07, 0.09) - rn) * size, w)

    inner = head * brain * white
    csf = head * (1.0 - brain) + inner * vent
    gm = head * brain * (1.0 - white) + inner * (1.0 - vent) * nucleus
    wm = inner * (1.0 - vent) * (1.0 - nucleus)
    stack = np.stack([csf, gm, wm])
    # exact zeros far outside the head, keeps the background cleanly masked
    stack[stack < 1e-6] = 0.0
    return ProbabilityMaps.from_stack(np.clip(stack, 0.0, 1.0))
