"""Pulse-sequence event programs and the FLASH preset family.

A :class:`Sequence` is a flat, immutable list of events. Each event maps onto
one EPG operation (``Pulse`` -> RF rotation, ``Wait`` -> relaxation,
``Grad`` -> configuration shift, ``Spoil`` -> ideal transverse spoiler,
``Diffuse`` -> scalar diffusion attenuation) or records a k-space sample
(``Adc``).

Spatial encoding is applied explicitly by the simulator from the ``Adc``
indices, so encoding gradients carry no intra-voxel dephasing: phase-encode
steps are emitted as ``Grad(0, "phase")`` markers and only the end-of-TR
crusher shifts the EPG state.

K-space indices are stored in FFT order (DC at line 0, sample 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

from bmapest.errors import FormatError, ValidationError
from bmapest.phantom import TissueTable

RF_SPOIL_INCREMENT = math.radians(117.0)
DEFAULT_ECHO_TIMES = (4.0, 9.0, 14.0, 19.0)
DEFAULT_FLIP = math.radians(15.0)
DEFAULT_TR = 20.0


@dataclass(frozen=True)
class Pulse:
    alpha: float
    phi: float = 0.0


@dataclass(frozen=True)
class Wait:
    t: float

    def __post_init__(self):
        if not self.t >= 0:
            raise ValidationError(f"Wait needs t >= 0, got {self.t}")


@dataclass(frozen=True)
class Grad:
    delta_n: int
    axis: str = "readout"

    def __post_init__(self):
        if self.axis not in ("readout", "phase"):
            raise ValidationError(f"Grad axis must be 'readout' or 'phase', got {self.axis!r}")


@dataclass(frozen=True)
class Spoil:
    pass


@dataclass(frozen=True)
class Diffuse:
    """Scalar attenuation exp(-b*D) of the whole magnetization (b in s/mm^2)."""

    b: float

    def __post_init__(self):
        if not self.b >= 0:
            raise ValidationError(f"Diffuse needs b >= 0, got {self.b}")


@dataclass(frozen=True)
class Adc:
    """One k-space sample.

    ``t_since_excitation`` is the echo-centre time of the readout this sample
    belongs to; ``dt`` is the sample's offset from the echo centre (used only
    by the intra-readout decay model). ``phase`` is the receiver phase.
    """

    line: int
    sample: int
    t_since_excitation: float
    contrast: int = 0
    phase: float = 0.0
    dt: float = 0.0


Event = Union[Pulse, Wait, Grad, Spoil, Diffuse, Adc]


@dataclass(frozen=True)
class NoPrep:
    pass


@dataclass(frozen=True)
class Inversion:
    ti: float

    def __post_init__(self):
        if not self.ti > 0:
            raise ValidationError(f"Inversion ti must be > 0, got {self.ti}")


@dataclass(frozen=True)
class DoubleInversion:
    """Two inversions; ``ti1``/``ti2`` are measured back from the excitation."""

    ti1: float
    ti2: float

    def __post_init__(self):
        if not (self.ti1 > self.ti2 > 0):
            raise ValidationError(f"DoubleInversion needs ti1 > ti2 > 0, got {self.ti1}, {self.ti2}")


@dataclass(frozen=True)
class T2Prep:
    """90-180-(-90) preparation; one contrast per entry of ``taus``."""

    taus: tuple[float, ...]

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if not taus or any(not t > 0 for t in taus):
            raise ValidationError(f"T2Prep taus must be non-empty and positive, got {self.taus}")
        object.__setattr__(self, "taus", taus)


@dataclass(frozen=True)
class DiffusionPrep:
    b: float

    def __post_init__(self):
        if not self.b >= 0:
            raise ValidationError(f"DiffusionPrep b must be >= 0, got {self.b}")


PrepModule = Union[NoPrep, Inversion, DoubleInversion, T2Prep, DiffusionPrep]


@dataclass(frozen=True)
class Sequence:
    name: str
    matrix: tuple[int, int]  # (nx, ny)
    events: tuple
    echo_times: tuple[float, ...]
    tr: float
    flip: float
    prep: PrepModule = field(default_factory=NoPrep)
    dwell: float = 0.0

    @property
    def n_contrasts(self) -> int:
        return len(self.echo_times)

    def adc_count(self, contrast: int | None = None) -> int:
        return sum(1 for e in self.events if isinstance(e, Adc) and (contrast is None or e.contrast == contrast))

    def validate(self):
        nx, ny = self.matrix
        if any(b <= a for a, b in zip(self.echo_times, self.echo_times[1:])):
            raise ValidationError(f"{self.name}: echo_times must be strictly increasing")
        seen: set[tuple[int, int, int]] = set()
        for e in self.events:
            if isinstance(e, Adc):
                if not (0 <= e.line < ny and 0 <= e.sample < nx and 0 <= e.contrast < self.n_contrasts):
                    raise ValidationError(f"{self.name}: Adc index out of range: {e}")
                key = (e.contrast, e.line, e.sample)
                if key in seen:
                    raise ValidationError(f"{self.name}: duplicate Adc sample {key}")
                seen.add(key)
        if len(seen) != nx * ny * self.n_contrasts:
            raise ValidationError(
                f"{self.name}: {len(seen)} Adc samples, expected {nx * ny} per contrast x {self.n_contrasts}"
            )


# ---------------------------------------------------------------------------
# builders


def _check_matrix(matrix):
    nx, ny = (int(v) for v in matrix)
    if nx < 1 or ny < 1:
        raise ValidationError(f"matrix must be positive, got {matrix}")
    return nx, ny


def phase_encode_order(ny: int, ordering: str = "linear") -> list[int]:
    """Storage line index (FFT order) for each acquisition slot."""
    if ordering == "linear":
        ks = [l - ny // 2 for l in range(ny)]
    elif ordering == "centric":
        ks = sorted(range(-(ny // 2), ny - ny // 2), key=lambda k: (abs(k), -k))
    else:
        raise ValidationError(f"unknown phase-encode ordering {ordering!r}; use 'linear' or 'centric'")
    return [k % ny for k in ks]


def _prep_events(prep) -> list:
    if isinstance(prep, NoPrep):
        return []
    if isinstance(prep, Inversion):
        return [Pulse(math.pi, 0.0), Grad(1), Spoil(), Wait(prep.ti)]
    if isinstance(prep, DoubleInversion):
        return [
            Pulse(math.pi, 0.0), Grad(1), Spoil(), Wait(prep.ti1 - prep.ti2),
            Pulse(math.pi, 0.0), Grad(1), Spoil(), Wait(prep.ti2),
        ]
    if isinstance(prep, DiffusionPrep):
        return [Diffuse(prep.b)]
    raise ValidationError(f"unsupported prep module {prep!r}")


def _t2prep_events(tau: float) -> list:
    # tip down along -y, refocus about y (CPMG), tip back up, crush residue
    return [
        Pulse(math.pi / 2, 0.0), Wait(tau / 2), Pulse(math.pi, math.pi / 2), Wait(tau / 2),
        Pulse(math.pi / 2, math.pi), Grad(1), Spoil(),
    ]


def _readout(nx, line, tes, dwell, phase, contrasts) -> list:
    """Waits and Adc rows of one TR after the excitation pulse (not the tail)."""
    out: list = [Grad(0, "phase")]
    t = 0.0
    for te, c in zip(tes, contrasts):
        out.append(Wait(te - t))
        t = te
        for s in range(nx):
            off = s - nx // 2
            out.append(Adc(line, off % nx, te, c, phase, off * dwell))
    return out


def build_flash(
    matrix,
    flip: float = DEFAULT_FLIP,
    tr: float = DEFAULT_TR,
    echo_times=DEFAULT_ECHO_TIMES,
    prep: PrepModule = NoPrep(),
    *,
    name: str = "flash",
    table: TissueTable | None = None,
    dwell: float | None = None,
    ordering: str = "linear",
    dummies: int | None = None,
    recovery: float | None = None,
) -> Sequence:
    """Spoiled multi-echo FLASH with an optional preparation module.

    Without preparation the sequence runs ``dummies`` silent TRs (default
    ``ceil(5 * max T1 / TR)``) to reach the spoiled steady state and then one
    TR per phase-encode line. With a preparation each line is its own shot:
    prep, one excitation, the echo readouts, crusher + spoiler, then a
    ``recovery`` wait (default 20 x max T1) back to equilibrium.

    For :class:`T2Prep`, ``echo_times`` must hold one readout TE; the
    sequence gets one contrast per tau with effective echo time tau + TE.
    """
    nx, ny = _check_matrix(matrix)
    table = table or TissueTable.default()
    tes = tuple(float(t) for t in echo_times)
    if not 1 <= len(tes) <= 8:
        raise ValidationError(f"need 1..8 echo times, got {len(tes)}")
    if any(t <= 0 for t in tes) or any(b <= a for a, b in zip(tes, tes[1:])):
        raise ValidationError(f"echo times must be positive and strictly increasing: {tes}")
    if not tr > 0:
        raise ValidationError(f"TR must be positive, got {tr}")
    if tes[-1] >= tr:
        raise ValidationError(f"echo time {tes[-1]} ms lies beyond TR {tr} ms")
    if isinstance(prep, T2Prep) and len(tes) != 1:
        raise ValidationError("T2Prep sequences take a single readout echo time")
    if dwell is None:
        gaps = [b - a for a, b in zip(tes, tes[1:])] + [2 * tes[0], 2 * (tr - tes[-1])]
        dwell = 0.9 * min(gaps) / nx
    if dwell * nx > min([2 * tes[0], 2 * (tr - tes[-1])] + [b - a for a, b in zip(tes, tes[1:])]) + 1e-12:
        raise ValidationError(f"readout of {nx} samples at dwell {dwell} ms does not fit between echoes")

    t1max = float(max(table.values("t1")))
    lines = phase_encode_order(ny, ordering)
    events: list = []
    k = 0  # excitation counter for RF spoiling

    def spoil_phase():
        nonlocal k
        phi = (RF_SPOIL_INCREMENT * k * (k + 1) / 2) % (2 * math.pi)
        k += 1
        return phi

    def tail(t_last):
        return [Wait(tr - t_last), Grad(1), Spoil()]

    if isinstance(prep, NoPrep):
        n_dummy = math.ceil(5 * t1max / tr) if dummies is None else int(dummies)
        for _ in range(n_dummy):
            events += [Pulse(flip, spoil_phase()), Wait(tr), Grad(1), Spoil()]
        for line in lines:
            phi = spoil_phase()
            events.append(Pulse(flip, phi))
            events += _readout(nx, line, tes, dwell, phi, range(len(tes)))
            events += tail(tes[-1])
        eff_tes = tes
    else:
        rec = 20.0 * t1max if recovery is None else float(recovery)
        if isinstance(prep, T2Prep):
            shots = [(_t2prep_events(tau), c) for c, tau in enumerate(prep.taus)]
            eff_tes = tuple(tau + tes[0] for tau in prep.taus)
        else:
            shots = [(_prep_events(prep), None)]
            eff_tes = tes
        for line in lines:
            for prep_ev, c in shots:
                phi = spoil_phase()
                events += prep_ev
                events.append(Pulse(flip, phi))
                contrasts = [c] if c is not None else range(len(tes))
                events += _readout(nx, line, tes, dwell, phi, contrasts)
                events += tail(tes[-1])
                events.append(Wait(rec))
    seq = Sequence(
        name=name, matrix=(nx, ny), events=tuple(events), echo_times=eff_tes,
        tr=float(tr), flip=float(flip), prep=prep, dwell=float(dwell),
    )
    seq.validate()
    return seq


# ---------------------------------------------------------------------------
# presets

PRESET_NAMES = ("t1ir", "me_flash", "t2prep", "dir", "flair", "dwi")


def bisect(f, lo: float, hi: float, tol: float) -> float:
    """Root of ``f`` on [lo, hi] by bisection; ``f(lo)`` and ``f(hi)`` must differ in sign."""
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if (flo > 0) == (fhi > 0):
        raise ValidationError(f"bisect: no sign change on [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def double_inversion_mz(ti1: float, ti2: float, t1: float) -> float:
    """Longitudinal magnetization (units of M0) at excitation after two ideal inversions."""
    mz = 1.0 - 2.0 * math.exp(-(ti1 - ti2) / t1)  # after first inversion and recovery
    return 1.0 - (1.0 + mz) * math.exp(-ti2 / t1)


def solve_dir_times(t1_a: float, t1_b: float, tol: float = 0.1) -> tuple[float, float]:
    """Inversion times (ti1, ti2) nulling two tissues, by nested bisection.

    ``t1_a`` must be the longer T1 (nulled through ti1 for each ti2); the
    outer search moves ti2 until ``t1_b`` is nulled too.
    """
    if not t1_a > t1_b > 0:
        raise ValidationError("solve_dir_times needs t1_a > t1_b > 0")
    ti2_max = t1_a * math.log(2.0)

    def ti1_for(ti2):
        return bisect(lambda ti1: double_inversion_mz(ti1, ti2, t1_a), ti2 + 1e-9, ti2 + 50.0 * t1_a, tol / 100)

    ti2 = bisect(lambda t: double_inversion_mz(ti1_for(t), t, t1_b), tol / 10, ti2_max - tol / 10, tol)
    return ti1_for(ti2), ti2


def preset(name: str, matrix=(16, 16), table: TissueTable | None = None, **overrides) -> Sequence:
    """One of the six FLASH variants with the default timing table.

    ``overrides`` may set ``flip``, ``tr``, ``echo_times``, ``ti`` (t1ir,
    flair), ``taus`` (t2prep), ``b`` (dwi), plus builder keywords
    (``dwell``, ``ordering``, ``dummies``, ``recovery``).
    """
    if name not in PRESET_NAMES:
        raise ValidationError(f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}")
    table = table or TissueTable.default()
    ov = dict(overrides)
    flip = ov.pop("flip", DEFAULT_FLIP)
    tr = ov.pop("tr", DEFAULT_TR)
    tes = tuple(ov.pop("echo_times", DEFAULT_ECHO_TIMES))
    ti = ov.pop("ti", None)
    taus = ov.pop("taus", (40.0, 80.0, 120.0, 160.0))
    b = ov.pop("b", 1000.0)
    builder_keys = {"dwell", "ordering", "dummies", "recovery"}
    unknown = set(ov) - builder_keys
    if unknown:
        raise ValidationError(f"unknown preset overrides {sorted(unknown)}")

    if name == "me_flash":
        prep = NoPrep()
    elif name == "t1ir":
        prep = Inversion(800.0 if ti is None else ti)
    elif name == "flair":
        prep = Inversion(math.log(2.0) * table.csf.t1 if ti is None else ti)
    elif name == "dir":
        ti1, ti2 = solve_dir_times(table.csf.t1, table.wm.t1)
        prep = DoubleInversion(ti1, ti2)
    elif name == "t2prep":
        prep = T2Prep(tuple(taus))
        tes = tes[:1]
    else:
        prep = DiffusionPrep(b)
    return build_flash(matrix, flip, tr, tes, prep, name=name, table=table, **ov)


def presets(names, matrix=(16, 16), table: TissueTable | None = None) -> list[Sequence]:
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    return [preset(n, matrix, table) for n in names]


# ---------------------------------------------------------------------------
# text serialization


def _prep_text(prep) -> str:
    if isinstance(prep, NoPrep):
        return "none"
    if isinstance(prep, Inversion):
        return f"inversion {prep.ti!r}"
    if isinstance(prep, DoubleInversion):
        return f"double_inversion {prep.ti1!r} {prep.ti2!r}"
    if isinstance(prep, T2Prep):
        return "t2prep " + " ".join(repr(t) for t in prep.taus)
    return f"diffusion {prep.b!r}"


def _parse_prep(fields_):
    kind, args = fields_[0], [float(v) for v in fields_[1:]]
    if kind == "none":
        return NoPrep()
    if kind == "inversion":
        return Inversion(*args)
    if kind == "double_inversion":
        return DoubleInversion(*args)
    if kind == "t2prep":
        return T2Prep(tuple(args))
    if kind == "diffusion":
        return DiffusionPrep(*args)
    raise ValueError(f"unknown prep {kind!r}")


def dumps(seq: Sequence) -> str:
    """Line-oriented text form: header lines then one event per line (ms, rad)."""
    nx, ny = seq.matrix
    out = [
        f"sequence {seq.name}",
        f"matrix {nx} {ny}",
        f"tr {seq.tr!r}",
        f"flip {seq.flip!r}",
        "echo_times " + " ".join(repr(t) for t in seq.echo_times),
        f"prep {_prep_text(seq.prep)}",
        f"dwell {seq.dwell!r}",
        "events",
    ]
    for e in seq.events:
        if isinstance(e, Pulse):
            out.append(f"pulse {e.alpha!r} {e.phi!r}")
        elif isinstance(e, Wait):
            out.append(f"wait {e.t!r}")
        elif isinstance(e, Grad):
            out.append(f"grad {e.delta_n} {e.axis}")
        elif isinstance(e, Spoil):
            out.append("spoil")
        elif isinstance(e, Diffuse):
            out.append(f"diffuse {e.b!r}")
        else:
            out.append(f"adc {e.line} {e.sample} {e.t_since_excitation!r} {e.contrast} {e.phase!r} {e.dt!r}")
    return "\n".join(out) + "\n"


def loads(text: str) -> Sequence:
    lines = text.splitlines()
    header: dict[str, list[str]] = {}
    i = 0
    try:
        while lines[i].strip() != "events":
            parts = lines[i].split()
            if parts:
                header[parts[0]] = parts[1:]
            i += 1
    except IndexError:
        raise FormatError("missing 'events' line") from None
    events = []
    for lineno, raw in enumerate(lines[i + 1:], start=i + 2):
        p = raw.split()
        if not p:
            continue
        try:
            kw = p[0]
            if kw == "pulse":
                events.append(Pulse(float(p[1]), float(p[2])))
            elif kw == "wait":
                events.append(Wait(float(p[1])))
            elif kw == "grad":
                events.append(Grad(int(p[1]), p[2]))
            elif kw == "spoil":
                events.append(Spoil())
            elif kw == "diffuse":
                events.append(Diffuse(float(p[1])))
            elif kw == "adc":
                events.append(Adc(int(p[1]), int(p[2]), float(p[3]), int(p[4]), float(p[5]), float(p[6])))
            else:
                raise ValueError(f"unknown event keyword {kw!r}")
        except (ValueError, IndexError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    try:
        seq = Sequence(
            name=header["sequence"][0],
            matrix=(int(header["matrix"][0]), int(header["matrix"][1])),
            events=tuple(events),
            echo_times=tuple(float(t) for t in header["echo_times"]),
            tr=float(header["tr"][0]),
            flip=float(header["flip"][0]),
            prep=_parse_prep(header["prep"]),
            dwell=float(header["dwell"][0]),
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise FormatError(f"bad sequence header: {exc}") from None
    return seq


def with_events(seq: Sequence, events) -> Sequence:
    return replace(seq, events=tuple(events))
