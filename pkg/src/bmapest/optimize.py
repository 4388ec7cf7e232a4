"""Estimating probability maps from observed contrasts.

Each epoch realizes maps from the parameterization, runs the differentiable
forward model against the observation, pulls the map gradient back onto the
parameters and takes one projected Adam (or SGD) step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from bmapest.config import load_config, section
from bmapest.errors import NumericalError, ValidationError
from bmapest.grad import forward, backward
from bmapest.loss import DOMAINS, LossSpec, loss
from bmapest.metrics import METRICS, MetricRow, aggregate, evaluate, fmt
from bmapest.phantom import TISSUES, ProbabilityMaps, TissueTable, synth_phantom
from bmapest.sequence import PRESET_NAMES, preset
from bmapest.simulator import compile_program, simulate_stack

__all__ = [
    "AdamState",
    "DirectPixel",
    "LinearAtlas",
    "LossSpec",
    "OptimConfig",
    "ScalarPerMap",
    "adam_step",
    "estimate",
    "load_run_config",
    "loss",
    "run_ablation",
    "sgd_step",
]

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
ABLATIONS = ("contrast_sweep", "param_sweep", "single_map", "loss_domain")


@dataclass(frozen=True)
class OptimConfig:
    epochs: int = 501
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    free_maps: tuple[str, ...] = TISSUES
    init: float = 1.0 / 3.0
    optimizer: str = "adam"

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValidationError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if not self.lr > 0:
            raise ValidationError(f"lr must be > 0, got {self.lr!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("betas must lie in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        free = tuple(self.free_maps)
        bad = [t for t in free if t not in TISSUES]
        if bad or not free:
            raise ValidationError(f"free_maps must be a nonempty subset of {TISSUES}, got {free}")
        object.__setattr__(self, "free_maps", tuple(t for t in TISSUES if t in free))
        object.__setattr__(self, "epochs", int(self.epochs))


# ---------------------------------------------------------------------------
# parameterizations: init -> realize -> pullback


def _clip01(x):
    return np.clip(x, 0.0, 1.0)


class DirectPixel:
    """Every pixel of every map is a free parameter."""

    name = "direct"

    def init(self, shape, config: OptimConfig) -> np.ndarray:
        return np.full((3,) + tuple(shape), config.init)

    def realize(self, params):
        return _clip01(params)

    def pullback(self, params, g_maps):
        return g_maps

    def project(self, params):
        return _clip01(params)


@dataclass
class LinearAtlas:
    """Per pixel and per map, a weighted sum of atlas subjects' values."""

    basis: list

    name = "atlas"

    def __post_init__(self):
        if not self.basis:
            raise ValidationError("LinearAtlas needs at least one basis subject")
        shapes = {m.shape for m in self.basis}
        if len(shapes) != 1:
            raise ValidationError(f"atlas subjects differ in shape: {sorted(shapes)}")
        self._b = np.stack([m.stack() for m in self.basis])  # (S, 3, h, w)

    def init(self, shape, config):
        if tuple(shape) != self._b.shape[2:]:
            raise ValidationError(f"atlas is {self._b.shape[2:]}, observation is {tuple(shape)}")
        # mean atlas
        return np.full(self._b.shape, 1.0 / len(self.basis))

    def _raw(self, params):
        return np.einsum("smhw,smhw->mhw", params, self._b)

    def realize(self, params):
        return _clip01(self._raw(params))

    def pullback(self, params, g_maps):
        raw = self._raw(params)
        inside = (raw >= 0.0) & (raw <= 1.0)
        return self._b * np.where(inside, g_maps, 0.0)[None]

    def project(self, params):
        return params


@dataclass
class ScalarPerMap:
    """One multiplier per map applied to a reference (mean atlas) map."""

    reference: ProbabilityMaps

    name = "scalar"

    def init(self, shape, config):
        if tuple(shape) != self.reference.shape:
            raise ValidationError(f"reference is {self.reference.shape}, observation is {tuple(shape)}")
        return np.ones(3)

    def realize(self, params):
        return _clip01(params[:, None, None] * self.reference.stack())

    def pullback(self, params, g_maps):
        ref = self.reference.stack()
        raw = params[:, None, None] * ref
        inside = (raw >= 0.0) & (raw <= 1.0)
        return np.sum(np.where(inside, g_maps, 0.0) * ref, axis=(1, 2))

    def project(self, params):
        return params


def mean_atlas(basis) -> ProbabilityMaps:
    return ProbabilityMaps.from_stack(np.mean([m.stack() for m in basis], axis=0))


def make_parameterization(kind: str, basis=None):
    if kind == "direct":
        return DirectPixel()
    if kind in ("atlas", "scalar") and not basis:
        raise ValidationError(f"{kind} parameterization needs atlas subjects")
    if kind == "atlas":
        return LinearAtlas(list(basis))
    if kind == "scalar":
        return ScalarPerMap(mean_atlas(basis))
    raise ValidationError(f"unknown parameterization {kind!r}; valid: direct, atlas, scalar")


# ---------------------------------------------------------------------------
# steps


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def _check_grad(grads, epoch):
    bad = ~np.isfinite(grads)
    if bad.any():
        idx = tuple(int(i) for i in np.unravel_index(int(np.flatnonzero(bad)[0]), grads.shape))
        raise NumericalError(f"non-finite gradient at epoch {epoch}, index {idx}")


def adam_step(params, grads, state: AdamState, config: OptimConfig, project=_clip01):
    """Bias-corrected Adam update followed by ``project``.

    The default projection clips to [0, 1], which is right whenever the
    parameters are the probabilities themselves.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValidationError(f"params {params.shape} and grads {grads.shape} differ")
    _check_grad(grads, state.t)
    t = state.t + 1
    m = config.beta1 * state.m + (1 - config.beta1) * grads
    v = config.beta2 * state.v + (1 - config.beta2) * grads * grads
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    new = params - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return project(new), AdamState(m, v, t)


def sgd_step(params, grads, state: AdamState, config: OptimConfig, project=_clip01):
    grads = np.asarray(grads, dtype=np.float64)
    _check_grad(grads, state.t)
    return project(params - config.lr * grads), AdamState(state.m, state.v, state.t + 1)


# ---------------------------------------------------------------------------
# estimation loop


def _free_mask(config):
    return np.array([t in config.free_maps for t in TISSUES])


def estimate(
    observed,
    sequences,
    table: TissueTable,
    param=None,
    lossspec: LossSpec = LossSpec(),
    config: OptimConfig = OptimConfig(),
    fixed: ProbabilityMaps | None = None,
    mode: str = "idealized",
    threads: int = 1,
    callback=None,
):
    """Fit probability maps to ``observed``; returns (maps, loss history).

    Maps not listed in ``config.free_maps`` are held at ``fixed``. The
    history has one entry per epoch: the loss before that epoch's step.
    """
    param = param or DirectPixel()
    shape = observed.images.shape[1:]
    free = _free_mask(config)
    if not free.all():
        if fixed is None:
            raise ValidationError("fixed maps are required when some maps are not free")
        if fixed.shape != shape:
            raise ValidationError(f"fixed maps are {fixed.shape}, observation is {shape}")
    held = fixed.stack() if fixed is not None else None
    programs = [compile_program(s) for s in sequences]
    step = adam_step if config.optimizer == "adam" else sgd_step

    def realize(p):
        maps = param.realize(p)
        if held is not None and not free.all():
            maps = np.where(free[:, None, None], maps, held)
        return maps

    p = param.init(shape, config)
    state = AdamState.zeros_like(p)
    history: list[float] = []
    for epoch in range(config.epochs):
        maps = realize(p)
        value, tape = forward(maps, table, programs, observed, lossspec, mode, threads)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at epoch {epoch}")
        history.append(value)
        g = backward(tape).stack()
        g = np.where(free[:, None, None], g, 0.0)
        p, state = step(p, param.pullback(p, g), state, config, project=param.project)
        if callback is not None:
            callback(epoch, value, maps)
    return ProbabilityMaps.from_stack(realize(p)), history


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            wr.writerow([i, repr(float(v))])


# ---------------------------------------------------------------------------
# config files


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def optim_config_from(cfg: dict[str, str], base: OptimConfig = OptimConfig()) -> OptimConfig:
    sec = section(cfg, "optim")
    conv = {
        "epochs": int, "lr": float, "beta1": float, "beta2": float, "eps": float, "seed": int, "init": float,
        "optimizer": str,
        "free_maps": lambda s: tuple(x.strip() for x in s.split(",") if x.strip()),
    }
    kw = {}
    for k, v in sec.items():
        if k not in conv:
            raise ValidationError(f"unknown key optim.{k}; valid keys: {', '.join('optim.' + c for c in conv)}")
        try:
            kw[k] = conv[k](v)
        except ValueError:
            raise ValidationError(f"optim.{k}: bad value {v!r}") from None
    return replace(base, **kw)


def loss_spec_from(cfg: dict[str, str], base: LossSpec = LossSpec()) -> LossSpec:
    sec = section(cfg, "loss")
    unknown = set(sec) - {"domain", "weights"}
    if unknown:
        raise ValidationError(f"unknown keys {sorted('loss.' + k for k in unknown)}; valid keys: loss.domain, loss.weights")
    domain = sec.get("domain", base.domain)
    weights = _floats(sec["weights"]) if "weights" in sec else base.weights
    return LossSpec(domain, weights)


def load_run_config(path):
    """(OptimConfig, LossSpec, TissueTable) from one ``key = value`` file."""
    cfg = load_config(path)
    known = ("optim", "loss") + TISSUES
    stray = [k for k in cfg if k.split(".", 1)[0] not in known]
    if stray:
        raise ValidationError(f"unknown config keys {stray}; prefixes must be one of {known}")
    return optim_config_from(cfg), loss_spec_from(cfg), TissueTable.from_config(cfg)


# ---------------------------------------------------------------------------
# ablations


def contrast_sets(matrix):
    """The 1 / 4 / 24 contrast configurations, all built on t1ir."""
    return {
        "1": [preset("t1ir", matrix, echo_times=(4.0,))],
        "4": [preset("t1ir", matrix)],
        "24": [preset(n, matrix) for n in PRESET_NAMES],
    }


@dataclass
class AblationResult:
    kind: str
    rows: dict = field(default_factory=dict)  # configuration -> list[MetricRow] over subjects

    def summary(self):
        """{configuration: {(tissue, metric): (mean, std)}}."""
        return {c: aggregate(rs) for c, rs in self.rows.items()}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["configuration", "tissue", *METRICS])
            for conf, agg in self.summary().items():
                for t in TISSUES:
                    wr.writerow([conf, t, *(fmt(*agg[(t, m)]) for m in METRICS)])


def run_ablation(
    kind: str,
    subjects=(1,),
    size: int = 16,
    config: OptimConfig = OptimConfig(),
    table: TissueTable | None = None,
    atlas_seeds=tuple(range(101, 120)),
    mode: str = "idealized",
    threads: int = 1,
    out=None,
) -> AblationResult:
    """Run one of the four ablation studies over synthetic subjects.

    Each subject is ``synth_phantom(seed, size)``; observations come from
    the 24-contrast protocol unless the study varies the protocol.
    """
    if kind not in ABLATIONS:
        raise ValidationError(f"unknown ablation {kind!r}; valid kinds: {', '.join(ABLATIONS)}")
    subjects = list(subjects)
    if not subjects:
        raise ValidationError("ablation needs at least one subject")
    table = table or TissueTable.default()
    matrix = (size, size)
    sets = contrast_sets(matrix)
    result = AblationResult(kind)

    def run(conf, truth, seqs, **kw):
        obs = simulate_stack(truth, table, seqs, mode=mode, threads=threads)
        est, hist = estimate(obs, seqs, table, mode=mode, threads=threads, **kw)
        log.info("%s %s: loss %.3e -> %.3e", kind, conf, hist[0] if hist else float("nan"), hist[-1] if hist else float("nan"))
        result.rows.setdefault(conf, []).extend(evaluate(est, truth))

    for s in subjects:
        truth = synth_phantom(s, size)
        if kind == "contrast_sweep":
            for conf, seqs in sets.items():
                run(conf, truth, seqs, config=config)
        elif kind == "param_sweep":
            basis = [synth_phantom(a, size) for a in atlas_seeds if a != s]
            for name in ("direct", "atlas", "scalar"):
                run(name, truth, sets["24"], param=make_parameterization(name, basis), config=config)
        elif kind == "single_map":
            run("all", truth, sets["24"], config=config)
            for t in TISSUES:
                run(t, truth, sets["24"], config=replace(config, free_maps=(t,)), fixed=truth)
        else:
            for dom in DOMAINS:
                run(dom, truth, sets["24"], lossspec=LossSpec(dom), config=config)
    if out is not None:
        result.write_csv(out)
    return result
