"""Plain-text experiment configuration.

A config file is a list of ``key = value`` lines. Lines before any section
header belong to the run options; ``[model]`` describes the true model and
``[init]`` the initial estimate. ``#`` starts a comment. Matrices are
written row by row, rows separated by ``;`` and entries by ``,``::

    preset = gmm-scale
    trials = 50
    grid = 0, 1, 2.5

    [model]
    kind = gmm
    weights = 0.5, 0.5
    means = -2; 2
    stds = 2; 2

Model keys: ``kind`` (gmm | cmm | gamma); ``weights``; ``means`` and
``stds`` or ``variances`` for gmm; ``locations`` and ``dispersions`` for
cmm; ``alpha``, ``theta``, ``censor`` for gamma. ``[init]`` takes the same
keys and inherits anything it leaves out from ``[model]``.

Run keys (all optional): ``preset``, ``samples``, ``trials``, ``grid``,
``policies``, ``noise``, ``sigma``, ``s_n``, ``tau``, ``pna_fraction``,
``chaos_z0``, ``variant``, ``frozen``, ``tol``, ``max_iters``,
``criterion``, ``gem_step``, ``noise_target``, ``sample_sizes``,
``mc_samples``, ``data``, ``k``, ``centers``, ``spread``, ``assign_on``,
``mode``, ``steps``, ``schedule``, ``side``, ``seed``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .em import StopRule
from .errors import ConfigError, InputError
from .mixtures import CensoredGammaParams, CmmParams, GmmParams, ModelParams
from .nem import NoisePolicy, canonical_kind

RUN = "run"

PRESETS = {
    # two 1-D Gaussians with known means and weights; only the stds are estimated
    "gmm-scale": """
        samples = 200
        trials = 100
        frozen = weights, means
        tol = 2
        max_iters = 1000
        policies = nem
        grid = 0, 0.5, 1, 1.5, 2, 2.5, 3, 4, 5, 6
        [model]
        kind = gmm
        weights = 0.5, 0.5
        means = -2; 2
        stds = 2; 2
        [init]
        stds = 4.5; 5
    """,
    "gmm-diem": """
        preset = gmm-scale
        policies = diem
        grid = 0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1
    """,
    "gmm-chaotic": """
        preset = gmm-scale
        policies = chaotic
        grid = 0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1
    """,
    # Cauchy mixture, dispersions only
    "cmm-scale": """
        samples = 200
        trials = 200
        frozen = weights, locations
        tol = 2
        max_iters = 2000
        gem_step = 2
        policies = nem
        grid = 0, 0.05, 0.1, 0.15, 0.24, 0.35, 0.5, 0.75, 1
        [model]
        kind = cmm
        weights = 0.5, 0.5
        locations = 0; 3
        dispersions = 1; 1
        [init]
        dispersions = 2; 2.5
    """,
    # right-censored gamma with shape below 1; only theta is estimated
    "gamma-censored": """
        samples = 375
        trials = 100
        tol = 2
        max_iters = 1000
        policies = log-convex-iid
        grid = 0, 0.25, 0.5, 0.75, 1, 1.25, 1.5, 2, 3
        [model]
        kind = gamma
        alpha = 0.65
        theta = 4
        censor = 4.72
        [init]
        theta = 2
    """,
    # 2-D two-component mixture with every parameter estimated
    "gmm-2d-full": """
        samples = 225
        trials = 100
        tol = 2
        max_iters = 1000
        policies = nem
        grid = 0, 0.4, 0.8, 1.2, 1.6, 2, 3, 4
        [model]
        kind = gmm
        weights = 0.5, 0.5
        means = -2, -2; 2, 2
        stds = 2, 2; 2, 2
        [init]
        means = -1.5, -1.5; 1.5, 1.5
        stds = 4.5, 4.5; 5, 5
    """,
    # screened versus blind noise on overlapping components
    "nem-vs-blind": """
        samples = 225
        trials = 100
        frozen = weights, means
        tol = 2
        max_iters = 1000
        policies = nem, blind
        grid = 0, 0.05, 0.1, 0.17, 0.25, 0.3
        sample_sizes = 20, 50, 100, 225, 500, 1000
        sigma = 0.17
        [model]
        kind = gmm
        weights = 0.5, 0.5
        means = 0; 1
        stds = 1; 1
        [init]
        stds = 4.5; 5
    """,
    "sparsity": """
        trials = 50
        tol = 2
        max_iters = 1000
        noise = blind
        grid = 0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1
        sample_sizes = 20, 100, 1000
        [model]
        kind = gmm
        weights = 0.5, 0.5
        means = 0; 1
        stds = 1; 1
        [init]
        means = -0.5; 1.5
        stds = 2; 2.5
    """,
    "amprob": """
        mc_samples = 100000
        grid = 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1
        sample_sizes = 1, 2, 3, 4, 5, 6, 8, 10, 15, 20, 30, 40, 50, 60
        [model]
        kind = gmm
        weights = 0.5, 0.5
        means = 0; 1
        stds = 1; 1
    """,
    # three 2-D clusters with distinct diagonal covariances
    "cnbt": """
        samples = 300
        trials = 100
        tol = 4
        max_iters = 1000
        noise = nem
        grid = 0.1, 0.3, 1, 2, 3, 5, 8, 12
        [model]
        kind = gmm
        weights = 0.333333333333333333, 0.333333333333333333, 0.333333333333333334
        means = -2, 0; 2, 0; 0, 3
        stds = 1, 0.6; 0.7, 1.2; 1.1, 0.8
        [init]
        means = -1, 1; 1, -1; 0, 1.5
        stds = 1.5, 1.5; 1.5, 1.5; 1.5, 1.5
    """,
    # four 3-D clusters on scaled tetrahedron vertices, 2500 samples
    "kmeans": """
        samples = 2500
        trials = 100
        k = 4
        centers = 1.5, 1.5, 1.5; 1.5, -1.5, -1.5; -1.5, 1.5, -1.5; -1.5, -1.5, 1.5
        spread = 1
        tol = 4
        max_iters = 1000
        policies = blind
        assign_on = noisy
        grid = 0, 0.15, 0.3, 0.45, 0.6, 0.9, 1.2
    """,
    # four clusters on a rotated square of side 24
    "ucl": """
        mode = ucl
        side = 24
        spread = 2
        steps = 1500
        trials = 300
        schedule = variance
        grid = 0, 4, 16, 64, 128, 256
    """,
}


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    p.optionxform = str.lower
    return p


def _parse_text(text: str) -> dict:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    p = _parser()
    try:
        p.read_string(f"[{RUN}]\n" + "\n".join(lines))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    out = {}
    for sec in p.sections():
        name = sec.strip().lower()
        if name not in (RUN, "model", "init"):
            raise ConfigError(f"unknown config section [{sec}]")
        out.setdefault(name, {}).update(dict(p.items(sec)))
    return out


def merge(base: dict, over: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for sec, vals in over.items():
        out.setdefault(sec, {}).update(vals)
    return out


def load_text(text: str, _depth: int = 0) -> "ExperimentConfig":
    raw = _parse_text(text)
    preset = raw.get(RUN, {}).pop("preset", None)
    if preset is not None:
        if _depth > 4:
            raise ConfigError("presets nest too deeply")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {', '.join(sorted(PRESETS))}")
        base = load_text(PRESETS[preset], _depth + 1).raw
        raw = merge(base, raw)
    return ExperimentConfig(raw)


def load(path) -> "ExperimentConfig":
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return load_text(text)


def preset(name: str) -> "ExperimentConfig":
    return load_text(f"preset = {name}")


def parse_vector(text: str) -> np.ndarray:
    try:
        vec = np.array([float(v) for v in text.replace(";", ",").split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"not a list of numbers: {text!r}") from None
    if vec.size == 0 or not np.all(np.isfinite(vec)):
        raise ConfigError(f"need finite numbers: {text!r}")
    return vec


def parse_matrix(text: str) -> np.ndarray:
    rows = [r for r in text.split(";") if r.strip()]
    try:
        mat = [[float(v) for v in r.split(",") if v.strip()] for r in rows]
    except ValueError:
        raise ConfigError(f"not a matrix of numbers: {text!r}") from None
    if len({len(r) for r in mat}) != 1:
        raise ConfigError(f"ragged matrix: {text!r}")
    out = np.array(mat)
    if out.size == 0 or not np.all(np.isfinite(out)):
        raise ConfigError(f"need finite numbers: {text!r}")
    return out


def parse_list(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=dict)

    @property
    def run(self) -> dict:
        return self.raw.get(RUN, {})

    def get(self, key: str, default=None):
        return self.run.get(key, default)

    def require(self, key: str) -> str:
        if key not in self.run:
            raise ConfigError(f"config needs '{key}'")
        return self.run[key]

    def integer(self, key: str, default: Optional[int] = None) -> int:
        v = self.get(key)
        if v is None:
            if default is None:
                raise ConfigError(f"config needs '{key}'")
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"'{key}' must be an integer, got {v!r}") from None

    def number(self, key: str, default: Optional[float] = None) -> float:
        v = self.get(key)
        if v is None:
            if default is None:
                raise ConfigError(f"config needs '{key}'")
            return default
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"'{key}' must be a number, got {v!r}") from None

    def vector(self, key: str, default=None) -> np.ndarray:
        v = self.get(key)
        if v is None:
            if default is None:
                raise ConfigError(f"config needs '{key}'")
            return np.asarray(default, dtype=float)
        return parse_vector(v)

    def ints(self, key: str, default=None) -> list:
        return [int(round(x)) for x in self.vector(key, default)]

    def frozen(self) -> frozenset:
        return frozenset(parse_list(self.get("frozen", "")))

    def stop(self) -> StopRule:
        try:
            return StopRule(self.integer("tol", 4), self.integer("max_iters", 500),
                            self.get("criterion", "params"))
        except InputError as exc:
            raise ConfigError(str(exc)) from None

    def policies(self) -> list:
        names = parse_list(self.get("policies", self.get("noise", "nem")))
        return [self._policy(n) for n in names]

    def policy(self) -> NoisePolicy:
        return self._policy(self.get("noise", "none"))

    def _policy(self, name: str) -> NoisePolicy:
        try:
            return NoisePolicy(
                canonical_kind(name),
                sigma0=self.number("sigma", 0.0),
                tau=self.number("tau", 2.0),
                s_n=self.number("s_n", 0.0),
                pna_fraction=self.number("pna_fraction", 0.5),
                chaos_z0=self.number("chaos_z0", 0.123456789),
            )
        except InputError as exc:
            raise ConfigError(str(exc)) from None

    def model(self) -> ModelParams:
        return build_model(self.raw.get("model", {}))

    def init(self) -> ModelParams:
        return build_model(self.raw.get("model", {}), self.raw.get("init", {}))


def build_model(section: dict, override: Optional[dict] = None) -> ModelParams:
    vals = dict(section)
    vals.update(override or {})
    kind = vals.get("kind", "gmm").strip().lower()
    # the init section may switch between variances and stds
    if override and ("stds" in override) != ("variances" in override):
        vals.pop("variances" if "stds" in override else "stds", None)
    try:
        if kind == "gamma":
            return CensoredGammaParams(float(_need(vals, "alpha")), float(_need(vals, "theta")),
                                       float(_need(vals, "censor")))
        weights = parse_vector(_need(vals, "weights"))
        if kind == "gmm":
            means = parse_matrix(_need(vals, "means"))
            if "stds" in vals:
                return GmmParams.from_stds(weights, means, parse_matrix(vals["stds"]))
            return GmmParams(weights, means, parse_matrix(_need(vals, "variances")))
        if kind == "cmm":
            return CmmParams(weights, parse_matrix(_need(vals, "locations")),
                             parse_matrix(_need(vals, "dispersions")))
    except InputError as exc:
        raise ConfigError(f"invalid model: {exc}") from None
    raise ConfigError(f"unknown model kind {kind!r}")


def _need(vals: dict, key: str) -> str:
    if key not in vals:
        raise ConfigError(f"model section needs '{key}'")
    return vals[key]
