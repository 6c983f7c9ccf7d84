"""Run configuration: one TOML file per run, validated before any solve."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .errors import ConfigError, TopogradError
from .exterior import ExteriorNumerics
from .mesh import InclusionShape
from .pde import MODES, MaterialSpec, NewtonSettings

_SECTIONS = ("domain", "omega", "Omega0", "materials", "mode", "numerics", "evaluation",
             "validation", "outputs")


@dataclass(frozen=True)
class Numerics:
    h: float = 0.02
    h_z: float = 0.002  # local edge length around evaluation points
    interface_ratio: float = 16.0
    n_seg: int = 64
    newton_tol: float = 1e-10
    max_iter: int = 50
    lin_tol: float = 1e-12
    s_order: int = 4
    R: float | None = None
    R_factor: float = 25.0
    h_interface: float = 0.05
    grading: float = 1.2
    patch_factor: float = 4.0
    exclusion_factor: float = 2.0

    def newton(self) -> NewtonSettings:
        return NewtonSettings(self.newton_tol, self.max_iter, lin_tol=self.lin_tol)

    def exterior(self) -> ExteriorNumerics:
        return ExteriorNumerics(self.R, self.R_factor, self.h_interface, self.grading, 0)


@dataclass(frozen=True)
class Evaluation:
    points: tuple = ()
    grid: tuple | None = None  # (x0, x1, y0, y1, nx, ny)
    pol_source: str = "numeric"


@dataclass(frozen=True)
class Validation:
    z: tuple = (0.7, 0.7)
    eps_list: tuple = (0.08, 0.04, 0.02, 0.01)
    identity_eps: float = 0.04


@dataclass(frozen=True)
class Outputs:
    directory: str = "out"
    formats: tuple = ("csv", "vtk", "json", "png")


def _shape_from(d, default_kind="disk") -> InclusionShape:
    kind = d.get("kind", default_kind)
    n_seg = int(d.get("n_seg", 64))
    center = tuple(map(float, d.get("center", (0.0, 0.0))))
    scale = float(d.get("scale", 1.0))
    if kind == "disk":
        params = (float(d.get("radius", 1.0)),)
    elif kind == "ellipse":
        params = (float(d["a"]), float(d["b"]))
    elif kind == "polygon":
        params = tuple((float(x), float(y)) for x, y in d["vertices"])
    else:
        raise ConfigError(f"unknown shape kind {kind!r}")
    return InclusionShape(kind, params, center, scale, n_seg)


def _shape_to(s: InclusionShape, placed: bool) -> dict:
    d = {"kind": s.kind, "n_seg": s.n_seg}
    if s.kind == "disk":
        d["radius"] = s.params[0]
    elif s.kind == "ellipse":
        d["a"], d["b"] = s.params
    else:
        d["vertices"] = [list(v) for v in s.params]
    if placed:
        d["center"] = list(s.center)
        d["scale"] = s.scale
    return d


@dataclass(frozen=True, eq=False)
class RunConfig:
    domain: tuple = (0.0, 1.0, 0.0, 1.0)
    omega: InclusionShape = InclusionShape.disk(1.0)
    Omega0: InclusionShape | None = None
    materials: MaterialSpec = field(default_factory=MaterialSpec)
    mode: str = "transmission"
    numerics: Numerics = Numerics()
    evaluation: Evaluation = Evaluation()
    validation: Validation = Validation()
    outputs: Outputs = Outputs()

    def to_dict(self) -> dict:
        d = {"domain": {"bounds": list(self.domain)}, "mode": self.mode,
             "omega": _shape_to(self.omega, False), "materials": self.materials.to_dict()}
        if self.Omega0 is not None:
            d["Omega0"] = _shape_to(self.Omega0, True)
        d["numerics"] = {k: v for k, v in asdict(self.numerics).items() if v is not None}
        ev = {"points": [list(p) for p in self.evaluation.points],
              "pol_source": self.evaluation.pol_source}
        if self.evaluation.grid is not None:
            ev["grid"] = list(self.evaluation.grid)
        d["evaluation"] = ev
        d["validation"] = {"z": list(self.validation.z), "eps_list": list(self.validation.eps_list),
                           "identity_eps": self.validation.identity_eps}
        d["outputs"] = {"directory": self.outputs.directory, "formats": list(self.outputs.formats)}
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def key(self) -> str:
        """Stable hash of the canonical serialisation."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.key())

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
        try:
            dom = d.get("domain", {})
            bounds = tuple(float(x) for x in dom.get("bounds", (0.0, 1.0, 0.0, 1.0)))
            if len(bounds) != 4:
                raise ConfigError("domain.bounds needs four numbers (x0, x1, y0, y1)")
            omega = _shape_from(d.get("omega", {}))
            if omega.center != (0.0, 0.0) or omega.scale != 1.0:
                raise ConfigError("omega is the reference shape; it takes no center or scale")
            Omega0 = _shape_from(d["Omega0"]) if "Omega0" in d else None
            materials = MaterialSpec.from_dict(d.get("materials", {}))
            mode = d.get("mode", "transmission")
            num = d.get("numerics", {})
            bad = set(num) - set(Numerics.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown numerics field(s): {', '.join(sorted(bad))}")
            numerics = Numerics(**num)
            ev = d.get("evaluation", {})
            evaluation = Evaluation(tuple(tuple(map(float, p)) for p in ev.get("points", ())),
                                    tuple(ev["grid"]) if "grid" in ev else None,
                                    ev.get("pol_source", "numeric"))
            va = d.get("validation", {})
            validation = Validation(tuple(map(float, va.get("z", (0.7, 0.7)))),
                                    tuple(map(float, va.get("eps_list", (0.08, 0.04, 0.02, 0.01)))),
                                    float(va.get("identity_eps", 0.04)))
            out = d.get("outputs", {})
            outputs = Outputs(str(out.get("directory", "out")),
                              tuple(out.get("formats", ("csv", "vtk", "json", "png"))))
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError, TopogradError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        cfg = cls(bounds, omega, Omega0, materials, mode, numerics, evaluation, validation, outputs)
        cfg.validate()
        return cfg

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"TOML syntax error: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {p}: {exc}") from exc
        try:
            return cls.loads(text)
        except ConfigError as exc:
            raise ConfigError(f"{p}: {exc}") from exc

    def validate(self) -> None:
        """Cross-field checks; raises ConfigError."""
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("domain.bounds: empty rectangle")
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        n = self.numerics
        if n.h <= 0 or n.h_z <= 0 or n.newton_tol <= 0 or n.lin_tol <= 0 or n.interface_ratio <= 0:
            raise ConfigError("numerics: sizes and tolerances must be positive")
        if n.s_order < 1:
            raise ConfigError("numerics.s_order must be >= 1")
        if self.evaluation.pol_source not in ("numeric", "analytic_disk"):
            raise ConfigError("evaluation.pol_source must be 'numeric' or 'analytic_disk'")
        if self.evaluation.pol_source == "analytic_disk" and self.omega.kind != "disk":
            raise ConfigError("evaluation.pol_source = 'analytic_disk' needs a disk omega")
        if self.evaluation.grid is not None and len(self.evaluation.grid) != 6:
            raise ConfigError("evaluation.grid needs (x0, x1, y0, y1, nx, ny)")
        eps = self.validation.eps_list
        if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("validation.eps_list must be positive and strictly decreasing")
        try:
            self.materials.validate(self.mode)
        except TopogradError as exc:
            raise ConfigError(f"materials: {exc}") from exc
        if self.mode == "extremal" and self.Omega0 is not None:
            raise ConfigError("extremal mode evaluates at Omega = empty; drop Omega0")
        rect = np.array([[x0, y0], [x1, y1]])
        if self.Omega0 is not None:
            p = self.Omega0.polygon_vertices()
            if p.min(0)[0] <= x0 or p.min(0)[1] <= y0 or p.max(0)[0] >= x1 or p.max(0)[1] >= y1:
                raise ConfigError("Omega0 does not fit inside the domain")
        z = np.asarray(self.validation.z)
        if not (rect[0] < z).all() or not (z < rect[1]).all():
            raise ConfigError("validation.z lies outside the domain")
        if eps:
            w = self.omega.placed(z, eps[0])
            p = w.polygon_vertices()
            if (p.min(0) <= rect[0]).any() or (p.max(0) >= rect[1]).any():
                raise ConfigError(f"omega at z with eps = {eps[0]} leaves the domain")
            if self.Omega0 is not None:
                from .mesh import _shapes_overlap
                if _shapes_overlap(w, self.Omega0):
                    raise ConfigError(f"omega at z with eps = {eps[0]} overlaps Omega0")

    def fitted_background(self) -> list:
        return [self.Omega0] if self.Omega0 is not None else []


def benchmark_config(mode: str = "transmission") -> RunConfig:
    """The semilinear benchmarks used by the acceptance suite."""
    from .pde import Nonlinearity, Source
    if mode == "extremal":
        mat = MaterialSpec.extremal(1.0, Nonlinearity("atan"), Source("constant", 1.0))
        return RunConfig(materials=mat, mode="extremal")
    mat = MaterialSpec(2.0, 1.0, Nonlinearity("cubic"), Nonlinearity("linear", 1.0),
                       Source("constant", 1.0), Source("constant", 1.0))
    return RunConfig(Omega0=InclusionShape.disk(0.15, center=(0.3, 0.3)), materials=mat)
