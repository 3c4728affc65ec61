"""INI run configurations and their translation into solver objects.

Layout (expressions are double-quoted)::

    [surface]
    type = parametric            ; parametric | advected | frames
    x1 = "exp(t/5)*sin(th)*cos(ph)"
    ...
    param.th = "0", "pi", open
    param.ph = "0", "2*pi", periodic

    [problem]
    eps = 0.001
    u0 = "0.5 + x1*x2*x3"
    source = none                ; none | manufactured | "<expr in x1..xd,t>"
    u_star = "<expr>"            ; optional exact solution
    form = consistent

    [discretization]
    algorithm = alg1
    theta = 0.5
    dt = 0.02
    T = 1
    h = 0.125                    ; or n_z = 800
    oversample = 1               ; or n_x = ...
    normals = analytic
    dt_rule = "h/4"              ; ladder coupling used by `converge`

    [kernel]
    mu = 4
    scale = 1

    [output]
    directory = out
    snapshot_every = 1
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diagnostics, surfaces
from .diagnostics import Monitor
from .exprdsl import ExprError, evaluate, parse
from .kernels import KernelError, KernelSpec
from .operators import OperatorForm
from .stepper import (AdvectedTrack, Algorithm, FrameTrack, ParametricTrack, ProblemSpec,
                      Solver)
from .surfaces import AmbientField, ParametricSurface


class ConfigError(ValueError):
    pass


def _float(x) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class ParamAxis:
    name: str
    lo: str
    hi: str
    periodic: bool


@dataclass(frozen=True)
class SurfaceConfig:
    type: str = "parametric"
    components: tuple[str, ...] = ()
    params: tuple[ParamAxis, ...] = ()
    orientation: int = 1
    path: str = ""
    velocity: tuple[str, ...] = ()
    z_stride: int = 1


@dataclass(frozen=True)
class ProblemConfig:
    eps: float = 1.0
    u0: str = "0"
    source: str = "none"
    u_star: str = ""
    form: str = "consistent"


@dataclass(frozen=True)
class DiscretizationConfig:
    algorithm: str = "alg1"
    theta: float = 0.5
    dt: float = 0.1
    T: float = 1.0
    h: float | None = None
    n_z: int | None = None
    n_x: int | None = None
    oversample: float = 1.0
    normals: str = "analytic"
    knn: int = 20
    dt_rule: str = ""
    ridge: float = 0.0
    ic_ridge: float = 0.0
    ladder_h: tuple[float, ...] = ()
    ladder_n_z: tuple[int, ...] = ()
    ladder_n_x: tuple[int, ...] = ()


@dataclass(frozen=True)
class KernelConfig:
    mu: float = 4.0
    scale: float = 1.0


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    snapshot_every: int = 1
    diagnostics: tuple[str, ...] = ("mass", "l2", "h1", "h2")
    error_resolution: int | None = None


@dataclass(frozen=True)
class RunConfig:
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: str = "."

    def at_level(self, k: int) -> "RunConfig":
        """Refinement level k of a ladder: h halves, dt follows dt_rule."""
        d = self.discretization
        if d.ladder_h:
            if k >= len(d.ladder_h):
                raise ConfigError(f"ladder defines {len(d.ladder_h)} levels, asked for level {k}")
            h = d.ladder_h[k]
        elif d.h is not None:
            h = d.h * 0.5**k
        else:
            raise ConfigError("a refinement ladder needs h or ladder_h")
        upd = {"h": h}
        if d.ladder_n_z:
            upd["n_z"] = d.ladder_n_z[k]
        elif d.n_z is not None and not d.ladder_h:
            upd["n_z"] = None
        if d.ladder_n_x:
            upd["n_x"] = d.ladder_n_x[k]
        if d.dt_rule:
            upd["dt"] = dt_from_rule(d.dt_rule, h)
        return replace(self, discretization=replace(d, **upd))


def dt_from_rule(rule: str, h: float) -> float:
    try:
        e = parse(rule, ["h"])
        dt = float(evaluate(e, {"h": np.float64(h)}))
    except ExprError as exc:
        raise ConfigError(f"bad dt_rule {rule!r}: {exc}") from None
    if not dt > 0:
        raise ConfigError("dt_rule must give a positive time step")
    return dt


# ------------------------------------------------------------------ parse


def _unquote(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == s[-1] == '"':
        return s[1:-1]
    return s


def _split(s: str) -> list[str]:
    out, cur, q = [], [], False
    for ch in s:
        if ch == '"':
            q = not q
            cur.append(ch)
        elif ch == "," and not q:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        out.append("".join(cur).strip())
    return out


def _num(sec, key, cast=float, default=None):
    if key not in sec or sec[key].strip() == "":
        return default
    try:
        return cast(sec[key])
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key} must be a {cast.__name__}, got {sec[key]!r}") from None


def _tuple(sec, key, cast):
    if key not in sec or not sec[key].strip():
        return ()
    try:
        return tuple(cast(_unquote(v)) for v in _split(sec[key]))
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key}: bad list {sec[key]!r}") from None


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if "surface" not in cp:
        raise ConfigError("missing [surface] section")
    if "problem" not in cp:
        raise ConfigError("missing [problem] section")
    s = cp["surface"]
    comps = []
    i = 1
    while f"x{i}" in s:
        comps.append(_unquote(s[f"x{i}"]))
        i += 1
    axes = []
    for key in s:
        if key.startswith("param."):
            parts = _split(s[key])
            if len(parts) != 3 or parts[2] not in ("open", "periodic"):
                raise ConfigError(f"{key} must be: \"lo\", \"hi\", open|periodic")
            axes.append(ParamAxis(key[6:], _unquote(parts[0]), _unquote(parts[1]), parts[2] == "periodic"))
    vel = []
    i = 1
    while f"v{i}" in s:
        vel.append(_unquote(s[f"v{i}"]))
        i += 1
    surf = SurfaceConfig(
        type=s.get("type", "parametric").strip(),
        components=tuple(comps),
        params=tuple(axes),
        orientation=_num(s, "orientation", int, 1),
        path=_unquote(s.get("path", "")),
        velocity=tuple(vel),
        z_stride=_num(s, "z_stride", int, 1),
    )
    p = cp["problem"]
    prob = ProblemConfig(
        eps=_num(p, "eps", float, 1.0),
        u0=_unquote(p.get("u0", "0")),
        source=_unquote(p.get("source", "none")),
        u_star=_unquote(p.get("u_star", "")),
        form=p.get("form", "consistent").strip(),
    )
    d = cp["discretization"] if "discretization" in cp else cp[configparser.DEFAULTSECT]
    disc = DiscretizationConfig(
        algorithm=d.get("algorithm", "alg1").strip(),
        theta=_num(d, "theta", float, 0.5),
        dt=_num(d, "dt", float, 0.1),
        T=_num(d, "T", float, 1.0),
        h=_num(d, "h", float),
        n_z=_num(d, "n_z", int),
        n_x=_num(d, "n_x", int),
        oversample=_num(d, "oversample", float, 1.0),
        normals=d.get("normals", "analytic").strip(),
        knn=_num(d, "knn", int, 20),
        dt_rule=_unquote(d.get("dt_rule", "")),
        ridge=_num(d, "ridge", float, 0.0),
        ic_ridge=_num(d, "ic_ridge", float, 0.0),
        ladder_h=_tuple(d, "ladder_h", float),
        ladder_n_z=_tuple(d, "ladder_n_z", int),
        ladder_n_x=_tuple(d, "ladder_n_x", int),
    )
    k = cp["kernel"] if "kernel" in cp else cp[configparser.DEFAULTSECT]
    kern = KernelConfig(mu=_num(k, "mu", float, 4.0), scale=_num(k, "scale", float, 1.0))
    o = cp["output"] if "output" in cp else cp[configparser.DEFAULTSECT]
    out = OutputConfig(
        directory=_unquote(o.get("directory", "out")),
        snapshot_every=_num(o, "snapshot_every", int, 1),
        diagnostics=_tuple(o, "diagnostics", str) or ("mass", "l2", "h1", "h2"),
        error_resolution=_num(o, "error_resolution", int),
    )
    cfg = RunConfig(surf, prob, disc, kern, out, base_dir)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), str(path.parent))


# -------------------------------------------------------------- serialize


def serialize_config(cfg: RunConfig) -> str:
    s, p, d, k, o = cfg.surface, cfg.problem, cfg.discretization, cfg.kernel, cfg.output
    lines = ["[surface]", f"type = {s.type}"]
    lines += [f'x{i + 1} = "{c}"' for i, c in enumerate(s.components)]
    lines += [f'param.{a.name} = "{a.lo}", "{a.hi}", {"periodic" if a.periodic else "open"}'
              for a in s.params]
    lines += [f'v{i + 1} = "{c}"' for i, c in enumerate(s.velocity)]
    lines += [f"orientation = {s.orientation}", f'path = "{s.path}"', f"z_stride = {s.z_stride}", ""]
    lines += ["[problem]", f"eps = {_float(p.eps)}", f'u0 = "{p.u0}"', f'source = "{p.source}"',
              f'u_star = "{p.u_star}"', f"form = {p.form}", ""]
    opt = lambda v, f=_float: "" if v is None else f(v)  # noqa: E731
    lst = lambda xs, f=_float: ", ".join(f(x) for x in xs)  # noqa: E731
    lines += ["[discretization]", f"algorithm = {d.algorithm}", f"theta = {_float(d.theta)}",
              f"dt = {_float(d.dt)}", f"T = {_float(d.T)}", f"h = {opt(d.h)}",
              f"n_z = {opt(d.n_z, str)}", f"n_x = {opt(d.n_x, str)}",
              f"oversample = {_float(d.oversample)}", f"normals = {d.normals}", f"knn = {d.knn}",
              f'dt_rule = "{d.dt_rule}"', f"ridge = {_float(d.ridge)}", f"ic_ridge = {_float(d.ic_ridge)}",
              f"ladder_h = {lst(d.ladder_h)}", f"ladder_n_z = {lst(d.ladder_n_z, str)}",
              f"ladder_n_x = {lst(d.ladder_n_x, str)}", ""]
    lines += ["[kernel]", f"mu = {_float(k.mu)}", f"scale = {_float(k.scale)}", ""]
    lines += ["[output]", f'directory = "{o.directory}"', f"snapshot_every = {o.snapshot_every}",
              f"diagnostics = {', '.join(o.diagnostics)}",
              f"error_resolution = {opt(o.error_resolution, str)}", ""]
    return "\n".join(lines)


# ---------------------------------------------------------------- validate


_ALGS = {a.value for a in Algorithm}


def _const(text: str, what: str) -> float:
    try:
        e = parse(text, [])
        return float(evaluate(e, {}))
    except ExprError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def validate(cfg: RunConfig) -> None:
    s, p, d, k = cfg.surface, cfg.problem, cfg.discretization, cfg.kernel
    if s.type not in ("parametric", "advected", "frames"):
        raise ConfigError(f"unknown surface type {s.type!r}")
    if s.type == "parametric":
        if len(s.components) not in (2, 3):
            raise ConfigError("parametric surfaces need x1, x2 (and x3)")
        if len(s.params) != len(s.components) - 1:
            raise ConfigError("parametric surfaces need one param.<name> per intrinsic axis")
        for a in s.params:
            if not _const(a.hi, f"param.{a.name}") > _const(a.lo, f"param.{a.name}"):
                raise ConfigError(f"param.{a.name} must have hi > lo")
        if d.h is None and d.n_z is None and not d.ladder_h:
            raise ConfigError("set h or n_z for parametric surfaces")
    else:
        if not s.path:
            raise ConfigError(f"surface type {s.type} needs a path")
        if not (Path(cfg.base_dir) / s.path).exists():
            raise ConfigError(f"surface path {s.path} does not exist")
        if s.type == "advected" and not s.velocity:
            raise ConfigError("advected surfaces need velocity components v1..vd")
    if s.z_stride < 1:
        raise ConfigError("z_stride must be >= 1")
    if d.algorithm not in _ALGS:
        raise ConfigError(f"algorithm must be one of {sorted(_ALGS)}")
    if d.algorithm == "alg1" and s.type != "parametric":
        raise ConfigError("alg1 needs a parametric surface")
    if p.form not in ("consistent", "literal"):
        raise ConfigError("form must be consistent or literal")
    if p.eps < 0:
        raise ConfigError("eps must be nonnegative")
    if not 0 <= d.theta <= 1:
        raise ConfigError("theta must be in [0, 1]")
    if not d.dt > 0 or d.T < 0:
        raise ConfigError("need dt > 0 and T >= 0")
    if d.normals not in ("analytic", "estimated"):
        raise ConfigError("normals must be analytic or estimated")
    if d.oversample < 1:
        raise ConfigError("oversample must be >= 1")
    if d.ridge < 0 or d.ic_ridge < 0:
        raise ConfigError("ridge parameters must be nonnegative")
    for name in ("ladder_n_z", "ladder_n_x"):
        xs = getattr(d, name)
        if xs and d.ladder_h and len(xs) != len(d.ladder_h):
            raise ConfigError(f"{name} must match ladder_h in length")
    if p.source == "manufactured" and not p.u_star:
        raise ConfigError("a manufactured source needs u_star")
    if p.source == "manufactured" and s.type != "parametric":
        raise ConfigError("manufactured sources need a parametric surface")
    try:
        KernelSpec(k.mu, len(s.components) or 3, k.scale)
    except KernelError as exc:
        raise ConfigError(str(exc)) from None
    if d.dt_rule:
        dt_from_rule(d.dt_rule, 1.0)


# ------------------------------------------------------------------ build


@dataclass
class Setup:
    problem: ProblemSpec
    solver: Solver
    track: object
    spec: KernelSpec
    observer: Monitor
    nodes: surfaces.CollocationSet | None
    h: float
    surface: ParametricSurface | None = None


def build_surface(cfg: RunConfig) -> ParametricSurface:
    s = cfg.surface
    return ParametricSurface.from_strings(
        s.components, [a.name for a in s.params],
        [(_const(a.lo, a.name), _const(a.hi, a.name)) for a in s.params],
        [a.periodic for a in s.params], s.orientation)


def build_setup(cfg: RunConfig) -> Setup:
    s, p, d, k, o = cfg.surface, cfg.problem, cfg.discretization, cfg.kernel, cfg.output
    try:
        if s.type == "parametric":
            surface = build_surface(cfg)
            dim = surface.d
        else:
            surface = None
            frames = surfaces.load_pointcloud_sequence(Path(cfg.base_dir) / s.path)
            dim = frames[0].d
        names = surfaces.ambient_names(dim) + ["t"]
        spec = KernelSpec(k.mu, dim, k.scale)
        u0 = parse(p.u0, names)
        u_star = parse(p.u_star, names) if p.u_star else None
        form = OperatorForm(p.form)
        if p.source in ("", "none", "0"):
            source = None
        elif p.source == "manufactured":
            source = diagnostics.manufactured_source(u_star, surface, p.eps, form)
        else:
            source = parse(p.source, names)
    except (ExprError, KernelError, surfaces.SurfaceError) as exc:
        raise ConfigError(str(exc)) from None

    problem = ProblemSpec(p.eps, d.dt, d.T, u0, source, d.theta, form, u_star)
    nodes = None
    h = float("nan")
    nspec = KernelSpec(4.0, dim)
    if s.type == "parametric":
        nodes = surfaces.generate_nodes(surface, 0.0, target_h=d.h if d.n_z is None else None,
                                        target_n=d.n_z, oversample_ratio=d.oversample,
                                        n_x=d.n_x, with_fill=False)
        h = d.h if d.h is not None else float("nan")
        track = ParametricTrack(surface, nodes, d.normals, d.knn, nspec)
        triangles = track.triangles
    elif s.type == "advected":
        f0 = frames[0]
        vel = AmbientField.from_strings(s.velocity, dim)
        X0 = f0.points
        xz = s.z_stride == 1
        track = AdvectedTrack(X0, X0[:: s.z_stride], vel, xz, f0.triangles, d.knn, nspec, f0.t)
        triangles = f0.triangles
    else:
        zi = np.arange(0, len(frames[0].points), s.z_stride)
        track = FrameTrack(frames, zi, d.knn, nspec)
        triangles = track.triangles
    solver = Solver(problem, track, spec, d.algorithm, d.ridge, d.ic_ridge)
    wanted = set(o.diagnostics)
    orders = tuple(i for i, n in enumerate(("l2", "h1", "h2")) if n in wanted)
    monitor = Monitor(spec, u_star if orders else None, surface, triangles,
                      o.error_resolution, orders or (0,))
    return Setup(problem, solver, track, spec, monitor, nodes, h, surface)
