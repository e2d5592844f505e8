"""Time-periodic McKean-Vlasov coefficients and the built-in examples."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import expr as ex
from .expr import Expr, ExprError
from .measure import ParticleCloud, moment

MAIN = "main"
COUPLED = "coupled"

BUILTINS = ("ex51_ou", "ex52_quartic", "ex53_forced", "zero")

EX51_DEFAULTS = {"a": 1.0, "b": 0.25, "c": 1.0, "sigma": 1.0}
EX53_FORCE_DEFAULT = 0.5


class ModelError(ValueError):
    pass


def _tuple2(rows):
    return tuple(tuple(r) for r in rows)


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of dX = b(t,X,L_X)dt + sigma(t,X,L_X)dW and of its coupled copy.

    ``coupled_drift``/``coupled_diffusion`` default to the main coefficients.
    ``trunc_radius`` evaluates all coefficients at the projection of x onto
    the closed ball of that radius.
    """

    d: int
    m: int
    T: float
    drift: tuple
    diffusion: tuple
    coupled_drift: tuple | None = None
    coupled_diffusion: tuple | None = None
    trunc_radius: float | None = None
    name: str = ""
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "drift", tuple(self.drift))
        object.__setattr__(self, "diffusion", _tuple2(self.diffusion))
        if self.coupled_drift is not None:
            object.__setattr__(self, "coupled_drift", tuple(self.coupled_drift))
        if self.coupled_diffusion is not None:
            object.__setattr__(self, "coupled_diffusion", _tuple2(self.coupled_diffusion))
        if not (isinstance(self.d, int) and 1 <= self.d <= ex.MAX_DIM):
            raise ModelError(f"d must be an integer in 1..{ex.MAX_DIM}")
        if not (isinstance(self.m, int) and self.m >= 1):
            raise ModelError("m must be a positive integer")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ModelError("T must be positive")
        if self.trunc_radius is not None and not self.trunc_radius > 0:
            raise ModelError("trunc_radius must be positive")
        for which in (MAIN, COUPLED):
            b, s = self.coefficients(which)
            if len(b) != self.d:
                raise ModelError(f"{which} drift has {len(b)} components, expected {self.d}")
            if len(s) != self.d or any(len(r) != self.m for r in s):
                raise ModelError(f"{which} diffusion must be {self.d}x{self.m}")
            for e in list(b) + [e for r in s for e in r]:
                try:
                    ex.validate(e, self.d, self.T)
                except ExprError as exc:
                    raise ModelError(f"{which} coefficient {ex.to_string(e)}: {exc}") from None

    def coefficients(self, which: str = MAIN):
        if which == MAIN:
            return self.drift, self.diffusion
        if which == COUPLED:
            return (self.coupled_drift if self.coupled_drift is not None else self.drift,
                    self.coupled_diffusion if self.coupled_diffusion is not None else self.diffusion)
        raise ModelError(f"unknown coefficient set {which!r}")

    @cached_property
    def obs_alphas(self) -> tuple:
        out = set()
        for which in (MAIN, COUPLED):
            b, s = self.coefficients(which)
            for e in list(b) + [e for r in s for e in r]:
                out |= ex.observables(e)
        return tuple(sorted(out))

    @cached_property
    def _compiled(self):
        out = {}
        for which in (MAIN, COUPLED):
            b, s = self.coefficients(which)
            out[which] = ([ex.compile_expr(e) for e in b],
                          [[ex.compile_expr(e) for e in r] for r in s])
        return out

    def observables(self, mu: ParticleCloud) -> dict:
        return {a: moment(mu, a) for a in self.obs_alphas}

    def clip(self, X: np.ndarray) -> np.ndarray:
        if self.trunc_radius is None:
            return X
        r = np.sqrt(np.einsum("ij,ij->i", X, X))
        out = r > self.trunc_radius
        if not out.any():
            return X
        X = X.copy()
        X[out] = X[out] / r[out, None] * self.trunc_radius
        return X

    def drift_values(self, which: str, t: float, X: np.ndarray, obs: dict) -> np.ndarray:
        """Drift at each row of X, shape (n, d)."""
        X = self.clip(X)
        fb, _ = self._compiled[which]
        out = np.empty((X.shape[0], self.d))
        for i, f in enumerate(fb):
            out[:, i] = f(t, X, obs)
        return out

    def diffusion_values(self, which: str, t: float, X: np.ndarray, obs: dict) -> np.ndarray:
        """Diffusion matrix at each row of X, shape (n, d, m)."""
        X = self.clip(X)
        _, fs = self._compiled[which]
        out = np.empty((X.shape[0], self.d, self.m))
        for i, row in enumerate(fs):
            for j, f in enumerate(row):
                out[:, i, j] = f(t, X, obs)
        return out

    def is_additive(self, which: str = MAIN) -> bool:
        _, s = self.coefficients(which)
        return all(ex.degree(e) == 0 for r in s for e in r)

    def with_coupled(self, drift=None, diffusion=None) -> "ModelSpec":
        return ModelSpec(self.d, self.m, self.T, self.drift, self.diffusion,
                         drift, diffusion, self.trunc_radius, self.name, dict(self.params))

    def with_truncation(self, radius: float | None) -> "ModelSpec":
        return ModelSpec(self.d, self.m, self.T, self.drift, self.diffusion,
                         self.coupled_drift, self.coupled_diffusion, radius, self.name,
                         dict(self.params))

    # --- JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        def vec(v):
            return [ex.to_string(e, period=self.T) for e in v]

        def mat(s):
            return [vec(r) for r in s]
        return {
            "name": self.name,
            "d": self.d,
            "m": self.m,
            "T": self.T,
            "drift": vec(self.drift),
            "diffusion": mat(self.diffusion),
            "coupled_drift": vec(self.coupled_drift) if self.coupled_drift is not None else None,
            "coupled_diffusion": (mat(self.coupled_diffusion)
                                  if self.coupled_diffusion is not None else None),
            "trunc_radius": self.trunc_radius,
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        allowed = {"name", "d", "m", "T", "drift", "diffusion", "coupled_drift",
                   "coupled_diffusion", "trunc_radius", "params"}
        unknown = set(doc) - allowed
        if unknown:
            raise ModelError(f"unknown model keys: {sorted(unknown)}")
        try:
            d, T = int(doc["d"]), float(doc["T"])
            drift, diffusion = doc["drift"], doc["diffusion"]
        except KeyError as exc:
            raise ModelError(f"model is missing {exc.args[0]!r}") from None
        m = int(doc.get("m", len(diffusion[0])))

        def vec(v):
            return tuple(ex.parse(s, T, d) for s in v)

        def mat(s):
            return tuple(vec(r) for r in s)
        try:
            return cls(d, m, T, vec(drift), mat(diffusion),
                       vec(doc["coupled_drift"]) if doc.get("coupled_drift") is not None else None,
                       mat(doc["coupled_diffusion"]) if doc.get("coupled_diffusion") is not None
                       else None,
                       doc.get("trunc_radius"), doc.get("name", ""), dict(doc.get("params") or {}))
        except ExprError as exc:
            raise ModelError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def load_model(ref, params: dict | None = None) -> ModelSpec:
    """Builtin name, path to a JSON file, or an inline dict."""
    if isinstance(ref, ModelSpec):
        return ref
    if isinstance(ref, dict):
        return ModelSpec.from_dict(ref)
    if isinstance(ref, str) and ref in BUILTINS:
        return builtin_example(ref, **(params or {}))
    p = Path(str(ref))
    if p.is_file():
        return ModelSpec.from_json(p.read_text())
    raise ModelError(f"unknown model {ref!r}")


# --- evaluation at a single point ---------------------------------------------

def _point(ms: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != ms.d:
        raise ModelError(f"point has dimension {x.size}, model has d={ms.d}")
    return x


def _obs_checked(ms: ModelSpec, mu: ParticleCloud) -> dict:
    if mu.d != ms.d:
        raise ModelError(f"cloud has dimension {mu.d}, model has d={ms.d}")
    return ms.observables(mu)


def eval_expr(e: Expr, t: float, x, mu: ParticleCloud) -> float:
    """Evaluate with observable atoms replaced by the weighted moments of mu."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if mu.d != x.size:
        raise ModelError(f"point has dimension {x.size}, cloud has d={mu.d}")
    return ex.evaluate(e, t, x, {a: moment(mu, a) for a in ex.observables(e)})


def eval_drift(ms: ModelSpec, which: str, t: float, x, mu: ParticleCloud) -> np.ndarray:
    x = ms.clip(_point(ms, x).reshape(1, -1))[0]
    o = _obs_checked(ms, mu)
    b, _ = ms.coefficients(which)
    return np.array([ex.evaluate(e, t, x, o) for e in b])


def eval_diffusion(ms: ModelSpec, which: str, t: float, x, mu: ParticleCloud) -> np.ndarray:
    x = ms.clip(_point(ms, x).reshape(1, -1))[0]
    o = _obs_checked(ms, mu)
    _, s = ms.coefficients(which)
    return np.array([[ex.evaluate(e, t, x, o) for e in r] for r in s])


# --- built-in examples ------------------------------------------------------------

TWO_PI = 2.0 * math.pi


def ou_drift(a: float, b: float, c: float, T: float = TWO_PI) -> Expr:
    x = ex.coord(0)
    return -a * x + b * ex.obs(1) + c * ex.sin(1, T)


def ex53_force(f0: float = EX53_FORCE_DEFAULT, T: float = TWO_PI) -> Expr:
    """Periodic restoring force -f0 (1 + cos t) x.

    With V = x^2 + int y^2 dmu its contribution to LV is
    -2 f0 (1 + cos t)(x^2 + |mu|_2^2) <= 0, so the forced model keeps the
    unforced Lyapunov function.
    """
    return -f0 * (1 + ex.cos(1, T)) * ex.coord(0)


def builtin_example(name: str, **params) -> ModelSpec:
    """Built-in models on R^1 with period 2*pi.

    ``ex51_ou``
        dX = (-a X + b E[X] + c sin t) dt + sigma dW, defaults a=1, b=0.25,
        c=1, sigma=1. Mean and second moment obey closed linear ODEs.
    ``ex52_quartic``
        dX = (-4X^3 + X sin(t)/8 + E[X]) dt + sqrt(2) X dW.
    ``ex53_forced``
        ``ex51_ou`` plus the force of :func:`ex53_force` (parameter ``f0``).
    ``zero``
        All coefficients zero.
    """
    T = TWO_PI
    if name == "ex51_ou" or name == "ex53_forced":
        p = dict(EX51_DEFAULTS)
        if name == "ex53_forced":
            p["f0"] = EX53_FORCE_DEFAULT
        unknown = set(params) - set(p)
        if unknown:
            raise ModelError(f"unknown parameters for {name}: {sorted(unknown)}")
        p.update({k: float(v) for k, v in params.items()})
        drift = ou_drift(p["a"], p["b"], p["c"], T)
        if name == "ex53_forced":
            drift = drift + ex53_force(p["f0"], T)
        return ModelSpec(1, 1, T, (drift,), ((ex.const(p["sigma"]),),), name=name, params=p)
    if name == "ex52_quartic":
        if params:
            raise ModelError("ex52_quartic takes no parameters")
        x = ex.coord(0)
        drift = -4 * x ** 3 + (1 / 8) * x * ex.sin(1, T) + ex.obs(1)
        return ModelSpec(1, 1, T, (drift,), ((math.sqrt(2) * x,),), name=name)
    if name == "zero":
        if params:
            raise ModelError("zero takes no parameters")
        return zero_model()
    raise ModelError(f"unknown builtin model {name!r}; choose from {', '.join(BUILTINS)}")


def zero_model(d: int = 1, T: float = TWO_PI) -> ModelSpec:
    z = ex.ZERO
    return ModelSpec(d, d, T, (z,) * d, tuple((z,) * d for _ in range(d)), name="zero")
