"""Sampling estimates of the sector constants of a nonlinearity.

Given ``f(x, u)`` and a box of states and inputs, the estimators below look
for the smallest constants such that, for all pairs in the box,

    Lipschitz:              |df| <= gamma |dx|
    one-sided Lipschitz:    <df, dx> <= rho |dx|^2
    quadratic inner bound:  |df|^2 <= phi <df, dx> + delta |dx|^2

with ``dx = x - xh`` and ``df = f(x, u) - f(xh, u)``.  The suprema are taken
over a deterministic pair sample made of three families: global
low-discrepancy pairs, local pairs around low-discrepancy anchors and local
pairs anchored at box vertices.  The last family matters for bilinear ``f``,
whose quotients are convex in the pair midpoint and peak at a vertex.

Random pair directions rarely line up with the worst direction of a
13-dimensional Jacobian, so the raw sample underestimates the suprema by
several percent.  The highest-scoring pairs are therefore improved by a short
adaptive random-search ascent inside the box before the maxima are taken.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .model import N_INPUTS, N_STATES, GfmParameters, InverterModel, X

Nonlinearity = Callable[[np.ndarray, np.ndarray], np.ndarray]

LOCAL_STEPS = (1e-3, 1e-2, 1e-1)
DEFAULT_SAFETY = 1.05
_BATCH = 20_000
REFINE_TOP = 64
REFINE_ITERS = 200


class DegenerateRegionError(ValueError):
    """The operating box has zero width along some axis."""


def default_phi_grid() -> np.ndarray:
    pos = np.logspace(-1.0, 2.0, 61)
    return np.concatenate([-pos[::-1], [0.0], pos])


@dataclass(frozen=True, eq=False)
class OperatingRegion:
    """Axis-aligned box of states and inputs."""

    state_bounds: np.ndarray
    input_bounds: np.ndarray

    def __post_init__(self):
        sb = np.array(self.state_bounds, dtype=float).reshape(-1, 2)
        ib = np.array(self.input_bounds, dtype=float).reshape(-1, 2)
        for name, b in (("state_bounds", sb), ("input_bounds", ib)):
            if not np.all(np.isfinite(b)):
                raise ValueError(f"{name} must be finite")
            if np.any(b[:, 0] > b[:, 1]):
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        sb.setflags(write=False)
        ib.setflags(write=False)
        object.__setattr__(self, "state_bounds", sb)
        object.__setattr__(self, "input_bounds", ib)

    @property
    def n_states(self) -> int:
        return self.state_bounds.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.input_bounds.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([self.state_bounds[:, 0], self.input_bounds[:, 0]])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([self.state_bounds[:, 1], self.input_bounds[:, 1]])

    def __eq__(self, other):
        if not isinstance(other, OperatingRegion):
            return NotImplemented
        return (np.array_equal(self.state_bounds, other.state_bounds)
                and np.array_equal(self.input_bounds, other.input_bounds))

    def __hash__(self):
        return hash((self.state_bounds.tobytes(), self.input_bounds.tobytes()))

    def contains(self, other: "OperatingRegion") -> bool:
        return bool(np.all(self.lower <= other.lower) and np.all(other.upper <= self.upper))

    def scaled(self, factor: float) -> "OperatingRegion":
        """Box with the same centre and every half-width multiplied by ``factor``."""
        def grow(b):
            mid = b.mean(axis=1, keepdims=True)
            return mid + factor * (b - mid)
        return OperatingRegion(grow(self.state_bounds), grow(self.input_bounds))

    def to_dict(self) -> dict:
        return {"state_bounds": self.state_bounds.tolist(),
                "input_bounds": self.input_bounds.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "OperatingRegion":
        return cls(np.asarray(data["state_bounds"], float),
                   np.asarray(data["input_bounds"], float).reshape(-1, 2))


@dataclass(frozen=True)
class SectorConstants:
    gamma: float
    rho: float
    delta: float
    phi: float
    region: OperatingRegion | None = None
    n_samples: int = 0
    seed: int | None = None
    safety: float = DEFAULT_SAFETY
    raw: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("gamma", "rho", "delta", "phi"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    def to_dict(self) -> dict:
        out = {"gamma": self.gamma, "rho": self.rho, "delta": self.delta, "phi": self.phi,
               "n_samples": self.n_samples, "seed": self.seed, "safety": self.safety,
               "raw": dict(self.raw)}
        if self.region is not None:
            out["region"] = self.region.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SectorConstants":
        region = data.get("region")
        return cls(
            gamma=float(data["gamma"]), rho=float(data["rho"]),
            delta=float(data["delta"]), phi=float(data["phi"]),
            region=OperatingRegion.from_dict(region) if region else None,
            n_samples=int(data.get("n_samples", 0)), seed=data.get("seed"),
            safety=float(data.get("safety", DEFAULT_SAFETY)),
            raw=dict(data.get("raw", {})),
        )


def published_constants() -> SectorConstants:
    """Reference constants for inverters #1 and #2; no sampling region comes with them."""
    return SectorConstants(gamma=44.7488, rho=22.3688, delta=-0.7493, phi=2.3599)


def _as_function(model) -> Nonlinearity:
    if isinstance(model, InverterModel):
        return model.phi
    if callable(model):
        return model
    raise TypeError("model must be an InverterModel or a callable f(x, u)")


def _check_region(region: OperatingRegion):
    width = region.upper - region.lower
    if region.n_states == 0 or np.any(width <= 0):
        raise DegenerateRegionError("operating region has zero volume")


@dataclass
class PairStatistics:
    """Per-pair quotients: |df|/|dx|, <df,dx>/|dx|^2 and |df|^2/|dx|^2."""

    lipschitz: np.ndarray
    one_sided: np.ndarray
    energy: np.ndarray

    def quadratic_delta(self, phi_values) -> np.ndarray:
        """``delta(phi) = max_pairs (energy - phi * one_sided)`` for each phi."""
        phi_values = np.atleast_1d(np.asarray(phi_values, float))
        out = np.full(phi_values.shape, -np.inf)
        for start in range(0, self.energy.size, _BATCH):
            e = self.energy[start:start + _BATCH]
            c = self.one_sided[start:start + _BATCH]
            out = np.maximum(out, (e[None, :] - phi_values[:, None] * c[None, :]).max(axis=1))
        return out


def sample_pairs(region: OperatingRegion, n_samples: int, seed: int | None = 0):
    """Deterministic pair sample ``(x, xh, u)`` inside ``region``.

    A quarter of the pairs are global, half are local around low-discrepancy
    anchors and a quarter are local around random box vertices.  Local steps
    are drawn from ``LOCAL_STEPS`` as fractions of the box width.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    _check_region(region)
    n, m = region.n_states, region.n_inputs
    lo, hi = region.lower, region.upper
    width = hi - lo
    rng = np.random.default_rng(seed)

    n_global = n_samples // 4
    n_corner = n_samples // 4
    n_local = n_samples - n_global - n_corner

    g = qmc.Halton(d=2 * n + m, scramble=True, seed=rng).random(n_global)
    x_g = lo[:n] + g[:, :n] * width[:n]
    xh_g = lo[:n] + g[:, n:2 * n] * width[:n]
    u_g = lo[n:] + g[:, 2 * n:] * width[n:]

    anchors = qmc.Halton(d=n + m, scramble=True, seed=rng).random(n_local)
    z_l = lo + anchors * width
    bits = rng.integers(0, 2, size=(n_corner, n + m))
    z_c = np.where(bits == 1, hi, lo)

    def perturb(z, inward):
        k = z.shape[0]
        step = np.asarray(LOCAL_STEPS)[rng.integers(0, len(LOCAL_STEPS), size=k)]
        v = rng.standard_normal((k, n))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        if inward is not None:
            v = np.abs(v) * np.where(inward[:, :n] == 1, -1.0, 1.0)
        xh = z[:, :n] + step[:, None] * width[:n] * v
        return z[:, :n], np.clip(xh, lo[:n], hi[:n]), z[:, n:]

    x_l, xh_l, u_l = perturb(z_l, None)
    x_c, xh_c, u_c = perturb(z_c, bits)
    x = np.concatenate([x_g, x_l, x_c])
    xh = np.concatenate([xh_g, xh_l, xh_c])
    u = np.concatenate([u_g, u_l, u_c])
    return x, xh, u


def pair_statistics(model, region: OperatingRegion, n_samples: int, seed: int | None = 0,
                    pairs=None) -> PairStatistics:
    fn = _as_function(model)
    x, xh, u = pairs if pairs is not None else sample_pairs(region, n_samples, seed)
    lip, osl, energy = [], [], []
    for start in range(0, x.shape[0], _BATCH):
        sl = slice(start, start + _BATCH)
        dx = x[sl] - xh[sl]
        df = np.asarray(fn(x[sl], u[sl]), float) - np.asarray(fn(xh[sl], u[sl]), float)
        df = df.reshape(dx.shape)
        nx2 = np.einsum("ij,ij->i", dx, dx)
        keep = nx2 > 0
        nf2 = np.einsum("ij,ij->i", df, df)[keep]
        inner = np.einsum("ij,ij->i", df, dx)[keep]
        nx2 = nx2[keep]
        lip.append(np.sqrt(nf2 / nx2))
        osl.append(inner / nx2)
        energy.append(nf2 / nx2)
    return PairStatistics(np.concatenate(lip), np.concatenate(osl), np.concatenate(energy))


def _quotients(fn, x, xh, u, phi=0.0):
    dx = x - xh
    df = np.asarray(fn(x, u), float) - np.asarray(fn(xh, u), float)
    df = df.reshape(dx.shape)
    nx2 = np.einsum("ij,ij->i", dx, dx)
    nf2 = np.einsum("ij,ij->i", df, df)
    inner = np.einsum("ij,ij->i", df, dx)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.stack([np.sqrt(nf2 / nx2), inner / nx2, (nf2 - phi * inner) / nx2])
    out[:, nx2 <= 0] = -np.inf
    return out


def refine_pairs(model, region: OperatingRegion, pairs, which: int, phi: float = 0.0,
                 n_top: int = REFINE_TOP, iters: int = REFINE_ITERS, seed: int | None = 0):
    """Push the ``n_top`` best pairs uphill for one quotient.

    ``which`` selects the quotient: 0 Lipschitz, 1 one-sided, 2 the quadratic
    bound residual ``(|df|^2 - phi <df, dx>) / |dx|^2``.  Each pair takes
    Gaussian steps scaled to the box width; a step is kept only when it
    raises the quotient, and the step size grows on success and shrinks on
    failure.  Returns the improved pairs.
    """
    fn = _as_function(model)
    x, xh, u = pairs
    n = region.n_states
    q = _quotients(fn, x, xh, u, phi)[which]
    top = np.argsort(q)[-min(n_top, q.size):]
    z = np.concatenate([x[top], xh[top], u[top]], axis=1)
    lo = np.concatenate([region.lower[:n], region.lower[:n], region.lower[n:]])
    hi = np.concatenate([region.upper[:n], region.upper[:n], region.upper[n:]])
    width = hi - lo
    best = q[top].copy()
    step = np.full(z.shape[0], 0.05)
    rng = np.random.default_rng(None if seed is None else [seed, which])
    for _ in range(iters):
        cand = np.clip(z + rng.standard_normal(z.shape) * width * step[:, None], lo, hi)
        qc = _quotients(fn, cand[:, :n], cand[:, n:2 * n], cand[:, 2 * n:], phi)[which]
        better = qc > best
        z[better] = cand[better]
        best[better] = qc[better]
        step = np.clip(np.where(better, 1.5 * step, 0.8 * step), 1e-6, 0.5)
    return z[:, :n], z[:, n:2 * n], z[:, 2 * n:]


def _join(*pair_sets):
    return tuple(np.concatenate(parts) for parts in zip(*pair_sets))


def refined_statistics(model, region: OperatingRegion, n_samples: int, seed: int | None = 0,
                       phi: float | None = None) -> PairStatistics:
    """Pair statistics of the sample plus ascent-refined worst pairs.

    With ``phi`` given the quadratic residual at that ``phi`` is refined too.
    """
    pairs = sample_pairs(region, n_samples, seed)
    extra = [refine_pairs(model, region, pairs, 0, seed=seed),
             refine_pairs(model, region, pairs, 1, seed=seed)]
    if phi is not None:
        extra.append(refine_pairs(model, region, pairs, 2, phi, seed=seed))
    return pair_statistics(model, region, n_samples, pairs=_join(pairs, *extra))


def _inflate(value: float, safety: float, floor: float) -> float:
    """Move ``value`` outward by ``(safety - 1) * max(|value|, floor)``."""
    return float(value + (safety - 1.0) * max(abs(value), floor))


def estimate_lipschitz(model, region: OperatingRegion, n_samples: int = 100_000,
                       seed: int | None = 0, safety: float = DEFAULT_SAFETY) -> float:
    stats = refined_statistics(model, region, n_samples, seed)
    return float(safety * stats.lipschitz.max())


def estimate_one_sided(model, region: OperatingRegion, n_samples: int = 100_000,
                       seed: int | None = 0, safety: float = DEFAULT_SAFETY) -> float:
    stats = refined_statistics(model, region, n_samples, seed)
    return _inflate(stats.one_sided.max(), safety, 1e-3 * stats.lipschitz.max())


def estimate_quadratic_bounds(model, region: OperatingRegion, n_samples: int = 100_000,
                              seed: int | None = 0, phi_grid=None,
                              safety: float = DEFAULT_SAFETY) -> tuple[float, float]:
    """Return ``(delta, phi)`` minimising ``delta + max(phi, 0) * rho`` over the grid."""
    c = estimate_sector_constants(model, region, n_samples, seed, phi_grid, safety)
    return c.delta, c.phi


def _select_quadratic(stats: PairStatistics, phi_grid, safety):
    grid = default_phi_grid() if phi_grid is None else np.asarray(phi_grid, float).ravel()
    if grid.size == 0:
        raise ValueError("phi_grid must not be empty")
    floor = 1e-3 * stats.lipschitz.max()
    rho = _inflate(stats.one_sided.max(), safety, floor)
    deltas = stats.quadratic_delta(grid)
    score = deltas + np.maximum(grid, 0.0) * rho
    best = int(np.argmin(score))
    delta = _inflate(deltas[best], safety, floor ** 2)
    return delta, float(grid[best]), float(deltas[best])


def estimate_sector_constants(model, region: OperatingRegion, n_samples: int = 100_000,
                              seed: int | None = 0, phi_grid=None,
                              safety: float = DEFAULT_SAFETY) -> SectorConstants:
    """All four constants from one shared, ascent-refined pair sample.

    ``phi`` is chosen on the refined sample, then the quadratic residual at
    that ``phi`` is refined as well and ``phi`` is chosen again.
    """
    if safety < 1.0:
        raise ValueError("safety factor must be at least 1")
    stats = refined_statistics(model, region, n_samples, seed)
    _, phi0, _ = _select_quadratic(stats, phi_grid, safety)
    stats = refined_statistics(model, region, n_samples, seed, phi=phi0)
    gamma_raw = float(stats.lipschitz.max())
    rho_raw = float(stats.one_sided.max())
    delta, phi, delta_raw = _select_quadratic(stats, phi_grid, safety)
    return SectorConstants(
        gamma=float(safety * gamma_raw),
        rho=_inflate(rho_raw, safety, 1e-3 * gamma_raw),
        delta=delta,
        phi=phi,
        region=region,
        n_samples=int(n_samples),
        seed=seed,
        safety=safety,
        raw={"gamma": gamma_raw, "rho": rho_raw, "delta": delta_raw},
    )


@dataclass(frozen=True)
class HoldoutReport:
    n_pairs: int
    lipschitz_violations: int
    one_sided_violations: int
    quadratic_violations: int

    @property
    def violations(self) -> int:
        return self.lipschitz_violations + self.one_sided_violations + self.quadratic_violations

    @property
    def passed(self) -> bool:
        return self.violations == 0


def validate_constants(constants: SectorConstants, model, region: OperatingRegion | None = None,
                       n_samples: int = 100_000, seed: int | None = 12345,
                       tol: float = 1e-9) -> HoldoutReport:
    """Count pairs of a fresh sample that break any of the three definitions.

    A pair counts as a violation when its quotient exceeds the stored
    constant by more than ``tol * max(1, |constant|)``.
    """
    region = region if region is not None else constants.region
    if region is None:
        raise ValueError("no region given and the constants carry none")
    stats = pair_statistics(model, region, n_samples, seed)
    c = constants

    def count(values, bound):
        return int(np.sum(values > bound + tol * max(1.0, abs(bound))))

    quad = stats.energy - c.phi * stats.one_sided
    return HoldoutReport(
        n_pairs=int(stats.lipschitz.size),
        lipschitz_violations=count(stats.lipschitz, c.gamma),
        one_sided_violations=count(stats.one_sided, c.rho),
        quadratic_violations=count(quad, c.delta),
    )


# Lower bounds on box half-widths for states whose settled value is near zero.
_STATE_FLOORS = {
    X.ALPHA: 0.1,
    X.PHI_D: 0.1, X.PHI_Q: 0.1,
    X.GAMMA_D: 0.1, X.GAMMA_Q: 0.1,
}
_CURRENTS = (X.I_LD, X.I_LQ, X.I_OD, X.I_OQ)


def default_region(x_steady, u_steady, params: GfmParameters,
                   state_factor: float = 1.5, current_factor: float = 2.0,
                   input_band: float = 0.5) -> OperatingRegion:
    """Box around a settled operating point.

    Non-current states satisfy ``|s| <= state_factor * |s_ss|``, currents
    ``|i| <= current_factor * I_rated`` and inputs lie within
    ``u_ss * (1 -+ input_band)``.  ``x_steady`` may hold several operating
    points (one per row); the box then covers all of them.  Half-widths of
    states that settle near zero are floored at 10 % of a nominal scale.
    """
    xs = np.atleast_2d(np.asarray(x_steady, float))
    us = np.atleast_2d(np.asarray(u_steady, float))
    if xs.shape[1] != N_STATES or us.shape[1] != N_INPUTS:
        raise ValueError("steady state must have 13 states and 5 inputs")
    mag = np.abs(xs).max(axis=0)
    scale = {
        X.P: 1e3 * params.power_rating_kva, X.Q: 1e3 * params.power_rating_kva,
        X.V_OD: params.voltage_rating_v, X.V_OQ: params.voltage_rating_v,
    }
    half = state_factor * mag
    for s in X:
        floor = _STATE_FLOORS.get(s, 0.1 * scale.get(s, 1.0))
        half[s] = max(half[s], floor)
    for s in _CURRENTS:
        half[s] = current_factor * params.rated_current
    state_bounds = np.stack([-half, half], axis=1)
    u_mag = np.abs(us).max(axis=0)
    u_lo = us.min(axis=0) - input_band * u_mag
    u_hi = us.max(axis=0) + input_band * u_mag
    # inputs sitting at zero still get a usable band
    pad = np.where(u_hi - u_lo > 0, 0.0, 0.1 * params.voltage_rating_v)
    input_bounds = np.stack([u_lo - pad, u_hi + pad], axis=1)
    return OperatingRegion(state_bounds, input_bounds)


__all__ = [
    "DegenerateRegionError", "OperatingRegion", "SectorConstants", "HoldoutReport",
    "PairStatistics", "default_phi_grid", "default_region", "published_constants",
    "sample_pairs", "pair_statistics", "refine_pairs", "refined_statistics", "estimate_lipschitz", "estimate_one_sided",
    "estimate_quadratic_bounds", "estimate_sector_constants", "validate_constants",
    "LOCAL_STEPS", "DEFAULT_SAFETY",
]
