"""Observer synthesis through linear matrix inequalities.

Two formulations are assembled here.  The Lipschitz one bounds the
nonlinearity by ``gamma`` alone.  The one-sided Lipschitz plus quadratic
inner-boundedness one (``olqb``) uses ``rho``, ``delta`` and ``phi``.  Each
problem carries a robustness block (disturbance to residual) and a
sensitivity block (fault to residual) that share one Lyapunov matrix ``P``
and one ``Y = P L``.

Conditioning
------------
Inverter matrices mix entries from 1e-5 to 1e7, and a useful gain has to
cancel the largest of them.  Interior-point solvers lose the thin feasible
set in that cancellation.  Two exact reparametrisations fix this:

* a prior gain ``L0`` (for inverters: the gain that re-injects the measured
  controller references) enters as ``Y = P L0 + Yt``.  The blocks stay
  affine in ``(P, Yt)`` and the feasible set is unchanged;
* an optional diagonal similarity ``x = T xt`` with powers of ten.

The returned design is always re-verified in the original coordinates.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import cvxpy as cp
import numpy as np

from .faults import FaultSignature, fault_signature
from .model import InverterModel, X, Y as Yslot

METHODS = ("lipschitz", "olqb")
OBJECTIVES = ("feasibility", "max_beta")
SOLVER_ENV = "GFM_FDI_SOLVER"
DEFAULT_SOLVER = "CLARABEL"
KAPPA_RELATIVE = 1e-6
BETA_CAP = 1e12
# a stronger static regularisation lets the interior-point factorisation
# survive the remaining spread of coefficients
SOLVER_DEFAULTS = {"CLARABEL": {"static_regularization_constant": 1e-7}}


class SynthesisError(RuntimeError):
    """Base class for synthesis outcomes that carry no usable gain."""

    def __init__(self, message: str, status: str = "", evidence: dict | None = None):
        super().__init__(message)
        self.status = status
        self.evidence = evidence or {}


class LmiInfeasible(SynthesisError):
    """The solver certified that no feasible point exists."""


class SolverNumericalFailure(SynthesisError):
    """The solver failed, or returned a point that did not verify."""


# --------------------------------------------------------------------------
# problem data

@dataclass(frozen=True)
class ErrorSystemMatrices:
    """Matrices of the estimation-error system.

    ``prior_gain`` is a conditioning aid, not a modelling choice: the
    solver searches ``Y = P prior_gain + Yt`` so any gain is still reachable.
    """

    A: np.ndarray
    C: np.ndarray
    E_w: np.ndarray
    F_w: np.ndarray
    E_f: np.ndarray
    F_f: np.ndarray
    W: np.ndarray | None = None
    prior_gain: np.ndarray | None = None
    fault_kind: str = ""

    def __post_init__(self):
        for name in ("A", "C", "E_w", "F_w", "E_f", "F_f"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))
        n, q = self.n, self.q
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.C.shape[1] != n:
            raise ValueError(f"C has {self.C.shape[1]} columns, expected {n}")
        if self.E_w.shape[0] != n or self.F_w.shape != (q, self.E_w.shape[1]):
            raise ValueError("disturbance matrices do not match the plant dimensions")
        if self.E_f.shape[0] != n or self.F_f.shape != (q, self.E_f.shape[1]):
            raise ValueError("fault matrices do not match the plant dimensions")
        W = np.eye(q) if self.W is None else np.asarray(self.W, float)
        if W.shape != (q, q):
            raise ValueError("W must be q x q")
        object.__setattr__(self, "W", W)
        L0 = np.zeros((n, q)) if self.prior_gain is None else np.asarray(self.prior_gain, float)
        if L0.shape != (n, q):
            raise ValueError("prior gain must be n x q")
        object.__setattr__(self, "prior_gain", L0)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @property
    def n_w(self) -> int:
        return self.E_w.shape[1]

    @property
    def n_f(self) -> int:
        return self.E_f.shape[1]

    @classmethod
    def from_model(cls, model: InverterModel, fault: FaultSignature | str,
                   prior_gain: np.ndarray | None | str = "structural") -> "ErrorSystemMatrices":
        sig = fault if isinstance(fault, FaultSignature) else fault_signature(fault, model.params)
        if isinstance(prior_gain, str):
            if prior_gain != "structural":
                raise ValueError(f"unknown prior gain {prior_gain!r}")
            prior_gain = structural_gain(model)
        return cls(model.A, model.C, model.B, model.D, sig.E_f, sig.F_f,
                   prior_gain=prior_gain, fault_kind=str(sig.kind.value))


def structural_gain(model: InverterModel, angle_rate: float = 100.0) -> np.ndarray:
    """Gain that substitutes measured controller signals into the observer.

    The frequency measurement drives the angle, the voltage reference drives
    the voltage integrator, the current references drive the current
    integrators and the modulation references drive the filter currents.
    What is left of ``A - L0 C`` are the physical filter time constants.
    """
    L = np.zeros((model.A.shape[0], model.C.shape[0]))
    L[X.ALPHA, Yslot.OMEGA] = 1.0
    L[X.ALPHA, Yslot.ALPHA] = angle_rate
    L[X.PHI_D, Yslot.V_OD_REF] = 1.0
    L[X.GAMMA_D, Yslot.I_LD_REF] = 1.0
    L[X.GAMMA_Q, Yslot.I_LQ_REF] = 1.0
    L[X.I_LD, Yslot.V_ID_REF] = 1.0 / model.params.l_f
    L[X.I_LQ, Yslot.V_IQ_REF] = 1.0 / model.params.l_f
    return L


# --------------------------------------------------------------------------
# block assembly

def _reduced(M, L0, F):
    """``M - L0 F`` with cancellation noise set to exact zero."""
    R = M - L0 @ F
    ref = max(float(np.abs(M).max(initial=0.0)), float(np.abs(L0 @ F).max(initial=0.0)))
    R[np.abs(R) <= 1e-13 * ref] = 0.0
    return R


def _blocks(sys: ErrorSystemMatrices, method: str, consts: dict, P, Y, eps, a, b, bmat, T=None,
            prior: bool = False):
    """Robustness and sensitivity blocks for numeric or symbolic arguments.

    With a similarity ``T`` the arguments are the transformed ``P``, ``Y``
    and the blocks are congruent to the original ones.  With ``prior`` the
    argument ``Y`` is the offset ``Yt`` in ``Y = P L0 + Yt`` and the plant
    matrices enter already reduced by the prior gain.
    """
    n = sys.n
    t = np.ones(n) if T is None else np.asarray(T, float)
    Ti = 1.0 / t
    if prior:
        L0 = sys.prior_gain
        A_, Ew_, Ef_ = (_reduced(sys.A, L0, sys.C), _reduced(sys.E_w, L0, sys.F_w),
                        _reduced(sys.E_f, L0, sys.F_f))
    else:
        A_, Ew_, Ef_ = sys.A, sys.E_w, sys.E_f
    A = Ti[:, None] * A_ * t[None, :]
    Cw = sys.W @ sys.C * t[None, :]
    C = sys.C * t[None, :]
    Ew = Ti[:, None] * Ew_
    Ef = Ti[:, None] * Ef_
    Fw = sys.W @ sys.F_w
    Ff = sys.W @ sys.F_f
    Fw_raw, Ff_raw = sys.F_w, sys.F_f
    T2 = np.diag(t**2)

    if method == "olqb":
        rho, delta, phi = consts["rho"], consts["delta"], consts["phi"]
        s1 = eps[0] * rho + eps[1] * delta
        c1 = 0.5 * (eps[1] * phi - eps[0])
        s2 = eps[2] * rho + eps[3] * delta
        c2 = 0.5 * (eps[3] * phi - eps[2])
        d1, d2 = eps[1], eps[3]
    elif method == "lipschitz":
        g2 = consts["gamma"] ** 2
        s1, c1, d1 = eps[0] * g2, 0.0, eps[0]
        s2, c2, d2 = eps[1] * g2, 0.0, eps[1]
    else:
        raise ValueError(f"unknown method {method!r}")

    PA = P @ A - Y @ C
    Zwn = np.zeros((sys.n_w, n))
    Zfn = np.zeros((sys.n_f, n))

    X1 = P @ Ew - Y @ Fw_raw + Cw.T @ Fw
    K1 = P + c1 * T2
    M1 = bmat([
        [PA + PA.T + Cw.T @ Cw + s1 * T2, X1, K1],
        [X1.T, Fw.T @ Fw - a * np.eye(sys.n_w), Zwn],
        [K1.T, Zwn.T, -d1 * T2],
    ])
    X2 = P @ Ef - Y @ Ff_raw - Cw.T @ Ff
    K2 = P + c2 * T2
    M2 = bmat([
        [PA + PA.T - Cw.T @ Cw + s2 * T2, X2, K2],
        [X2.T, Ff.T @ Ff - b * np.eye(sys.n_f), Zfn],
        [K2.T, Zfn.T, -d2 * T2],
    ])
    return [M1, M2]


def evaluate_blocks(sys: ErrorSystemMatrices, method: str, constants, P, Y, eps, a, b) -> list[np.ndarray]:
    """Numeric blocks in original coordinates, symmetrised."""
    out = _blocks(sys, method, _consts(constants, method), np.asarray(P, float), np.asarray(Y, float),
                  np.asarray(eps, float), float(a), float(b), np.block)
    return [0.5 * (M + M.T) for M in out]


def block_margins(blocks) -> list[float]:
    return [float(np.linalg.eigvalsh(M).max()) for M in blocks]


def _consts(constants, method: str) -> dict:
    if isinstance(constants, dict):
        src = constants
    elif np.isscalar(constants):
        src = {"gamma": float(constants)}
    else:
        src = {k: getattr(constants, k) for k in ("gamma", "rho", "delta", "phi") if hasattr(constants, k)}
    need = ("rho", "delta", "phi") if method == "olqb" else ("gamma",)
    missing = [k for k in need if k not in src]
    if missing:
        raise ValueError(f"{method} needs constants {missing}")
    return {k: float(src[k]) for k in need}


@dataclass
class LmiProblem:
    """Decision variables and constraint blocks of one synthesis problem.

    ``a`` and ``b`` are the squared performance levels.  ``kappa`` realises
    strictness: every block is required to be at most ``-kappa I``.
    """

    system: ErrorSystemMatrices
    method: str
    constants: dict
    alpha: float
    beta: float
    objective: str = "feasibility"
    kappa: float | None = None
    beta_cap: float = BETA_CAP

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        self.constants = _consts(self.constants, self.method)
        if self.kappa is None:
            self.kappa = KAPPA_RELATIVE * self.scale

    @property
    def n_eps(self) -> int:
        return 4 if self.method == "olqb" else 2

    @property
    def scale(self) -> float:
        """Largest absolute entry of the constant parts of the blocks."""
        s = self.system
        Cw = s.W @ s.C
        parts = [Cw.T @ Cw, Cw.T @ s.W @ s.F_w, Cw.T @ s.W @ s.F_f,
                 s.F_w.T @ s.F_w, s.F_f.T @ s.F_f]
        return max(1.0, max(float(np.abs(p).max()) for p in parts if p.size))

    def blocks(self, P, Y, eps, a=None, b=None) -> list[np.ndarray]:
        a = self.alpha**2 if a is None else a
        b = self.beta**2 if b is None else b
        return evaluate_blocks(self.system, self.method, self.constants, P, Y, eps, a, b)

    def build(self, T=None):
        """cvxpy problem in coordinates scaled by the similarity ``T``."""
        s = self.system
        n, q = s.n, s.q
        t = np.ones(n) if T is None else np.asarray(T, float)
        P = cp.Variable((n, n), symmetric=True, name="P")
        Yt = cp.Variable((n, q), name="Y")
        eps = cp.Variable(self.n_eps, nonneg=True, name="eps")
        a = self.alpha**2
        if self.objective == "max_beta":
            b = cp.Variable(nonneg=True, name="b")
        else:
            b = self.beta**2
        M = _blocks(s, self.method, self.constants, P, Yt, eps, a, b, cp.bmat, T=t, prior=True)
        k = self.kappa
        cons = []
        # congruence diag(T, I/level, T) on each block; the bound -kappa I
        # is carried through it, so the constraint set is unchanged
        for Mi, level, width in ((M[0], self.alpha, s.n_w), (M[1], self.beta, s.n_f)):
            d = np.concatenate([np.ones(n), np.full(width, 1.0 / level), np.ones(n)])
            g = np.concatenate([t, np.full(width, 1.0 / level), t])
            Ms = cp.multiply(np.outer(d, d), (Mi + Mi.T) / 2)
            cons.append(Ms << -k * np.diag(g**2))
        cons.append(P >> k * np.diag(t**2))
        if self.objective == "max_beta":
            cons.append(b <= self.beta_cap)
            obj = cp.Maximize(b)
        else:
            obj = cp.Minimize(0)
        prob = cp.Problem(obj, cons)
        return prob, {"P": P, "Yt": Yt, "eps": eps, "b": b, "t": t}


def build_olqb_lmis(sys: ErrorSystemMatrices, k, alpha: float, beta: float, **kw) -> LmiProblem:
    return LmiProblem(sys, "olqb", k, alpha, beta, **kw)


def build_lipschitz_lmis(sys: ErrorSystemMatrices, gamma, alpha: float, beta: float, **kw) -> LmiProblem:
    return LmiProblem(sys, "lipschitz", gamma, alpha, beta, **kw)


# --------------------------------------------------------------------------
# solver boundary

@dataclass
class SolverOutcome:
    status: str            # "feasible" | "infeasible" | "numerical_failure"
    raw_status: str
    message: str = ""
    seconds: float = 0.0


class ConicSolverContract(Protocol):
    name: str

    def solve(self, problem: cp.Problem) -> SolverOutcome: ...


@dataclass
class CvxpySolver:
    """Any semidefinite-capable cvxpy backend behind the contract."""

    name: str = DEFAULT_SOLVER
    options: dict | None = None

    def solve(self, problem: cp.Problem) -> SolverOutcome:
        opts = SOLVER_DEFAULTS.get(self.name, {}) if self.options is None else self.options
        t0 = time.perf_counter()
        try:
            problem.solve(solver=self.name, **opts)
        except cp.error.SolverError as exc:
            return SolverOutcome("numerical_failure", "solver_error", str(exc), time.perf_counter() - t0)
        dt = time.perf_counter() - t0
        st = problem.status
        if st in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            return SolverOutcome("feasible", st, "", dt)
        if st in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return SolverOutcome("infeasible", st, "primal infeasibility certificate", dt)
        return SolverOutcome("numerical_failure", str(st), "", dt)


def default_solver() -> CvxpySolver:
    return CvxpySolver(os.environ.get(SOLVER_ENV, DEFAULT_SOLVER))


# --------------------------------------------------------------------------
# designs

@dataclass
class ObserverDesign:
    L: np.ndarray
    P: np.ndarray
    Y: np.ndarray
    eps: np.ndarray
    alpha: float
    beta: float
    lmi_margins: list[float]
    method: str
    fault_kind: str = ""
    constants: dict = field(default_factory=dict)
    solver: str = ""
    solve_seconds: float = 0.0
    scaling: str = "none"

    @property
    def verified(self) -> bool:
        return all(m < 0 for m in self.lmi_margins)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "fault_kind": self.fault_kind,
            "alpha": self.alpha, "beta": self.beta,
            "eps": self.eps.tolist(), "lmi_margins": list(self.lmi_margins),
            "constants": dict(self.constants), "solver": self.solver,
            "solve_seconds": self.solve_seconds, "scaling": self.scaling,
            "L": self.L.tolist(), "P": self.P.tolist(), "Y": self.Y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObserverDesign":
        return cls(np.array(d["L"], float), np.array(d["P"], float), np.array(d["Y"], float),
                   np.array(d["eps"], float), float(d["alpha"]), float(d["beta"]),
                   [float(m) for m in d["lmi_margins"]], d["method"], d.get("fault_kind", ""),
                   dict(d.get("constants", {})), d.get("solver", ""),
                   float(d.get("solve_seconds", 0.0)), d.get("scaling", "none"))


def power_of_ten_scaling(sys: ErrorSystemMatrices) -> np.ndarray:
    """Diagonal similarity that balances ``A - L0 C`` and ``C`` in powers of ten."""
    from scipy.linalg import matrix_balance

    A0 = sys.A - sys.prior_gain @ sys.C
    aug = np.zeros((sys.n + sys.q, sys.n + sys.q))
    aug[:sys.n, :sys.n] = A0
    aug[sys.n:, :sys.n] = sys.C
    _, (s, _) = matrix_balance(aug, permute=False, separate=True)
    d = s[:sys.n]
    return 10.0 ** np.round(np.log10(d))


def verify(problem: LmiProblem, P, Y, eps, b=None) -> tuple[list[float], bool, str]:
    """Re-substitute into the original blocks; return margins, pass flag, reason."""
    margins = block_margins(problem.blocks(P, Y, eps, b=b))
    tol = -0.5 * problem.kappa
    if min(np.linalg.eigvalsh(0.5 * (P + P.T))) <= 0:
        return margins, False, "P is not positive definite"
    if max(margins) > tol:
        return margins, False, f"block margin {max(margins):.3e} above {tol:.3e}"
    L = np.linalg.solve(P, Y)
    re = float(np.linalg.eigvals(problem.system.A - L @ problem.system.C).real.max())
    if not re < 0:
        return margins, False, f"A - L C not Hurwitz (max real part {re:.3e})"
    return margins, True, ""


def solve(problem: LmiProblem, solver: ConicSolverContract | None = None,
          scalings: tuple[str, ...] = ("none", "power10")) -> ObserverDesign:
    """Solve, map back to original coordinates and verify.

    Scalings are tried in order; the first verified point wins.  A
    certificate of infeasibility from any attempt is final, because the
    scalings are exact equivalences.
    """
    solver = solver or default_solver()
    attempts = []
    total = 0.0
    for mode in scalings:
        T = None if mode == "none" else power_of_ten_scaling(problem.system)
        prob, v = problem.build(T)
        out = solver.solve(prob)
        total += out.seconds
        if out.status == "infeasible":
            raise LmiInfeasible(f"{problem.method} synthesis is infeasible ({solver.name})",
                                out.raw_status, {"scaling": mode, "attempts": attempts + [out.raw_status]})
        if out.status != "feasible" or v["P"].value is None:
            attempts.append(f"{mode}: {out.raw_status} {out.message}".strip())
            continue
        t = v["t"]
        Pt, Yt = v["P"].value, v["Yt"].value
        P = Pt / t[:, None] / t[None, :]
        P = 0.5 * (P + P.T)
        Y = P @ problem.system.prior_gain + Yt / t[:, None]
        eps = np.maximum(np.asarray(v["eps"].value, float), 0.0)
        b = float(v["b"].value) if isinstance(v["b"], cp.Variable) else problem.beta**2
        margins, ok, why = verify(problem, P, Y, eps, b)
        if not ok:
            attempts.append(f"{mode}: {out.raw_status} but {why}")
            continue
        L = np.linalg.solve(P, Y)
        return ObserverDesign(L, P, Y, eps, problem.alpha, float(np.sqrt(b)), margins, problem.method,
                              problem.system.fault_kind, dict(problem.constants), solver.name,
                              total, mode)
    raise SolverNumericalFailure(f"{problem.method} synthesis failed: " + "; ".join(attempts),
                                 "numerical_failure", {"attempts": attempts})


def bisect_beta(make_problem: Callable[[float], LmiProblem], lo: float, hi: float,
                solver: ConicSolverContract | None = None, iters: int = 20) -> ObserverDesign:
    """Largest feasible ``beta`` in ``[lo, hi]`` by bisection on feasibility solves."""
    best = solve(make_problem(lo), solver)
    for _ in range(iters):
        mid = np.sqrt(lo * hi)
        try:
            best = solve(make_problem(mid), solver)
            lo = mid
        except SynthesisError:
            hi = mid
        if hi / lo < 1.01:
            break
    return best


# --------------------------------------------------------------------------
# Lipschitz to OL-QB transfer

@dataclass(frozen=True)
class TransferredPoint:
    constants: dict
    eps: np.ndarray
    P: np.ndarray
    Y: np.ndarray


def transfer_lipschitz_point(lipschitz: ObserverDesign | dict, gamma: float, phi: float) -> TransferredPoint:
    """Map a Lipschitz point to an OL-QB point with the same ``P`` and ``Y``.

    Uses ``rho = gamma``, ``delta = gamma**2 - phi*gamma`` and multipliers
    ``(phi e1, e1, phi e2, e2)``; the resulting blocks equal the Lipschitz ones.
    """
    if not phi > 0:
        raise ValueError("phi must be positive")
    if isinstance(lipschitz, ObserverDesign):
        P, Y, e = lipschitz.P, lipschitz.Y, lipschitz.eps
    else:
        P, Y, e = lipschitz["P"], lipschitz["Y"], lipschitz["eps"]
    e = np.asarray(e, float)
    if e.size != 2:
        raise ValueError("a Lipschitz point has two multipliers")
    consts = {"rho": float(gamma), "delta": float(gamma**2 - phi * gamma), "phi": float(phi),
              "gamma": float(gamma)}
    eps = np.array([phi * e[0], e[0], phi * e[1], e[1]])
    return TransferredPoint(consts, eps, np.asarray(P, float), np.asarray(Y, float))


def synthesize(model: InverterModel, fault, method: str, constants, alpha: float, beta: float,
               solver: ConicSolverContract | None = None, objective: str = "feasibility") -> ObserverDesign:
    """Assemble and solve the problem for one inverter and one fault kind."""
    sys = ErrorSystemMatrices.from_model(model, fault)
    k = constants if method == "olqb" else _consts(constants, "lipschitz")
    return solve(LmiProblem(sys, method, k, alpha, beta, objective=objective), solver)


__all__ = [
    "ConicSolverContract", "CvxpySolver", "ErrorSystemMatrices", "LmiInfeasible", "LmiProblem",
    "ObserverDesign", "SolverNumericalFailure", "SolverOutcome", "SynthesisError", "TransferredPoint",
    "block_margins", "bisect_beta", "build_lipschitz_lmis", "build_olqb_lmis", "default_solver",
    "evaluate_blocks", "power_of_ten_scaling", "solve", "structural_gain", "synthesize",
    "transfer_lipschitz_point", "verify",
]
