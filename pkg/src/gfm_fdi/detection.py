"""Residual generation, thresholds and the triggering logic.

Time conventions used throughout:

* ``J[k]`` is the residual norm at ``t_k = t0 + k dt``.
* An alarm raised by ``J[k] > J_th`` is declared at the end of that sample,
  ``t_k + dt``, so a fault that lifts ``J`` in its very first sample is
  detected after one sample.
* A fault counts as cleared once ``J`` has stayed at or below ``J_th`` for
  ``hold`` seconds; ``t_c`` runs from the end of the fault to that moment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import InverterModel

DEFAULT_HOLD = 5e-3
WINDOW_RATIO = 10.0


class DivergenceError(RuntimeError):
    """A simulated or observed state became non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class ObserverState:
    xhat: np.ndarray
    gain: np.ndarray
    model: InverterModel


def residual(state: ObserverState, u, y) -> tuple[np.ndarray, float]:
    """``r = y - C xhat - D u`` and its Euclidean norm."""
    m = state.model
    r = np.asarray(y, float) - m.C @ state.xhat - m.D @ np.asarray(u, float)
    return r, float(np.linalg.norm(r))


def observer_step(state: ObserverState, u, y, dt: float, step: int | None = None) -> ObserverState:
    """One RK4 step of the observer with ``u`` and ``y`` held over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    m = state.model
    u = np.asarray(u, float)
    y = np.asarray(y, float)
    L = state.gain

    def f(xh):
        return m.derivative(xh, u) + L @ (y - m.C @ xh - m.D @ u)

    x = state.xhat
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    new = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(new)):
        raise DivergenceError("observer state is not finite", step)
    return ObserverState(new, L, m)


@dataclass
class ResidualTrace:
    """Residual norm on the simulator grid; residual vectors optionally decimated.

    ``r[i]`` belongs to sample ``i * r_every``.
    """

    dt: float
    J: np.ndarray
    t0: float = 0.0
    r: np.ndarray | None = None
    r_every: int = 1
    J_filtered: np.ndarray | None = None

    def __post_init__(self):
        self.J = np.asarray(self.J, float)
        if np.any(self.J < 0) or not np.all(np.isfinite(self.J)):
            raise ValueError("J must be finite and non-negative")

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.J.size)

    @property
    def duration(self) -> float:
        return self.dt * self.J.size

    @property
    def signal(self) -> np.ndarray:
        """The norm the triggering logic acts on (filtered when available)."""
        return self.J if self.J_filtered is None else self.J_filtered

    def lowpass(self, cutoff_hz: float) -> "ResidualTrace":
        """Copy of the trace with a first-order low-pass applied to ``J``."""
        return ResidualTrace(self.dt, self.J, self.t0, self.r, self.r_every,
                             lowpass_filter(self.J, self.dt, cutoff_hz))


def lowpass_filter(J, dt: float, cutoff_hz: float) -> np.ndarray:
    """Backward-Euler first-order low-pass, started at the first sample."""
    from scipy.signal import lfilter

    if cutoff_hz <= 0:
        raise ValueError("cutoff must be positive")
    tau = 1.0 / (2 * np.pi * cutoff_hz)
    a = dt / (tau + dt)
    J = np.asarray(J, float)
    out, _ = lfilter([a], [1.0, a - 1.0], J, zi=[(1 - a) * J[0]])
    return out


@dataclass(frozen=True)
class Threshold:
    J_th: float
    window: tuple[float, float]
    margin: float = 0.0


def compute_threshold(trace: ResidualTrace, margin: float = 0.0,
                      longest_fault: float | None = None) -> Threshold:
    """``J_th = (1 + margin) * max J`` over a fault-free window.

    The window must last at least ten times the longest scheduled fault.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if longest_fault is not None and trace.duration < WINDOW_RATIO * longest_fault - 1e-12:
        raise ValueError(
            f"calibration window of {trace.duration:g} s is shorter than ten times "
            f"the longest fault ({longest_fault:g} s)")
    sig = trace.signal
    peak = float(sig.max()) if sig.size else 0.0
    return Threshold((1.0 + margin) * peak, (trace.t0, trace.t0 + trace.duration), margin)


@dataclass(frozen=True)
class FaultWindow:
    start: float
    end: float
    label: str = ""


@dataclass(frozen=True)
class FaultDetection:
    window: FaultWindow
    detected: bool
    t_o: float | None
    t_c: float | None
    peak_J: float


@dataclass
class DetectionReport:
    events: list[FaultDetection]
    false_alarms: int
    alarm_times: list[float] = field(default_factory=list)

    @property
    def all_detected(self) -> bool:
        return all(e.detected for e in self.events)

    def to_dict(self) -> dict:
        return {
            "false_alarms": self.false_alarms,
            "alarm_times": list(self.alarm_times),
            "events": [
                {"label": e.window.label, "start": e.window.start, "end": e.window.end,
                 "detected": e.detected, "t_o": e.t_o, "t_c": e.t_c, "peak_J": e.peak_J}
                for e in self.events
            ],
        }


def detect(trace: ResidualTrace, threshold: Threshold | float, windows,
           hold: float = DEFAULT_HOLD) -> DetectionReport:
    """Classify threshold crossings against the monitored fault windows.

    A fault is detected when ``J`` exceeds ``J_th`` while it is active.  Its
    attribution interval runs from onset until clearance is confirmed; every
    rising edge outside all attribution intervals is a false alarm, which
    includes reactions to faults elsewhere in the grid.
    """
    J_th = threshold.J_th if isinstance(threshold, Threshold) else float(threshold)
    sig = trace.signal
    n = sig.size
    dt = trace.dt
    above = sig > J_th
    h = max(1, int(round(hold / dt)))

    def index(t):
        return int(np.ceil((t - trace.t0) / dt - 1e-9))

    events = []
    covered = np.zeros(n, dtype=bool)
    for w in sorted(windows, key=lambda w: w.start):
        k0 = min(max(index(w.start), 0), n)
        k1 = min(max(index(w.end), k0), n)
        hits = np.flatnonzero(above[k0:k1])
        detected = hits.size > 0
        t_o = (hits[0] + 1) * dt if detected else None
        # first k >= k1 with h consecutive samples below the threshold
        t_c = None
        run = 0
        k_clear = n
        for k in range(k1, n):
            run = run + 1 if not above[k] else 0
            if run >= h:
                k_clear = k - h + 1
                t_c = (k_clear - k1) * dt + hold
                break
        covered[k0:min(k_clear + h, n)] = True
        peak = float(sig[k0:max(k1, k0 + 1)].max()) if k0 < n else 0.0
        events.append(FaultDetection(w, detected, t_o, t_c, peak))

    rising = np.flatnonzero(above & ~np.concatenate([[False], above[:-1]]))
    false_edges = [k for k in rising if not covered[k]]
    alarm_times = [float(trace.t0 + (k + 1) * dt) for k in false_edges]
    return DetectionReport(events, len(false_edges), alarm_times)
