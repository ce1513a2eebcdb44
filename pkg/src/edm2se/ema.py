"""Power-law EMA traces, response profiles, sigma_rel, and post-hoc profile reconstruction."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .store import SnapshotRecord, SnapshotStore

log = logging.getLogger(__name__)

DEFAULT_GAMMAS = (16.97, 6.94)
GAMMA_MAX = 1e12
SWEEP_HEADER = ("sigma_rel", "si_sdr", "loss")


class SigmaRelRangeError(ValueError):
    def __init__(self, target, lo, hi):
        self.target, self.lo, self.hi = target, lo, hi
        super().__init__(f"sigma_rel={target} is not reachable; achievable interval is [{lo:.6g}, {hi:.6g}]")


def powerlaw_beta(i: int, gamma: float) -> float:
    if i < 1:
        raise ValueError(f"EMA step index must be >= 1, got {i}")
    return (1.0 - 1.0 / i) ** (gamma + 1.0)


class EmaTrace:
    """Running average of a parameter dict.

    Power-law when ``gamma`` is given, classical fixed-momentum when ``beta``
    is given. The first update always copies the parameters.
    """

    def __init__(self, gamma: float | None = None, beta: float | None = None):
        if (gamma is None) == (beta is None):
            raise ValueError("give exactly one of gamma or beta")
        self.gamma = gamma
        self.beta = beta
        self.step = 0
        self.value: dict[str, np.ndarray] | None = None

    @property
    def trace_id(self):
        return self.gamma if self.gamma is not None else f"beta{self.beta:g}"

    def current_beta(self, i: int) -> float:
        if self.gamma is not None:
            return powerlaw_beta(i, self.gamma)
        return 0.0 if i == 1 else self.beta

    def update(self, params: dict[str, np.ndarray]) -> "EmaTrace":
        i = self.step + 1
        b = self.current_beta(i)
        if self.value is None:
            self.value = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        else:
            if params.keys() != self.value.keys():
                raise ValueError("parameter names differ from the traced set")
            for k, v in params.items():
                acc = self.value[k]
                if acc.shape != np.shape(v):
                    raise ValueError(f"{k}: shape {np.shape(v)} != traced {acc.shape}")
                acc *= b
                acc += (1.0 - b) * np.asarray(v, dtype=np.float64)
        self.step = i
        return self

    def profile(self, n: int | None = None) -> "Profile":
        n = self.step if n is None else n
        if self.gamma is not None:
            return response_profile(n, self.gamma)
        return fixed_beta_profile(n, self.beta)


def ema_step(trace: EmaTrace, params: dict[str, np.ndarray]) -> EmaTrace:
    return trace.update(params)


@dataclass(frozen=True)
class Profile:
    n: int
    weights: np.ndarray  # weight of steps 1..n

    def padded(self, n_total: int) -> np.ndarray:
        if n_total < self.n:
            raise ValueError(f"cannot pad a {self.n}-step profile to {n_total} steps")
        out = np.zeros(n_total)
        out[: self.n] = self.weights
        return out


def response_profile(n: int, gamma: float) -> Profile:
    """Weight of each step j in the power-law average after n steps.

    w_j = (1 - ((j-1)/j)^(gamma+1)) * (j/n)^(gamma+1), evaluated in log space.
    """
    if n < 1:
        raise ValueError("profile length must be >= 1")
    j = np.arange(1, n + 1, dtype=np.float64)
    e = gamma + 1.0
    own = -np.expm1(e * np.log1p(-1.0 / np.maximum(j, 2.0)))
    own[0] = 1.0
    decay = np.exp(e * (np.log(j) - math.log(n)))
    return Profile(n, own * decay)


def fixed_beta_profile(n: int, beta: float) -> Profile:
    j = np.arange(1, n + 1, dtype=np.float64)
    w = (1.0 - beta) * beta ** (n - j)
    w[0] = beta ** (n - 1)
    return Profile(n, w)


def sigma_rel(profile: Profile) -> float:
    j = np.arange(1, profile.n + 1, dtype=np.float64)
    w = profile.weights
    mean = np.dot(w, j)
    var = np.dot(w, (j - mean) ** 2)
    return float(math.sqrt(max(var, 0.0)) / profile.n)


def sigma_rel_range(n: int) -> tuple[float, float]:
    return sigma_rel(response_profile(n, GAMMA_MAX)), sigma_rel(response_profile(n, 0.0))


def gamma_from_sigma_rel(target: float, n: int, tol: float = 1e-13) -> float:
    """Invert sigma_rel(response_profile(n, gamma)) = target by bisection on gamma."""
    lo_s, hi_s = sigma_rel_range(n)
    if not (lo_s <= target <= hi_s) or target <= 0:
        raise SigmaRelRangeError(target, lo_s, hi_s)
    lo, hi = 0.0, 1.0
    while sigma_rel(response_profile(n, hi)) > target:
        lo, hi = hi, hi * 2.0
        if hi > GAMMA_MAX:
            hi = GAMMA_MAX
            break
    # sigma_rel decreases with gamma
    while hi - lo > tol * max(1.0, lo):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if sigma_rel(response_profile(n, mid)) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# post-hoc reconstruction -----------------------------------------------------


def snapshot_profile(record: SnapshotRecord, n_total: int) -> np.ndarray:
    """Profile of a stored snapshot over steps 1..n_total (zero after its own step)."""
    if record.is_raw:
        p = np.zeros(n_total)
        p[record.step - 1] = 1.0
        return p
    return response_profile(record.step, float(record.trace)).padded(n_total)


def solve_coefficients(basis: np.ndarray, target: np.ndarray, damping: float = 1e-12) -> np.ndarray:
    """Least-squares coefficients a minimizing ||basis @ a - target||.

    Normal equations with Tikhonov damping ``damping * mean(diag(G))`` plus
    two refinement sweeps; falls back to a minimum-norm solve (with a warning) for rank-deficient bases.
    """
    S = basis.shape[1]
    if np.linalg.matrix_rank(basis) < S:
        warnings.warn("snapshot profiles are rank deficient; using the minimum-norm solution", RuntimeWarning)
        return np.linalg.lstsq(basis, target, rcond=None)[0]
    gram = basis.T @ basis
    gram[np.diag_indices(S)] += damping * np.trace(gram) / S
    coef = np.linalg.solve(gram, basis.T @ target)
    # iterative refinement removes the bias the damping introduces for in-span targets
    for _ in range(2):
        coef += np.linalg.solve(gram, basis.T @ (target - basis @ coef))
    return coef


@dataclass
class Reconstruction:
    params: dict[str, np.ndarray]
    coefficients: np.ndarray
    records: list[SnapshotRecord]
    target_profile: np.ndarray
    achieved_profile: np.ndarray
    gamma: float

    @property
    def profile_error(self) -> float:
        return float(np.linalg.norm(self.achieved_profile - self.target_profile))


def _basis_records(store: SnapshotStore, traces):
    if traces is None:
        records = store.ema_records()
    else:
        records = [r for r in store.select() if r.trace in traces]
    if not records:
        raise ValueError("snapshot store is empty (no usable records)")
    return records


def reconstruct_profile(store: SnapshotStore, target: np.ndarray, traces=None, loader=None, gamma=float("nan")) -> Reconstruction:
    """Least-squares combination of snapshots whose profile approximates ``target`` (weights of steps 1..n)."""
    target = np.asarray(target, dtype=np.float64)
    n_total = target.size
    records = _basis_records(store, traces)
    if max(r.step for r in records) > n_total:
        raise ValueError(f"snapshots extend past the target horizon of {n_total} steps")
    basis = np.stack([snapshot_profile(r, n_total) for r in records], axis=1)
    coef = solve_coefficients(basis, target)
    loader = loader or store.load
    out: dict[str, np.ndarray] = {}
    for a, rec in zip(coef, records):
        if a == 0:
            continue
        for k, v in loader(rec).items():
            if k in out:
                out[k] += a * np.asarray(v, dtype=np.float64)
            else:
                out[k] = a * np.asarray(v, dtype=np.float64)
    return Reconstruction(out, coef, records, target, basis @ coef, gamma)


def reconstruct(
    store: SnapshotStore,
    target_sigma_rel: float,
    n_total: int,
    traces=None,
    loader=None,
) -> Reconstruction:
    """Combine stored snapshots to approximate a power-law EMA with the given sigma_rel.

    ``traces`` restricts the basis (default: every non-raw trace in the store).
    ``loader(record) -> params`` overrides reading blobs from disk.
    """
    _basis_records(store, traces)
    gamma = gamma_from_sigma_rel(target_sigma_rel, n_total)
    return reconstruct_profile(store, response_profile(n_total, gamma).weights, traces, loader, gamma)


def no_ema(store: SnapshotStore) -> dict[str, np.ndarray]:
    """Raw parameters of the final snapshot."""
    return store.load(store.latest_raw())


# sweep ---------------------------------------------------------------------------


def ema_sweep(store: SnapshotStore, evaluate, grid, n_total: int, traces=None) -> list[dict]:
    """Reconstruct at each sigma_rel in ``grid`` and evaluate.

    ``evaluate(params) -> {"si_sdr": float, "loss": float}``. A failure at one
    grid point yields NaN metrics for that row and the sweep continues.
    """
    rows = []
    for s in grid:
        try:
            rec = reconstruct(store, float(s), n_total, traces=traces)
            metrics = evaluate({k: v.astype(np.float32) for k, v in rec.params.items()})
            rows.append({"sigma_rel": float(s), "si_sdr": float(metrics["si_sdr"]), "loss": float(metrics["loss"])})
        except Exception as exc:  # noqa: BLE001 - reported per grid point
            log.warning("sweep point sigma_rel=%s failed: %s", s, exc)
            rows.append({"sigma_rel": float(s), "si_sdr": float("nan"), "loss": float("nan")})
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([repr(float(r[h])) for h in SWEEP_HEADER])
    return buf.getvalue()
