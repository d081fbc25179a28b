"""Spread target construction and Nelson-Siegel term-structure factors.

The forecast target is the Italian-minus-German yield spread at a fixed
maturity, made stationary by a log-difference transform and robust-scaled
(median / interquartile range).  The level, slope and curvature factors are
estimated day by day following Diebold & Li (2006): each day's spread curve is
regressed on a constant and the two exponential loadings

    L1(tau) = (1 - exp(-lam*tau)) / (lam*tau)
    L2(tau) = L1(tau) - exp(-lam*tau)

with the decay constant ``lam`` fixed (0.0609 with maturities in months).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

DEFAULT_LAMBDA = 0.0609
TARGET_MATURITY_MONTHS = 120

# below this the exact L1 expression is 0/0; switch to its Taylor expansion
_SMALL_X = 1e-6


class AlignmentError(ValueError):
    """Panels disagree on days or maturities."""


class DomainError(ValueError):
    """A value outside the mathematical domain of a transform."""


class SingularFitError(ValueError):
    """The Nelson-Siegel design matrix is rank deficient."""


@dataclass
class YieldCurvePanel:
    """Daily Italian and German yields on a common maturity grid (percent)."""

    days: list[date]
    maturities: np.ndarray          # months, strictly increasing
    yields_it: np.ndarray           # days x maturities
    yields_de: np.ndarray           # days x maturities

    def __post_init__(self) -> None:
        self.maturities = np.asarray(self.maturities, dtype=float)
        self.yields_it = np.asarray(self.yields_it, dtype=float)
        self.yields_de = np.asarray(self.yields_de, dtype=float)
        if np.any(self.maturities <= 0) or np.any(np.diff(self.maturities) <= 0):
            raise ValueError("maturities must be positive and strictly increasing")
        shape = (len(self.days), len(self.maturities))
        if self.yields_it.shape != shape or self.yields_de.shape != shape:
            raise AlignmentError(
                f"yield matrices must be {shape}, got {self.yields_it.shape} "
                f"and {self.yields_de.shape}"
            )
        if not (np.isfinite(self.yields_it).all() and np.isfinite(self.yields_de).all()):
            raise ValueError("yield panels contain non-finite values")


@dataclass
class SpreadSeries:
    """A spread-derived series plus the robust-scaling state used to build it."""

    days: list[date]
    values: np.ndarray
    median: float = 0.0
    iqr: float = 1.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if len(self.days) != len(self.values):
            raise AlignmentError("days and values must have equal length")

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        """Map robust-scaled values back to raw log-differences."""
        return np.asarray(scaled) * self.iqr + self.median


@dataclass
class NsFactors:
    """Per-day (beta0, beta1, beta2) estimates with the decay constant used."""

    days: list[date]
    beta0: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        n = len(self.days)
        for name in ("beta0", "beta1", "beta2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if arr.shape != (n,):
                raise AlignmentError(f"{name} must have one entry per day")

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([self.beta0, self.beta1, self.beta2])


def compute_spreads(panel: YieldCurvePanel) -> np.ndarray:
    """Element-wise Italian minus German yields, days x maturities."""
    return panel.yields_it - panel.yields_de


def log_diff(series: np.ndarray, labels=None) -> np.ndarray:
    """First difference of the natural log; requires strictly positive input.

    Returns an array of length N-1 with out[t] = ln(series[t+1]) - ln(series[t]).
    """
    x = np.asarray(series, dtype=float)
    bad = np.nonzero(x <= 0)[0]
    if bad.size:
        where = labels[bad[0]] if labels is not None else f"index {bad[0]}"
        raise DomainError(f"log-difference undefined for non-positive value at {where}")
    logs = np.log(x)
    return logs[1:] - logs[:-1]


def robust_scale(series: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Subtract the median and divide by the interquartile range.

    Quartiles use linear interpolation between order statistics.  Returns the
    scaled series and the (median, IQR) state needed to invert the transform.
    """
    x = np.asarray(series, dtype=float)
    med = float(np.median(x))
    q1, q3 = np.quantile(x, [0.25, 0.75])
    iqr = float(q3 - q1)
    if iqr <= 0:
        raise DomainError("interquartile range is zero; robust scaling degenerate")
    return (x - med) / iqr, med, iqr


def ns_loadings(tau: float, lam: float) -> tuple[float, float, float]:
    """Loadings (L0, L1, L2) at maturity ``tau`` for decay constant ``lam``."""
    if tau <= 0 or lam <= 0:
        raise ValueError("tau and lambda must be positive")
    x = lam * tau
    if x < _SMALL_X:
        l1 = 1.0 - x / 2.0
    else:
        l1 = (1.0 - np.exp(-x)) / x
    l2 = l1 - np.exp(-x)
    return 1.0, float(l1), float(l2)


def ns_design(maturities: np.ndarray, lam: float) -> np.ndarray:
    """Design matrix [1, L1, L2] for a maturity grid (months)."""
    rows = [ns_loadings(float(tau), lam) for tau in np.asarray(maturities, dtype=float)]
    return np.array(rows, dtype=float)


def fit_ns_factors(
    spreads: np.ndarray,
    maturities: np.ndarray,
    days: list[date],
    lam: float = DEFAULT_LAMBDA,
) -> NsFactors:
    """Per-day OLS of the spread curve on [1, L1(tau), L2(tau)].

    The least-squares problem is solved by an orthogonal factorization
    (`numpy.linalg.lstsq`), which is the numerically stable way of solving the
    normal equations.  Duplicate maturities make the design rank deficient and
    raise :class:`SingularFitError`.
    """
    spreads = np.asarray(spreads, dtype=float)
    if spreads.ndim != 2 or spreads.shape[0] != len(days):
        raise AlignmentError("spreads must be days x maturities")
    if spreads.shape[1] != len(maturities):
        raise AlignmentError("spread columns must match the maturity grid")
    if spreads.shape[1] < 3:
        raise ValueError("need at least 3 maturities per day")
    design = ns_design(maturities, lam)
    if np.linalg.matrix_rank(design) < 3:
        raise SingularFitError(
            f"rank-deficient Nelson-Siegel design for day {days[0].isoformat()} "
            "(duplicate maturities?)"
        )
    # one factorization solves every day at once: columns of B are per-day betas
    betas, *_ = np.linalg.lstsq(design, spreads.T, rcond=None)
    return NsFactors(
        days=list(days), beta0=betas[0], beta1=betas[1], beta2=betas[2], lam=lam
    )


def load_yield_panel(path: str | Path) -> YieldCurvePanel:
    """Read a long-format CSV `date, maturity_months, yield_it, yield_de`."""
    df = pd.read_csv(path)
    required = {"date", "maturity_months", "yield_it", "yield_de"}
    missing = required - set(df.columns)
    if missing:
        raise ValueError(f"yield CSV missing columns: {sorted(missing)}")
    it = df.pivot(index="date", columns="maturity_months", values="yield_it").sort_index()
    de = df.pivot(index="date", columns="maturity_months", values="yield_de").sort_index()
    if it.isna().any().any() or de.isna().any().any():
        raise ValueError("yield panel has holes after pivoting; dates x maturities must be complete")
    days = [date.fromisoformat(str(d)) for d in it.index]
    return YieldCurvePanel(
        days=days,
        maturities=it.columns.to_numpy(dtype=float),
        yields_it=it.to_numpy(dtype=float),
        yields_de=de.to_numpy(dtype=float),
    )


def build_target(
    panel: YieldCurvePanel,
    target_maturity: float = TARGET_MATURITY_MONTHS,
    lam: float = DEFAULT_LAMBDA,
) -> tuple[SpreadSeries, NsFactors]:
    """Spread target (log-diff + robust scale) and daily factors from a panel.

    The target series starts on the second panel day because of the first
    difference; the factors cover every panel day.
    """
    spreads = compute_spreads(panel)
    mat_idx = int(np.argmin(np.abs(panel.maturities - target_maturity)))
    if panel.maturities[mat_idx] != target_maturity:
        raise ValueError(
            f"target maturity {target_maturity} not on the panel grid "
            f"(nearest is {panel.maturities[mat_idx]})"
        )
    raw = spreads[:, mat_idx]
    diffs = log_diff(raw, labels=[d.isoformat() for d in panel.days])
    scaled, med, iqr = robust_scale(diffs)
    target = SpreadSeries(days=list(panel.days[1:]), values=scaled, median=med, iqr=iqr)
    factors = fit_ns_factors(spreads, panel.maturities, panel.days, lam=lam)
    return target, factors


def save_target_and_factors(target: SpreadSeries, factors: NsFactors, out_dir: str | Path) -> dict:
    """Write target/factors CSVs plus the scaling-state JSON; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tdf = pd.DataFrame({"date": [d.isoformat() for d in target.days], "target": target.values})
    fdf = pd.DataFrame(
        {
            "date": [d.isoformat() for d in factors.days],
            "beta0": factors.beta0,
            "beta1": factors.beta1,
            "beta2": factors.beta2,
        }
    )
    target_path = out / "target.csv"
    factors_path = out / "factors.csv"
    state_path = out / "scale_state.json"
    tdf.to_csv(target_path, index=False)
    fdf.to_csv(factors_path, index=False)
    state_path.write_text(
        '{"median": %r, "iqr": %r, "lambda": %r}\n' % (target.median, target.iqr, factors.lam)
    )
    return {"target": str(target_path), "factors": str(factors_path), "state": str(state_path)}
