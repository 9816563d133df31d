"""Maximum-likelihood calibration of the coupling parameters.

The replay residuals are modeled as zero-mean Gaussians, so for fixed
(cap_scale, zone_scale, threshold) the noise variance is profiled out in
closed form as the mean squared residual. The remaining three-parameter
search runs on a log-spaced grid followed by coordinate-wise refinement;
the likelihood is piecewise constant in the threshold (the gate makes it
discontinuous), which rules out gradient methods.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from pricequake import _kernels
from pricequake.engine import CouplingWeights, ModelParams, calendar_arrays
from pricequake.network import ConfigError, EventCalendar


@dataclass(frozen=True)
class SearchSpace:
    """Grid bounds for the three coupling parameters, log-spaced per axis."""

    cap_scale: tuple[float, float] = (0.1, 3.0)
    zone_scale: tuple[float, float] = (1.0, 50.0)
    threshold: tuple[float, float] = (0.005, 0.10)
    points_per_axis: int = 20
    refine_rounds: int = 2

    def __post_init__(self) -> None:
        for name in ("cap_scale", "zone_scale", "threshold"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"invalid {name} bounds ({lo}, {hi})")
        if self.points_per_axis < 1:
            raise ConfigError("points_per_axis must be >= 1")
        if self.refine_rounds < 0:
            raise ConfigError("refine_rounds must be >= 0")

    def axis(self, name: str) -> np.ndarray:
        lo, hi = getattr(self, name)
        return np.geomspace(lo, hi, self.points_per_axis)

    def axis_ratio(self, name: str) -> float:
        lo, hi = getattr(self, name)
        if self.points_per_axis == 1 or lo == hi:
            return 1.0
        return (hi / lo) ** (1.0 / (self.points_per_axis - 1))


@dataclass(frozen=True)
class ResidualDiagnostic:
    """Sample moments plus shared-bin histograms of the replay series."""

    mean: float
    variance: float
    excess_kurtosis: float
    bin_edges: np.ndarray
    counts: dict[str, np.ndarray]


@dataclass(frozen=True)
class CalibrationResult:
    params: ModelParams
    log_likelihood: float
    residual_summary: ResidualDiagnostic
    search_trace: list[tuple[ModelParams, float]] = field(default_factory=list)


class _ReplayContext:
    """Precomputed arrays for repeated residual passes over one dataset."""

    def __init__(
        self,
        observed: np.ndarray,
        calendar: EventCalendar,
        present: np.ndarray | None,
    ):
        self.calendar = calendar
        self.ev_ex, self.group_start = calendar_arrays(calendar)
        self.observed = np.asarray(observed, dtype=float)
        if len(self.observed) != len(self.ev_ex):
            raise ValueError(
                f"observed returns length {len(self.observed)} != "
                f"event count {len(self.ev_ex)}"
            )
        if present is None:
            self.present = np.ones(len(self.ev_ex), dtype=np.uint8)
        else:
            self.present = np.asarray(present).astype(np.uint8)
        self.present_mask = self.present.astype(bool)
        self.n_events = int(self.present.sum())

    def residuals(self, candidate: ModelParams) -> np.ndarray:
        """Residual series at the present events for one candidate."""
        weights = CouplingWeights.build(self.calendar.exchanges, candidate)
        resid = np.full(len(self.ev_ex), np.nan)
        _kernels.replay_residuals(
            self.calendar.n_exchanges,
            self.ev_ex,
            self.group_start,
            weights.product,
            candidate.threshold,
            self.observed,
            self.present,
            resid,
        )
        return resid[self.present_mask]


def _gaussian_loglik(residuals: np.ndarray, sigma2: float) -> float:
    if sigma2 <= 0:
        if np.any(residuals != 0.0):
            return -math.inf
        return math.inf
    e = len(residuals)
    return -0.5 * e * math.log(2.0 * math.pi * sigma2) - float(
        np.sum(residuals**2)
    ) / (2.0 * sigma2)


def _profiled_loglik(residuals: np.ndarray) -> tuple[float, float]:
    """(sigma2_hat, loglik) with the variance at its zero-mean MLE."""
    sigma2 = float(np.mean(residuals**2))
    if sigma2 == 0.0:
        return 0.0, math.inf
    e = len(residuals)
    return sigma2, -0.5 * e * (math.log(2.0 * math.pi * sigma2) + 1.0)


def log_likelihood(
    observed_returns: np.ndarray,
    calendar: EventCalendar,
    candidate: ModelParams,
    *,
    present: np.ndarray | None = None,
) -> float:
    """Gaussian log-likelihood of the replay residuals under the candidate.

    The candidate's own noise_sd supplies the variance; a zero noise_sd
    with any nonzero residual gives -inf by convention.
    """
    ctx = _ReplayContext(observed_returns, calendar, present)
    return _gaussian_loglik(ctx.residuals(candidate), candidate.noise_sd**2)


def residual_diagnostic(
    residuals: np.ndarray,
    returns: np.ndarray | None = None,
    couplings: np.ndarray | None = None,
    num_bins: int = 61,
) -> ResidualDiagnostic:
    """Moments of the residuals plus log-scale-ready histograms.

    All provided series (residuals, observed returns, coupling terms) are
    binned on shared symmetric linear edges so their count curves can be
    overlaid on a log count axis.
    """
    residuals = np.asarray(residuals, dtype=float)
    if len(residuals) < 100:
        raise ValueError(f"need >= 100 residuals, got {len(residuals)}")
    return _diagnostic(residuals, returns, couplings, num_bins)


def _diagnostic(
    residuals: np.ndarray,
    returns: np.ndarray | None,
    couplings: np.ndarray | None,
    num_bins: int,
) -> ResidualDiagnostic:
    series = {"residual": residuals}
    if returns is not None:
        series["returns"] = np.asarray(returns, dtype=float)
    if couplings is not None:
        series["coupling"] = np.asarray(couplings, dtype=float)
    span = max(float(np.max(np.abs(s))) for s in series.values())
    if span == 0.0:
        span = 1.0
    edges = np.linspace(-span, span, num_bins + 1)
    counts = {name: np.histogram(s, bins=edges)[0] for name, s in series.items()}
    mu = float(np.mean(residuals))
    var = float(np.var(residuals))
    kurt = float(np.mean((residuals - mu) ** 4) / var**2 - 3.0) if var > 0 else 0.0
    return ResidualDiagnostic(
        mean=mu,
        variance=var,
        excess_kurtosis=kurt,
        bin_edges=edges,
        counts=counts,
    )


def _evaluate_batch(
    ctx: _ReplayContext,
    candidates: Sequence[ModelParams],
    workers: int,
) -> list[tuple[ModelParams, float, float]]:
    """(candidate, sigma2_hat, profiled loglik) per candidate, input order."""

    def one(candidate: ModelParams) -> tuple[ModelParams, float, float]:
        sigma2, ll = _profiled_loglik(ctx.residuals(candidate))
        return candidate, sigma2, ll

    if workers <= 1 or len(candidates) <= 1:
        return [one(c) for c in candidates]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, candidates))


def fit(
    observed_returns: np.ndarray,
    calendar: EventCalendar,
    search_space: SearchSpace | None = None,
    *,
    present: np.ndarray | None = None,
    workers: int | None = None,
) -> CalibrationResult:
    """Maximize the profiled likelihood over the three coupling parameters.

    Coarse full grid first, then ``refine_rounds`` passes of coordinate-wise
    zooming (one grid-step factor around the incumbent per axis, clamped to
    the original bounds). The best candidate never regresses: the incumbent
    is only replaced by a strictly higher likelihood. The full evaluation
    trace is returned; a flat trace is how unidentifiable data shows up.
    """
    space = search_space or SearchSpace()
    if workers is None:
        workers = min(32, os.cpu_count() or 1)
    ctx = _ReplayContext(observed_returns, calendar, present)

    def make(gamma: float, tau: float, r_c: float, sigma2: float = 1.0) -> ModelParams:
        return ModelParams(
            threshold=r_c,
            zone_scale=tau,
            cap_scale=gamma,
            noise_sd=math.sqrt(sigma2),
            seed=0,
        )

    trace: list[tuple[ModelParams, float]] = []
    best: tuple[ModelParams, float, float] | None = None  # candidate, sigma2, ll

    def consider(results: list[tuple[ModelParams, float, float]]) -> None:
        nonlocal best
        for cand, sigma2, ll in results:
            trace.append((replace(cand, noise_sd=math.sqrt(sigma2)), ll))
            if best is None or ll > best[2]:
                best = (cand, sigma2, ll)

    coarse = [
        make(g, t, r)
        for g in space.axis("cap_scale")
        for t in space.axis("zone_scale")
        for r in space.axis("threshold")
    ]
    consider(_evaluate_batch(ctx, coarse, workers))
    assert best is not None

    ratios = {name: space.axis_ratio(name) for name in ("cap_scale", "zone_scale", "threshold")}
    bounds = {name: getattr(space, name) for name in ratios}
    for _ in range(space.refine_rounds):
        for name in ("cap_scale", "zone_scale", "threshold"):
            r = ratios[name]
            if r == 1.0:
                continue
            center = getattr(best[0], name)
            lo = max(bounds[name][0], center / r)
            hi = min(bounds[name][1], center * r)
            values = np.geomspace(lo, hi, space.points_per_axis)
            batch = [replace(best[0], **{name: float(v)}) for v in values]
            consider(_evaluate_batch(ctx, batch, workers))
            ratios[name] = r ** (2.0 / max(space.points_per_axis - 1, 1))

    fitted, sigma2, ll = best
    residuals = ctx.residuals(fitted)
    summary = _diagnostic(
        residuals,
        returns=ctx.observed[ctx.present_mask],
        couplings=ctx.observed[ctx.present_mask] - residuals,
        num_bins=61,
    )
    return CalibrationResult(
        params=replace(fitted, noise_sd=math.sqrt(sigma2)),
        log_likelihood=ll,
        residual_summary=summary,
        search_trace=trace,
    )
