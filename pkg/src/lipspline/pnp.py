"""Plug-and-play forward-backward splitting with averaged denoisers.

The iteration x <- D(x - alpha * H'(Hx - y)) converges when D is averaged
(D = beta*R + (1-beta)*Id, R 1-Lipschitz) and alpha is in (0, 2/||H||^2).
Two machine-checkable stability certificates accompany the solver:

* measurement stability: for fixed points of the iteration with beta <= 1/2,
  ||H x1* - H x2*|| <= ||y1 - y2||; when H'H is invertible this also bounds
  ||x1* - x2*|| by ||y1 - y2|| / sigma_min(H'H);
* contractive stability: for a K-Lipschitz denoiser with K < 1,
  ||x1* - x2*|| <= alpha * K * ||H|| / (1 - K) * ||y1 - y2||.

A certificate is *refused* (not failed) when its preconditions cannot be
established — beta > 1/2 or non-converged fixed points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import atomic_open
from .forward_models import ForwardModel
from .imaging import psnr

CERT_TOL = 1e-9


class DivergenceError(RuntimeError):
    """The fixed-point residual grew tenfold from its running minimum."""


@dataclass
class PnPRun:
    """Solver trace: residuals per iteration and the final iterate."""

    x: np.ndarray
    residuals: list
    iterations: int
    converged: bool
    alpha: float
    psnrs: list | None = None
    iterates: list = field(default_factory=list)


def data_gradient(model: ForwardModel, x, y) -> np.ndarray:
    """Gradient of 0.5*||y - Hx||^2 in x: H'(Hx - y)."""
    return model.adjoint(model.apply(x) - np.asarray(y, dtype=np.float64))


def pnp_fbs(y, model: ForwardModel, denoiser, alpha: float | None = None,
            tol: float = 1e-7, max_iter: int = 1000, x0=None,
            reference=None, keep_every: int = 0) -> PnPRun:
    """Iterate x <- D(x - alpha*H'(Hx-y)) until the relative fixed-point
    residual ||x+ - x|| <= tol * ||x|| or ``max_iter``.

    ``alpha`` defaults to 1/||H'H||.  Raises :class:`DivergenceError` when
    the residual grows tenfold from its running minimum (after a short
    burn-in).  ``reference`` adds a PSNR trace; ``keep_every`` > 0 stores
    thinned iterates.
    """
    y = np.asarray(y, dtype=np.float64)
    gram_max = model.gram_range()[1]
    if alpha is None:
        alpha = 1.0 / gram_max
    lipschitz = gram_max  # L of the data gradient
    if not 0.0 < alpha < 2.0 / lipschitz + 1e-15:
        raise ValueError(f"alpha must lie in (0, {2.0 / lipschitz}); "
                         f"got {alpha}")
    x = model.adjoint(y) if x0 is None else np.asarray(x0, dtype=np.float64)
    residuals: list[float] = []
    psnrs: list[float] | None = [] if reference is not None else None
    iterates: list[np.ndarray] = []
    converged = False
    best = np.inf
    for k in range(1, max_iter + 1):
        x_next = denoiser.apply(x - alpha * data_gradient(model, x, y))
        residual = float(np.linalg.norm(x_next - x))
        if not np.isfinite(residual):
            raise DivergenceError(
                f"non-finite fixed-point residual at iteration {k}")
        residuals.append(residual)
        if psnrs is not None:
            psnrs.append(psnr(np.clip(x_next, 0.0, 1.0), reference))
        if keep_every and (k % keep_every == 0):
            iterates.append(x_next.copy())
        best = min(best, residual)
        if k > 5 and residual > 10.0 * best:
            raise DivergenceError(
                f"residual {residual:.3e} grew tenfold from its minimum "
                f"{best:.3e} at iteration {k}")
        scale = max(float(np.linalg.norm(x_next)), 1e-12)
        x = x_next
        if residual <= tol * scale:
            converged = True
            break
    return PnPRun(x=x, residuals=residuals, iterations=len(residuals),
                  converged=converged, alpha=float(alpha), psnrs=psnrs,
                  iterates=iterates)


@dataclass
class CertificateReport:
    """Both sides of a stability inequality, with pass/refusal state."""

    name: str
    passed: bool
    refused: bool
    reason: str
    lhs: float
    rhs: float
    slack: float
    details: dict

    def lines(self) -> list[str]:
        state = ("REFUSED" if self.refused
                 else "PASS" if self.passed else "FAIL")
        out = [f"certificate {self.name}: {state}"]
        if self.reason:
            out.append(f"  reason: {self.reason}")
        out.append(f"  lhs = {self.lhs!r}")
        out.append(f"  rhs = {self.rhs!r}")
        out.append(f"  slack = {self.slack!r}")
        for key in sorted(self.details):
            out.append(f"  {key} = {self.details[key]!r}")
        return out


def _refusal(name: str, reason: str) -> CertificateReport:
    return CertificateReport(name=name, passed=False, refused=True,
                             reason=reason, lhs=float("nan"),
                             rhs=float("nan"), slack=float("nan"), details={})


def _solve_pair(model, denoiser, y1, y2, alpha, tol, max_iter, x0):
    first = pnp_fbs(y1, model, denoiser, alpha=alpha, tol=tol,
                    max_iter=max_iter, x0=None if x0 is None else x0[0])
    warm = first.x if x0 is None else x0[1]
    second = pnp_fbs(y2, model, denoiser, alpha=alpha, tol=tol,
                     max_iter=max_iter, x0=warm)
    return first, second


def stability_certificate_prop3(model: ForwardModel, denoiser, y1, y2,
                                alpha: float | None = None,
                                tol: float = CERT_TOL,
                                max_iter: int = 20_000,
                                x0=None) -> CertificateReport:
    """Measurement-stability certificate ||Hx1* - Hx2*|| <= ||y1 - y2||.

    Requires an averaged denoiser with beta <= 1/2 and fixed points
    converged to ``tol`` <= 1e-9; otherwise the certificate is refused.
    When H'H is invertible the report also checks
    ||x1* - x2*|| <= ||y1 - y2|| / sigma_min(H'H).
    """
    name = "measurement-stability"
    if tol > CERT_TOL:
        raise ValueError(f"certificate requires tol <= {CERT_TOL}")
    beta = getattr(denoiser, "beta", None)
    if beta is None:
        return _refusal(name, "denoiser is not averaged "
                              "(no beta: D = beta*R + (1-beta)*Id required)")
    if beta > 0.5:
        return _refusal(name, f"beta <= 1/2 required, got beta = {beta}")
    first, second = _solve_pair(model, denoiser, y1, y2, alpha, tol,
                                max_iter, x0)
    if not (first.converged and second.converged):
        bad = "first" if not first.converged else "second"
        return _refusal(
            name, f"{bad} fixed point not converged to {tol} within "
                  f"{max_iter} iterations (certificate refused, not failed)")
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    lhs = float(np.linalg.norm(model.apply(first.x) - model.apply(second.x)))
    rhs = float(np.linalg.norm(y1 - y2))
    details = {
        "beta": float(beta),
        "iterations": (first.iterations, second.iterations),
        "fixed_point_tol": tol,
    }
    passed = lhs <= rhs + 1e-9 * max(1.0, rhs)
    gram_min = model.gram_range()[0]
    if gram_min > 0.0:
        dist = float(np.linalg.norm(first.x - second.x))
        bound = rhs / gram_min
        details["reconstruction_distance"] = dist
        details["invertible_bound"] = bound
        details["sigma_min_gram"] = gram_min
        passed = passed and dist <= bound + 1e-9 * max(1.0, bound)
    return CertificateReport(name=name, passed=passed, refused=False,
                             reason="", lhs=lhs, rhs=rhs, slack=rhs - lhs,
                             details=details)


def stability_certificate_prop4(model: ForwardModel, denoiser, y1, y2,
                                alpha: float | None = None,
                                tol: float = CERT_TOL,
                                max_iter: int = 20_000,
                                x0=None) -> CertificateReport:
    """Contractive-stability certificate for a K-Lipschitz denoiser, K < 1:
    ||x1* - x2*|| <= alpha*K*||H||/(1-K) * ||y1 - y2||."""
    name = "contractive-stability"
    K = float(denoiser.lipschitz_bound)
    if K >= 1.0:
        raise ValueError(f"certificate requires K < 1, got K = {K}")
    if alpha is None:
        alpha = 1.0 / model.gram_range()[1]
    first, second = _solve_pair(model, denoiser, y1, y2, alpha, tol,
                                max_iter, x0)
    if not (first.converged and second.converged):
        bad = "first" if not first.converged else "second"
        return _refusal(
            name, f"{bad} fixed point not converged to {tol} within "
                  f"{max_iter} iterations (certificate refused, not failed)")
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    dy = float(np.linalg.norm(y1 - y2))
    lhs = float(np.linalg.norm(first.x - second.x))
    norm_h = model.operator_norm()
    if K == 0.0:
        rhs = 0.0
    else:
        rhs = alpha * K * norm_h / (1.0 - K) * dy
    passed = lhs <= rhs + 1e-9 * max(1.0, rhs)
    details = {
        "K": K,
        "alpha": float(alpha),
        "operator_norm": norm_h,
        "measurement_distance": dy,
        "iterations": (first.iterations, second.iterations),
    }
    return CertificateReport(name=name, passed=passed, refused=False,
                             reason="", lhs=lhs, rhs=rhs, slack=rhs - lhs,
                             details=details)


def write_run_csv(path: str, run: PnPRun) -> None:
    """Per-iteration report: iter, residual[, psnr when traced]."""
    with atomic_open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if run.psnrs is not None:
            writer.writerow(["iter", "residual", "psnr"])
            for k, (r, p) in enumerate(zip(run.residuals, run.psnrs), 1):
                writer.writerow([k, repr(float(r)), repr(float(p))])
        else:
            writer.writerow(["iter", "residual"])
            for k, r in enumerate(run.residuals, 1):
                writer.writerow([k, repr(float(r))])
