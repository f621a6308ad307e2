"""Baseline confidence and OOD scores computed from logits and embeddings.

Every function accepts a single logit vector or a batch (rows = samples).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DataError, RankDeficiencyError


def _logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise DataError("need at least one logit")
    return z


def msp(logits):
    """Maximum softmax probability, computed as exp(max - logsumexp)."""
    z = _logits(logits)
    return np.exp(z.max(axis=-1) - logsumexp(z, axis=-1))


def max_logit(logits):
    return _logits(logits).max(axis=-1)


def energy(logits):
    """-log sum_y exp(f_y). Higher energy means more OOD-like."""
    return -logsumexp(_logits(logits), axis=-1)


def embed_l1(embedding):
    return np.abs(np.asarray(embedding, dtype=float)).sum(axis=-1)


@dataclass(frozen=True)
class ScoreRecord:
    msp: np.ndarray
    max_logit: np.ndarray
    energy: np.ndarray
    embed_l1: np.ndarray
    residual: np.ndarray | None = None
    sirc: np.ndarray | None = None


def score_record(logits, embedding, projector: "ResidualProjector | None" = None) -> ScoreRecord:
    return ScoreRecord(
        msp=msp(logits),
        max_logit=max_logit(logits),
        energy=energy(logits),
        embed_l1=embed_l1(embedding),
        residual=residual(projector, embedding) if projector is not None else None,
    )


# --- principal-subspace residual --------------------------------------------


@dataclass(frozen=True)
class ResidualProjector:
    mean: np.ndarray
    components: np.ndarray  # (d, dim), orthonormal rows
    eigenvalues: np.ndarray


def _power_iteration(C, start, tol, max_iter):
    v = start / np.linalg.norm(start)
    lam = float(v @ C @ v)
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        # fix the sign so successive iterates are comparable
        if w @ v < 0:
            w = -w
        new_lam = float(w @ C @ w)
        lam_ok = abs(new_lam - lam) <= tol * max(abs(new_lam), np.finfo(float).tiny)
        vec_ok = np.linalg.norm(w - v) <= tol
        v, lam = w, new_lam
        if lam_ok and vec_ok:
            break
    return v, lam


def fit_residual(
    embeddings, subspace_dim: int | None = None, tol: float = 1e-10, max_iter: int = 1000
) -> ResidualProjector:
    """Top principal directions of the embeddings by deflated power iteration.

    ``subspace_dim`` defaults to min(dim // 2, 32).
    """
    E = np.asarray(embeddings, dtype=float)
    if E.ndim != 2:
        raise DataError("embeddings must be a 2-D array")
    n, dim = E.shape
    d = min(dim // 2, 32) if subspace_dim is None else int(subspace_dim)
    if not 0 < d < dim:
        raise ConfigError(f"subspace dimension must lie in (0, {dim}), got {d}")
    if n < d + 1:
        raise DataError(f"need at least {d + 1} embeddings to fit a {d}-dim subspace")
    mean = E.mean(axis=0)
    Xc = E - mean
    C = Xc.T @ Xc / n
    scale = max(np.trace(C), np.finfo(float).tiny)
    comps, lams = [], []
    for k in range(d):
        # deterministic start, not orthogonal to any fixed direction in general
        start = np.ones(dim) + 0.1 * np.arange(1, dim + 1)
        for u in comps:
            start -= (start @ u) * u
        if np.linalg.norm(start) < 1e-12:
            start = np.eye(dim)[k]
        v, lam = _power_iteration(C, start, tol, max_iter)
        if lam <= 1e-12 * scale:
            raise RankDeficiencyError(d, k)
        comps.append(v)
        lams.append(lam)
        C = C - lam * np.outer(v, v)
    return ResidualProjector(mean, np.array(comps), np.array(lams))


def residual(projector: ResidualProjector, embedding):
    """Norm of the centred embedding's component outside the fitted span."""
    x = np.asarray(embedding, dtype=float) - projector.mean
    proj = (x @ projector.components.T) @ projector.components
    return np.linalg.norm(x - proj, axis=-1)


# --- SIRC --------------------------------------------------------------------


@dataclass(frozen=True)
class SircParams:
    """Constants of the multiplicative combiner.

    ``s_ood`` fed to :func:`sirc` is oriented so that larger means more
    inlier-like; ``source`` names the raw score it was adapted from.
    """

    a1: float = 1.0
    a2: float = 1.0
    a3: float = 0.0
    source: str = "embed_l1"


# Orientation adapters: map a raw OOD score onto "larger = more inlier".
SIRC_ADAPTERS = {
    "embed_l1": lambda raw: np.asarray(raw, dtype=float),
    "residual": lambda raw: -np.asarray(raw, dtype=float),
}


def fit_sirc(raw_inlier_scores, source: str = "embed_l1", a1: float = 1.0) -> SircParams:
    """a2 = 1/std and a3 = -mean/std of the adapted score on held-out inliers."""
    if source not in SIRC_ADAPTERS:
        raise ConfigError(f"no SIRC adapter for score {source!r}")
    s = SIRC_ADAPTERS[source](raw_inlier_scores)
    if s.size < 2:
        raise DataError("need at least two held-out inlier scores to fit SIRC")
    sd = float(s.std())
    if sd == 0.0:
        sd = 1.0
    return SircParams(a1=a1, a2=1.0 / sd, a3=-float(s.mean()) / sd, source=source)


def sirc(s_sc, s_ood, params: SircParams):
    """(s_sc - a1) * (1 + exp(-(a2 s_ood + a3))). Reject when below a threshold."""
    s_sc = np.asarray(s_sc, dtype=float)
    z = params.a2 * np.asarray(s_ood, dtype=float) + params.a3
    with np.errstate(over="ignore"):
        rho = 1.0 + np.exp(-z)
    diff = s_sc - params.a1
    # a zero first factor wins over an overflowing second one
    with np.errstate(invalid="ignore"):
        return np.where(diff == 0.0, 0.0, diff * rho)


def sirc_from_raw(s_sc, raw_ood, params: SircParams):
    return sirc(s_sc, SIRC_ADAPTERS[params.source](raw_ood), params)
