"""Synthetic ground-truth distributions with exact densities.

Everything here is evaluated in log-space. The objects are immutable after
construction; sampling takes an explicit seed and builds its own generator,
so the same seed always reproduces the same draw.

Random numbers come from numpy's Philox counter-based bit generator
(``numpy.random.Philox``), seeded with the integer the caller passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .errors import ConfigError, DataError

ORIGINS = ("inlier", "outlier", "wild", "strict_inlier")
SOURCES = ("inlier", "outlier", "wild", "test")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox generator; the only RNG used for sampled datasets."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _as_points(x, dim: int) -> tuple[np.ndarray, bool]:
    """Coerce to an (n, dim) array; the flag says the input was one point."""
    X = np.asarray(x, dtype=float)
    single = True
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        if dim == 1 and X.size != 1:
            X, single = X.reshape(-1, 1), False
        else:
            X = X.reshape(1, -1)
    else:
        single = False
    if X.shape[1] != dim:
        raise DataError(f"expected feature dimension {dim}, got {X.shape[1]}")
    if np.isnan(X).any():
        raise DataError("NaN in feature vector")
    return X, single


class Density(Protocol):
    dim: int

    def log_pdf(self, x) -> np.ndarray: ...

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


class _DensityMixin:
    def pdf(self, x) -> np.ndarray:
        """Direct (non-log) evaluation; underflows in the far tails."""
        return np.exp(self.log_pdf(x))


class GaussianClassConditional(_DensityMixin):
    """Gaussian density with isotropic, diagonal or full covariance.

    ``cov`` may be a positive scalar (isotropic variance), a vector of
    per-coordinate variances, or a symmetric positive-definite matrix.
    """

    def __init__(self, mean, cov=1.0):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        self.dim = self.mean.size
        c = np.asarray(cov, dtype=float)
        if c.ndim == 0:
            if not c > 0:
                raise ConfigError(f"variance must be positive, got {float(c)}")
            self.kind = "isotropic"
            self._var = np.full(self.dim, float(c))
        elif c.ndim == 1:
            if c.size != self.dim or not np.all(c > 0):
                raise ConfigError("diagonal covariance must be positive with one entry per dim")
            self.kind = "diagonal"
            self._var = c.copy()
        else:
            if c.shape != (self.dim, self.dim) or not np.allclose(c, c.T, atol=1e-12):
                raise ConfigError("covariance matrix must be symmetric and match the mean")
            if np.linalg.eigvalsh(c).min() <= 0:
                raise ConfigError("covariance matrix must be positive definite")
            self.kind = "full"
            self._cov = c.copy()
            self._chol = np.linalg.cholesky(c)
            self._logdet = 2.0 * np.log(np.diag(self._chol)).sum()
        self.mean.setflags(write=False)

    @property
    def covariance(self) -> np.ndarray:
        if self.kind == "full":
            return self._cov.copy()
        return np.diag(self._var)

    def log_pdf(self, x) -> np.ndarray:
        X, single = _as_points(x, self.dim)
        d = X - self.mean
        if self.kind == "full":
            z = np.linalg.solve(self._chol, d.T).T
            quad = (z**2).sum(axis=1)
            logdet = self._logdet
        else:
            quad = (d**2 / self._var).sum(axis=1)
            logdet = np.log(self._var).sum()
        out = -0.5 * (quad + logdet + self.dim * np.log(2 * np.pi))
        return out[0] if single else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        if self.kind == "full":
            return self.mean + z @ self._chol.T
        return self.mean + z * np.sqrt(self._var)

    def to_config(self) -> dict:
        if self.kind == "full":
            return {"kind": "gaussian", "mean": self.mean.tolist(), "covariance": self._cov.tolist()}
        if self.kind == "isotropic":
            return {"kind": "gaussian", "mean": self.mean.tolist(), "variance": float(self._var[0])}
        return {"kind": "gaussian", "mean": self.mean.tolist(), "variance": self._var.tolist()}


class UniformBox(_DensityMixin):
    """Uniform density on an axis-aligned box; zero outside it."""

    def __init__(self, low, high):
        self.low = np.atleast_1d(np.asarray(low, dtype=float)).copy()
        self.high = np.atleast_1d(np.asarray(high, dtype=float)).copy()
        if self.low.shape != self.high.shape or not np.all(self.high > self.low):
            raise ConfigError("uniform box needs high > low in every coordinate")
        self.dim = self.low.size
        self._log_vol = np.log(self.high - self.low).sum()

    def log_pdf(self, x) -> np.ndarray:
        X, single = _as_points(x, self.dim)
        inside = np.all((X >= self.low) & (X <= self.high), axis=1)
        out = np.where(inside, -self._log_vol, -np.inf)
        return out[0] if single else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.low + (self.high - self.low) * rng.random((n, self.dim))

    def to_config(self) -> dict:
        return {"kind": "uniform", "low": self.low.tolist(), "high": self.high.tolist()}


class TruncatedGaussian(_DensityMixin):
    """Isotropic/diagonal Gaussian restricted to one side of ``x[axis] = bound``.

    The density is exactly zero on the other side, which is what makes a
    certified strictly-inlier region possible.
    """

    def __init__(self, mean, variance, axis: int, bound: float, side: str = "above"):
        self.base = GaussianClassConditional(mean, variance)
        if self.base.kind == "full":
            raise ConfigError("truncated Gaussian supports isotropic/diagonal covariance only")
        if side not in ("above", "below"):
            raise ConfigError(f"side must be 'above' or 'below', got {side!r}")
        self.dim = self.base.dim
        if not 0 <= axis < self.dim:
            raise ConfigError(f"truncation axis {axis} out of range")
        self.axis = int(axis)
        self.bound = float(bound)
        self.side = side
        sd = np.sqrt(self.base._var[self.axis])
        z = (self.bound - self.base.mean[self.axis]) / sd
        if side == "above":
            self._a, self._b = z, np.inf
            self._log_mass = stats.norm.logsf(z)
        else:
            self._a, self._b = -np.inf, z
            self._log_mass = stats.norm.logcdf(z)

    def _inside(self, X):
        c = X[:, self.axis]
        return c >= self.bound if self.side == "above" else c <= self.bound

    def log_pdf(self, x) -> np.ndarray:
        X, single = _as_points(x, self.dim)
        lp = np.atleast_1d(self.base.log_pdf(X)) - self._log_mass
        out = np.where(self._inside(X), lp, -np.inf)
        return out[0] if single else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        X = self.base.sample(n, rng)
        sd = np.sqrt(self.base._var[self.axis])
        X[:, self.axis] = stats.truncnorm.rvs(
            self._a, self._b, loc=self.base.mean[self.axis], scale=sd, size=n, random_state=rng
        )
        return X

    def to_config(self) -> dict:
        return {
            "kind": "truncated_gaussian",
            "mean": self.base.mean.tolist(),
            "variance": float(self.base._var[0]) if self.base.kind == "isotropic" else self.base._var.tolist(),
            "axis": self.axis,
            "bound": self.bound,
            "side": self.side,
        }


class LabeledMixtureDistribution(_DensityMixin):
    """Joint distribution over (features, class) with per-class conditionals."""

    def __init__(self, priors: Sequence[float], conditionals: Sequence[Density]):
        p = np.asarray(priors, dtype=float)
        if p.ndim != 1 or p.size == 0 or p.size != len(conditionals):
            raise ConfigError("need one prior per class-conditional")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError(f"class priors must be a simplex, got {p.tolist()}")
        dims = {c.dim for c in conditionals}
        if len(dims) != 1:
            raise ConfigError("class-conditionals disagree on feature dimension")
        self.priors = p.copy()
        self.priors.setflags(write=False)
        self.conditionals = tuple(conditionals)
        self.num_classes = p.size
        self.dim = dims.pop()
        with np.errstate(divide="ignore"):
            self._log_priors = np.log(self.priors)

    def log_joint(self, x) -> np.ndarray:
        """log pi(y) + log p(x|y), shape (n, L)."""
        X, single = _as_points(x, self.dim)
        cols = [np.atleast_1d(c.log_pdf(X)) for c in self.conditionals]
        out = np.stack(cols, axis=1) + self._log_priors
        return out[0] if single else out

    def log_pdf(self, x) -> np.ndarray:
        lj = self.log_joint(x)
        return logsumexp(lj, axis=-1)

    def posterior(self, x) -> np.ndarray:
        X, single = _as_points(x, self.dim)
        lj = self.log_joint(X)
        norm = logsumexp(lj, axis=1, keepdims=True)
        dead = ~np.isfinite(norm[:, 0])
        with np.errstate(invalid="ignore"):
            post = np.exp(lj - norm)
        if dead.any():
            post[dead] = self.priors
        return post[0] if single else post

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.choice(self.num_classes, size=n, p=self.priors)
        X = np.empty((n, self.dim))
        for k, cond in enumerate(self.conditionals):
            idx = np.flatnonzero(y == k)
            if idx.size:
                X[idx] = cond.sample(idx.size, rng)
        return X, y

    def to_config(self) -> dict:
        return {
            "classes": [
                dict(c.to_config(), prior=float(p)) for c, p in zip(self.conditionals, self.priors)
            ]
        }


def posterior(dist: LabeledMixtureDistribution, x) -> np.ndarray:
    """Exact P(y|x); falls back to the prior where every joint density is zero."""
    return dist.posterior(x)


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int | None
    origin: str


@dataclass(frozen=True)
class SampleSet:
    """A batch of draws. ``labels`` is -1 where no label is attached."""

    features: np.ndarray
    labels: np.ndarray
    origin: np.ndarray
    source: str
    exact_strict: bool = True

    def __len__(self) -> int:
        return self.features.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        for x, y, o in zip(self.features, self.labels, self.origin):
            yield Sample(x, None if y < 0 else int(y), str(o))

    @property
    def inlier_mask(self) -> np.ndarray:
        return np.isin(self.origin, ("inlier", "strict_inlier"))


@dataclass(frozen=True)
class ScodEnvironment:
    """Inlier distribution, outlier density and the two mixing weights.

    ``pi_in_star`` is the inlier share of the test distribution and
    ``pi_mix`` the inlier share of the unlabeled wild sample.
    """

    inlier: LabeledMixtureDistribution
    outlier: Density
    pi_in_star: float = 0.5
    pi_mix: float = 0.5
    name: str = field(default="environment", compare=False)

    def __post_init__(self):
        if not 0.0 < self.pi_in_star < 1.0:
            raise ConfigError(f"pi_in_star must lie in (0, 1), got {self.pi_in_star}")
        if not 0.0 <= self.pi_mix <= 1.0:
            raise ConfigError(f"pi_mix must lie in [0, 1], got {self.pi_mix}")
        if self.outlier.dim != self.inlier.dim:
            raise ConfigError("outlier density and inlier distribution disagree on dimension")

    @property
    def dim(self) -> int:
        return self.inlier.dim

    @property
    def num_classes(self) -> int:
        return self.inlier.num_classes

    def log_pdf_in(self, x):
        return self.inlier.log_pdf(x)

    def log_pdf_out(self, x):
        return self.outlier.log_pdf(x)

    def _log_mixture(self, x, w):
        with np.errstate(divide="ignore"):
            lw, lw1 = np.log(w), np.log1p(-w)
        return np.logaddexp(lw + self.log_pdf_in(x), lw1 + self.log_pdf_out(x))

    def log_pdf_mix(self, x):
        return self._log_mixture(x, self.pi_mix)

    def log_pdf_test(self, x):
        return self._log_mixture(x, self.pi_in_star)

    def inlier_posterior(self, x):
        return self.inlier.posterior(x)

    def log_density_ratio(self, x):
        """log P_out(x) - log P_in(x); +inf wherever P_in vanishes."""
        li = np.asarray(self.log_pdf_in(x), dtype=float)
        lo = np.asarray(self.log_pdf_out(x), dtype=float)
        with np.errstate(invalid="ignore"):
            r = lo - li
        r = np.where(np.isneginf(li), np.inf, r)
        return r if r.ndim else float(r)

    def density_ratio(self, x):
        """P_out(x) / P_in(x), exact, computed in log-space."""
        with np.errstate(over="ignore"):
            return np.exp(self.log_density_ratio(x))

    def inlier_share(self, x):
        """P_in / (P_in + P_out): the probability an equal-weight draw at x is inlier."""
        li = np.asarray(self.log_pdf_in(x), dtype=float)
        lo = np.asarray(self.log_pdf_out(x), dtype=float)
        both = np.logaddexp(li, lo)
        with np.errstate(invalid="ignore"):
            g = np.exp(li - both)
        return np.where(np.isneginf(both), 0.0, g)

    def sample(self, source: str, n: int, seed: int) -> SampleSet:
        if source not in SOURCES:
            raise ConfigError(f"unknown sample source {source!r}; expected one of {SOURCES}")
        if n < 0:
            raise ConfigError("sample size must be non-negative")
        rng = make_rng(seed)
        if source == "inlier":
            X, y = self.inlier.sample(n, rng)
            return SampleSet(X, y, np.full(n, "inlier"), source)
        if source == "outlier":
            X = self.outlier.sample(n, rng)
            return SampleSet(X, np.full(n, -1), np.full(n, "outlier"), source)
        w = self.pi_mix if source == "wild" else self.pi_in_star
        is_in = rng.random(n) < w
        n_in = int(is_in.sum())
        Xi, yi = self.inlier.sample(n_in, rng)
        Xo = self.outlier.sample(n - n_in, rng)
        X = np.empty((n, self.dim))
        X[is_in], X[~is_in] = Xi, Xo
        y = np.full(n, -1)
        y[is_in] = yi
        origin = np.where(is_in, "inlier", "outlier")
        return SampleSet(X, y, origin, source)

    def sample_strict_inlier(self, n: int, seed: int, max_rounds: int = 50) -> SampleSet:
        """Labeled inlier draws certified to have zero outlier density.

        Rejection-samples P_in restricted to {P_out = 0}. When the outlier
        density is positive everywhere the draws come straight from P_in and
        the set is flagged ``exact_strict=False`` (a practical surrogate).
        """
        rng = make_rng(seed)
        keep_X, keep_y, have = [], [], 0
        batch = max(4 * n, 64)
        for round_ in range(max_rounds):
            if have >= n:
                break
            X, y = self.inlier.sample(batch, rng)
            ok = np.isneginf(np.atleast_1d(self.log_pdf_out(X)))
            keep_X.append(X[ok])
            keep_y.append(y[ok])
            have += int(ok.sum())
            # outlier support covers everything drawn so far: give up early
            if have == 0 and round_ >= 4:
                break
        if have >= n:
            X = np.concatenate(keep_X)[:n]
            y = np.concatenate(keep_y)[:n]
            return SampleSet(X, y, np.full(n, "strict_inlier"), "strict_inlier", exact_strict=True)
        X, y = self.inlier.sample(n, make_rng(seed))
        return SampleSet(X, y, np.full(n, "strict_inlier"), "strict_inlier", exact_strict=False)

    def to_config(self) -> dict:
        out = self.inlier.to_config()
        out["outlier"] = self.outlier.to_config()
        out["pi_in_star"] = self.pi_in_star
        out["pi_mix"] = self.pi_mix
        return out


def open_set_restrict(
    full: LabeledMixtureDistribution, held_out_class: int, pi_mix: float = 0.0
) -> ScodEnvironment:
    """Hide one class of ``full`` and treat it as the outlier distribution.

    Classes are 0-indexed. The remaining priors are renormalised and the
    test inlier weight becomes 1 - prior(held_out).
    """
    L = full.num_classes
    if L < 2:
        raise ConfigError("open-set restriction needs at least two classes")
    if not 0 <= held_out_class < L:
        raise ConfigError(f"held-out class {held_out_class} out of range for {L} classes")
    p_held = float(full.priors[held_out_class])
    if p_held <= 0.0 or p_held >= 1.0:
        raise ConfigError(f"held-out class prior {p_held} is degenerate")
    keep = [k for k in range(L) if k != held_out_class]
    priors = full.priors[keep] / (1.0 - p_held)
    priors = priors / priors.sum()
    inlier = LabeledMixtureDistribution(priors, [full.conditionals[k] for k in keep])
    return ScodEnvironment(
        inlier=inlier,
        outlier=full.conditionals[held_out_class],
        pi_in_star=1.0 - p_held,
        pi_mix=pi_mix,
        name="open-set",
    )


# --- declarative configs -----------------------------------------------------


def density_from_config(cfg: dict) -> Density:
    kind = cfg.get("kind", "gaussian")
    try:
        if kind == "gaussian":
            cov = cfg.get("covariance", cfg.get("variance", 1.0))
            return GaussianClassConditional(cfg["mean"], cov)
        if kind == "uniform":
            return UniformBox(cfg["low"], cfg["high"])
        if kind == "truncated_gaussian":
            return TruncatedGaussian(
                cfg["mean"], cfg.get("variance", 1.0), cfg["axis"], cfg["bound"], cfg.get("side", "above")
            )
    except KeyError as exc:
        raise ConfigError(f"density config of kind {kind!r} is missing field {exc}") from None
    raise ConfigError(f"unknown density kind {kind!r}")


def mixture_from_config(classes: list[dict]) -> LabeledMixtureDistribution:
    if not classes:
        raise ConfigError("environment needs at least one class")
    priors = [c.get("prior", 1.0 / len(classes)) for c in classes]
    return LabeledMixtureDistribution(priors, [density_from_config(c) for c in classes])


def environment_from_config(cfg: dict) -> ScodEnvironment:
    """Build an environment from a parsed ``[environment]`` table.

    Either ``held_out_class`` is given (open-set: the outlier is that class),
    or an explicit ``outlier`` density table.
    """
    full = mixture_from_config(cfg.get("classes", []))
    pi_mix = float(cfg.get("pi_mix", 0.5))
    name = cfg.get("name", "environment")
    if "held_out_class" in cfg:
        env = open_set_restrict(full, int(cfg["held_out_class"]), pi_mix=pi_mix)
        pi_star = float(cfg.get("pi_in_star", env.pi_in_star))
        return ScodEnvironment(env.inlier, env.outlier, pi_star, pi_mix, name)
    if "outlier" not in cfg:
        raise ConfigError("environment needs either 'held_out_class' or an 'outlier' table")
    return ScodEnvironment(
        inlier=full,
        outlier=density_from_config(cfg["outlier"]),
        pi_in_star=float(cfg.get("pi_in_star", 0.5)),
        pi_mix=pi_mix,
        name=name,
    )


def load_environment(path: str | Path) -> ScodEnvironment:
    from .config import load_toml

    cfg = load_toml(path)
    return environment_from_config(cfg.get("environment", cfg))
