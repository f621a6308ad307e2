"""Small trainable scorers and the decoupled / coupled surrogate losses.

A scorer maps features to L classification logits ``f``, optionally an
extra reject logit (the coupled variant), and optionally a scalar OOD logit
``s`` (the decoupled variant). Hidden layers use tanh. Gradients are
written out by hand; :func:`numeric_gradient` exists for checking them.

The OOD logit treats *inliers* as the positive class, so at the population
optimum ``s(x) = log P_in(x) / P_mix(x)`` and ``exp(-s)`` estimates
``P_mix / P_in``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .bayes_rules import CostSpec
from .distributions import ScodEnvironment, make_rng
from .errors import ConfigError, DataError, TrainingError

MODEL_FORMAT = "scod-model v1"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dim: int = 0
    num_classes: int = 2
    reject_logit: bool = False
    ood_head: bool = True
    shared: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 1 or self.hidden_dim < 0:
            raise ConfigError(f"invalid architecture {self}")

    @property
    def num_logits(self) -> int:
        return self.num_classes + int(self.reject_logit)

    @property
    def embed_dim(self) -> int:
        return self.hidden_dim or self.input_dim

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        D, H, K, E = self.input_dim, self.hidden_dim, self.num_logits, self.embed_dim
        parts = []
        if H:
            parts += [("W1", (H, D)), ("b1", (H,))]
            if self.ood_head and not self.shared:
                parts += [("V1", (H, D)), ("c1", (H,))]
        parts += [("W2", (K, E)), ("b2", (K,))]
        if self.ood_head:
            parts += [("u", (E,)), ("c", (1,))]
        return parts

    @property
    def num_params(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())


@dataclass
class Forward:
    logits: np.ndarray
    s: np.ndarray | None
    embedding: np.ndarray
    ood_embedding: np.ndarray


@dataclass(frozen=True)
class ProbabilityEstimates:
    class_probs: np.ndarray
    ood_prob: np.ndarray | None
    embedding: np.ndarray
    augmented_probs: np.ndarray | None = None


class ScorerModel:
    """Linear or one-hidden-layer scorer with a flat parameter vector."""

    def __init__(self, arch: Architecture, params=None):
        self.arch = arch
        if params is None:
            params = np.zeros(arch.num_params)
        params = np.array(params, dtype=float)
        if params.shape != (arch.num_params,):
            raise ConfigError(f"expected {arch.num_params} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def initialize(cls, arch: Architecture, seed: int) -> "ScorerModel":
        """Glorot-uniform weights, zero biases."""
        rng = make_rng(seed)
        model = cls(arch)
        for name, view in model._views().items():
            if view.ndim == 2:
                a = math.sqrt(6.0 / (view.shape[0] + view.shape[1]))
                view[...] = rng.uniform(-a, a, size=view.shape)
            elif name == "u":
                a = math.sqrt(6.0 / (view.shape[0] + 1))
                view[...] = rng.uniform(-a, a, size=view.shape)
        return model

    def copy(self) -> "ScorerModel":
        return ScorerModel(self.arch, self.params.copy())

    def _views(self, flat=None) -> dict[str, np.ndarray]:
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self.arch.layout():
            n = math.prod(shape)
            out[name] = flat[i : i + n].reshape(shape)
            i += n
        return out

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.arch.input_dim)
        if X.shape[1] != self.arch.input_dim:
            raise DataError(f"model expects {self.arch.input_dim} features, got {X.shape[1]}")
        return X

    def forward(self, X) -> Forward:
        X = self._check_input(X)
        v = self._views()
        if self.arch.hidden_dim:
            phi = np.tanh(X @ v["W1"].T + v["b1"])
        else:
            phi = X
        logits = phi @ v["W2"].T + v["b2"]
        psi, s = phi, None
        if self.arch.ood_head:
            if self.arch.hidden_dim and not self.arch.shared:
                psi = np.tanh(X @ v["V1"].T + v["c1"])
            s = psi @ v["u"] + v["c"][0]
        return Forward(logits, s, phi, psi)

    def backward(self, X, fwd: Forward, dlogits, ds=None) -> np.ndarray:
        """Gradient of a loss w.r.t. the flat parameters, given d loss / d outputs."""
        X = self._check_input(X)
        grad = np.zeros_like(self.params)
        g, v = self._views(grad), self._views()
        phi = fwd.embedding
        g["W2"][...] = dlogits.T @ phi
        g["b2"][...] = dlogits.sum(axis=0)
        dphi = dlogits @ v["W2"]
        if self.arch.ood_head and ds is not None:
            g["u"][...] = fwd.ood_embedding.T @ ds
            g["c"][0] = ds.sum()
            dpsi = np.outer(ds, v["u"])
            if self.arch.hidden_dim and not self.arch.shared:
                db = dpsi * (1.0 - fwd.ood_embedding**2)
                g["V1"][...] = db.T @ X
                g["c1"][...] = db.sum(axis=0)
            else:
                dphi = dphi + dpsi
        if self.arch.hidden_dim:
            da = dphi * (1.0 - phi**2)
            g["W1"][...] = da.T @ X
            g["b1"][...] = da.sum(axis=0)
        return grad

    def logits_and_ood(self, X) -> tuple[np.ndarray, np.ndarray | None]:
        fwd = self.forward(X)
        return fwd.logits, fwd.s

    def embed(self, X) -> np.ndarray:
        return self.forward(X).embedding

    def probability_estimates(self, X) -> ProbabilityEstimates:
        fwd = self.forward(X)
        L = self.arch.num_classes
        aug = softmax(fwd.logits, axis=1) if self.arch.reject_logit else None
        p_ood = expit(fwd.s) if fwd.s is not None else None
        return ProbabilityEstimates(softmax(fwd.logits[:, :L], axis=1), p_ood, fwd.embedding, aug)

    # --- serialization ---------------------------------------------------

    def save(self, path: str | Path) -> None:
        a = self.arch
        header = (
            f"input_dim={a.input_dim} hidden_dim={a.hidden_dim} num_classes={a.num_classes} "
            f"reject_logit={int(a.reject_logit)} ood_head={int(a.ood_head)} shared={int(a.shared)}"
        )
        lines = [MODEL_FORMAT, header, f"n_params={a.num_params}"]
        lines += [repr(float(p)) for p in self.params]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ScorerModel":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0].strip() != MODEL_FORMAT:
            raise DataError(f"{path}: not a '{MODEL_FORMAT}' file")
        try:
            fields = dict(tok.split("=") for tok in lines[1].split())
            arch = Architecture(
                input_dim=int(fields["input_dim"]),
                hidden_dim=int(fields["hidden_dim"]),
                num_classes=int(fields["num_classes"]),
                reject_logit=bool(int(fields["reject_logit"])),
                ood_head=bool(int(fields["ood_head"])),
                shared=bool(int(fields["shared"])),
            )
            n = int(lines[2].split("=")[1])
            params = np.array([float(t) for t in lines[3 : 3 + n]])
        except (KeyError, ValueError, IndexError) as exc:
            raise DataError(f"{path}: malformed model file ({exc})") from None
        if params.size != n or n != arch.num_params:
            raise DataError(f"{path}: parameter count does not match the architecture")
        return cls(arch, params)


class OracleScorer:
    """Scorer whose outputs come from exact densities.

    Logits are log P_in(y|x); the OOD logit is log P_in(x) - log P_mix(x).
    Plugging it into the loss-based rule must reproduce the Bayes rule.
    """

    def __init__(self, env: ScodEnvironment):
        self.env = env
        self.num_classes = env.num_classes

    def logits_and_ood(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, self.env.dim)
        with np.errstate(divide="ignore"):
            logits = np.log(self.env.inlier_posterior(X))
        li = np.atleast_1d(self.env.log_pdf_in(X))
        lm = np.atleast_1d(self.env.log_pdf_mix(X))
        with np.errstate(invalid="ignore"):
            s = li - lm
        s = np.where(np.isneginf(li), -np.inf, s)
        return logits, s

    def embed(self, X):
        return np.asarray(X, dtype=float).reshape(-1, self.env.dim)


# --- losses ------------------------------------------------------------------


@dataclass
class LossReport:
    """Loss value, its additive terms, and the analytic gradient."""

    total: float
    terms: dict[str, float]
    gradient: np.ndarray


def _check_labels(y, L) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= L or not np.issubdtype(y.dtype, np.integer)):
        raise DataError(f"labels must be integers in [0, {L})")
    return y.astype(int)


def _softmax_ce(logits, target):
    """Per-row cross-entropy and d/dlogits (unscaled)."""
    lsm = log_softmax(logits, axis=1)
    n = logits.shape[0]
    loss = -lsm[np.arange(n), target]
    d = np.exp(lsm)
    d[np.arange(n), target] -= 1.0
    return loss, d


def decoupled_loss(model: ScorerModel, X_in, y_in, X_mix) -> LossReport:
    """Softmax CE on inliers plus sigmoid CE separating inliers (+1) from the mix (-1).

    Each term is a per-set mean.
    """
    if not model.arch.ood_head or model.arch.reject_logit:
        raise ConfigError("decoupled loss needs an OOD head and no reject logit")
    X_in = model._check_input(X_in)
    X_mix = model._check_input(X_mix)
    if len(X_in) == 0 or len(X_mix) == 0:
        raise DataError("decoupled loss needs non-empty inlier and mix batches")
    y = _check_labels(y_in, model.arch.num_classes)
    n_in, n_mix = len(X_in), len(X_mix)

    f_in = model.forward(X_in)
    ce, dlog = _softmax_ce(f_in.logits, y)
    bc_in = np.logaddexp(0.0, -f_in.s)
    ds_in = -expit(-f_in.s) / n_in
    grad = model.backward(X_in, f_in, dlog / n_in, ds_in)

    f_mix = model.forward(X_mix)
    bc_mix = np.logaddexp(0.0, f_mix.s)
    ds_mix = expit(f_mix.s) / n_mix
    grad += model.backward(X_mix, f_mix, np.zeros_like(f_mix.logits), ds_mix)

    terms = {"ce": ce.mean(), "bc_inlier": bc_in.mean(), "bc_mix": bc_mix.mean()}
    return LossReport(float(sum(terms.values())), {k: float(v) for k, v in terms.items()}, grad)


def coupled_loss(model: ScorerModel, X_in, y_in, X_out, costs: CostSpec) -> LossReport:
    """(L+1)-way softmax CE with a reject class.

    E_in[CE(y)] + (1 - c_in) E_in[CE(reject)] + c_out E_out[CE(reject)].
    With c_out = 0 the outlier batch may be empty and its term is dropped.
    """
    if not model.arch.reject_logit:
        raise ConfigError("coupled loss needs a model with a reject logit")
    X_in = model._check_input(X_in)
    if len(X_in) == 0:
        raise DataError("coupled loss needs a non-empty inlier batch")
    X_out = np.asarray(X_out, dtype=float).reshape(-1, model.arch.input_dim)
    if len(X_out) == 0 and costs.c_out > 0:
        raise DataError("coupled loss with c_out > 0 needs a non-empty outlier batch")
    L = model.arch.num_classes
    y = _check_labels(y_in, L)
    n_in = len(X_in)

    f_in = model.forward(X_in)
    ce, d_ce = _softmax_ce(f_in.logits, y)
    rej_in, d_rej_in = _softmax_ce(f_in.logits, np.full(n_in, L))
    w_in = 1.0 - costs.c_in
    dlog = (d_ce + w_in * d_rej_in) / n_in
    grad = model.backward(X_in, f_in, dlog, None)
    terms = {"ce": ce.mean(), "reject_inlier": w_in * rej_in.mean()}

    if len(X_out):
        f_out = model.forward(X_out)
        rej_out, d_rej_out = _softmax_ce(f_out.logits, np.full(len(X_out), L))
        grad += model.backward(X_out, f_out, costs.c_out * d_rej_out / len(X_out), None)
        terms["reject_outlier"] = costs.c_out * rej_out.mean()
    return LossReport(float(sum(terms.values())), {k: float(v) for k, v in terms.items()}, grad)


def numeric_gradient(fn, params: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``fn(params) -> float``."""
    g = np.empty_like(params)
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        up = fn(p)
        p[i] -= 2 * h
        g[i] = (up - fn(p)) / (2 * h)
    return g


# --- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Minibatch SGD with momentum and step annealing.

    ``anneal_epochs`` lists 1-based epoch numbers after which the step size
    is divided by ``anneal_factor``.
    """

    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    anneal_epochs: tuple[int, ...] = ()
    anneal_factor: float = 10.0
    weight_decay: float = 0.0

    @classmethod
    def safe(cls, epochs: int = 50, lr: float = 0.05) -> "TrainConfig":
        """Full-batch plain gradient descent with a small step.

        Under this config the per-epoch training loss never increases; it
        is the one configuration for which that is asserted.
        """
        return cls(epochs=epochs, batch_size=1 << 30, lr=lr, momentum=0.0)


@dataclass
class TrainResult:
    model: ScorerModel
    losses: list[float] = field(default_factory=list)


def _canonical_order(X, y=None) -> np.ndarray:
    keys = [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    if y is not None:
        keys = [y] + keys
    return np.lexsort(keys)


def _objective_fn(objective, costs):
    if objective == "decoupled":
        return lambda m, Xi, yi, Xa: decoupled_loss(m, Xi, yi, Xa)
    if objective == "coupled":
        if costs is None:
            raise ConfigError("coupled objective needs costs")
        return lambda m, Xi, yi, Xa: coupled_loss(m, Xi, yi, Xa, costs)
    raise ConfigError(f"unknown objective {objective!r}")


def train(
    model: ScorerModel,
    objective: str,
    X_in,
    y_in,
    X_aux,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    costs: CostSpec | None = None,
) -> TrainResult:
    """Fit ``model`` to the decoupled or coupled objective.

    ``X_aux`` is the unlabeled wild sample (decoupled) or the outlier / wild
    sample (coupled). Rows are put into a canonical order before the
    seed-driven shuffling, so reordering the inputs does not change the
    result. Returns a new model; the input model is left untouched.
    """
    loss_fn = _objective_fn(objective, costs)
    X_in = model._check_input(X_in)
    y_in = _check_labels(y_in, model.arch.num_classes)
    X_aux = np.asarray(X_aux, dtype=float).reshape(-1, model.arch.input_dim)
    o_in, o_aux = _canonical_order(X_in, y_in), _canonical_order(X_aux)
    X_in, y_in, X_aux = X_in[o_in], y_in[o_in], X_aux[o_aux]

    result = TrainResult(model.copy())
    m = result.model
    if config.epochs <= 0:
        return result
    rng = make_rng(seed)
    velocity = np.zeros_like(m.params)
    n_in, n_aux = len(X_in), len(X_aux)
    steps = max(1, math.ceil(n_in / config.batch_size))
    if n_aux:
        steps = min(steps, n_aux)
    lr = config.lr
    for epoch in range(1, config.epochs + 1):
        in_batches = np.array_split(rng.permutation(n_in), steps)
        aux_batches = np.array_split(rng.permutation(n_aux), steps)
        for bi, ba in zip(in_batches, aux_batches):
            rep = loss_fn(m, X_in[bi], y_in[bi], X_aux[ba])
            g = rep.gradient + config.weight_decay * m.params
            velocity = config.momentum * velocity - lr * g
            m.params = m.params + velocity
        full = loss_fn(m, X_in, y_in, X_aux).total
        if not np.isfinite(full) or not np.all(np.isfinite(m.params)):
            raise TrainingError(epoch)
        result.losses.append(full)
        if epoch in config.anneal_epochs:
            lr /= config.anneal_factor
    return result


def oracle_surrogate_risks(model, env: ScodEnvironment, X_in, X_out):
    """Per-sample conditional excess risks for the decoupled objective.

    Returns ``(kl_class, kl_ood_in, kl_ood_out)``:
    * ``kl_class[i]`` = KL(P_in(.|x_i) || p(.|x_i)) for inlier draws, i.e. the
      conditional excess softmax cross-entropy over the exact minimiser;
    * the binary KLs between the exact inlier share P_in/(P_in+P_out) and
      ``sigmoid(s(x))`` at inlier and outlier draws (excess sigmoid CE under
      the equal-weight inlier/outlier mixture).
    """
    logits, s = model.logits_and_ood(X_in)
    L = env.num_classes
    eta = env.inlier_posterior(X_in)
    lp = log_softmax(logits[:, :L], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_class = np.where(eta > 0, eta * (np.log(eta) - lp), 0.0).sum(axis=1)

    def binary_kl(X, s_vals):
        g = env.inlier_share(X)
        log_p = -np.logaddexp(0.0, -s_vals)
        log_q = -np.logaddexp(0.0, s_vals)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(g > 0, g * (np.log(g) - log_p), 0.0)
            b = np.where(g < 1, (1 - g) * (np.log1p(-g) - log_q), 0.0)
        return a + b

    _, s_out = model.logits_and_ood(X_out)
    return kl_class, binary_kl(X_in, s), binary_kl(X_out, s_out)


__all__ = [
    "Architecture",
    "ScorerModel",
    "OracleScorer",
    "ProbabilityEstimates",
    "LossReport",
    "TrainConfig",
    "TrainResult",
    "decoupled_loss",
    "coupled_loss",
    "numeric_gradient",
    "train",
    "oracle_surrogate_risks",
]
