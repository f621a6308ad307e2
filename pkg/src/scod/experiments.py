"""Experiment configs, method registry and the per-seed evaluation pipeline.

A run draws train / wild / strict-inlier / test samples from a synthetic
environment (or reads an external logits file), fits the scorers, and turns
every requested method into a rejection score on the test set. Curves and
summaries are written with shortest round-trip floats and sorted JSON keys,
so identical configs and seeds give byte-identical artifacts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import softmax

from . import post_hoc_scores as phs
from .bayes_rules import BudgetSpec, CostSpec
from .config import load_toml
from .distributions import ScodEnvironment, environment_from_config
from .errors import ConfigError, DataError
from .logits_io import LogitsData, make_logits_data, read_logits, write_logits
from .metrics import (
    CURVE_COLUMNS,
    EvaluationSet,
    auc_roc,
    fpr_at_95tpr,
    joint_risk,
    risk_coverage_curve,
    rows_to_csv,
    soft_penalty_risk,
    to_json,
)
from .plugin_rejectors import (
    PluginInputs,
    black_box_reject,
    budget_search,
    curve_score,
    default_lambda_grid,
    estimate_pi_mix,
    noise_correct,
)
from .scorer_models import Architecture, ScorerModel, TrainConfig, train

log = logging.getLogger(__name__)

POST_HOC_METHODS = ("msp", "maxlogit", "energy", "sirc-l1", "sirc-res", "plugin-bb-l1", "plugin-bb-res", "plugin-lb")
MODEL_METHODS = ("coupled", "bayes")
METHODS = POST_HOC_METHODS + MODEL_METHODS
PLUGIN_METHODS = ("plugin-bb-l1", "plugin-bb-res", "plugin-lb", "bayes")
SCENARIOS = ("open-set", "uniform-outlier", "wild-mixture")
OUTPUT_ENV = "SCOD_OUTPUT_DIR"

_ALLOWED = {
    "experiment": {
        "name", "methods", "seeds", "output_dir", "c_fn", "grid_size", "strict_fraction", "logits",
        "residual_dim", "export_logits", "save_models",
    },
    "data": {"n_train", "n_wild", "n_test_in", "n_test_out"},
    "model": {"hidden_dim", "shared"},
    "train": {"epochs", "batch_size", "lr", "momentum", "anneal_epochs", "anneal_factor", "weight_decay"},
    "costs": {"c_in", "c_out"},
    "budget": {"b_rej", "pi_in_star", "lambda_grid", "c_fn"},
    "environment": None,
}


@dataclass(frozen=True)
class DataSizes:
    n_train: int = 2000
    n_wild: int = 2000
    n_test_in: int = 5000
    n_test_out: int = 5000


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    environment: ScodEnvironment | None = None
    logits_path: Path | None = None
    c_fn: float = 0.75
    grid_size: int = 101
    strict_fraction: float = 0.05
    residual_dim: int | None = None
    data: DataSizes = DataSizes()
    hidden_dim: int = 16
    shared: bool = True
    train: TrainConfig = TrainConfig()
    costs: CostSpec = CostSpec(0.2, 0.5)
    b_rej: tuple[float, ...] = ()
    budget_pi_in_star: float | None = None
    budget_c_fn: float | None = None
    lambda_grid: tuple[float, ...] | None = None
    export_logits: bool = True
    save_models: bool = True
    raw: dict = field(default_factory=dict, repr=False, compare=False)


def _table(cfg: dict, name: str) -> dict:
    t = cfg.get(name, {})
    if not isinstance(t, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = _ALLOWED[name]
    if allowed is not None:
        extra = sorted(set(t) - allowed)
        if extra:
            raise ConfigError(f"[{name}]: unknown field(s) {', '.join(extra)}")
    return t


def _num(table: dict, key: str, default, kind=float, section: str = ""):
    v = table.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"[{section}] {key}: expected a number, got {v!r}")
    if kind is int and int(v) != v:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {v!r}")
    return kind(v)


def parse_experiment(cfg: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a parsed TOML document into an :class:`ExperimentConfig`."""
    extra = sorted(set(cfg) - set(_ALLOWED))
    if extra:
        raise ConfigError(f"unknown section(s) {', '.join(extra)}")
    base_dir = Path(".") if base_dir is None else base_dir
    ex = _table(cfg, "experiment")
    methods = ex.get("methods", list(METHODS))
    if not isinstance(methods, list) or not methods:
        raise ConfigError("[experiment] methods: need a non-empty list")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"[experiment] methods: unknown method(s) {unknown}; known: {list(METHODS)}")
    if len(set(methods)) != len(methods):
        raise ConfigError("[experiment] methods: duplicate entries")
    seeds = ex.get("seeds", [0])
    if not isinstance(seeds, list) or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds):
        raise ConfigError("[experiment] seeds: need a list of integers")
    if not seeds:
        raise ConfigError("[experiment] seeds: at least one seed is required")
    if any(s < 0 for s in seeds):
        raise ConfigError("[experiment] seeds: must be non-negative")

    env, logits_path = None, None
    if "logits" in ex:
        logits_path = base_dir / ex["logits"]
        bad = [m for m in methods if m in MODEL_METHODS]
        if bad:
            raise ConfigError(f"[experiment] methods {bad} need a synthetic environment, not a logits file")
        if "environment" in cfg:
            raise ConfigError("give either [experiment] logits or an [environment], not both")
    else:
        if "environment" not in cfg:
            raise ConfigError("config needs an [environment] table or [experiment] logits")
        env = environment_from_config(_table(cfg, "environment"))

    c_fn = _num(ex, "c_fn", 0.75, section="experiment")
    if not 0.0 <= c_fn <= 1.0:
        raise ConfigError(f"[experiment] c_fn must lie in [0, 1], got {c_fn}")
    grid_size = _num(ex, "grid_size", 101, int, "experiment")
    if grid_size < 2:
        raise ConfigError("[experiment] grid_size must be at least 2")
    strict_fraction = _num(ex, "strict_fraction", 0.05, section="experiment")
    if not 0.0 < strict_fraction <= 1.0:
        raise ConfigError("[experiment] strict_fraction must lie in (0, 1]")

    d = _table(cfg, "data")
    sizes = DataSizes(**{k: _num(d, k, getattr(DataSizes, k), int, "data") for k in _ALLOWED["data"]})
    if min(sizes.n_train, sizes.n_wild, sizes.n_test_in, sizes.n_test_out) < 1:
        raise ConfigError("[data] sample sizes must be positive")

    m = _table(cfg, "model")
    t = _table(cfg, "train")
    defaults = TrainConfig()
    anneal = t.get("anneal_epochs", list(defaults.anneal_epochs))
    if not isinstance(anneal, list):
        raise ConfigError("[train] anneal_epochs: need a list of epoch numbers")
    tc = TrainConfig(
        epochs=_num(t, "epochs", defaults.epochs, int, "train"),
        batch_size=_num(t, "batch_size", defaults.batch_size, int, "train"),
        lr=_num(t, "lr", defaults.lr, section="train"),
        momentum=_num(t, "momentum", defaults.momentum, section="train"),
        anneal_epochs=tuple(int(a) for a in anneal),
        anneal_factor=_num(t, "anneal_factor", defaults.anneal_factor, section="train"),
        weight_decay=_num(t, "weight_decay", defaults.weight_decay, section="train"),
    )
    if tc.batch_size < 1 or tc.epochs < 0 or tc.lr <= 0:
        raise ConfigError("[train] needs batch_size >= 1, epochs >= 0 and lr > 0")

    c = _table(cfg, "costs")
    costs = CostSpec(_num(c, "c_in", 0.2, section="costs"), _num(c, "c_out", 0.5, section="costs"))

    b = _table(cfg, "budget")
    b_rej = b.get("b_rej", [])
    if isinstance(b_rej, (int, float)):
        b_rej = [b_rej]
    grid = b.get("lambda_grid")
    if grid is not None and (not isinstance(grid, list) or not grid or any(g < 0 for g in grid)):
        raise ConfigError("[budget] lambda_grid: need a non-empty list of non-negative numbers")
    residual_dim = _num(ex, "residual_dim", None, int, "experiment")

    return ExperimentConfig(
        name=str(ex.get("name", "experiment")),
        methods=tuple(methods),
        seeds=tuple(seeds),
        output_dir=Path(ex.get("output_dir", "scod-results")),
        environment=env,
        logits_path=logits_path,
        c_fn=c_fn,
        grid_size=grid_size,
        strict_fraction=strict_fraction,
        residual_dim=residual_dim,
        data=sizes,
        hidden_dim=_num(m, "hidden_dim", 16, int, "model"),
        shared=bool(m.get("shared", True)),
        train=tc,
        costs=costs,
        b_rej=tuple(float(v) for v in b_rej),
        budget_pi_in_star=_num(b, "pi_in_star", None, section="budget"),
        budget_c_fn=_num(b, "c_fn", None, section="budget"),
        lambda_grid=None if grid is None else tuple(float(g) for g in grid),
        export_logits=bool(ex.get("export_logits", True)),
        save_models=bool(ex.get("save_models", True)),
        raw=cfg,
    )


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    cfg = load_toml(path)
    try:
        return parse_experiment(cfg, path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def scenario_config(name: str) -> ExperimentConfig:
    """Parse one of the bundled demo scenarios."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {list(SCENARIOS)}")
    text = resources.files("scod.scenarios").joinpath(f"{name}.toml").read_text()
    from .config import parse_toml

    return parse_experiment(parse_toml(text, f"<scenario {name}>"))


# --- per-seed data --------------------------------------------------------------


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


@dataclass
class SeedArtifacts:
    """Everything the methods need for one seed."""

    data: LogitsData  # test (in, out), wild and strict_in records
    test: LogitsData
    eval_set: EvaluationSet
    test_X: np.ndarray | None = None
    env: ScodEnvironment | None = None
    decoupled: ScorerModel | None = None
    coupled: ScorerModel | None = None
    losses: dict = field(default_factory=dict)


def prepare_synthetic(cfg: ExperimentConfig, seed: int, need_coupled: bool) -> SeedArtifacts:
    env = cfg.environment
    s_train, s_wild, s_strict, s_in, s_out, s_init = _child_seeds(seed, 6)
    sz = cfg.data
    tr = env.sample("inlier", sz.n_train, s_train)
    wild = env.sample("wild", sz.n_wild, s_wild)
    n_strict = max(2, int(round(cfg.strict_fraction * sz.n_test_in)))
    strict = env.sample_strict_inlier(n_strict, s_strict)
    te_in = env.sample("inlier", sz.n_test_in, s_in)
    te_out = env.sample("outlier", sz.n_test_out, s_out)

    arch = Architecture(env.dim, cfg.hidden_dim, env.num_classes, shared=cfg.shared)
    dec = train(ScorerModel.initialize(arch, s_init), "decoupled", tr.features, tr.labels, wild.features, cfg.train, seed)
    losses = {"decoupled": dec.losses}
    coupled = None
    if need_coupled:
        carch = Architecture(env.dim, cfg.hidden_dim, env.num_classes, reject_logit=True, ood_head=False)
        res = train(
            ScorerModel.initialize(carch, s_init), "coupled", tr.features, tr.labels, wild.features,
            cfg.train, seed, costs=cfg.costs,
        )
        coupled, losses["coupled"] = res.model, res.losses

    model = dec.model
    parts = []
    for origin, ss in (("in", te_in), ("out", te_out), ("wild", wild), ("strict_in", strict)):
        fwd = model.forward(ss.features)
        labels = ss.labels if origin in ("in", "strict_in") else np.full(len(ss), -1)
        parts.append((origin, labels, fwd.logits, fwd.s, fwd.embedding))
    data = make_logits_data(parts)
    test, ev = data.evaluation()
    X = np.concatenate([te_in.features, te_out.features])
    return SeedArtifacts(data, test, ev, X, env, model, coupled, losses)


def prepare_from_logits(data: LogitsData) -> SeedArtifacts:
    test, ev = data.evaluation()
    return SeedArtifacts(data, test, ev)


# --- methods -------------------------------------------------------------------


@dataclass(frozen=True)
class MethodScores:
    """Rejection score (larger = abstain) and predictions on the test set."""

    method: str
    score: np.ndarray
    predictions: np.ndarray
    plugin: PluginInputs | None = None
    info: dict = field(default_factory=dict)


def _fit_pool(art: SeedArtifacts) -> LogitsData:
    pool = art.data.subset("strict_in")
    if len(pool) < 2:
        raise DataError("SIRC / residual scores need at least two 'strict_in' records to fit on")
    return pool


def _ood_raw(art: SeedArtifacts, kind: str, residual_dim):
    """Raw L1 or residual OOD scores on test and fit pool, plus the SIRC params."""
    pool = _fit_pool(art)
    if kind == "l1":
        raw_fit, raw_test, info = phs.embed_l1(pool.embedding), phs.embed_l1(art.test.embedding), {}
        source = "embed_l1"
    else:
        if art.data.embed_dim < 2:
            raise DataError("residual score needs an embedding of dimension >= 2")
        proj = phs.fit_residual(pool.embedding, residual_dim)
        raw_fit, raw_test = phs.residual(proj, pool.embedding), phs.residual(proj, art.test.embedding)
        source, info = "residual", {"subspace_dim": int(proj.components.shape[0])}
    params = phs.fit_sirc(raw_fit, source)
    info.update({"a1": params.a1, "a2": params.a2, "a3": params.a3, "source": source})
    return raw_test, params, info


def method_scores(method: str, art: SeedArtifacts, cfg: ExperimentConfig) -> MethodScores:
    z = art.test.logits
    pred = z.argmax(axis=1)
    probs = softmax(z, axis=1)
    s_sc = probs.max(axis=1)
    if method == "msp":
        return MethodScores(method, -phs.msp(z), pred)
    if method == "maxlogit":
        return MethodScores(method, -phs.max_logit(z), pred)
    if method == "energy":
        return MethodScores(method, phs.energy(z), pred)
    if method in ("sirc-l1", "sirc-res"):
        raw, params, info = _ood_raw(art, method[5:], cfg.residual_dim)
        return MethodScores(method, -phs.sirc_from_raw(phs.msp(z), raw, params), pred, info=info)
    if method in ("plugin-bb-l1", "plugin-bb-res"):
        raw, params, info = _ood_raw(art, method[10:], cfg.residual_dim)
        adapted = phs.SIRC_ADAPTERS[params.source](raw)
        with np.errstate(over="ignore"):
            s_ood = np.exp(params.a2 * adapted + params.a3)
        inputs = PluginInputs(s_sc, s_ood, pred, probs)
        return MethodScores(method, curve_score(inputs, cfg.c_fn), pred, inputs, info)
    if method == "plugin-lb":
        if not art.data.has_ood:
            raise DataError("plugin-lb needs an OOD logit on every record")
        mix = estimate_pi_mix(art.data.subset("strict_in").ood)
        with np.errstate(over="ignore"):
            corr = noise_correct(np.exp(-art.test.ood), mix.pi_mix_hat)
        inputs = PluginInputs(s_sc, corr.s_ood, pred, probs)
        info = {
            "pi_mix_hat": mix.pi_mix_hat,
            "pi_mix_clamped": mix.clamped,
            "ratio_clamped": int(np.sum(corr.clamped)),
        }
        return MethodScores(method, curve_score(inputs, cfg.c_fn), pred, inputs, info)
    if method == "coupled":
        if art.coupled is None:
            raise ConfigError("coupled method needs a trained coupled model")
        zeta = softmax(art.coupled.forward(art.test_X).logits, axis=1)
        L = art.coupled.arch.num_classes
        return MethodScores(method, zeta[:, L] - zeta[:, :L].max(axis=1), zeta[:, :L].argmax(axis=1))
    if method == "bayes":
        if art.env is None:
            raise ConfigError("bayes method needs a synthetic environment")
        post = art.env.inlier_posterior(art.test_X)
        with np.errstate(divide="ignore"):
            s_ood = 1.0 / art.env.density_ratio(art.test_X)
        bpred = post.argmax(axis=1)
        inputs = PluginInputs(post.max(axis=1), s_ood, bpred, post)
        return MethodScores(method, curve_score(inputs, cfg.c_fn), bpred, inputs)
    raise ConfigError(f"unknown method {method!r}")


def evaluate_method(ms: MethodScores, art: SeedArtifacts, cfg: ExperimentConfig):
    ev = art.eval_set
    curve = risk_coverage_curve(ev, ms.score, ms.predictions, cfg.c_fn, cfg.grid_size)
    summary = {
        "auc_rc": curve.auc_rc,
        "auc_roc": auc_roc(ms.score[~ev.is_outlier], ms.score[ev.is_outlier]),
        "fpr_at_95tpr": fpr_at_95tpr(ms.score[~ev.is_outlier], ms.score[ev.is_outlier]),
        "degenerate_curve": curve.degenerate,
    }
    summary.update(ms.info)
    abstain = None
    if ms.plugin is not None:
        abstain = np.asarray(black_box_reject(ms.plugin, cfg.costs).abstain, dtype=bool)
    elif ms.method == "coupled":
        abstain = ms.score > 0
    if abstain is not None:
        summary["decision"] = {
            "c_in": cfg.costs.c_in,
            "c_out": cfg.costs.c_out,
            "abstention": float(abstain.mean()),
            "soft_penalty_risk": soft_penalty_risk(ev, ms.predictions, abstain, cfg.costs),
            "joint_risk": joint_risk(ev, ms.predictions, abstain, cfg.c_fn) if (~abstain).any() else 0.0,
        }
    return curve, summary


# --- running and writing -------------------------------------------------------


def resolve_output_dir(cfg: ExperimentConfig, override: str | Path | None = None) -> Path:
    import os

    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else cfg.output_dir


def _aggregate(curves) -> str:
    cols = {c: np.array([[row[i] for row in cv.rows()] for cv in curves]) for i, c in enumerate(CURVE_COLUMNS)}
    columns = list(CURVE_COLUMNS) + ["joint_risk_std"]
    n = cols["target_fraction"].shape[1]
    rows = []
    for k in range(n):
        row = [float(cols[c][:, k].mean()) for c in CURVE_COLUMNS]
        row.append(float(cols["joint_risk"][:, k].std()))
        rows.append(row)
    return rows_to_csv(columns, rows)


def _seed_artifacts(cfg: ExperimentConfig, seed: int, logits: LogitsData | None) -> SeedArtifacts:
    if logits is not None:
        return prepare_from_logits(logits)
    return prepare_synthetic(cfg, seed, "coupled" in cfg.methods)


def run_experiment(cfg: ExperimentConfig, output_dir: Path) -> dict:
    """Run every (method, seed) cell and write curves, models and summary.json."""
    output_dir.mkdir(parents=True, exist_ok=True)
    logits = read_logits(cfg.logits_path) if cfg.logits_path is not None else None
    per_method = {m: [] for m in cfg.methods}
    summary = {"name": cfg.name, "c_fn": cfg.c_fn, "seeds": list(cfg.seeds), "methods": {}}
    for seed in cfg.seeds:
        log.info("seed %d: preparing data", seed)
        art = _seed_artifacts(cfg, seed, logits)
        seed_dir = output_dir / "seeds" / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        if logits is None:
            if cfg.export_logits:
                write_logits(seed_dir / "logits.txt", art.data)
            if cfg.save_models:
                art.decoupled.save(seed_dir / "model_decoupled.txt")
                if art.coupled is not None:
                    art.coupled.save(seed_dir / "model_coupled.txt")
        for method in cfg.methods:
            log.info("seed %d: %s", seed, method)
            ms = method_scores(method, art, cfg)
            curve, s = evaluate_method(ms, art, cfg)
            (seed_dir / f"curve_{method}.csv").write_text(curve.to_csv())
            per_method[method].append(curve)
            summary["methods"].setdefault(method, {})[f"seed{seed}"] = s
        if art.losses:
            summary.setdefault("final_train_loss", {})[f"seed{seed}"] = {
                k: v[-1] if v else None for k, v in art.losses.items()
            }
    curve_dir = output_dir / "curves"
    curve_dir.mkdir(exist_ok=True)
    for method, curves in per_method.items():
        (curve_dir / f"{method}.csv").write_text(_aggregate(curves))
        aucs = np.array([c.auc_rc for c in curves])
        summary["methods"][method]["auc_rc_mean"] = float(aucs.mean())
        summary["methods"][method]["auc_rc_std"] = float(aucs.std())
    (output_dir / "summary.json").write_text(to_json(summary))
    return summary


BUDGET_COLUMNS = ("method", "seed", "b_rej", "lambda", "w_err", "w_in", "w_out", "abstention", "objective",
                  "joint_risk", "feasible", "negative_ood_weight")


def run_budget(cfg: ExperimentConfig, output_dir: Path) -> dict:
    """Abstention-budget threshold search for every plug-in method and budget."""
    if not cfg.b_rej:
        raise ConfigError("[budget] b_rej: need at least one abstention budget")
    methods = [m for m in cfg.methods if m in PLUGIN_METHODS]
    if not methods:
        raise ConfigError(f"budget search needs at least one plug-in method among {list(PLUGIN_METHODS)}")
    output_dir.mkdir(parents=True, exist_ok=True)
    logits = read_logits(cfg.logits_path) if cfg.logits_path is not None else None
    c_fn = cfg.budget_c_fn if cfg.budget_c_fn is not None else cfg.c_fn
    rows, report = [], {"name": cfg.name, "c_fn": c_fn, "results": []}
    for seed in cfg.seeds:
        art = _seed_artifacts(cfg, seed, logits)
        pi_star = cfg.budget_pi_in_star
        if pi_star is None:
            if art.data.has_ood and len(art.data.subset("strict_in")):
                pi_star = estimate_pi_mix(art.data.subset("strict_in").ood).pi_mix_hat
            else:
                pi_star = 0.5
        pi_star = min(max(pi_star, 1e-6), 1 - 1e-6)
        for method in methods:
            ms = method_scores(method, art, cfg)
            for b in cfg.b_rej:
                budget = BudgetSpec(c_fn, b, pi_star)
                grid = default_lambda_grid(budget) if cfg.lambda_grid is None else np.array(cfg.lambda_grid)
                res = budget_search(ms.plugin, art.eval_set, budget, grid)
                ab = np.asarray(res.decision.abstain, dtype=bool)
                jr = joint_risk(art.eval_set, ms.predictions, ab, c_fn) if (~ab).any() else 0.0
                p = res.best
                rows.append((method, seed, b, p.lam, p.w_err, p.w_in, p.w_out, p.abstention, p.objective, jr,
                             int(res.feasible), int(p.negative_ood_weight)))
                rep = res.report()
                rep.update({"method": method, "seed": seed, "joint_risk": jr})
                report["results"].append(rep)
    (output_dir / "budget.csv").write_text(rows_to_csv(BUDGET_COLUMNS, rows))
    (output_dir / "budget.json").write_text(to_json(report))
    return report
