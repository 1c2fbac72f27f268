"""Fitting by negative log-likelihood, cross-validation, and the six
evaluation metrics.

Neural models train with mini-batch Adam; the closed-parameter logit
family trains full-batch with a dense quasi-newton method and backtracking
line search, falling back to full-batch Adam when the line search stalls.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models as mdl
from .data import ChoiceDataset, FoldPlan
from .errors import ConfigError, LineSearchError, NumericalError
from .graph import AlternativeGraph
from .models import FittedModel, ModelSpec


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.01
    dropout: float = 0.05
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    optimizer: str = "auto"  # auto | adam | quasi-newton
    qn_max_iter: int = 500
    qn_tol: float = 1e-6

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0 or self.max_epochs < 1:
            raise ConfigError("batch_size, learning_rate, max_epochs must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")
        if self.optimizer not in ("auto", "adam", "quasi-newton"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "dropout": self.dropout,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "qn_max_iter": self.qn_max_iter,
            "qn_tol": self.qn_tol,
        }


@dataclass
class FitResult:
    model: FittedModel
    train_nll: float
    trace: tuple[float, ...]
    wall_time: float
    converged: bool
    grad_max_norm: float
    optimizer: str
    epochs: int
    std_errors: np.ndarray | None = None
    t_stats: np.ndarray | None = None


def nll(spec: ModelSpec, store, graph, features, chosen) -> float:
    """Total negative log-likelihood, -sum_n log P_n(chosen)."""
    leaves = store.leaves()
    loss = mdl.nll_node(spec, leaves, graph, features, chosen, train=False)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericalError("non-finite negative log-likelihood")
    return value


def nll_and_grads(spec, store, graph, features, chosen, train=False, rng=None):
    leaves = store.leaves()
    loss = mdl.nll_node(spec, leaves, graph, features, chosen, train=train, rng=rng)
    ad.backward(loss)
    store.collect_grads(leaves)
    return float(loss.value)


class Adam:
    """Bias-corrected adaptive moments on a parameter store."""

    def __init__(self, store: ad.ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(store.value(n)) for n in store.trainable_names()}
        self.v = {n: np.zeros_like(store.value(n)) for n in store.trainable_names()}

    def step(self) -> None:
        self.t += 1
        for name in self.store.trainable_names():
            g = self.store.grad(name)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g**2
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            self.store.set_value(
                name, self.store.value(name) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            )


def minimize_bfgs(fun_grad, x0: np.ndarray, gtol: float = 1e-6, max_iter: int = 500):
    """Dense BFGS with Armijo backtracking.

    ``fun_grad(x) -> (f, g)``.  Returns (x, f, trace, converged, grad_max).
    Raises LineSearchError when backtracking cannot find a decrease.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size
    H = np.eye(n)
    f, g = fun_grad(x)
    trace = [f]
    first_update = True
    for _ in range(max_iter):
        gmax = float(np.abs(g).max()) if n else 0.0
        if gmax < gtol:
            return x, f, trace, True, gmax
        d = -H @ g
        slope = float(g @ d)
        if slope >= 0.0:  # safeguard: reset to steepest descent
            H = np.eye(n)
            d = -g
            slope = float(g @ d)
        t = 1.0
        while True:
            x_new = x + t * d
            try:
                f_new, g_new = fun_grad(x_new)
            except NumericalError:
                f_new = np.inf
                g_new = None
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-14:
                raise LineSearchError("backtracking line search failed to decrease the loss")
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            if first_update:
                H = (sy / float(y @ y)) * np.eye(n)
                first_update = False
            rho = 1.0 / sy
            I = np.eye(n)
            V = I - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
    return x, f, trace, False, float(np.abs(g).max()) if n else 0.0


def _fit_quasi_newton(spec, store, graph, features, chosen, config: TrainConfig):
    def fun_grad(vec):
        store.set_flat_values(vec)
        f = nll_and_grads(spec, store, graph, features, chosen)
        return f, store.flat_grads().copy()

    x, f, trace, converged, gmax = minimize_bfgs(
        fun_grad, store.flat_values(), gtol=config.qn_tol, max_iter=config.qn_max_iter
    )
    store.set_flat_values(x)
    return f, tuple(trace), converged, gmax, len(trace) - 1


def _fit_adam(spec, store, graph, features, chosen, config: TrainConfig, full_batch=False):
    n = len(chosen)
    batch = n if full_batch else min(config.batch_size, n)
    shuffle_rng = np.random.default_rng([config.seed, 211])
    dropout_rng = np.random.default_rng([config.seed, 613])
    opt = Adam(store, lr=config.learning_rate)
    trace = []
    best_nll = np.inf
    best_snapshot = store.snapshot()
    best_epoch = 0
    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            leaves = store.leaves()
            loss = mdl.nll_node(
                spec, leaves, graph, features[idx], chosen[idx],
                train=True, rng=dropout_rng, reduction="mean",
            )
            ad.backward(loss)
            store.collect_grads(leaves)
            opt.step()
        epoch_nll = nll(spec, store, graph, features, chosen)
        trace.append(epoch_nll)
        if epoch_nll < best_nll - 1e-12:
            best_nll = epoch_nll
            best_snapshot = store.snapshot()
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break
    store.load_snapshot(best_snapshot)
    final = nll_and_grads(spec, store, graph, features, chosen)
    gmax = float(np.abs(store.flat_grads()).max()) if store.flat_grads().size else 0.0
    return final, tuple(trace), True, gmax, len(trace)


def fit(
    spec: ModelSpec,
    features: np.ndarray,
    chosen: np.ndarray,
    graph: AlternativeGraph | None,
    config: TrainConfig,
    feature_names: tuple[str, ...] = (),
    scaling: dict | None = None,
) -> FitResult:
    """Estimate a model on (features, chosen) and return the fitted result.

    Diverging losses abort with NumericalError; a stalled quasi-newton line
    search falls back to full-batch Adam.
    """
    effective = spec
    if isinstance(spec, mdl.GNNSpec) and spec.dropout != config.dropout:
        effective = mdl.GNNSpec(
            n_features=spec.n_features,
            hidden=spec.hidden,
            layers=spec.layers,
            update=spec.update,
            aggregation=spec.aggregation,
            skip=spec.skip,
            dropout=config.dropout,
            embed_hidden=spec.embed_hidden,
        )
    store = mdl.init_params(effective, seed=config.seed)
    optimizer = config.optimizer
    if optimizer == "auto":
        optimizer = "adam" if isinstance(effective, mdl.GNNSpec) else "quasi-newton"
    start = time.perf_counter()
    used = optimizer
    if optimizer == "quasi-newton":
        try:
            final, trace, converged, gmax, iters = _fit_quasi_newton(
                effective, store, graph, features, chosen, config
            )
        except LineSearchError:
            store = mdl.init_params(effective, seed=config.seed)
            final, trace, converged, gmax, iters = _fit_adam(
                effective, store, graph, features, chosen, config, full_batch=True
            )
            used = "adam-fallback"
    else:
        final, trace, converged, gmax, iters = _fit_adam(
            effective, store, graph, features, chosen, config
        )
    wall = time.perf_counter() - start
    if not np.isfinite(final):
        raise NumericalError("training diverged to a non-finite loss")
    model = FittedModel(
        spec=effective,
        store=store,
        graph=graph,
        feature_names=tuple(feature_names),
        scaling=dict(scaling or {}),
    )
    result = FitResult(
        model=model,
        train_nll=final,
        trace=trace,
        wall_time=wall,
        converged=converged,
        grad_max_norm=gmax,
        optimizer=used,
        epochs=iters,
    )
    if isinstance(effective, mdl.MNLSpec):
        try:
            se, t = mnl_inference_stats(model, features, chosen)
            result.std_errors = se
            result.t_stats = t
        except NumericalError:
            pass
    return result


def mnl_inference_stats(model: FittedModel, features, chosen):
    """Standard errors and t-statistics from the observed information.

    The Hessian is formed by central finite differences of the analytic
    gradient of the negative log-likelihood.
    """
    if not isinstance(model.spec, mdl.MNLSpec):
        raise ConfigError("inference statistics are defined for the linear logit only")
    store = model.store.copy()
    b = store.value("b").copy()
    d = b.size

    def grad_at(vec):
        store.set_value("b", vec)
        nll_and_grads(model.spec, store, None, features, chosen)
        return store.grad("b").copy()

    hessian = np.empty((d, d))
    step = 1e-6 * np.maximum(1.0, np.abs(b))
    for i in range(d):
        up = b.copy()
        up[i] += step[i]
        down = b.copy()
        down[i] -= step[i]
        hessian[:, i] = (grad_at(up) - grad_at(down)) / (2 * step[i])
    store.set_value("b", b)
    hessian = 0.5 * (hessian + hessian.T)
    cond = np.linalg.cond(hessian)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError("singular information matrix (collinear features?)")
    cov = np.linalg.inv(hessian)
    var = np.diag(cov)
    if np.any(var <= 0):
        raise NumericalError("non-positive variance from the information matrix")
    se = np.sqrt(var)
    return se, b / se


# ---------------------------------------------------------------------------
# Metrics.

METRIC_NAMES = (
    "log_likelihood",
    "accuracy",
    "top5_accuracy",
    "avg_distance_km",
    "macro_f1",
    "mrr",
)


@dataclass(frozen=True)
class Metrics:
    log_likelihood: float
    accuracy: float
    top5_accuracy: float
    avg_distance_km: float
    macro_f1: float
    mrr: float

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass(frozen=True)
class MetricReport:
    """Per-fold metrics plus their across-fold averages."""

    folds: tuple[Metrics, ...]

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(m, name) for m in self.folds]))

    def averaged(self) -> dict:
        return {name: self.mean(name) for name in METRIC_NAMES}


def ranks_of_chosen(probs: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """1-based rank of each chosen alternative by descending probability,
    ties broken toward the lowest alternative index."""
    n = probs.shape[0]
    rows = np.arange(n)
    p_chosen = probs[rows, chosen]
    higher = (probs > p_chosen[:, None]).sum(axis=1)
    tied_before = ((probs == p_chosen[:, None]) & (np.arange(probs.shape[1])[None, :] < chosen[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def compute_metrics(probs: np.ndarray, chosen: np.ndarray, centroids: np.ndarray | None) -> Metrics:
    """All six evaluation metrics for one set of predictions.

    Argmax ties break toward the lowest alternative index.  Macro F1
    averages over every alternative with zero-division counting as zero.
    """
    n, v = probs.shape
    rows = np.arange(n)
    ll = float(np.log(probs[rows, chosen]).sum())
    predicted = probs.argmax(axis=1)  # argmax returns the first (lowest) maximizer
    accuracy = float((predicted == chosen).mean())
    ranks = ranks_of_chosen(probs, chosen)
    top5 = float((ranks <= 5).mean())
    mrr = float((1.0 / ranks).mean())
    f1s = np.zeros(v)
    for k in range(v):
        tp = int(((predicted == k) & (chosen == k)).sum())
        fp = int(((predicted == k) & (chosen != k)).sum())
        fn = int(((predicted != k) & (chosen == k)).sum())
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1s[k] = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    if centroids is None:
        avg_dist = float("nan")
    else:
        deltas = centroids[predicted] - centroids[chosen]
        avg_dist = float(np.hypot(deltas[:, 0], deltas[:, 1]).mean())
    return Metrics(
        log_likelihood=ll,
        accuracy=accuracy,
        top5_accuracy=top5,
        avg_distance_km=avg_dist,
        macro_f1=float(f1s.mean()),
        mrr=mrr,
    )


def evaluate(model: FittedModel, features, chosen, centroids) -> Metrics:
    probs = model.predict_probs(features)
    return compute_metrics(probs, np.asarray(chosen, dtype=np.int64), centroids)


# ---------------------------------------------------------------------------
# Cross-validation over a model grid.


@dataclass
class CVRow:
    config: dict
    report: MetricReport | None
    train_lls: tuple[float, ...]
    status: str
    fold_params: tuple[dict, ...] = ()
    traces: tuple[tuple[float, ...], ...] = ()

    def mean_train_ll(self) -> float:
        return float(np.mean(self.train_lls)) if self.train_lls else float("nan")


def spec_from_config(config: dict, n_features: int) -> ModelSpec:
    kind = config.get("kind", "gnn")
    if kind == "mnl":
        return mdl.MNLSpec(n_features=n_features)
    if kind == "nl":
        nests = config.get("nests")
        if not nests:
            raise ConfigError("nested model config requires 'nests'")
        return mdl.NLSpec(n_features=n_features, nests=tuple(tuple(int(i) for i in nest) for nest in nests))
    if kind == "scl":
        return mdl.SCLSpec(n_features=n_features)
    if kind in ("gnn", "asu"):
        return mdl.GNNSpec(
            n_features=n_features,
            hidden=int(config.get("hidden", 64)),
            layers=0 if kind == "asu" else int(config.get("layers", 2)),
            update=config.get("update", "mpnn"),
            aggregation=config.get("aggregation", "sum"),
            skip=bool(config.get("skip", True)),
            dropout=float(config.get("dropout", 0.05)),
            embed_hidden=int(config.get("embed_hidden", 1)),
        )
    raise ConfigError(f"unknown model kind '{kind}'")


def ablation_grid(base: dict | None = None) -> list[dict]:
    """The standard configuration sweep: six update kinds crossed with
    layer-count, hidden-width, and skip-connection variations."""
    base = dict(base or {})
    updates = [
        ("mpnn", "sum"),
        ("mpnn", "max"),
        ("mpnn", "mean"),
        ("mpnn", "lse"),
        ("gcn", "sum"),
        ("gat", "sum"),
    ]
    grid = []
    for update, agg in updates:
        for layers in (1, 2, 3):
            grid.append({**base, "kind": "gnn", "update": update, "aggregation": agg,
                         "layers": layers, "hidden": 64, "skip": True})
        for hidden in (1, 16, 32, 128):
            grid.append({**base, "kind": "gnn", "update": update, "aggregation": agg,
                         "layers": 2, "hidden": hidden, "skip": True})
        grid.append({**base, "kind": "gnn", "update": update, "aggregation": agg,
                     "layers": 2, "hidden": 64, "skip": False})
    return grid


def _cv_job(args) -> dict:
    (config, features, chosen, centroids, graph_payload, train_idx, test_idx, seed, tc_dict) = args
    graph = None
    if graph_payload is not None:
        from .graph import build_graph

        graph = build_graph(graph_payload[0], graph_payload[1])
    tc = TrainConfig(**{**tc_dict, "seed": seed})
    try:
        spec = spec_from_config(config, features.shape[2])
        result = fit(spec, features[train_idx], chosen[train_idx], graph, tc)
        metrics = evaluate(result.model, features[test_idx], chosen[test_idx], centroids)
        return {
            "ok": True,
            "metrics": metrics.as_dict(),
            "train_ll": -result.train_nll,
            "params": result.model.store.to_payload(),
            "trace": list(result.trace),
        }
    except Exception as exc:  # fold failures must not kill the sweep
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def cross_validate(
    grid: list[dict],
    dataset: ChoiceDataset,
    folds: FoldPlan,
    config: TrainConfig,
    graph: AlternativeGraph | None = None,
    jobs: int = 1,
) -> list[CVRow]:
    """Fit/evaluate every grid config on every fold; average the metrics.

    Fold jobs are independent and may run in parallel; results are
    aggregated in a fixed order so reports are reproducible bit for bit.
    """
    graph_payload = None if graph is None else (graph.num_nodes, list(graph.edges))
    tasks = []
    for ci, model_config in enumerate(grid):
        for fold in range(folds.k):
            train_idx, test_idx = folds.train_test(fold)
            seed = int(np.random.SeedSequence([config.seed, ci, fold]).generate_state(1)[0] % (2**31))
            tc_dict = config.to_dict()
            tc_dict.pop("seed")
            tasks.append(
                (model_config, dataset.features, dataset.chosen, dataset.centroids,
                 graph_payload, train_idx, test_idx, seed, tc_dict)
            )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_cv_job, tasks))
    else:
        outcomes = [_cv_job(t) for t in tasks]

    rows = []
    cursor = 0
    for model_config in grid:
        fold_outcomes = outcomes[cursor : cursor + folds.k]
        cursor += folds.k
        good = [o for o in fold_outcomes if o["ok"]]
        failed = [o for o in fold_outcomes if not o["ok"]]
        if good:
            report = MetricReport(folds=tuple(Metrics(**o["metrics"]) for o in good))
        else:
            report = None
        status = "ok" if not failed else f"failed({len(failed)}/{folds.k} folds): {failed[0]['error']}"
        rows.append(
            CVRow(
                config=dict(model_config),
                report=report,
                train_lls=tuple(o["train_ll"] for o in good),
                status=status,
                fold_params=tuple(o["params"] for o in good),
                traces=tuple(tuple(o["trace"]) for o in good),
            )
        )
    return rows
