"""Command-line interface.

Subcommands: fit, cv, predict, elasticity, ice, submap, verify, synth.
Configuration precedence is flags > config file > defaults; every output
embeds the resolved-config hash and the seed.  Exit codes: 0 ok, 1 usage
or configuration, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import models as mdl
from . import report
from . import training as tr
from . import verify as vfy
from .data import (
    ChoiceDataset,
    FeatureSpec,
    SynthConfig,
    load_dataset,
    make_folds,
    standardize,
    synthesize_tabular,
)
from .errors import ConfigError, DataError, GraphError, NumericalError, SpatialChoiceError
from .graph import load_edge_csv, random_geometric_graph
from .interpret import elasticity_report, ice_curve, substitution_map
from .models import FittedModel


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems by default; the contract wants 1.
    def error(self, message):
        raise _UsageError(message)


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _write_csv(path, header, rows, config_hash: str, seed) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash} seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _load_file_config(ns) -> dict:
    if getattr(ns, "config", None):
        try:
            with open(ns.config) as fh:
                return json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {ns.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid config {ns.config}: {exc}") from exc
    return {}


def _resolve(ns, file_config: dict, key: str, default=None, cast=None):
    """flags > config file > default."""
    flag = getattr(ns, key.replace(".", "_"), None)
    if flag is not None:
        return flag
    node = file_config
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return cast(node) if cast is not None and node is not None else node


def _load_inputs(ns, file_config):
    paths = {
        key: _resolve(ns, file_config, f"data.{key}")
        for key in ("community_csv", "household_csv", "centroid_csv", "feature_spec", "graph_csv")
    }
    for key in ("community_csv", "household_csv", "centroid_csv"):
        if not paths[key]:
            raise ConfigError(f"missing data path '{key}' (flag or config file)")
        if not os.path.exists(paths[key]):
            raise DataError(f"{key} file not found: {paths[key]}")
    spec = FeatureSpec.load(paths["feature_spec"]) if paths["feature_spec"] else None
    if spec is None:
        raise ConfigError("missing data path 'feature_spec' (flag or config file)")
    dataset = load_dataset(paths["community_csv"], paths["household_csv"], paths["centroid_csv"], spec)
    dataset = standardize(dataset, spec)
    graph = None
    if paths["graph_csv"]:
        if not os.path.exists(paths["graph_csv"]):
            raise DataError(f"graph file not found: {paths['graph_csv']}")
        graph = load_edge_csv(paths["graph_csv"], num_nodes=dataset.num_alternatives)
    return dataset, graph, paths


def _model_config(ns, file_config) -> dict:
    config = dict(file_config.get("model", {}))
    for key in ("kind", "update", "aggregation", "layers", "hidden", "embed_hidden"):
        value = getattr(ns, key, None)
        if value is not None:
            config[key] = value
    if getattr(ns, "skip", None) is not None:
        config["skip"] = ns.skip
    if getattr(ns, "nests", None):
        config["nests"] = json.loads(ns.nests)
    config.setdefault("kind", "mnl")
    return config


def _train_config(ns, file_config, seed) -> tr.TrainConfig:
    def pick(key, default, cast):
        return _resolve(ns, file_config, f"train.{key}", default, cast)

    return tr.TrainConfig(
        batch_size=pick("batch_size", 32, int),
        learning_rate=pick("learning_rate", 0.01, float),
        dropout=pick("dropout", 0.05, float),
        max_epochs=pick("max_epochs", 200, int),
        patience=pick("patience", 20, int),
        seed=seed,
        optimizer=pick("optimizer", "auto", str),
    )


def _outdir(ns, file_config) -> str:
    out = _resolve(ns, file_config, "output_dir", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _seed(ns, file_config) -> int:
    return int(_resolve(ns, file_config, "seed", 0, int))


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_fit(ns) -> int:
    file_config = _load_file_config(ns)
    dataset, graph, paths = _load_inputs(ns, file_config)
    seed = _seed(ns, file_config)
    model_config = _model_config(ns, file_config)
    train_config = _train_config(ns, file_config, seed)
    out = _outdir(ns, file_config)
    resolved = {"command": "fit", "model": model_config, "train": train_config.to_dict(),
                "data": paths, "seed": seed}
    chash = _config_hash(resolved)

    spec = tr.spec_from_config(model_config, dataset.num_features)
    if isinstance(spec, (mdl.SCLSpec, mdl.GNNSpec)) and graph is None:
        raise ConfigError(f"model kind '{model_config['kind']}' requires a graph file")
    result = tr.fit(
        spec, dataset.features, dataset.chosen, graph, train_config,
        feature_names=dataset.feature_names, scaling=dataset.scaling,
    )
    model_path = os.path.join(out, "model.json")
    result.model.save(model_path, extra={"config_hash": chash, "seed": seed})

    fit_doc = {
        "config_hash": chash,
        "seed": seed,
        "model_kind": spec.kind,
        "train_nll": result.train_nll,
        "train_log_likelihood": -result.train_nll,
        "converged": result.converged,
        "grad_max_norm": result.grad_max_norm,
        "optimizer": result.optimizer,
        "epochs": result.epochs,
    }
    if result.std_errors is not None:
        fit_doc["coefficients"] = {
            name: {"estimate": float(b), "std_error": float(se), "t_stat": float(t)}
            for name, b, se, t in zip(
                dataset.feature_names, result.model.store.value("b"),
                result.std_errors, result.t_stats,
            )
        }
    elif "b" in result.model.store:
        fit_doc["coefficients"] = {
            name: {"estimate": float(b)}
            for name, b in zip(dataset.feature_names, result.model.store.value("b"))
        }
    mus = result.model.mus()
    if mus is not None:
        fit_doc["mu"] = [float(m) for m in np.atleast_1d(mus)]
        if np.any(np.atleast_1d(mus) > 0.999):
            fit_doc["mu_note"] = (
                "fitted independence parameter at the boundary; the model is "
                "indistinguishable from the plain logit on this data"
            )
    with open(os.path.join(out, "fit.json"), "w") as fh:
        json.dump(fit_doc, fh, indent=1, sort_keys=True)
    _write_csv(
        os.path.join(out, "loss_trace.csv"),
        ["step", "nll"],
        [(i + 1, _fmt(v)) for i, v in enumerate(result.trace)],
        chash, seed,
    )
    if ns.figures:
        report.save_loss_trace_figure(result.trace, os.path.join(out, "loss_trace.png"))
    print(f"fit: {spec.kind} NLL={result.train_nll:.4f} converged={result.converged} -> {model_path}")
    return 0


def cmd_cv(ns) -> int:
    file_config = _load_file_config(ns)
    dataset, graph, paths = _load_inputs(ns, file_config)
    seed = _seed(ns, file_config)
    train_config = _train_config(ns, file_config, seed)
    out = _outdir(ns, file_config)
    k = int(_resolve(ns, file_config, "cv.folds", 10, int) if ns.folds is None else ns.folds)
    grid = file_config.get("cv", {}).get("grid")
    if ns.grid_preset == "ablation":
        grid = tr.ablation_grid()
    if grid is None:
        raise ConfigError("no model grid: give cv.grid in the config file or --grid-preset")
    resolved = {"command": "cv", "grid": grid, "train": train_config.to_dict(),
                "data": paths, "seed": seed, "folds": k}
    chash = _config_hash(resolved)

    folds = make_folds(dataset.num_households, k, seed)
    rows = tr.cross_validate(grid, dataset, folds, train_config, graph=graph, jobs=ns.jobs)

    header = [
        "kind", "update", "aggregation", "layers", "hidden", "skip", "status",
        "log_likelihood_test", "accuracy", "top5_accuracy", "avg_distance_km",
        "macro_f1", "mrr", "log_likelihood_train",
    ]
    table = []
    for row in rows:
        cfg = row.config
        metric_values = (
            [_fmt(row.report.mean(m)) for m in tr.METRIC_NAMES]
            if row.report is not None
            else ["nan"] * len(tr.METRIC_NAMES)
        )
        table.append(
            [cfg.get("kind", ""), cfg.get("update", ""), cfg.get("aggregation", ""),
             cfg.get("layers", ""), cfg.get("hidden", ""), cfg.get("skip", ""), row.status]
            + metric_values
            + [_fmt(row.mean_train_ll())]
        )
    _write_csv(os.path.join(out, "metrics.csv"), header, table, chash, seed)

    trace_rows = []
    model_dir = os.path.join(out, "models")
    os.makedirs(model_dir, exist_ok=True)
    for ci, row in enumerate(rows):
        for fold, trace in enumerate(row.traces):
            for step, value in enumerate(trace):
                trace_rows.append((ci, fold, step + 1, _fmt(value)))
        for fold, payload in enumerate(row.fold_params):
            spec = tr.spec_from_config(row.config, dataset.num_features)
            model = FittedModel(
                spec=spec, store=mdl.ParamStore.from_payload(payload), graph=graph,
                feature_names=dataset.feature_names, scaling=dataset.scaling,
            )
            model.save(
                os.path.join(model_dir, f"config{ci:03d}_fold{fold}.json"),
                extra={"config_hash": chash, "seed": seed},
            )
    _write_csv(os.path.join(out, "loss_trace.csv"), ["config", "fold", "step", "nll"],
               trace_rows, chash, seed)
    if ns.figures:
        report.save_metrics_figure(rows, os.path.join(out, "metrics.png"))
    failures = sum(1 for r in rows if r.status != "ok")
    print(f"cv: {len(rows)} configs x {k} folds -> {os.path.join(out, 'metrics.csv')}"
          + (f" ({failures} configs with failed folds)" if failures else ""))
    return 0


def _load_model_and_data(ns, file_config):
    if not ns.model:
        raise ConfigError("--model is required")
    if not os.path.exists(ns.model):
        raise DataError(f"model file not found: {ns.model}")
    model = FittedModel.load(ns.model)
    dataset, graph, paths = _load_inputs(ns, file_config)
    if model.graph is None and graph is not None:
        model.graph = graph
    if tuple(model.feature_names) and tuple(model.feature_names) != tuple(dataset.feature_names):
        raise DataError("model feature names do not match the dataset")
    return model, dataset, paths


def cmd_predict(ns) -> int:
    file_config = _load_file_config(ns)
    model, dataset, paths = _load_model_and_data(ns, file_config)
    seed = _seed(ns, file_config)
    out = _outdir(ns, file_config)
    chash = _config_hash({"command": "predict", "model": ns.model, "data": paths, "seed": seed})
    probs = model.predict_probs(dataset.features)
    predicted = probs.argmax(axis=1)
    ranks = tr.ranks_of_chosen(probs, dataset.chosen)
    rows = []
    for n in range(dataset.num_households):
        hid = dataset.household_ids[n] if dataset.household_ids else n
        rows.append(
            (hid, int(predicted[n]), _fmt(float(probs[n, predicted[n]])),
             int(dataset.chosen[n]), int(ranks[n]))
        )
    _write_csv(os.path.join(out, "predictions.csv"),
               ["household", "predicted", "prob_predicted", "chosen", "rank_of_chosen"],
               rows, chash, seed)
    metrics = tr.compute_metrics(probs, dataset.chosen, dataset.centroids)
    print("predict:", " ".join(f"{k}={v:.4f}" for k, v in metrics.as_dict().items()))
    return 0


def cmd_elasticity(ns) -> int:
    file_config = _load_file_config(ns)
    model, dataset, paths = _load_model_and_data(ns, file_config)
    seed = _seed(ns, file_config)
    out = _outdir(ns, file_config)
    chash = _config_hash({"command": "elasticity", "model": ns.model, "data": paths,
                          "household": ns.household, "alt": ns.alt, "attr": ns.attr, "seed": seed})
    rep = elasticity_report(model, dataset, ns.household, ns.alt, ns.attr, method=ns.method)
    _write_csv(os.path.join(out, "elasticity.csv"),
               ["alternative", "value", "hop_class", "hop_distance"],
               [(i, _fmt(v), c, h) for i, v, c, h in rep.rows()], chash, seed)
    if ns.figures:
        report.save_elasticity_figure(rep, os.path.join(out, "elasticity.png"))
    print(f"elasticity: wrote {os.path.join(out, 'elasticity.csv')} "
          f"(direct={rep.values[ns.alt]:.4f})")
    return 0


def cmd_ice(ns) -> int:
    file_config = _load_file_config(ns)
    model, dataset, paths = _load_model_and_data(ns, file_config)
    seed = _seed(ns, file_config)
    out = _outdir(ns, file_config)
    chash = _config_hash({"command": "ice", "model": ns.model, "data": paths,
                          "alt": ns.alt, "attr": ns.attr, "seed": seed})
    households = None
    if ns.households:
        households = [int(x) for x in ns.households.split(",")]
    curve = ice_curve(model, dataset, ns.alt, ns.attr, households=households,
                      grid_points=ns.grid_points, color_attr=ns.color_attr)
    rows = []
    for hi, household in enumerate(curve.households):
        for gi, g in enumerate(curve.grid):
            rows.append((household, _fmt(float(g)), _fmt(float(curve.curves[hi, gi])),
                         _fmt(float(curve.color_key[hi]))))
    _write_csv(os.path.join(out, "ice.csv"),
               ["household", "grid_value", "probability", "color_key"], rows, chash, seed)
    if ns.figures:
        report.save_ice_figure(curve, os.path.join(out, "ice.png"))
    print(f"ice: {len(curve.households)} households x {len(curve.grid)} grid points "
          f"-> {os.path.join(out, 'ice.csv')}")
    return 0


def cmd_submap(ns) -> int:
    file_config = _load_file_config(ns)
    model, dataset, paths = _load_model_and_data(ns, file_config)
    seed = _seed(ns, file_config)
    out = _outdir(ns, file_config)
    chash = _config_hash({"command": "submap", "model": ns.model, "data": paths,
                          "household": ns.household, "alt": ns.alt, "attr": ns.attr,
                          "pct": ns.pct, "seed": seed})
    sm = substitution_map(model, dataset, ns.household, ns.alt, ns.attr, ns.pct)
    rows = [
        (i, _fmt(float(sm.pct_change[i])), int(sm.hop_distance[i]),
         _fmt(float(sm.base_probs[i])), _fmt(float(sm.new_probs[i])))
        for i in range(len(sm.pct_change))
    ]
    _write_csv(os.path.join(out, "submap.csv"),
               ["alternative", "pct_change", "hop_distance", "base_prob", "new_prob"],
               rows, chash, seed)
    if ns.figures:
        report.save_submap_figure(sm, os.path.join(out, "submap.png"))
    print(f"submap: wrote {os.path.join(out, 'submap.csv')} "
          f"(direct change {sm.pct_change[ns.alt]:+.3f}%)")
    return 0


def cmd_verify(ns) -> int:
    results = vfy.run_all(trials=ns.trials, seed=ns.seed if ns.seed is not None else 0,
                          fault=ns.inject_fault, grad_seeds=ns.grad_seeds)
    failed = 0
    for res in results:
        status = "OK" if res.passed else "FAIL"
        print(f"{res.name} {res.detail} {status}")
        failed += 0 if res.passed else 1
    if failed:
        print(f"verify: {failed}/{len(results)} suites FAILED")
        return 3
    print(f"verify: all {len(results)} suites passed")
    return 0


def cmd_synth(ns) -> int:
    file_config = _load_file_config(ns)
    seed = ns.seed if ns.seed is not None else int(file_config.get("seed", 0))
    out = _outdir(ns, file_config)
    rng = np.random.default_rng([seed, 71])
    graph = None
    nests = None
    mus = None
    if ns.model in ("scl", "nl") or ns.graph == "geometric":
        graph, _ = random_geometric_graph(ns.alts, radius=0.35, seed=seed)
    if ns.model == "nl":
        size = max(2, ns.alts // max(2, ns.alts // 3))
        cuts = list(range(0, ns.alts, size)) + [ns.alts]
        nests = tuple(tuple(range(a, b)) for a, b in zip(cuts[:-1], cuts[1:]) if b > a)
        mus = tuple(float(m) for m in rng.uniform(0.4, 0.9, size=len(nests)))
    b_true = tuple(float(x) for x in rng.uniform(-1.5, 1.5, size=ns.features))
    config = SynthConfig(
        n_households=ns.n, n_alternatives=ns.alts, n_features=ns.features,
        true_coefficients=b_true, generator_model=ns.model,
        graph=graph if ns.model == "scl" else None,
        nests=nests, mus=mus, mu=ns.mu if ns.model == "scl" else None, seed=seed,
    )
    paths = synthesize_tabular(config, out, graph=graph)
    print(f"synth: {ns.model} dataset with N={ns.n}, V={ns.alts} -> {out}")
    for key, value in paths.items():
        print(f"  {key}: {value}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring.


def build_parser() -> _Parser:
    parser = _Parser(prog="spatialchoice",
                     description="Discrete choice modeling over spatially correlated alternatives")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_data=True):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", dest="output_dir", default=None)
        if with_data:
            p.add_argument("--community-csv", dest="data_community_csv", default=None)
            p.add_argument("--household-csv", dest="data_household_csv", default=None)
            p.add_argument("--centroid-csv", dest="data_centroid_csv", default=None)
            p.add_argument("--feature-spec", dest="data_feature_spec", default=None)
            p.add_argument("--graph-csv", dest="data_graph_csv", default=None)
        p.add_argument("--figures", dest="figures", action="store_true", default=True)
        p.add_argument("--no-figures", dest="figures", action="store_false")

    p_fit = sub.add_parser("fit", help="estimate one model")
    add_common(p_fit)
    p_fit.add_argument("--kind", choices=["mnl", "nl", "scl", "gnn", "asu"], default=None)
    p_fit.add_argument("--update", choices=["mpnn", "gcn", "gat"], default=None)
    p_fit.add_argument("--aggregation", choices=["sum", "mean", "max", "lse"], default=None)
    p_fit.add_argument("--layers", type=int, default=None)
    p_fit.add_argument("--hidden", type=int, default=None)
    p_fit.add_argument("--embed-hidden", dest="embed_hidden", type=int, default=None)
    p_fit.add_argument("--skip", dest="skip", action="store_true", default=None)
    p_fit.add_argument("--no-skip", dest="skip", action="store_false")
    p_fit.add_argument("--nests", help="JSON list of node-index lists (nested logit)")
    p_fit.add_argument("--batch-size", dest="train_batch_size", type=int, default=None)
    p_fit.add_argument("--learning-rate", dest="train_learning_rate", type=float, default=None)
    p_fit.add_argument("--dropout", dest="train_dropout", type=float, default=None)
    p_fit.add_argument("--max-epochs", dest="train_max_epochs", type=int, default=None)
    p_fit.add_argument("--patience", dest="train_patience", type=int, default=None)
    p_fit.add_argument("--optimizer", dest="train_optimizer",
                       choices=["auto", "adam", "quasi-newton"], default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_cv = sub.add_parser("cv", help="cross-validate a model grid")
    add_common(p_cv)
    p_cv.add_argument("--folds", type=int, default=None)
    p_cv.add_argument("--grid-preset", choices=["ablation"], default=None)
    p_cv.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p_cv.add_argument("--batch-size", dest="train_batch_size", type=int, default=None)
    p_cv.add_argument("--learning-rate", dest="train_learning_rate", type=float, default=None)
    p_cv.add_argument("--dropout", dest="train_dropout", type=float, default=None)
    p_cv.add_argument("--max-epochs", dest="train_max_epochs", type=int, default=None)
    p_cv.add_argument("--patience", dest="train_patience", type=int, default=None)
    p_cv.set_defaults(func=cmd_cv)

    p_pred = sub.add_parser("predict", help="per-household predictions from a model file")
    add_common(p_pred)
    p_pred.add_argument("--model", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_el = sub.add_parser("elasticity", help="direct and cross elasticities")
    add_common(p_el)
    p_el.add_argument("--model", required=True)
    p_el.add_argument("--household", type=int, required=True)
    p_el.add_argument("--alt", type=int, required=True)
    p_el.add_argument("--attr", required=True)
    p_el.add_argument("--method", choices=["elasticity", "semi"], default="elasticity")
    p_el.set_defaults(func=cmd_elasticity)

    p_ice = sub.add_parser("ice", help="per-household conditional expectation curves")
    add_common(p_ice)
    p_ice.add_argument("--model", required=True)
    p_ice.add_argument("--alt", type=int, required=True)
    p_ice.add_argument("--attr", required=True)
    p_ice.add_argument("--grid-points", dest="grid_points", type=int, default=50)
    p_ice.add_argument("--color-attr", dest="color_attr", default=None)
    p_ice.add_argument("--households", help="comma-separated household indices (default: all)")
    p_ice.set_defaults(func=cmd_ice)

    p_sm = sub.add_parser("submap", help="substitution map for one attribute change")
    add_common(p_sm)
    p_sm.add_argument("--model", required=True)
    p_sm.add_argument("--household", type=int, required=True)
    p_sm.add_argument("--alt", type=int, required=True)
    p_sm.add_argument("--attr", required=True)
    p_sm.add_argument("--pct", type=float, default=10.0)
    p_sm.set_defaults(func=cmd_submap)

    p_ver = sub.add_parser("verify", help="run the theory suites")
    p_ver.add_argument("--trials", type=int, default=200)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--grad-seeds", dest="grad_seeds", type=int, default=3)
    p_ver.add_argument("--inject-fault", dest="inject_fault",
                       choices=["none", "scl-alpha"], default="none")
    p_ver.set_defaults(func=cmd_verify)

    p_syn = sub.add_parser("synth", help="generate a synthetic dataset with known truth")
    add_common(p_syn, with_data=False)
    p_syn.add_argument("--model", choices=["mnl", "nl", "scl"], default="mnl")
    p_syn.add_argument("--mu", type=float, default=0.5)
    p_syn.add_argument("--n", type=int, default=1000)
    p_syn.add_argument("--alts", type=int, default=12)
    p_syn.add_argument("--features", type=int, default=5)
    p_syn.add_argument("--graph", choices=["geometric", "none"], default="geometric")
    p_syn.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return ns.func(ns)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (DataError, GraphError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SpatialChoiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
