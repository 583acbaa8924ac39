"""Command-line driver: gen-data -> train -> attack / tighten -> verify -> report.

Every stage reads and writes plain files so that stages can be rerun one at a
time.  Settings come from an optional JSON config (top-level keys apply to all
stages, a section named after the subcommand to that stage only); flags win.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attack as atk
from . import bounds as bnd
from .dataset import generate_dataset, load_dataset, save_dataset
from .errors import OpfVerifyError
from .grid import bundled_grid, compute_ptdf, load_network
from .milp import BnbLimits
from .nn import TrainConfig, init_model, load_model, loss_l0, predict, save_model, train
from .report import violation_percentages, write_report
from .verify import (PB, line_violation, power_balance_violation, screen_line,
                     verify_all_lines, verify_line_flow, verify_power_balance)

log = logging.getLogger("opfverify")

DEFAULTS = {
    "grid": "case5", "seed": 0, "workers": 1, "reproducible": False,
    "n": 1000, "low": 0.6, "high": 1.0,
    "dataset": "dataset.jsonl", "model": "model.json", "bounds": None, "warm": None,
    "hidden": "50,50,50", "lr": 1e-3, "patience": 50, "max_epochs": 1000, "batch_size": 64,
    "objective": "pb", "line": None, "starts": 50, "lambda": None, "iters": 200,
    "method": "ibp", "budget_sec": 10.0, "node_budget": None,
    "target": "pb", "time_limit": 60.0, "node_limit": None, "gap": 1e-6,
    "format": "table", "out_dir": "report", "reports": None,
}
OUTPUTS = {"gen-data": "dataset.jsonl", "train": "model.json", "attack": "attack.json",
           "tighten": "bounds.json", "verify": "verify.json"}


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def _grid(name):
    path = Path(name)
    return load_network(path.read_text()) if path.suffix == ".json" or path.exists() else bundled_grid(name)


def _settings(args):
    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text())
    section = config.get(args.command, {})
    merged = {}
    for key, default in DEFAULTS.items():
        value = getattr(args, key, None)
        if value is None:
            value = section.get(key, config.get(key, default))
        merged[key] = value
    merged["out"] = args.out or section.get("out") or OUTPUTS.get(args.command)
    return argparse.Namespace(**merged)


def _stamp(doc, cfg, wall_keys=("wall_time",)):
    """Record the seed; drop wall-clock fields in reproducible mode."""
    doc["seed"] = cfg.seed
    if cfg.reproducible:
        for key in wall_keys:
            if key in doc:
                doc[key] = None
        for entry in doc.get("per_line") or []:
            entry["wall_time"] = None
    return doc


# -- stages -------------------------------------------------------------------

def cmd_gen_data(cfg):
    network = _grid(cfg.grid)
    data = generate_dataset(network, int(cfg.n), int(cfg.seed), float(cfg.low), float(cfg.high))
    save_dataset(data, cfg.out)
    return f"dataset {cfg.out}: {len(data)} samples ({len(data.dropped)} dropped) on {network.name}"


def cmd_train(cfg):
    network = _grid(cfg.grid)
    data = load_dataset(cfg.dataset)
    if data.network_hash and data.network_hash != network.digest():
        log.warning("dataset %s was generated for a different grid", cfg.dataset)
    hidden = [int(h) for h in str(cfg.hidden).split(",") if h.strip()]
    lo, hi = network.gen_bounds_pu()
    model = init_model(network.n_load, hidden, network.n_gen, lo, hi, seed=int(cfg.seed))
    config = TrainConfig(learning_rate=float(cfg.lr), batch_size=int(cfg.batch_size),
                         max_epochs=int(cfg.max_epochs), patience=int(cfg.patience), seed=int(cfg.seed))
    model, history = train(model, data, config)
    X_te, Y_te = data.part("test")
    if len(X_te):
        test_l0 = loss_l0(predict(model, X_te), Y_te)
        model.train_meta["test_l0"] = test_l0
        model.train_meta["test_loss_pct"] = 100.0 * test_l0 / float(data.upper.sum())
    model.train_meta["history"] = {k: [float(v) for v in vals] for k, vals in history.items()}
    save_model(model, cfg.out)
    pct = model.train_meta.get("test_loss_pct")
    return f"model {cfg.out}: hidden {hidden}, {model.train_meta['epochs']} epochs, test loss " + (
        "n/a" if pct is None else f"{pct:.3f} % of max total load")


def _bounds_table(source, model, lower, upper):
    """``source`` is a bounds file, a method name computed on the fly, or None."""
    if source is None:
        return bnd.BoundsTable.unbounded(model), "none"
    if source in (bnd.IBP, bnd.CROWN):
        return bnd.tighten_all(model, lower, upper, source), source
    table, method = bnd.load_bounds(source)
    return table, method


def cmd_attack(cfg):
    network = _grid(cfg.grid)
    model = load_model(cfg.model)
    data = load_dataset(cfg.dataset)
    lower, upper = data.box
    lines = None
    if cfg.objective == atk.FLOW and cfg.line is None and cfg.bounds is not None:
        table, _ = _bounds_table(cfg.bounds, model, lower, upper)
        ptdf = compute_ptdf(network)
        lines = [e for e in range(network.n_branch) if not screen_line(model, network, table, lower, upper, e, ptdf)]
    step = getattr(cfg, "lambda")
    config = atk.AttackConfig(objective=cfg.objective, line=None if cfg.line is None else int(cfg.line),
                              step=None if step is None else float(step),
                              iterations=int(cfg.iters), starts=int(cfg.starts), seed=int(cfg.seed))
    result = atk.run_attack(model, network, lower, upper, data.pd, config, lines=lines)
    doc = _stamp(result.to_document(), cfg)
    _write_json(cfg.out, doc)
    return f"attack {cfg.out}: {cfg.objective} best {result.best_value:.6g} (dataset best {result.dataset_best:.6g})"


def cmd_tighten(cfg):
    model = load_model(cfg.model)
    data = load_dataset(cfg.dataset)
    lower, upper = data.box
    method = {"obbt": bnd.OBBT}.get(cfg.method, cfg.method)
    table = bnd.tighten_all(model, lower, upper, method, per_neuron_budget=float(cfg.budget_sec),
                            node_budget=None if cfg.node_budget is None else int(cfg.node_budget),
                            workers=int(cfg.workers))
    doc = _stamp(bnd.table_to_document(table, method), cfg)
    _write_json(cfg.out, doc)
    return f"bounds {cfg.out}: {method}, {table.n_unstable()} unstable, total width {table.total_width():.6g}"


def _warm_points(path):
    if path is None:
        return None, {}
    doc = json.loads(Path(path).read_text())
    per_line = {int(e["line"]): np.array(e["pd"], dtype=float) for e in doc.get("per_line", [])}
    return np.array(doc["best_pd"], dtype=float), per_line


def _annotate(result, dataset_value, pga_value, normalizer, kind):
    doc = result.to_document()
    doc.update({"dataset_best": dataset_value, "pga_best": pga_value, "normalizer": normalizer,
                "normalizer_kind": kind,
                "percent": violation_percentages(dataset_value, pga_value, doc["primal"], doc["dual"], normalizer)})
    return doc


def cmd_verify(cfg):
    network = _grid(cfg.grid)
    model = load_model(cfg.model)
    data = load_dataset(cfg.dataset)
    lower, upper = data.box
    table, method = _bounds_table(cfg.bounds, model, lower, upper)
    limits = BnbLimits(time=None if cfg.time_limit is None else float(cfg.time_limit),
                       nodes=None if cfg.node_limit is None else int(cfg.node_limit), gap=float(cfg.gap))
    warm, warm_lines = _warm_points(cfg.warm)
    ptdf = compute_ptdf(network)
    if cfg.target == PB:
        res = verify_power_balance(model, table, lower, upper, warm=warm, limits=limits)
        res.bounds_method = method
        pga = None if warm is None else float(power_balance_violation(model, warm)[0])
        doc = _annotate(res, float(power_balance_violation(model, data.pd).max()), pga,
                        float(upper.sum()), "max total load")
    elif cfg.target == "flow":
        if cfg.line is None:
            raise OpfVerifyError("--target flow needs --line", hint="use --target all-lines for every line")
        e = int(cfg.line)
        w = warm_lines.get(e, warm)
        res = verify_line_flow(model, network, table, lower, upper, e, warm=w, limits=limits, ptdf=ptdf)
        res.bounds_method = method
        doc = _line_doc(model, network, data, res, e, w, ptdf)
    elif cfg.target == "all-lines":
        warm_map = {e: warm_lines.get(e, warm) for e in range(network.n_branch)} if warm is not None else None
        summary, per_line = verify_all_lines(model, network, table, lower, upper, warm_map, limits, int(cfg.workers))
        summary.bounds_method = method
        docs = []
        for e, res in enumerate(per_line):
            res.bounds_method = method
            docs.append(_line_doc(model, network, data, res, e, None if warm_map is None else warm_map[e], ptdf))
        doc = summary.to_document()
        doc["per_line"] = docs
        # the summary cell is the worst line in relative terms
        doc["percent"] = {k: max((d["percent"][k] for d in docs if d["percent"][k] is not None), default=None)
                          for k in ("dataset", "pga", "primal", "dual")}
        doc["normalizer_kind"] = "line capacity (per line)"
    else:
        raise OpfVerifyError(f"unknown target {cfg.target!r}", hint="choose pb, flow or all-lines")
    doc["bounds_method"] = method
    doc["warm_file"] = None if cfg.warm is None else Path(cfg.warm).name
    _stamp(doc, cfg)
    _write_json(cfg.out, doc)
    return f"verify {cfg.out}: {doc['target']} primal {doc['primal']:.6g} dual {doc['dual']:.6g} ({doc['status']})"


def _line_doc(model, network, data, res, e, warm, ptdf):
    cap = float(network.flow_limits_pu()[e])
    pga = None if warm is None else float(line_violation(model, network, warm, e, ptdf)[0])
    return _annotate(res, float(line_violation(model, network, data.pd, e, ptdf).max()), pga, cap, "line capacity")


def cmd_report(cfg):
    paths = cfg.reports or ["verify.json"]
    docs = [json.loads(Path(p).read_text()) for p in paths]
    test_loss = None
    if cfg.model and Path(cfg.model).exists():
        test_loss = load_model(cfg.model).train_meta.get("test_loss_pct")
    return write_report(docs, cfg.out_dir, cfg.format, test_loss).rstrip("\n")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack,
            "tighten": cmd_tighten, "verify": cmd_verify, "report": cmd_report}


# -- argument parsing -----------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--grid", help="bundled grid name or path to a grid JSON file (default case5)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output file")
    common.add_argument("--reproducible", action="store_true", default=None,
                        help="omit wall-clock fields so reruns are byte-identical")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="opfverify", description="Worst-case verification of DC-OPF proxies.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="sample demands and label them with DC-OPF")
    p.add_argument("--n", type=int)
    p.add_argument("--low", type=float, help="lower load factor (default 0.6)")
    p.add_argument("--high", type=float, help="upper load factor (default 1.0)")

    p = sub.add_parser("train", parents=[common], help="train the proxy network")
    p.add_argument("--dataset")
    p.add_argument("--hidden", help="comma-separated widths (default 50,50,50)")
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("attack", parents=[common], help="projected gradient ascent from the worst samples")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--objective", choices=["pb", "flow"])
    p.add_argument("--line", type=int)
    p.add_argument("--starts", type=int)
    p.add_argument("--lambda", type=float, dest="lambda", help="absolute step (default 1%% of the box width)")
    p.add_argument("--iters", type=int)
    p.add_argument("--bounds", help="bounds file or method used to screen lines")

    p = sub.add_parser("tighten", parents=[common], help="compute ReLU pre-activation bounds")
    p.add_argument("--model")
    p.add_argument("--dataset", help="dataset file whose header supplies the demand box")
    p.add_argument("--method", choices=["ibp", "crown", "obbt"])
    p.add_argument("--budget-sec", type=float, help="OBBT time budget per neuron and sense")
    p.add_argument("--node-budget", type=int, help="OBBT node budget per neuron and sense")

    p = sub.add_parser("verify", parents=[common], help="exact worst-case violation by branch-and-bound")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--target", choices=["pb", "flow", "all-lines"])
    p.add_argument("--line", type=int)
    p.add_argument("--bounds", help="bounds file, or ibp / crown to compute them now")
    p.add_argument("--warm", help="attack report used as warm start")
    p.add_argument("--time-limit", type=float)
    p.add_argument("--node-limit", type=int)
    p.add_argument("--gap", type=float)

    p = sub.add_parser("report", parents=[common], help="render verify reports as tables and figures")
    p.add_argument("reports", nargs="*", help="verify report files (default verify.json)")
    p.add_argument("--model", help="model file for the test-loss line")
    p.add_argument("--format", choices=["table", "json"])
    p.add_argument("--out-dir")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _settings(args)
        message = COMMANDS[args.command](cfg)
    except OpfVerifyError as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "hint": exc.hint, "stage": args.command}
        if getattr(exc, "problems", None):
            record["problems"] = exc.problems
        print(json.dumps(record), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "hint": None, "stage": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 1
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
