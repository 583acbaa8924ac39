"""Worst-case violation tables and figures built from stored verification reports.

Nothing here recomputes a violation: the renderer only formats numbers that a
verify run already wrote to disk.  Power-balance values are expressed as a
percentage of the maximum total load, line-flow values as a percentage of the
line's capacity.
"""

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLUMNS = ("dataset", "pga", "primal", "dual")
HEADERS = ("Target", "Bounds", "Dataset", "PGA", "Primal", "Dual", "Status")


def percent(value, normalizer):
    if value is None or normalizer is None or normalizer <= 0:
        return None
    return 100.0 * value / normalizer


def violation_percentages(dataset_best, pga_best, primal, dual, normalizer):
    """The four table cells for one target, in percent."""
    return {k: percent(v, normalizer) for k, v in zip(COLUMNS, (dataset_best, pga_best, primal, dual))}


def rows_from_report(doc):
    """Table rows for one stored verify report; per-line reports expand to one row per line."""
    rows = []
    for entry in doc.get("per_line") or []:
        rows.append(_row(entry, doc.get("bounds_method")))
    rows.append(_row(doc, doc.get("bounds_method")))
    return rows


def _row(doc, bounds_method):
    cells = doc.get("percent") or {}
    return {
        "target": doc["target"],
        "bounds": doc.get("bounds_method") or bounds_method or "",
        **{k: cells.get(k) for k in COLUMNS},
        "status": doc.get("status", ""),
        "log": doc.get("node_log") or [],
    }


def _fmt(value):
    return "-" if value is None else f"{value:.2f}"


def render_table(rows, test_loss=None):
    body = [[r["target"], r["bounds"], *(_fmt(r[k]) for k in COLUMNS),
             r["status"] + ("*" if r["status"] == "budget-exhausted" else "")] for r in rows]
    widths = [max(len(h), *(len(line[i]) for line in body)) if body else len(h) for i, h in enumerate(HEADERS)]

    def fmt_line(cells):
        return "  ".join(c.ljust(w) if i in (0, 1, 6) else c.rjust(w)
                         for i, (c, w) in enumerate(zip(cells, widths))).rstrip()

    out = [fmt_line(HEADERS)] + [fmt_line(line) for line in body]
    out.append("values in %: power balance w.r.t. max total load, line flow w.r.t. line capacity")
    if any(r["status"] == "budget-exhausted" for r in rows):
        out.append("* budget exhausted: dual is a bound, not a proved optimum")
    if test_loss is not None:
        out.append(f"test loss L0: {test_loss:.3f} % of max total load")
    return "\n".join(out) + "\n"


def render_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([h.lower() for h in HEADERS])
    for r in rows:
        writer.writerow([r["target"], r["bounds"], *("" if r[k] is None else repr(r[k]) for k in COLUMNS), r["status"]])
    return buf.getvalue()


def render_json(rows, test_loss=None):
    doc = {"rows": [{k: v for k, v in r.items() if k != "log"} for r in rows], "test_loss_pct": test_loss,
           "units": {"pb": "percent of max total load", "line": "percent of line capacity"}}
    return json.dumps(doc, indent=1) + "\n"


def plot_violations(rows, path):
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows) + 2), 3.5))
    width = 0.2
    for j, key in enumerate(COLUMNS):
        xs = [i + (j - 1.5) * width for i in range(len(rows))]
        ax.bar(xs, [r[key] or 0.0 for r in rows], width, label=key)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["target"] for r in rows], rotation=45, ha="right")
    ax.set_ylabel("violation [%]")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_convergence(rows, path):
    fig, ax = plt.subplots(figsize=(6.5, 3.5))
    for r in rows:
        log = [e for e in r["log"] if e[1] is not None and e[2] is not None]
        if len(log) < 2:
            continue  # screened or solved at the root
        nodes = [e[0] for e in log]
        line = ax.step(nodes, [e[2] for e in log], where="post", label=f"{r['target']} dual")[0]
        ax.step(nodes, [e[1] for e in log], where="post", linestyle="--", color=line.get_color(),
                label=f"{r['target']} primal")
    ax.set_xlabel("nodes")
    ax.set_ylabel("objective [p.u.]")
    if ax.lines:
        ax.legend(fontsize="small", loc="center left", bbox_to_anchor=(1.02, 0.5))
    ax.set_title("branch-and-bound bounds per node", fontsize="medium")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def write_report(docs, out_dir, fmt="table", test_loss=None):
    """Render all reports; writes ``report.csv`` and two PNG figures to ``out_dir``.

    Returns the rendered text (table or JSON).
    """
    rows = [row for doc in docs for row in rows_from_report(doc)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(render_csv(rows))
    plot_violations(rows, out_dir / "violations.png")
    plot_convergence(rows, out_dir / "convergence.png")
    text = render_table(rows, test_loss) if fmt == "table" else render_json(rows, test_loss)
    (out_dir / ("report.txt" if fmt == "table" else "report.json")).write_text(text)
    return text
