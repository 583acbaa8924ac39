import csv
import io
import json

import pytest

from opfverify.report import (percent, render_csv, render_json, render_table, rows_from_report,
                              violation_percentages, write_report)


def doc(target="pb", cells=(1.0, 2.0, 3.0, 4.0), status="proved-optimal", **extra):
    return {"target": target, "bounds_method": "crown", "status": status,
            "percent": dict(zip(("dataset", "pga", "primal", "dual"), cells)),
            "node_log": [[1, 0.1, 0.5], [3, 0.2, 0.3]], **extra}


def test_percent_normalisation():
    assert percent(0.5, 2.0) == 25.0
    assert percent(None, 2.0) is None
    cells = violation_percentages(0.1, 0.2, 0.3, 0.4, 4.0)
    assert cells == {"dataset": 2.5, "pga": 5.0, "primal": 7.5, "dual": 10.0}
    assert violation_percentages(0.1, None, 0.3, 0.4, 4.0)["pga"] is None


def test_cells_come_from_the_artifact():
    # the renderer never recomputes: odd stored values come through verbatim
    rows = rows_from_report(doc(cells=(9.87, 1.23, 4.56, 7.89)))
    line = render_table(rows).splitlines()[1].split()
    assert line == ["pb", "crown", "9.87", "1.23", "4.56", "7.89", "proved-optimal"]


def test_budget_exhausted_is_flagged():
    text = render_table(rows_from_report(doc(status="budget-exhausted", cells=(1, 2, 3, 123.54))))
    assert "budget-exhausted*" in text
    assert "123.54" in text
    assert "dual is a bound" in text


def test_per_line_rows_and_missing_values():
    parent = doc(target="all-lines", per_line=[doc(target="line-0", cells=(0, None, 0, 0)),
                                               doc(target="line-1")])
    rows = rows_from_report(parent)
    assert [r["target"] for r in rows] == ["line-0", "line-1", "all-lines"]
    assert render_table(rows).splitlines()[1].split()[3] == "-"


def test_csv_and_json():
    rows = rows_from_report(doc())
    parsed = list(csv.reader(io.StringIO(render_csv(rows))))
    assert parsed[0] == ["target", "bounds", "dataset", "pga", "primal", "dual", "status"]
    assert float(parsed[1][4]) == 3.0
    out = json.loads(render_json(rows, test_loss=1.5))
    assert out["test_loss_pct"] == 1.5 and out["rows"][0]["dual"] == 4.0


def test_write_report_files(tmp_path):
    text = write_report([doc()], tmp_path, "table", test_loss=2.0)
    assert "test loss L0: 2.000 %" in text
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["convergence.png", "report.csv", "report.txt", "violations.png"]
    first = (tmp_path / "violations.png").read_bytes()
    write_report([doc()], tmp_path, "table", test_loss=2.0)
    assert (tmp_path / "violations.png").read_bytes() == first


def test_json_format_file(tmp_path):
    write_report([doc()], tmp_path, "json")
    assert json.loads((tmp_path / "report.json").read_text())["rows"][0]["primal"] == pytest.approx(3.0)
