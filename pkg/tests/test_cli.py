import json

import numpy as np
import pytest

from lvseg.cli import main
from lvseg.pipeline import load_registry, read_classes_csv, read_slice_csv
from lvseg.volume_io import read_pgm


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    """synth -> config -> label -> features -> train -> classify -> segment."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--cases", "3", "--slices", "6", "--seed", "50",
                 "--out", str(d / "data")]) == 0
    assert main(["config", "--out", str(d / "cfg.json")]) == 0
    assert main(["label", "--every", "1", "--in", str(d / "data"),
                 "--out", str(d / "labels.csv")]) == 0
    assert main(["features", "--in", str(d / "data"), "--labels", str(d / "labels.csv"),
                 "--out", str(d / "f.csv")]) == 0
    assert main(["train", "--features", str(d / "f.csv"), "--trees", "5",
                 "--out", str(d / "model.rf")]) == 0
    assert main(["classify", "--model", str(d / "model.rf"), "--in", str(d / "data"),
                 "--out", str(d / "classes.csv"), "--report", str(d / "labels.csv")]) == 0
    assert main(["segment", "--in", str(d / "data"), "--classes", str(d / "classes.csv"),
                 "--gt", "--dump-masks", "--config", str(d / "cfg.json"),
                 "--out", str(d / "report")]) == 0
    return d


def test_flow_outputs(flow, capsys):
    labels = read_classes_csv(flow / "labels.csv")
    assert sorted(labels) == ["case_001", "case_002", "case_003"]
    assert all(len(v) == 6 for v in labels.values())
    classes = read_classes_csv(flow / "classes.csv")
    assert sorted(classes) == sorted(labels)
    recs = read_slice_csv(flow / "report" / "slices.csv")
    assert len(recs) == 18
    for name in ("summary.txt", "summary.csv", "config.json", "dice_by_class.png"):
        assert (flow / "report" / name).exists()
    masks = sorted((flow / "report" / "masks" / "case_001").glob("mask_*.pgm"))
    assert len(masks) == 6
    assert set(np.unique(read_pgm(masks[0]))) <= {0, 255}


def test_cross_validate_prints_folds(flow, capsys):
    assert main(["cross-validate", "--features", str(flow / "f.csv"), "--k", "2",
                 "--trees", "3"]) == 0
    out = capsys.readouterr().out
    assert "fold 1:" in out and "mean accuracy:" in out


def test_evaluate_dumped_masks(flow, tmp_path):
    out = tmp_path / "eval.csv"
    assert main(["evaluate", "--pred", str(flow / "report" / "masks"),
                 "--gt", str(flow / "data"), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0].startswith("case_id,p,dice")
    # the dumped masks are the ones scored in the report, so Dice values agree
    recs = {(r.case_id, r.p): r.metrics.dice for r in read_slice_csv(flow / "report" / "slices.csv")
            if r.metrics is not None}
    for line in rows[1:]:
        case_id, p, d = line.split(",")[:3]
        assert float(d) == recs[(case_id, int(p))]


def test_segment_ablation_oracle(flow, tmp_path):
    assert main(["segment", "--in", str(flow / "data"), "--oracle-classes", "--gt",
                 "--ablation", "--no-figures", "--config", str(flow / "cfg.json"),
                 "--out", str(tmp_path / "r")]) == 0
    variants = {r.variant for r in read_slice_csv(tmp_path / "r" / "slices.csv")}
    assert variants == {"Proposed", "A", "B", "C"}
    assert not list((tmp_path / "r").glob("*.png"))


def test_tune(flow, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"apical": {"lambda1": [1.5, 1.75]}}))
    assert main(["tune", "--in", str(flow / "data"), "--gt", "--grid", str(grid),
                 "--out", str(tmp_path / "reg.json")]) == 0
    assert load_registry(tmp_path / "reg.json").params


def test_usage_errors(flow, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1
    assert main(["segment", "--in", str(flow / "data"), "--config", str(flow / "cfg.json"),
                 "--out", str(tmp_path / "x")]) == 1
    assert main(["tune", "--in", str(flow / "data"), "--grid", "g.json",
                 "--out", str(tmp_path / "r.json")]) == 1
    assert main(["label", "--every", "0", "--in", str(flow / "data"),
                 "--out", str(tmp_path / "l.csv")]) == 1


def test_data_errors(tmp_path):
    assert main(["train", "--features", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "m.rf")]) == 2
    (tmp_path / "empty").mkdir()
    (tmp_path / "cfg.json").write_text("{}")
    assert main(["segment", "--in", str(tmp_path / "empty"), "--oracle-classes",
                 "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "r")]) == 2
    assert main(["synth", "--cases", "1", "--slices", "2", "--out", str(tmp_path / "s")]) == 2


def test_numerical_failure(flow, tmp_path):
    cfg = json.loads((flow / "cfg.json").read_text())
    for cls in cfg["registry"].values():
        cls["tau"] = 1e8
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["segment", "--in", str(flow / "data"), "--oracle-classes",
                 "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "r")]) == 3
