import json

import pytest

from matchfree.config import Config, ConfigError, dump_config, from_dict, load_config, to_dict
from matchfree.scg import NormMode


def test_defaults():
    cfg = load_config()
    assert (cfg.cost.cls, cfg.cost.l1, cfg.cost.iou) == (2.0, 5.0, 2.0)
    assert cfg.scg.rho == 0.5 and cfg.scg.norm is NormMode.SUM1
    assert cfg.loss.alpha == 1.0 and cfg.loss.beta == 1.0
    assert cfg.loss.cost is cfg.cost and cfg.loss.scg is cfg.scg


def test_round_trip(tmp_path):
    doc = to_dict(Config())
    doc["scg"]["rho"] = 0.3
    doc["bench"]["grid"] = [[2, 10], [2, 20]]
    cfg = from_dict(doc)
    dump_config(cfg, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again == cfg
    assert again.loss.scg.rho == 0.3 and again.bench.grid == ((2, 10), (2, 20))
    assert to_dict(again) == json.loads((tmp_path / "c.json").read_text())


def test_partial_document_takes_defaults():
    cfg = from_dict({"cost": {"l1": 1.0}})
    assert cfg.cost.l1 == 1.0 and cfg.cost.cls == 2.0 and cfg.loss.cost.l1 == 1.0


@pytest.mark.parametrize(
    "doc",
    [
        {"nonsense": {}},
        {"scg": {"rho": 0.5, "typo": 1}},
        {"loss": {"cost": {}}},
        {"schema_version": 2},
        {"bench": {"reps": 0}},
        {"scg": {"rho": 1.5}},
        {"cost": []},
        [],
    ],
)
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "scg": {\n    "rho": ,\n  }\n}\n')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "nope.json")
