import csv
import io
import json

import pytest

from matchfree import cli
from matchfree.config import Config, dump_config, to_dict, from_dict


def run(*argv):
    buf = io.StringIO()
    code = cli.main(list(argv), out=buf)
    return code, buf.getvalue()


@pytest.fixture
def small_cfg(tmp_path):
    doc = to_dict(Config())
    doc["toy"].update(eval_scenes=20, probe_warmup=3, eval_every=0)
    doc["bench"].update(grid=[[0, 6], [3, 8], [3, 16]], reps=5, probe_dim=8, probe_depth=1, num_classes=4)
    path = tmp_path / "cfg.json"
    dump_config(from_dict(doc), path)
    return str(path)


def test_assign_is_deterministic(tmp_path):
    a = run("assign", "--random", "42", "--out", str(tmp_path / "a"))
    b = run("assign", "--random", "42", "--out", str(tmp_path / "b"))
    assert a == b and a[0] == 0
    text = a[1]
    assert "A_hat support within A >= tau: True" in text and "hungarian pairs" in text
    for name in ("correspondence.csv", "cost.csv", "hungarian.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with (tmp_path / "a" / "hungarian.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 3
    assert run("assign", "--random", "43")[1] != text


def test_assign_single_gt():
    code, text = run("assign", "--random", "1", "--gts", "1")
    pairs = [ln for ln in text.splitlines() if ln.startswith("  0 -> ")]
    assert code == 0 and len(pairs) == 1 and text.count(" -> ") == 2


def test_assign_scene_file(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"gts": [{"label": 1, "box": [0.5, 0.5, 0.2, 0.2]}, {"label": 0, "box": [0.2, 0.3, 0.1, 0.1]}]}))
    code, text = run("assign", "--scene", str(p), "--queries", "6")
    assert code == 0 and text.startswith("M=2 N=6")


def test_scene_parse_error_reports_line(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text('{"gts": [\n  {"label": 1, "box": [0.5, 0.5, 0.2, 0.2]},\n  {"label": -1, "box": [0.5, 0.5, 0.2, 0.2]}\n]}\n')
    code, _ = run("assign", "--scene", str(p))
    assert code == cli.EXIT_INVALID
    assert "line 3" in capsys.readouterr().err
    with pytest.raises(cli.SceneParseError) as exc:
        cli.parse_scene(p)
    assert exc.value.line == 3


def test_bad_arguments_exit_1():
    assert run("assign", "--random", "1", "--scene", "x")[0] == cli.EXIT_INVALID
    assert run("nonsense")[0] == cli.EXIT_INVALID


def test_missing_scene_is_io_error(tmp_path):
    assert run("assign", "--scene", str(tmp_path / "missing.json"))[0] == cli.EXIT_IO


def test_gradcheck_passes():
    code, text = run("gradcheck")
    assert code == 0 and text.rstrip().splitlines()[-1].startswith("PASS")
    assert "M=0 N=5" in text and "M=5 N=25" in text


def test_gradcheck_empty_scene():
    code, text = run("gradcheck", "--gts", "0")
    assert code == 0 and "M=1" not in text


def test_gradcheck_catches_corrupted_gradient():
    code, text = run("gradcheck", "--gts", "3", "--corrupt", "1e-2")
    assert code == cli.EXIT_ASSERT and "FAIL" in text


def test_train_toy_zero_steps_and_resume(tmp_path, small_cfg):
    out = tmp_path / "t"
    code, text = run("train-toy", "--config", small_cfg, "--out", str(out), "--steps", "0")
    assert code == 0
    base = json.loads(text)
    assert base["steps"] == 0 and base["purity"] < 0.3
    assert (out / "log.jsonl").read_text() == ""
    code, _ = run("train-toy", "--config", small_cfg, "--out", str(out), "--steps", "4", "--resume", str(out / "checkpoint.json"))
    assert code == 0
    assert json.loads((out / "metrics.json").read_text())["steps"] == 4
    direct = tmp_path / "d"
    run("train-toy", "--config", small_cfg, "--out", str(direct), "--steps", "4")
    assert (direct / "log.jsonl").read_text() == (out / "log.jsonl").read_text()
    assert (direct / "metrics.json").read_text() == (out / "metrics.json").read_text()


@pytest.mark.parametrize("objective", ["matchfree", "hungarian"])
def test_train_toy_objectives(tmp_path, small_cfg, objective):
    code, text = run("train-toy", "--config", small_cfg, "--objective", objective, "--out", str(tmp_path), "--steps", "5")
    assert code == 0 and json.loads(text)["objective"] == objective
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 5 and {"L_w", "L_q", "L_total"} <= set(json.loads(lines[0]))


def test_bench_writes_csv(tmp_path, small_cfg):
    code, text = run("bench", "--config", small_cfg, "--out", str(tmp_path / "b"))
    assert code == 0
    with (tmp_path / "b" / "bench.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows if r["M"] == "0"} == {"matchfree_fwd", "matchfree_fwdbwd"}
    assert len(rows) == 2 + 2 * 4
    assert (tmp_path / "b" / "bench_summary.txt").exists()


def test_bench_unwritable_output_is_io_error(tmp_path, small_cfg):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("bench", "--config", small_cfg, "--out", str(blocker / "sub"))[0] == cli.EXIT_IO


def test_invalid_config_exit_1(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"scg": {"rho": 2}}')
    assert run("assign", "--config", str(p))[0] == cli.EXIT_INVALID


def test_ablate_rows_and_determinism(tmp_path, small_cfg):
    a = run("ablate", "--config", small_cfg, "--param", "norm", "--steps", "4", "--out", str(tmp_path / "a"))
    b = run("ablate", "--config", small_cfg, "--param", "norm", "--steps", "4", "--out", str(tmp_path / "b"))
    assert a == b and a[0] == 0
    with (tmp_path / "a" / "ablate_norm.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["value"] for r in rows] == ["none", "sum1", "max"]
    assert set(rows[0]) == set(cli.ABLATION_FIELDS)


def test_ablation_grid_configs():
    cfgs = cli.ablation_configs(Config(), "rho")
    assert [c.scg.rho for _, c in cfgs] == [0.1, 0.3, 0.5, 0.7, 0.9]
    assert all(c.loss.scg.rho == v for v, c in cfgs)
    assert [c.loss.alpha for _, c in cli.ablation_configs(Config(), "alpha")] == [0.5, 1.0, 2.0]


def test_gradcheck_redraws_instances_on_a_mask_flip():
    import dataclasses

    from matchfree import bench, scg
    from matchfree.gtprobe import correspondence

    probe_cfg = dataclasses.replace(Config().probe, hidden_dim=cli.GRADCHECK_HIDDEN)
    gts, preds = bench.random_instance(3, 5, 4, 15035)
    a, _ = correspondence(gts, preds, dataclasses.replace(probe_cfg, seed=15035).build())
    assert scg.decision_margin(a) == 0.0  # one GT row is exactly uniform
    *_, seed, redraws = cli.gradcheck_instance(3, 5, 15035, probe_cfg, Config().scg)
    assert redraws >= 1 and seed != 15035
