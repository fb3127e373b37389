"""Command-line entry point: ``matchfree <command> [options]``.

Exit codes: 0 success, 1 validation or config error, 2 assertion failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, gtprobe, scg
from .config import Config, ConfigError, load_config
from .cost import GroundTruthSet
from .hungarian import hungarian_match
from .losses import check_total_gradients, total_loss_forward_backward
from .toytrainer import (
    Objective,
    ToyModel,
    TrainingDiverged,
    TrainState,
    evaluate,
    heldout_scenes,
    load_state,
    new_probe,
    save_state,
    train,
)

EXIT_OK, EXIT_INVALID, EXIT_ASSERT, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
GRADCHECK_HIDDEN = 8
# instances whose correspondence sits this close to a mask flip are redrawn
GRADCHECK_MARGIN = 1e-9
ABLATION_GRIDS = {
    "alpha": [0.5, 1.0, 2.0],
    "rho": [0.1, 0.3, 0.5, 0.7, 0.9],
    "norm": ["none", "sum1", "max"],
}


class SceneParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}: line {line}: {msg}")
        self.line = line


def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def parse_scene(path) -> GroundTruthSet:
    """Read ``{"gts": [{"label": int, "box": [cx, cy, w, h]}, ...]}``.

    Errors report the line of the offending entry.
    """
    text = Path(path).read_text()
    dec = json.JSONDecoder()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(path, exc.lineno, exc.msg) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("gts"), list):
        raise SceneParseError(path, 1, 'expected an object with a "gts" list')
    # locate each entry so that schema errors can point at its line
    start = text.index("[", text.index('"gts"'))
    pos, starts = start + 1, []
    for _ in doc["gts"]:
        while text[pos] in " \t\r\n,":
            pos += 1
        starts.append(pos)
        _, pos = dec.raw_decode(text, pos)
    labels, boxes = [], []
    for k, (entry, at) in enumerate(zip(doc["gts"], starts)):
        line = _line_of(text, at)
        if not isinstance(entry, dict) or set(entry) != {"label", "box"}:
            raise SceneParseError(path, line, f"gt {k} must have exactly the keys label and box")
        label, box = entry["label"], entry["box"]
        if not isinstance(label, int) or isinstance(label, bool) or label < 0:
            raise SceneParseError(path, line, f"gt {k}: label must be a non-negative integer")
        if (
            not isinstance(box, list)
            or len(box) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box)
        ):
            raise SceneParseError(path, line, f"gt {k}: box must be four numbers")
        if box[2] < 0 or box[3] < 0 or not all(np.isfinite(box)):
            raise SceneParseError(path, line, f"gt {k}: box must be finite with w, h >= 0")
        labels.append(label)
        boxes.append(box)
    return GroundTruthSet(np.array(labels, dtype=np.int64), np.array(boxes, dtype=np.float64).reshape(-1, 4))


def _fmt(mat: np.ndarray) -> str:
    return "\n".join("  " + " ".join(f"{v:9.5f}" for v in row) for row in np.atleast_2d(mat))


def cmd_assign(cfg: Config, args, out=sys.stdout) -> int:
    k = cfg.probe.num_classes
    if args.scene:
        gts = parse_scene(args.scene)
        if len(gts) and gts.labels.max() >= k:
            raise ConfigError(f"scene label {gts.labels.max()} >= probe.num_classes {k}")
        _, preds = bench.random_instance(0, args.queries, k, args.seed)
    else:
        gts, preds = bench.random_instance(args.gts, args.queries, k, args.seed)
    probe = cfg.probe.build()
    res = total_loss_forward_backward(gts, preds, probe, cfg.loss, backward=False)
    trace = res.trace
    match = hungarian_match(res.cost)
    print(f"M={len(gts)} N={len(preds)} K={k} seed={args.seed}", file=out)
    print("C (broadcast cost):", file=out)
    print(_fmt(res.cost.values), file=out)
    print("A (dense correspondence):", file=out)
    print(_fmt(res.a), file=out)
    print("tau (rho * column peak):", file=out)
    print(_fmt(trace.tau), file=out)
    print("A_hat (sparse correspondence):", file=out)
    print(_fmt(trace.hat.values), file=out)
    subset = bool(np.all(~trace.hat.mask | (res.a >= trace.tau[None, :])))
    print(f"A_hat support within A >= tau: {subset}", file=out)
    print("hungarian pairs (gt -> query, cost):", file=out)
    for i, j in match.pairs:
        print(f"  {i} -> {j}  {res.cost.values[i, j]:.6f}", file=out)
    print(f"hungarian total cost: {match.total_cost:.6f}", file=out)
    print(f"L_w={res.report.loss_w:.6f} L_q={res.report.loss_q:.6f} L_total={res.report.total:.6f}", file=out)
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        scg.dump_csv(d / "correspondence.csv", res.a, trace)
        with (d / "cost.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "value"])
            for (i, j), v in np.ndenumerate(res.cost.values):
                w.writerow([i, j, repr(float(v))])
        with (d / "hungarian.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gt", "query", "cost"])
            for i, j in match.pairs:
                w.writerow([i, j, repr(float(res.cost.values[i, j]))])
    return EXIT_OK


def gradcheck_cases(seed: int) -> list[tuple[int, int, int]]:
    """(M, N, instance seed) triples covering M in {0, 1, 3, 5} and N in {5, 25}."""
    return [(m, n, seed * 1000 + 10 * m + n) for m in (0, 1, 3, 5) for n in (5, 25)]


def gradcheck_instance(m: int, n: int, seed: int, probe_cfg, scg_cfg, max_draws: int = 100):
    """Seeded scene and probe away from SCG mask boundaries.

    Returns ``(gts, preds, probe, seed_used, redraws)``. ``A_hat`` jumps where
    the sparsity mask flips, e.g. on a uniform row from an all-dead ReLU
    layer, and central differences straddling such a jump are meaningless.
    """
    for k in range(max_draws):
        s = seed + 100_003 * k
        gts, preds = bench.random_instance(m, n, probe_cfg.num_classes, s)
        probe = dataclasses.replace(probe_cfg, seed=s).build()
        a, _ = gtprobe.correspondence(gts, preds, probe)
        if scg.decision_margin(a, scg_cfg) >= GRADCHECK_MARGIN:
            return gts, preds, probe, s, k
    raise RuntimeError(f"no instance with a clear SCG margin after {max_draws} draws")


def cmd_gradcheck(cfg: Config, args, out=sys.stdout) -> int:
    probe_cfg = dataclasses.replace(cfg.probe, hidden_dim=GRADCHECK_HIDDEN * cfg.probe.heads)
    print(f"probe hidden width reduced to {probe_cfg.hidden_dim} for finite differences", file=out)
    worst = 0.0
    cases = gradcheck_cases(args.seed)
    if args.gts is not None:
        cases = [c for c in cases if c[0] == args.gts] or [(args.gts, 5, args.seed)]
    for m, n, s in cases:
        gts, preds, probe, s, redraws = gradcheck_instance(m, n, s, probe_cfg, cfg.scg)
        rep = check_total_gradients(gts, preds, probe, cfg.loss, corrupt=args.corrupt)
        worst = max(worst, rep.max_rel_err)
        status = "ok" if rep.passed(GRADCHECK_TOL) else "BAD"
        note = f" ({redraws} redrawn near a mask flip)" if redraws else ""
        print(f"M={m} N={n} seed={s}: max rel err {rep.max_rel_err:.3e} at {rep.worst} [{status}]{note}", file=out)
    passed = worst <= GRADCHECK_TOL
    print(f"{'PASS' if passed else 'FAIL'} max rel err {worst:.3e} (tol {GRADCHECK_TOL:g})", file=out)
    return EXIT_OK if passed else EXIT_ASSERT


def _toy_cfg(cfg: Config, args):
    toy = cfg.toy
    if args.seed is not None:
        toy = dataclasses.replace(toy, seed=args.seed)
    return toy


def run_toy(cfg: Config, toy, objective, steps=None, out_dir=None, resume=None):
    """Train one toy model; returns (state, metrics, log records)."""
    if resume is not None:
        state, _ = load_state(resume, toy)
    else:
        state = TrainState(ToyModel(toy), new_probe(toy))
    todo = toy.steps if steps is None else steps
    todo = max(0, todo - state.step) if resume is not None and steps is None else todo
    records = []
    log_fh = (Path(out_dir) / "log.jsonl").open("a" if resume else "w") if out_dir else None
    try:

        def log(rec):
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")

        train(state, objective, todo, cfg.loss, log=log)
    finally:
        if log_fh:
            log_fh.close()
    metrics = evaluate(state.model, state.probe, heldout_scenes(toy), cfg.loss, toy.iou_threshold)
    return state, metrics, records


def cmd_train_toy(cfg: Config, args, out=sys.stdout) -> int:
    toy = _toy_cfg(cfg, args)
    objective = Objective(args.objective)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    state, metrics, _ = run_toy(cfg, toy, objective, args.steps, out_dir, args.resume)
    save_state(out_dir / "checkpoint.json", state, {"objective": objective.value})
    doc = {"objective": objective.value, "seed": toy.seed, "steps": state.step, **dataclasses.asdict(metrics)}
    (out_dir / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps(doc), file=out)
    return EXIT_OK


def cmd_bench(cfg: Config, args, out=sys.stdout) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = bench.run_bench(cfg.bench)
    text = bench.emit_report(result, out_dir / "bench.csv")
    print(text, end="", file=out)
    checks = bench.shape_checks(result)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}", file=out)
    if args.assert_shape and not all(c.passed for c in checks):
        return EXIT_ASSERT
    return EXIT_OK


def ablation_configs(cfg: Config, param: str):
    """(value, Config) for each point of the sweep grid of ``param``."""
    out = []
    for v in ABLATION_GRIDS[param]:
        if param == "alpha":
            c = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, alpha=v))
        else:
            c = dataclasses.replace(cfg, scg=dataclasses.replace(cfg.scg, **{param: v}))
        out.append((v, c))
    return out


ABLATION_FIELDS = ["param", "value", "seed", "purity", "matched_iou", "class_accuracy", "surviving_per_gt", "hungarian_purity"]


def cmd_ablate(cfg: Config, args, out=sys.stdout) -> int:
    seeds = [cfg.toy.seed] if args.seeds is None else list(range(args.seeds))
    if args.seed is not None:
        seeds = [args.seed + s for s in range(len(seeds))]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, c in ablation_configs(cfg, args.param):
        for seed in seeds:
            toy = dataclasses.replace(c.toy, seed=seed)
            _, m, _ = run_toy(c, toy, Objective.MATCHFREE, args.steps)
            row = {"param": args.param, "value": value, "seed": seed}
            row.update({k: getattr(m, k) for k in ABLATION_FIELDS[3:]})
            rows.append(row)
            print(",".join(str(row[k]) for k in ABLATION_FIELDS), file=out)
    with (out_dir / f"ablate_{args.param}.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matchfree", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=seed_default)
        return sp

    a = common(sub.add_parser("assign", help="print C, A, A_hat and Hungarian pairs"), 0)
    src = a.add_mutually_exclusive_group()
    src.add_argument("--random", type=int, dest="random_seed", metavar="SEED", help="random scene seed")
    src.add_argument("--scene", help="scene JSON file")
    a.add_argument("--gts", type=int, default=3, help="M for random scenes")
    a.add_argument("--queries", type=int, default=10, help="N (random predictions)")
    a.add_argument("--out", help="directory for CSV dumps")

    g = common(sub.add_parser("gradcheck", help="finite-difference check of the full loss"), 0)
    g.add_argument("--gts", type=int, default=None, help="only check scenes with this M")
    g.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)

    t = common(sub.add_parser("train-toy", help="train the toy model"))
    t.add_argument("--objective", choices=[o.value for o in Objective], default="matchfree")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--resume", help="checkpoint to continue from")

    b = common(sub.add_parser("bench", help="latency benchmark"))
    b.add_argument("--out", default=".")
    b.add_argument("--assert", dest="assert_shape", action="store_true", help="exit 2 unless shape checks pass")

    s = common(sub.add_parser("ablate", help="sweep alpha, rho or the normalisation mode"))
    s.add_argument("--param", choices=sorted(ABLATION_GRIDS), required=True)
    s.add_argument("--out", default=".")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seeds", type=int, default=None, help="number of seeds per setting")
    return p


COMMANDS = {
    "assign": cmd_assign,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    if args.command == "assign" and args.random_seed is not None:
        args.seed = args.random_seed
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args, out)
    except (ConfigError, SceneParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
