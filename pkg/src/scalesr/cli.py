"""Command-line entry point: ``scalesr {coarsen,train,sample,evaluate,sweep,plot}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import read_gridded, write_gridded
from .grid import SRFactors, coarsen_blocks
from .metrics import EnsembleForecast, evaluate, format_table
from .training import (
    PRESETS, RunConfig, configure_threads, deep_merge, ensemble_for, load_run,
    predict_det, prepare_experiment, run_baselines, train_run,
)

log = logging.getLogger("scalesr")

ABLATION_DIR = Path("ablations") / "no_attention"


class CLIError(Exception):
    pass


# ------------------------------------------------------------------ config resolution


def resolve_config(args) -> RunConfig:
    """Preset, then config file, then flags; later sources win."""
    rc = PRESETS[args.preset]
    if getattr(args, "config", None):
        rc = rc.merged(json.loads(Path(args.config).read_text()))
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
        over["det_train"] = {"seed": args.seed}
        over["dif_train"] = {"seed": args.seed}
    if getattr(args, "fold", None) is not None:
        over["fold"] = args.fold
        over = deep_merge(over, {"det_train": {"fold_id": args.fold},
                                 "dif_train": {"fold_id": args.fold}})
    if getattr(args, "factors", None):
        SRFactors.parse(args.factors)
        over["factors"] = args.factors
    if getattr(args, "members", None) is not None:
        over["members"] = args.members
    if getattr(args, "no_attention", False):
        over["attention"] = False
    if getattr(args, "deterministic_only", False):
        over["deterministic_only"] = True
    if getattr(args, "no_mc", False):
        over["conservation"] = {"enabled": False}
    return rc.merged(over)


# ------------------------------------------------------------------ commands


def cmd_coarsen(args):
    f = SRFactors.parse(args.factors)
    meta, arrays = read_gridded(args.input)
    if meta["dims"][0] != "time":
        raise CLIError("coarsen expects a [time, y, x] container")
    miss = meta.get("missing_value")
    out, sums = {}, {}
    for name, arr in arrays.items():
        x = arr.astype(np.float64)
        if miss is not None and np.any(x == miss):
            log.warning("%s: missing values treated as 0", name)
            x[x == miss] = 0.0
        n = (x.shape[0] // f.T) * f.T
        lr = coarsen_blocks(x[:n], f)
        hr_sum, lr_sum = float(x[:n].sum()), float(lr.sum())
        rel = abs(f.S**2 * f.T * lr_sum - hr_sum) / max(abs(hr_sum), 1e-300)
        log.info("%s: S^2 T sum(lr) = %.9g, sum(hr) = %.9g (rel %.2e)",
                 name, f.S**2 * f.T * lr_sum, hr_sum, rel)
        if rel > 1e-9:
            raise CLIError(f"{name}: mass identity violated (relative error {rel:.3e})")
        out[name] = lr
        sums[name] = {"hr_sum": hr_sum, "lr_sum": lr_sum}
    new_meta = write_gridded(args.output, out, meta["dims"], meta.get("units"),
                             meta.get("missing_value"))
    digest = hashlib.sha256()
    for name in new_meta["variables"]:
        digest.update((Path(args.output) / f"{name}.f32").read_bytes())
    check = {"factors": str(f), "sha256": digest.hexdigest(), "mass": sums}
    (Path(args.output) / "checksum.json").write_text(json.dumps(check, indent=2, sort_keys=True))
    print(json.dumps(check, sort_keys=True))


def _train_one(rc, run, ablations):
    run.mkdir(parents=True, exist_ok=True)
    det, dif, records, exp = train_run(rc, run)
    summary = {"run_dir": str(run), "records": [r.summary() for r in records]}
    if ablations and rc.attention and not rc.deterministic_only:
        abl = rc.merged({"attention": False})
        _, _, rec_abl, _ = train_run(abl, run / ABLATION_DIR, exp)
        summary["ablation"] = [r.summary() for r in rec_abl]
    return summary


def fold_dirs(run_dir):
    return sorted(p for p in Path(run_dir).glob("fold_*") if (p / "config.json").exists())


def cmd_train(args):
    rc = resolve_config(args)
    run = Path(args.run_dir)
    if not args.all_folds:
        print(json.dumps(_train_one(rc, run, args.ablations), sort_keys=True))
        return
    if args.fold is not None:
        raise CLIError("--fold and --all-folds are exclusive")
    out = {}
    for k in range(rc.data.fold_count):
        rk = rc.merged({"fold": k, "det_train": {"fold_id": k}, "dif_train": {"fold_id": k}})
        out[f"fold_{k}"] = _train_one(rk, run / f"fold_{k}", args.ablations)
    print(json.dumps(out, sort_keys=True))


def _split(exp, name):
    if name not in ("val", "test"):
        raise CLIError("split must be 'val' or 'test'")
    return exp.val if name == "val" else exp.test


def _members_path(run, split, seed, k):
    return Path(run) / "samples" / f"{split}_seed{seed}_K{k}"


def _sample(run_dir, split, K, seed):
    rc, det, dif = load_run(run_dir)
    exp = prepare_experiment(rc)
    data = _split(exp, split)
    K = K or rc.members
    if dif is None:
        d = predict_det(det, data, rc.sr, rc.conservation).double().numpy()
        return rc, exp, data, d[None], d
    members, d = ensemble_for(det, dif, data, rc, K, seed)
    return rc, exp, data, members, d


def cmd_sample(args):
    rc, exp, data, members, d = _sample(args.run_dir, args.split, args.members, args.seed)
    out = _members_path(args.run_dir, args.split, args.seed, members.shape[0])
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "members.npy", members)
    np.save(out / "det_mean.npy", d)
    digest = hashlib.sha256((out / "members.npy").read_bytes()).hexdigest()
    print(json.dumps({"path": str(out), "shape": list(members.shape), "sha256": digest}))


def _report_rows(reports: dict, cap):
    rows = []
    for name, rep in reports.items():
        rows.append({"model": name, **rep.to_dict(),
                     **{f"{k}_phys": v for k, v in rep.denormalized(cap).to_dict().items()}})
    return rows


def evaluate_run(run_dir, split="test", K=None, seed=0):
    """Metric reports for the full model, its ablations and the two baselines."""
    rc, exp, data, members, d = _sample(run_dir, split, K, seed)
    target = data.target.double().numpy()
    reports = {}
    if not rc.deterministic_only:
        reports["full"] = evaluate(EnsembleForecast(members, d, target), seed)
    reports["deterministic-only"] = evaluate(EnsembleForecast.deterministic(d, target), seed)
    abl = Path(run_dir) / ABLATION_DIR
    if (abl / "config.json").exists():
        _, _, _, m2, d2 = _sample(abl, split, K, seed)
        reports["no-attention"] = evaluate(EnsembleForecast(m2, d2, target), seed)
    reports.update(run_baselines(data, rc.sr, seed))
    return reports, exp.cap_value


def cmd_evaluate(args):
    folds = fold_dirs(args.run_dir)
    if folds:
        for run in folds:
            print(f"== {run.name}")
            _evaluate_into(run, args)
        return
    _evaluate_into(Path(args.run_dir), args)


def _evaluate_into(run, args):
    reports, cap = evaluate_run(run, args.split, args.members, args.seed)
    rows = _report_rows(reports, cap)
    (run / "metrics.json").write_text(json.dumps(
        {"split": args.split, "seed": args.seed, "cap_value": cap,
         "reports": {n: r.to_dict() for n, r in reports.items()},
         "pit_hist": {n: r.extras.get("pit_hist") for n, r in reports.items()}},
        indent=2, sort_keys=True))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    (run / "metrics.csv").write_text(buf.getvalue())
    print(format_table(reports))


def cmd_sweep(args):
    from .tuning import TuneGrid, run_sweep

    rc = resolve_config(args)
    grid = TuneGrid.from_dict(json.loads(Path(args.grid).read_text())) if args.grid else TuneGrid()
    result = run_sweep(rc, grid, args.out, seed=rc.seed)
    print(json.dumps(result.to_dict(), sort_keys=True))


def cmd_plot(args):
    from . import plotting

    run = Path(args.run_dir)
    rc, exp, data, members, d = _sample(run, args.split, args.members, args.seed)
    i = args.index
    if not 0 <= i < len(data):
        raise CLIError(f"index {i} outside 0..{len(data) - 1}")
    fig_dir = run / "figures"
    target = data.target.double().numpy()
    cap = exp.cap_value
    rows, cols = plotting.scenario_grid(fig_dir / "scenarios.png", d[i], members[:, i],
                                        target[i], scale=cap)
    plotting.inputs_panel(fig_dir / "inputs.png", data.lr_context[i],
                          data.topography[i, 0].numpy(), cap)
    rep = evaluate(EnsembleForecast(members, d, target), args.seed)
    plotting.pit_histogram_plot(fig_dir / "pit.png", rep.extras["pit_hist"])
    rec = run / "record.jsonl"
    if rec.exists():
        plotting.loss_curves(fig_dir / "losses.png",
                             [json.loads(l) for l in rec.read_text().splitlines() if l])
    print(json.dumps({"figures": sorted(p.name for p in fig_dir.iterdir()),
                      "grid": [rows, cols], "factors": str(rc.sr)}))


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="scalesr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file merged over the preset")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--fold", type=int)
        sp.add_argument("--factors", help="SxT, e.g. 4x2")
        sp.add_argument("--members", type=int)
        sp.add_argument("--no-attention", action="store_true")
        sp.add_argument("--deterministic-only", action="store_true")
        sp.add_argument("--no-mc", action="store_true")

    c = sub.add_parser("coarsen", help="block-average a gridded container")
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--factors", required=True)
    c.set_defaults(func=cmd_coarsen)

    t = sub.add_parser("train", help="train both stages into a run directory")
    common(t)
    t.add_argument("--run-dir", required=True)
    t.add_argument("--no-ablations", dest="ablations", action="store_false",
                   help="skip the no-attention ablation run")
    t.add_argument("--all-folds", action="store_true",
                   help="rotate over every fold into fold_<k>/ subdirectories")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("sample", cmd_sample, "draw ensemble members"),
                              ("evaluate", cmd_evaluate, "print the metric table"),
                              ("plot", cmd_plot, "render figures")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--run-dir", required=True)
        sp.add_argument("--members", type=int)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--split", default="test")
        if name == "plot":
            sp.add_argument("--index", type=int, default=0)
        sp.set_defaults(func=func)

    s = sub.add_parser("sweep", help="tune L, beta_max and F for one factor pair")
    common(s)
    s.add_argument("--grid", help="JSON TuneGrid")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    configure_threads()
    try:
        args.func(args)
    except Exception as exc:  # report every failure as one JSON line
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, (CLIError, ValueError, FileNotFoundError)) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
