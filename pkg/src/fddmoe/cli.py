"""Command-line front door: ``fddmoe <subcommand> [flags]``.

Experiment config JSON (``--config``, a file path or a bundled preset name)::

    {"tasks": [<task config>, ...], "arch": "desk" | {<model config>},
     "train": {<train plan>}, "data": {"count": 5000, "seed": 0}}

Failures print one line ``error: <Kind>: <message>`` on stderr and exit 1;
usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from . import diffcore as dc
from .channels import ChannelDataset, TaskConfig, generate, load_dataset, save_dataset, split
from .checkpoint import load_checkpoint, save_checkpoint
from .endtoend import PRESETS, ModelConfig
from .metrics import (baseline_scheme, count_flops, count_params, evaluate, model_scheme,
                      scaling_study, write_metrics_csv)
from .training import TrainPlan, finetune, train, write_history_csv


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def load_experiment(ref: str | None) -> dict:
    if ref is None:
        raise ValueError("--config is required for this subcommand")
    p = Path(ref)
    if p.is_file():
        return json.loads(p.read_text())
    name = ref if ref.endswith(".json") else f"{ref}.json"
    preset = resources.files("fddmoe") / "presets" / name
    if preset.is_file():
        return json.loads(preset.read_text())
    raise FileNotFoundError(f"config {ref!r} is neither a file nor a bundled preset")


def experiment_arch(exp: dict) -> ModelConfig:
    a = exp.get("arch", "desk")
    if isinstance(a, str):
        if a not in PRESETS:
            raise ValueError(f"unknown architecture preset {a!r}; choose from {sorted(PRESETS)}")
        return PRESETS[a]
    return ModelConfig.from_dict(a)


def experiment_tasks(exp: dict, only: str | None = None) -> list[TaskConfig]:
    tasks = [TaskConfig.from_dict(t) for t in exp.get("tasks", [])]
    if only is not None:
        tasks = [t for t in tasks if t.task_id == only]
        if not tasks:
            raise KeyError(f"task {only!r} not in config")
    if not tasks:
        raise ValueError("config lists no tasks")
    return tasks


def experiment_plan(exp: dict, args, **over) -> TrainPlan:
    d = dict(exp.get("train", {}))
    d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    d.update(over)
    return TrainPlan.from_dict(d)


def _dataset_for(cfg: TaskConfig, exp: dict, args) -> ChannelDataset:
    data_dir = getattr(args, "data", None)
    if data_dir:
        ds = load_dataset(Path(data_dir) / f"{cfg.task_id}.fddc")
        if ds.config.to_dict() != cfg.to_dict():
            raise ValueError(f"dataset for {cfg.task_id!r} was generated with a different config")
        return ds
    d = exp.get("data", {})
    return generate(cfg, int(d.get("count", 5000)), seed=int(d.get("seed", args.seed)))


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    exp = load_experiment(args.config)
    out = _out(args)
    count = args.count if args.count is not None else int(exp.get("data", {}).get("count", 5000))
    for cfg in experiment_tasks(exp, args.task):
        ds = generate(cfg, count, seed=args.seed)
        path = out / f"{cfg.task_id}.fddc"
        save_dataset(ds, path)
        print(path)


def cmd_train(args) -> None:
    exp = load_experiment(args.config)
    arch = experiment_arch(exp)
    tasks = experiment_tasks(exp, args.task)
    mode = args.mode or exp.get("train", {}).get("mode", "mtl")
    plan = experiment_plan(exp, args, mode=mode)
    train_sets = {c.task_id: split(_dataset_for(c, exp, args))[0] for c in tasks}
    bundle, history = train(mode, tasks, train_sets, plan, arch)
    out = _out(args)
    save_checkpoint(out / "model.fddm", bundle, meta={"mode": mode, "seed": args.seed})
    write_history_csv(history, out / "history.csv")
    print(out / "model.fddm")


def cmd_finetune(args) -> None:
    exp = load_experiment(args.config)
    bundle, _, _ = load_checkpoint(args.checkpoint)
    plan = experiment_plan(exp, args, mode="finetune")
    out = _out(args)
    history = []
    for cfg in experiment_tasks(exp, args.task):
        tr = split(_dataset_for(cfg, exp, args))[0]
        _, h, _ = finetune(bundle, cfg, tr, plan)
        history += h
    save_checkpoint(out / "model.fddm", bundle, meta={"mode": "finetune", "seed": args.seed})
    write_history_csv(history, out / "history.csv")
    print(out / "model.fddm")


def _scheme(name: str, ds: ChannelDataset, sigma2: float, args, bundle=None):
    cfg = ds.config
    if name == "model":
        if bundle is None:
            raise ValueError("scheme 'model' needs --checkpoint")
        return model_scheme(bundle, cfg.task_id, args.seed, sigma2), count_params(bundle)["total"], \
            count_flops(bundle.arch, cfg, bundle.task(cfg.task_id).kind)["total"]
    return baseline_scheme(name, cfg.power, sigma2, args.seed), 0, 0


def _eval_rows(args, schemes) -> list:
    ds = load_dataset(args.dataset)
    test = ds if args.all_samples else split(ds)[1]
    bundle = load_checkpoint(args.checkpoint, require_tasks=[ds.config.task_id])[0] if args.checkpoint else None
    snrs = _floats(args.snr) if args.snr else [ds.config.snr_db]
    records = []
    for snr in snrs:
        s2 = ds.config.with_snr(snr).sigma2
        for name in schemes:
            fn, n_params, flops = _scheme(name, test, s2, args, bundle)
            records.append(evaluate(fn, test, s2, name=name, seed=args.seed,
                                    param_count=n_params, flops=flops))
    return records


def _emit(args, records, filename: str) -> None:
    out = _out(args)
    path = out / filename
    sidecar = {"args": {k: v for k, v in vars(args).items() if k != "func"}}
    write_metrics_csv(records, path, sidecar)
    for r in records:
        print(f"{r.scheme}\t{r.task_id}\t{r.snr_db:g}\t{r.spectral_efficiency:.4f}")
    print(path)


def cmd_eval(args) -> None:
    _emit(args, _eval_rows(args, [args.scheme]), "metrics.csv")


def cmd_compare(args) -> None:
    schemes = [s for s in args.schemes.split(",") if s]
    _emit(args, _eval_rows(args, schemes), "compare.csv")


def cmd_scaling(args) -> None:
    exp = load_experiment(args.config)
    arch = experiment_arch(exp)
    cfg = experiment_tasks(exp, args.task)[0]
    plan = experiment_plan(exp, args, mode="stl")
    tr, te = split(_dataset_for(cfg, exp, args))
    rows = scaling_study(cfg, arch, args.axis, _ints(args.grid), tr, te, plan, seed=args.seed)
    out = _out(args)
    path = out / "scaling.json"
    path.write_text(json.dumps(rows, indent=2))
    for r in rows:
        print(f"{r['axis']}={r['value']}\tparams={r['params']}\tflops={r['flops']}\t"
              f"se={r['spectral_efficiency']:.4f}")
    print(path)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment JSON path or preset name")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"), default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="fddmoe", parents=[common],
                                 description="FDD multi-user MIMO end-to-end precoding toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate channel datasets")
    p.add_argument("--count", type=int)
    p.add_argument("--task")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model from scratch")
    p.add_argument("--mode", choices=("mtl", "stl", "cep", "dsc"))
    p.add_argument("--data", help="directory of <task_id>.fddc files (generated if omitted)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--task")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="fit new task heads on a frozen trunk")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--task")
    p.set_defaults(func=cmd_finetune)

    for name, fn in (("eval", cmd_eval), ("compare", cmd_compare)):
        p = sub.add_parser(name, parents=[common], help=f"{name} precoding schemes on a dataset")
        p.add_argument("--dataset", required=True)
        p.add_argument("--checkpoint")
        p.add_argument("--snr", help="comma-separated SNRs in dB (default: dataset SNR)")
        p.add_argument("--all-samples", action="store_true", help="use every sample, not just the test split")
        if name == "eval":
            p.add_argument("--scheme", choices=("zf", "wmmse", "random", "model"), required=True)
        else:
            p.add_argument("--schemes", default="zf,wmmse,random")
        p.set_defaults(func=fn)

    p = sub.add_parser("scaling", parents=[common], help="experts/width trade-off sweep")
    p.add_argument("--axis", choices=("experts", "width"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--epochs", type=int)
    p.add_argument("--data")
    p.add_argument("--task")
    p.set_defaults(func=cmd_scaling)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for key, default in (("config", None), ("seed", 0), ("out", "."), ("precision", "f32")):
        if not hasattr(args, key):
            setattr(args, key, default)
    try:
        with dc.precision(args.precision):
            args.func(args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
