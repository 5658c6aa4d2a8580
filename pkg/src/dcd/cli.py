"""Command-line interface: training, distillation, evaluation, transfer,
ablation sweeps and the verification suite.

Configuration is a flat ``key=value`` file (one pair per line, ``#``
comments) merged with flag overrides; flags always win.  Every run
directory receives the fully-resolved config echo, the epoch CSV, the
checkpoint, and a ``DONE`` completion marker.  Exit codes: 0 success,
1 config error, 2 data error, 3 divergence, 4 checkpoint-format error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import itertools
import os
import sys

import numpy as np

from .data import (BatchPlan, Dataset, parse_cifar10, parse_cifar100, parse_mnist_idx,
                   synth_blob_split)
from .errors import (CheckpointFormatError, ConfigError, DivergenceError, FormatError,
                     ShapeMismatchError)
from .losses import TAU_INIT_DEFAULT, DistillConfig
from .metrics import export_embeddings, linear_probe
from .models import ModelSpec
from .recipes import fold_clusters
from .train import (OptimSpec, distill, evaluate, load_checkpoint, restore_model,
                    restore_student_head, save_checkpoint, stats_from_metadata,
                    train_teacher, write_epoch_csv)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3
EXIT_CHECKPOINT = 4


def _parse_widths(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def _parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    if not text:
        return ()
    out = []
    for part in text.split(","):
        epoch, mult = part.split(":")
        out.append((int(epoch), float(mult)))
    return tuple(out)


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (parser, default)
CONFIG_KEYS: dict = {
    "dataset": (str, "blobs"),
    "data_dir": (str, ""),
    "out_dir": (str, "runs/run"),
    "seed": (int, 0),
    "data_seed": (int, 42),            # blob generation only; training uses `seed`
    "train_limit": (int, 0),           # 0 = use everything
    "teacher_family": (str, "mlp"),
    "teacher_widths": (_parse_widths, (512, 512)),
    "student_family": (str, "mlp"),
    "student_widths": (_parse_widths, (128, 128)),
    "alpha": (float, 0.5),
    "beta": (float, 1.0),
    "lambda_kl": (float, 1.0),
    "tau_init": (float, TAU_INIT_DEFAULT),
    "b_init": (float, 0.0),
    "tau_max": (float, 10.0),
    "kd_temperature": (float, 4.0),
    "proj_dim": (int, 128),
    "learn_temperature": (_parse_bool, True),
    "detach_consistency": (_parse_bool, False),
    "lr": (float, 0.05),
    "momentum": (float, 0.9),
    "weight_decay": (float, 0.0),
    "epochs": (int, 30),
    "schedule": (_parse_schedule, ((15, 0.1), (23, 0.1))),
    "batch_size": (int, 128),
    "augment": (str, "none"),
    "blob_classes": (int, 4),
    "blob_clusters_per_class": (int, 1),
    "blob_dim": (int, 32),
    "blob_std": (float, 0.1),
    "blob_separation": (float, 0.3),
    "blob_train_per_class": (int, 100),
    "blob_test_per_class": (int, 100),
    "probe_lr": (float, 0.5),
    "probe_epochs": (int, 40),
}


def parse_config_file(path: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


def resolve_config(file_path: str | None, overrides: dict[str, str]) -> dict:
    resolved = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    layers = []
    if file_path:
        if not os.path.exists(file_path):
            raise ConfigError(f"config file {file_path!r} does not exist")
        layers.append(parse_config_file(file_path))
    layers.append(overrides)
    for layer in layers:
        for key, raw in layer.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown configuration key {key!r}")
            parser, _ = CONFIG_KEYS[key]
            resolved[key] = parser(raw) if isinstance(raw, str) else raw
    return resolved


def echo_config(cfg: dict, out_dir: str) -> None:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            if value and isinstance(value[0], tuple):
                value = ",".join(f"{e}:{m}" for e, m in value)
            else:
                value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_file(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def load_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    kind = cfg["dataset"]
    data_dir = cfg["data_dir"]
    if kind == "blobs":
        cpc = cfg["blob_clusters_per_class"]
        clusters = cfg["blob_classes"] * cpc
        train, test = synth_blob_split(
            clusters, cfg["blob_train_per_class"], cfg["blob_test_per_class"],
            cfg["blob_dim"], seed=cfg["data_seed"], std=cfg["blob_std"],
            separation=cfg["blob_separation"])
        if cpc > 1:
            train = fold_clusters(train, cfg["blob_classes"])
            test = fold_clusters(test, cfg["blob_classes"])
        return train, test
    if kind == "cifar10":
        parts = [_read_file(os.path.join(data_dir, f"data_batch_{i}.bin"))
                 for i in range(1, 6)]
        train = parse_cifar10(b"".join(parts))
        test = parse_cifar10(_read_file(os.path.join(data_dir, "test_batch.bin")))
    elif kind == "cifar100":
        train = parse_cifar100(_read_file(os.path.join(data_dir, "train.bin")))
        test = parse_cifar100(_read_file(os.path.join(data_dir, "test.bin")))
    elif kind == "mnist":
        train = parse_mnist_idx(
            _read_file(os.path.join(data_dir, "train-images-idx3-ubyte")),
            _read_file(os.path.join(data_dir, "train-labels-idx1-ubyte")))
        test = parse_mnist_idx(
            _read_file(os.path.join(data_dir, "t10k-images-idx3-ubyte")),
            _read_file(os.path.join(data_dir, "t10k-labels-idx1-ubyte")))
    else:
        raise ConfigError(f"unknown dataset {kind!r}")
    limit = cfg["train_limit"]
    if limit:
        train = Dataset(train.images[:limit], train.labels[:limit],
                        train.class_count, f"{train.name}[:{limit}]")
    return train, test


def _model_spec(cfg: dict, role: str, train: Dataset) -> ModelSpec:
    c, h, w = train.images.shape[1:]
    return ModelSpec(cfg[f"{role}_family"], cfg[f"{role}_widths"],
                     train.class_count, (int(c), int(h), int(w)))


def _optim(cfg: dict) -> OptimSpec:
    return OptimSpec(lr=cfg["lr"], momentum=cfg["momentum"],
                     weight_decay=cfg["weight_decay"], schedule=cfg["schedule"],
                     epochs=cfg["epochs"], seed=cfg["seed"])


def _plan(cfg: dict) -> BatchPlan:
    return BatchPlan(batch_size=cfg["batch_size"], shuffle_seed=cfg["seed"],
                     augment=cfg["augment"])


def _distill_config(cfg: dict) -> DistillConfig:
    return DistillConfig(alpha=cfg["alpha"], beta=cfg["beta"], lambda_kl=cfg["lambda_kl"],
                         tau_init=cfg["tau_init"], b_init=cfg["b_init"],
                         tau_max=cfg["tau_max"], kd_temperature=cfg["kd_temperature"],
                         proj_dim=cfg["proj_dim"],
                         learn_temperature=cfg["learn_temperature"],
                         detach_consistency_target=cfg["detach_consistency"])


def _mark_done(out_dir: str) -> None:
    with open(os.path.join(out_dir, "DONE"), "w") as fh:
        fh.write("ok\n")


def cmd_train_teacher(cfg: dict) -> int:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    echo_config(cfg, out_dir)
    train, test = load_datasets(cfg)
    spec = _model_spec(cfg, "teacher", train)
    ckpt, logs = train_teacher(spec, train, test, _optim(cfg), _plan(cfg))
    save_checkpoint(ckpt, os.path.join(out_dir, "teacher.ckpt"))
    write_epoch_csv(logs, os.path.join(out_dir, "epochs.csv"))
    _mark_done(out_dir)
    metrics = ckpt.metadata["final_metrics"]
    print(f"teacher: train_acc={metrics['train_acc']:.2f} test_acc={metrics['test_acc']:.2f}")
    return EXIT_OK


def cmd_distill(cfg: dict, teacher_path: str) -> int:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    echo_config(cfg, out_dir)
    teacher_ckpt = load_checkpoint(teacher_path)
    train, test = load_datasets(cfg)
    spec = _model_spec(cfg, "student", train)
    ckpt, logs = distill(teacher_ckpt, spec, train, test, _distill_config(cfg),
                         _optim(cfg), _plan(cfg))
    save_checkpoint(ckpt, os.path.join(out_dir, "student.ckpt"))
    write_epoch_csv(logs, os.path.join(out_dir, "epochs.csv"))
    _mark_done(out_dir)
    metrics = ckpt.metadata["final_metrics"]
    print(f"student: train_acc={metrics['train_acc']:.2f} test_acc={metrics['test_acc']:.2f} "
          f"tau={metrics['tau']:.4f} b={metrics['b']:.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict, ckpt_path: str) -> int:
    ckpt = load_checkpoint(ckpt_path)
    model = restore_model(ckpt)
    stats = stats_from_metadata(ckpt.metadata)
    _, test = load_datasets(cfg)
    acc = evaluate(model, test, stats, cfg["batch_size"])
    print(f"top1_accuracy: {acc:.2f}")
    return EXIT_OK


def cmd_transfer(cfg: dict, ckpt_path: str) -> int:
    ckpt = load_checkpoint(ckpt_path)
    model = restore_model(ckpt)
    stats = stats_from_metadata(ckpt.metadata)
    train, test = load_datasets(cfg)
    expected = ModelSpec.from_dict(ckpt.metadata["model_spec"]).in_shape
    got = tuple(int(v) for v in train.images.shape[1:])
    if got != tuple(expected):
        raise ConfigError(f"transfer data shape {got} does not match "
                          f"the checkpoint's input shape {tuple(expected)}")
    acc = linear_probe(model, train, test, stats, lr=cfg["probe_lr"],
                       epochs=cfg["probe_epochs"], batch_size=cfg["batch_size"],
                       seed=cfg["seed"])
    print(f"transfer_top1_accuracy: {acc:.2f}")
    return EXIT_OK


def cmd_export_embeddings(cfg: dict, ckpt_path: str, out_path: str) -> int:
    ckpt = load_checkpoint(ckpt_path)
    model = restore_model(ckpt)
    head = restore_student_head(ckpt)
    stats = stats_from_metadata(ckpt.metadata)
    _, test = load_datasets(cfg)
    count = export_embeddings(model, head, test, stats, out_path, cfg["batch_size"])
    print(f"exported {count} embeddings to {out_path}")
    return EXIT_OK


def parse_grid(expr: str) -> list[dict[str, float]]:
    """'alpha=0.1,0.5|beta=1,100' -> cartesian product of value choices."""
    axes: list[tuple[str, list[float]]] = []
    for axis in expr.split("|"):
        if "=" not in axis:
            raise ConfigError(f"grid axis {axis!r} is not key=v1,v2,...")
        key, values = axis.split("=", 1)
        key = key.strip()
        if key not in ("alpha", "beta", "lambda_kl"):
            raise ConfigError(f"grid key must be alpha, beta or lambda_kl, got {key!r}")
        axes.append((key, [float(v) for v in values.split(",") if v]))
    cells = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        cells.append({key: value for (key, _), value in zip(axes, combo)})
    return cells


def cmd_ablate(cfg: dict, teacher_path: str, grid_expr: str, seeds: int, jobs: int) -> int:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    echo_config(cfg, out_dir)
    cells = parse_grid(grid_expr)
    teacher_ckpt = load_checkpoint(teacher_path)
    train, test = load_datasets(cfg)
    spec = _model_spec(cfg, "student", train)

    def one_run(cell_index: int, cell: dict, seed_index: int):
        run_cfg = dict(cfg)
        run_cfg.update(cell)
        run_cfg["seed"] = cfg["seed"] + seed_index
        run_dir = os.path.join(out_dir, f"cell{cell_index}-seed{seed_index}")
        os.makedirs(run_dir, exist_ok=True)
        echo_config(run_cfg, run_dir)
        try:
            ckpt, logs = distill(teacher_ckpt, spec, train, test,
                                 _distill_config(run_cfg), _optim(run_cfg),
                                 BatchPlan(batch_size=run_cfg["batch_size"],
                                           shuffle_seed=run_cfg["seed"],
                                           augment=run_cfg["augment"]))
            save_checkpoint(ckpt, os.path.join(run_dir, "student.ckpt"))
            write_epoch_csv(logs, os.path.join(run_dir, "epochs.csv"))
            _mark_done(run_dir)
            return (cell_index, seed_index, ckpt.metadata["final_metrics"]["test_acc"], "")
        except Exception as exc:
            return (cell_index, seed_index, float("nan"), f"{type(exc).__name__}: {exc}")

    tasks = [(i, cell, s) for i, cell in enumerate(cells) for s in range(seeds)]
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda t: one_run(*t), tasks))
    else:
        rows = [one_run(*t) for t in tasks]

    by_cell: dict[int, list[float]] = {}
    for cell_index, _, acc, _ in rows:
        by_cell.setdefault(cell_index, []).append(acc)
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w") as fh:
        fh.write("cell,alpha,beta,lambda_kl,seed,test_acc,cell_mean,cell_std,error\n")
        for cell_index, seed_index, acc, error in rows:
            cell = cells[cell_index]
            accs = np.asarray(by_cell[cell_index], dtype=np.float64)
            valid = accs[np.isfinite(accs)]
            mean = float(valid.mean()) if valid.size else float("nan")
            std = float(valid.std()) if valid.size else float("nan")
            fh.write(f"{cell_index},{cell.get('alpha', cfg['alpha'])},"
                     f"{cell.get('beta', cfg['beta'])},"
                     f"{cell.get('lambda_kl', cfg['lambda_kl'])},"
                     f"{cfg['seed'] + seed_index},{acc:.4f},{mean:.4f},{std:.4f},{error}\n")
    print(f"ablation summary: {summary_path} ({len(rows)} rows)")
    failures = sum(1 for _, _, acc, _ in rows if not np.isfinite(acc))
    if failures == len(rows):
        print("every ablation run failed", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


def cmd_verify() -> int:
    from .verify import run_all
    results = run_all(verbose=True)
    failed = [r for r in results if not r.ok]
    if failed:
        print("failed checks: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--data", help="dataset directory (overrides data_dir)")
        p.add_argument("--out", help="run directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")

    p = sub.add_parser("train-teacher", help="supervised teacher pretraining")
    add_common(p)

    p = sub.add_parser("distill", help="train a student under the combined objective")
    add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda", dest="lambda_kl", type=float)
    p.add_argument("--fixed-tau", type=float, metavar="T",
                   help="freeze the temperature at divisor value T (and the bias at 0)")

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on the test split")
    add_common(p)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("transfer", help="linear probe on frozen features")
    add_common(p)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("export-embeddings", help="write projected embeddings as CSV")
    add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--csv", required=True, help="output CSV path")

    p = sub.add_parser("ablate", help="cartesian hyperparameter sweep")
    add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--grid", required=True, help="e.g. alpha=0.1,0.5|beta=1,100")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)

    sub.add_parser("verify", help="run the built-in verification suite")
    return parser


def _overrides_from_args(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for pair in getattr(args, "set", []) or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    for key in ("alpha", "beta", "lambda_kl"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    fixed_tau = getattr(args, "fixed_tau", None)
    if fixed_tau is not None:
        if fixed_tau <= 0:
            raise ConfigError("--fixed-tau must be positive")
        overrides["tau_init"] = str(float(np.log(1.0 / fixed_tau)))
        overrides["b_init"] = "0.0"
        overrides["learn_temperature"] = "false"
    return overrides


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify()
        cfg = resolve_config(args.config, _overrides_from_args(args))
        if args.command == "train-teacher":
            return cmd_train_teacher(cfg)
        if args.command == "distill":
            return cmd_distill(cfg, args.teacher)
        if args.command == "eval":
            return cmd_eval(cfg, args.ckpt)
        if args.command == "transfer":
            return cmd_transfer(cfg, args.ckpt)
        if args.command == "export-embeddings":
            return cmd_export_embeddings(cfg, args.ckpt, args.csv)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.teacher, args.grid, args.seeds, args.jobs)
        raise ConfigError(f"unknown command {args.command!r}")
    except CheckpointFormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FileNotFoundError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
