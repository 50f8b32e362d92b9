"""Command-line entry point: params, train, continual, analyze.

Every run is fully determined by its configuration (seed included); artifacts
land in a directory named by the hash of that configuration, so rerunning a
command reproduces its outputs byte for byte. Exit codes: 0 success, 1 usage
or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .allocation import DIMS_PRESETS, ModelDims, parse_alloc_spec, trainable_param_count
from .analysis import AccuracyMatrix, build_report, dumps_report, emit_report
from .checkpoint import CheckpointError, load, save
from .model import (
    AdamW,
    AdaptedModel,
    ToyTransformerConfig,
    TrainingDiverged,
    evaluate,
    train_step,
)
from .tasks import (
    TASK_KINDS,
    Example,
    TaskData,
    generate_domain_sequence,
    generate_task,
    load_jsonl,
)
from .tensor import Rng

TRAIN_DEFAULTS = {
    "dataset": "copy", "data_size": 200, "alloc": "counts=2,2,2,2", "k": 2,
    "steps": 500, "epochs": None, "batch_size": 25, "lr": 3e-3, "lr_decay": 0.9,
    "lambda_aux": 0.01, "dropout": 0.05, "target_acc": None, "metrics_every": 25,
    "num_layers": 4, "d_model": 64, "d_ffn": 172, "num_heads": 4,
    "vocab_size": 256, "max_seq_len": 64, "cutoff_len": 64, "rank": 8,
    "alpha": 16.0, "weight_decay": 0.01, "precision": "f64",
    "router_mode": "renorm",
}

CONTINUAL_DEFAULTS = dict(TRAIN_DEFAULTS, domains=5, domain_size=150,
                          steps=300, eval_split="eval", identical_domains=False)


class UsageError(Exception):
    """Bad flags, unparseable specs, or invalid configuration."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_kv_config(path: str) -> dict[str, str]:
    """Flat `key = value` config file; '#' starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise UsageError(f"cannot read config file {path}: {err}") from err
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path} line {lineno}: expected key = value")
        key, value = stripped.split("=", 1)
        key = key.strip().replace("-", "_")
        if key == "allocation":
            key = "alloc"
        values[key] = value.strip()
    return values


def _coerce(key: str, raw: str, defaults: dict):
    template = defaults.get(key)
    if template is None and key == "target_acc":
        return float(raw)
    if template is None and key in ("epochs", "seed"):
        return int(raw)
    if isinstance(template, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge precedence: explicit flags > config file > built-in defaults."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        file_values = _read_kv_config(args.config)
        for key, raw in file_values.items():
            if key not in defaults and key not in ("seed", "out"):
                raise UsageError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, raw, defaults)
    for key in list(defaults) + ["seed", "out"]:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if merged.get("seed") is None:
        raise UsageError("a seed is mandatory (--seed or config file)")
    return merged


def _run_dir(resolved: dict) -> Path:
    out = resolved.get("out")
    if not out:
        raise UsageError("an output directory is mandatory (--out or config file)")
    payload = {k: v for k, v in resolved.items() if k != "out"}
    digest = hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:12]
    run_dir = Path(out) / digest
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _model_config(resolved: dict) -> ToyTransformerConfig:
    allocation = parse_alloc_spec(resolved["alloc"], resolved["num_layers"],
                                  k=resolved["k"])
    return ToyTransformerConfig(
        num_layers=resolved["num_layers"], d_model=resolved["d_model"],
        d_ffn=resolved["d_ffn"], num_heads=resolved["num_heads"],
        vocab_size=resolved["vocab_size"], max_seq_len=resolved["max_seq_len"],
        allocation=allocation, rank=resolved["rank"], alpha=resolved["alpha"],
        dropout=resolved["dropout"], lambda_aux=resolved["lambda_aux"],
        seed=resolved["seed"], router_mode=resolved["router_mode"],
        precision=resolved["precision"], lr=resolved["lr"],
        weight_decay=resolved["weight_decay"], batch_size=resolved["batch_size"],
        cutoff_len=resolved["cutoff_len"],
    )


def _truncate(examples, cutoff: int):
    """Left-truncate overlong prompts so the answer position survives."""
    out = []
    for ex in examples:
        if len(ex.prompt) > cutoff:
            ex = Example(prompt=ex.prompt[-cutoff:], label=ex.label, choices=ex.choices)
        out.append(ex)
    return out


def _load_dataset(resolved: dict) -> TaskData:
    spec = resolved["dataset"]
    cutoff = resolved["cutoff_len"]
    if spec.startswith("jsonl:"):
        path = spec[len("jsonl:"):]
        try:
            examples = _truncate(load_jsonl(path), cutoff)
        except OSError as err:
            raise UsageError(f"cannot read dataset {path}: {err}") from err
        return TaskData(name=f"jsonl:{path}", train=examples, eval=examples)
    if spec in TASK_KINDS:
        task = generate_task(spec, resolved["data_size"], seed=resolved["seed"])
        return TaskData(name=task.name, train=_truncate(task.train, cutoff),
                        eval=_truncate(task.eval, cutoff))
    raise UsageError(f"unknown dataset spec {spec!r}: use a task kind "
                     f"{TASK_KINDS} or jsonl:PATH")


def _train_loop(model: AdaptedModel, task: TaskData, resolved: dict,
                metrics_path: Path, domain_tag: str = "") -> list[str]:
    """Deterministic training loop with a linearly decaying learning rate.

    Returns the metric CSV rows it appended (step, lr, losses, accuracies).
    """
    batch_size = min(resolved["batch_size"], len(task.train))
    steps = resolved["steps"]
    if resolved.get("epochs") is not None:
        batches_per_epoch = -(-len(task.train) // batch_size)
        steps = resolved["epochs"] * batches_per_epoch
    lr0 = resolved["lr"]
    opt = AdamW(model.trainable_parameters(), lr=lr0,
                weight_decay=resolved["weight_decay"])
    rng = Rng(resolved["seed"]).child("train", domain_tag)
    order = Rng(resolved["seed"]).child("batches", domain_tag)
    rows = []
    target = resolved.get("target_acc")
    for step in range(steps):
        frac = step / max(1, steps - 1)
        lr = lr0 * (1.0 - resolved["lr_decay"] * frac)
        picks = order.integers(0, len(task.train), size=batch_size)
        stats = train_step(model, [task.train[i] for i in picks], opt, rng, lr=lr)
        last = step == steps - 1
        if (step + 1) % resolved["metrics_every"] == 0 or last:
            train_acc = evaluate(model, task.train)
            eval_acc = evaluate(model, task.eval) if task.eval else float("nan")
            rows.append(",".join([
                str(step + 1), repr(lr), repr(stats.total_loss),
                repr(stats.cross_entropy), repr(stats.aux_loss),
                repr(train_acc), repr(eval_acc)]))
            if target is not None and train_acc >= target:
                break
    with open(metrics_path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row + "\n")
    return rows


METRICS_HEADER = "step,lr,total_loss,cross_entropy,aux_loss,train_accuracy,eval_accuracy"


def cmd_params(args) -> int:
    dims_spec = args.dims
    if dims_spec in DIMS_PRESETS:
        dims = DIMS_PRESETS[dims_spec]
    else:
        values = _read_kv_config(dims_spec)
        try:
            dims = ModelDims(num_layers=int(values["num_layers"]),
                             d_model=int(values["d_model"]),
                             d_ffn=int(values["d_ffn"]), rank=int(values["rank"]))
        except KeyError as err:
            raise UsageError(f"dims file {dims_spec} missing key {err.args[0]!r}") from err
    plan = parse_alloc_spec(args.alloc, dims.num_layers, k=args.k)
    print(f"trainable_params {trainable_param_count(plan, dims)}")
    print(f"total_experts {plan.total_experts}")
    return 0


def cmd_train(args) -> int:
    resolved = _resolve(args, TRAIN_DEFAULTS)
    config = _model_config(resolved)
    task = _load_dataset(resolved)
    run_dir = _run_dir(resolved)
    (run_dir / "config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2, default=str) + "\n")
    metrics_path = run_dir / "metrics.csv"
    metrics_path.write_text(METRICS_HEADER + "\n")
    model = AdaptedModel.build(config)
    try:
        _train_loop(model, task, resolved, metrics_path)
    except TrainingDiverged as err:
        print(f"training halted: {err}", file=sys.stderr)
        save(model, run_dir / "model.ckpt")
        return 2
    save(model, run_dir / "model.ckpt")
    train_acc = evaluate(model, task.train)
    eval_acc = evaluate(model, task.eval) if task.eval else float("nan")
    summary = {"train_accuracy": train_acc, "eval_accuracy": eval_acc,
               "steps_taken": model.step}
    (run_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"run_dir {run_dir}")
    print(f"train_accuracy {train_acc!r}")
    print(f"eval_accuracy {eval_acc!r}")
    return 0


def _continual_eval_pool(domain: TaskData, split: str):
    if split == "train":
        return domain.train
    if split == "all":
        return domain.all_examples
    return domain.eval


def cmd_continual(args) -> int:
    resolved = _resolve(args, CONTINUAL_DEFAULTS)
    config = _model_config(resolved)
    domains = generate_domain_sequence(resolved["domains"], resolved["domain_size"],
                                       seed=resolved["seed"])
    if resolved["identical_domains"]:
        # null test: every stage revisits the first domain, so no shift occurs
        domains = [TaskData(name=f"stage{k}", train=domains[0].train,
                            eval=domains[0].eval) for k in range(len(domains))]
    run_dir = _run_dir(resolved)
    (run_dir / "config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2, default=str) + "\n")
    metrics_path = run_dir / "metrics.csv"
    metrics_path.write_text(METRICS_HEADER + "\n")
    model = AdaptedModel.build(config)
    t = len(domains)
    values = np.full((t, t), np.nan)
    names = tuple(d.name for d in domains)
    matrix_path = run_dir / "matrix.csv"
    for stage, domain in enumerate(domains):
        try:
            _train_loop(model, domain, resolved, metrics_path, domain_tag=domain.name)
        except TrainingDiverged as err:
            AccuracyMatrix(values, names).to_csv(matrix_path)  # keep rows so far
            print(f"continual run halted in {domain.name}: {err}", file=sys.stderr)
            return 2
        for i in range(stage + 1):
            values[stage, i] = evaluate(model, _continual_eval_pool(
                domains[i], resolved["eval_split"]))
        AccuracyMatrix(values, names).to_csv(matrix_path)
    matrix = AccuracyMatrix(values, names)
    report = build_report(model=model, matrix=matrix)
    emit_report(report, "json", run_dir / "report.json")
    save(model, run_dir / "model.ckpt")
    op = report["metrics"]["overall_performance"]
    pd = report["metrics"]["performance_drop"]
    print(f"run_dir {run_dir}")
    print(f"overall_performance {op!r}")
    print(f"performance_drop {pd!r}")
    return 0


def cmd_analyze(args) -> int:
    if not args.checkpoint and not args.matrix:
        raise UsageError("analyze needs --checkpoint and/or --matrix")
    model = None
    examples = None
    matrix = None
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise UsageError(f"checkpoint not found: {ckpt}")
        model = load(ckpt)
        if args.dataset:
            resolved = dict(TRAIN_DEFAULTS, dataset=args.dataset,
                            seed=args.seed if args.seed is not None else model.config.seed)
            examples = _load_dataset(resolved).all_examples
    if args.matrix:
        if not Path(args.matrix).exists():
            raise UsageError(f"matrix file not found: {args.matrix}")
        matrix = AccuracyMatrix.from_csv(args.matrix)
    report = build_report(model=model, examples=examples, matrix=matrix)
    if args.out:
        emit_report(report, args.format, args.out)
        print(f"report {args.out}")
    else:
        if args.format == "csv":
            raise UsageError("csv output needs --out PATH")
        sys.stdout.write(dumps_report(report))
    return 0


def _add_common_train_flags(parser: Parser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--dataset", help=f"task kind {TASK_KINDS} or jsonl:PATH")
    parser.add_argument("--data-size", dest="data_size", type=int)
    parser.add_argument("--alloc", help="allocation spec, e.g. inverted:2468 or counts=1,1,3,3")
    parser.add_argument("--k", type=int, help="router top-K")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--epochs", type=int,
                        help="overrides --steps as epochs x batches-per-epoch")
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--lr-decay", dest="lr_decay", type=float)
    parser.add_argument("--lambda-aux", dest="lambda_aux", type=float)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--rank", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--num-layers", dest="num_layers", type=int)
    parser.add_argument("--d-model", dest="d_model", type=int)
    parser.add_argument("--d-ffn", dest="d_ffn", type=int)
    parser.add_argument("--cutoff-len", dest="cutoff_len", type=int,
                        help="left-truncate prompts longer than this")
    parser.add_argument("--target-acc", dest="target_acc", type=float,
                        help="stop once train accuracy reaches this level")
    parser.add_argument("--metrics-every", dest="metrics_every", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory for run artifacts")


def build_parser() -> Parser:
    parser = Parser(prog="mole", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_params = sub.add_parser("params", help="trainable-parameter accounting")
    p_params.add_argument("--dims", required=True,
                          help=f"dims preset {sorted(DIMS_PRESETS)} or a key=value file")
    p_params.add_argument("--alloc", required=True)
    p_params.add_argument("--k", type=int, default=2)
    p_params.set_defaults(fn=cmd_params)

    p_train = sub.add_parser("train", help="train on one dataset")
    _add_common_train_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_cont = sub.add_parser("continual", help="sequential multi-domain fine-tuning")
    _add_common_train_flags(p_cont)
    p_cont.add_argument("--domains", type=int)
    p_cont.add_argument("--domain-size", dest="domain_size", type=int)
    p_cont.add_argument("--eval-split", dest="eval_split",
                        choices=("eval", "train", "all"))
    p_cont.add_argument("--identical-domains", dest="identical_domains",
                        action="store_const", const=True,
                        help="repeat the first domain at every stage (no-shift null test)")
    p_cont.set_defaults(fn=cmd_continual)

    p_an = sub.add_parser("analyze", help="redundancy / router stats / matrix metrics")
    p_an.add_argument("--checkpoint")
    p_an.add_argument("--dataset")
    p_an.add_argument("--matrix", help="accuracy-matrix CSV to score")
    p_an.add_argument("--format", choices=("csv", "json"), default="json")
    p_an.add_argument("--out")
    p_an.add_argument("--seed", type=int)
    p_an.set_defaults(fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
