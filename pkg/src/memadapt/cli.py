"""Command-line entry point.

Subcommands mirror the harness operations. Run parameters come from a
key=value config file (--config) plus inline --set overrides; print the
full schema with `memadapt config-schema`.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import adapt, harness, streamsim
from .adapt import AdaptConfig
from .harness import RunConfig
from .streamsim import DomainSpec, ShiftOp, ShiftSpec, build_class_means

# name -> (type tag, default, help); defaults match the benchmark run
CONFIG_SCHEMA = {
    "alpha": ("float", 0.99, "teacher EMA rate"),
    "gamma": ("float", 0.001, "student learning rate; 0 freezes the student"),
    "mu": ("float", 0.9, "SGD momentum coefficient"),
    "conf_threshold": ("float", 0.9, "pseudo-label confidence threshold (strict >)"),
    "n_memory": ("int", 1024, "number of memory items"),
    "neg_ratio": ("float", 0.1, "fraction of least-attended items mined as negatives"),
    "temperature": ("float", 1.0, "contrastive temperature"),
    "normalize_features": ("bool", True, "use cosine similarity in the contrastive loss"),
    "feat_dim": ("int", 8, "feature dimension of the encoder output"),
    "use_memclr": ("bool", True, "enable the memory contrastive loss"),
    "memclr_form": ("str", "log-mean", "contrastive averaging: log-mean or mean-log"),
    "tie_write_projections": ("bool", False, "slow-tie the key projection to the query projection"),
    "seed": ("int", 0, "master seed for model init and the memory bank"),
    "n_classes": ("int", 2, "number of classes"),
    "raw_dim": ("int", 8, "raw instance dimension"),
    "class_offset": ("float", 0.45, "shared per-coordinate offset of all class means"),
    "class_sep": ("float", 1.0, "radius of the circle the class means sit on"),
    "class_scale": ("float", 0.35, "per-class Gaussian scale"),
    "nf_min": ("int", 3, "minimum instances per sample"),
    "nf_max": ("int", 7, "maximum instances per sample"),
    "domain_seed": ("int", 0, "seed for source data and stream content"),
    "shift_ops": ("str", "rotation:45,noise:0.2", "comma list of op:value; translation takes v1/v2/..."),
    "shift_seed": ("int", 29, "seed for rotation planes and shift noise"),
    "mode": ("str", "online", "online or offline"),
    "epochs": ("int", 1, "offline epochs over the target train split"),
    "stream_length": ("int", 500, "target stream length in samples"),
    "n_source": ("int", 500, "source dataset size"),
    "source_epochs": ("int", 10, "source training epochs"),
    "source_gamma": ("float", 0.001, "source training learning rate"),
    "source_mu": ("float", 0.9, "source training momentum"),
    "jitter_sigma": ("float", 0.1, "strong-view Gaussian jitter scale"),
    "order_seed": ("int", 0, "stream presentation order seed"),
    "test_frac": ("float", 0.2, "held-out fraction (source holdout, offline test split)"),
    "eval_student": ("bool", False, "also evaluate the student model"),
}

_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}


def _parse_value(key: str, raw: str):
    if key not in CONFIG_SCHEMA:
        raise ValueError(f"unknown config key {key!r}; run `memadapt config-schema` for the list")
    kind = CONFIG_SCHEMA[key][0]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"{key}: cannot parse {raw!r} as a boolean")
    return raw


def read_config_file(path) -> dict:
    """Parse `key = value` lines; blank lines and # comments are ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected `key = value`, got {line.rstrip()!r}")
            key, raw = stripped.split("=", 1)
            values[key.strip()] = _parse_value(key.strip(), raw)
    return values


def parse_shift_ops(text: str) -> list[ShiftOp]:
    ops = []
    text = text.strip()
    if not text or text == "none":
        return ops
    for chunk in text.split(","):
        chunk = chunk.strip()
        if ":" not in chunk:
            raise ValueError(f"shift op needs the form kind:value, got {chunk!r}")
        kind, raw = chunk.split(":", 1)
        kind = kind.strip()
        if kind == "rotation":
            ops.append(streamsim.rotation(float(raw)))
        elif kind == "translation":
            parts = [float(p) for p in raw.split("/")]
            ops.append(streamsim.translation(parts[0] if len(parts) == 1 else parts))
        elif kind == "noise":
            ops.append(streamsim.noise(float(raw)))
        elif kind == "scale":
            ops.append(streamsim.scale(float(raw)))
        else:
            raise ValueError(f"unknown shift kind {kind!r}")
    return ops


def build_run_config(values: dict) -> RunConfig:
    """Assemble a RunConfig from schema-keyed values (defaults fill gaps)."""
    v = {key: spec[1] for key, spec in CONFIG_SCHEMA.items()}
    v.update(values)
    adapt_cfg = AdaptConfig(
        alpha=v["alpha"],
        gamma=v["gamma"],
        mu=v["mu"],
        conf_threshold=v["conf_threshold"],
        n_memory=v["n_memory"],
        neg_ratio=v["neg_ratio"],
        temperature=v["temperature"],
        normalize_features=v["normalize_features"],
        feat_dim=v["feat_dim"],
        use_memclr=v["use_memclr"],
        memclr_form=v["memclr_form"],
        tie_write_projections=v["tie_write_projections"],
        seed=v["seed"],
    )
    domain = DomainSpec(
        n_classes=v["n_classes"],
        dim=v["raw_dim"],
        class_means=build_class_means(v["n_classes"], v["raw_dim"], v["class_offset"], v["class_sep"]),
        class_scale=v["class_scale"],
        n_instances_min=v["nf_min"],
        n_instances_max=v["nf_max"],
        seed=v["domain_seed"],
    )
    shift = ShiftSpec(ops=parse_shift_ops(v["shift_ops"]), seed=v["shift_seed"])
    return RunConfig(
        adapt=adapt_cfg,
        domain=domain,
        shift=shift,
        mode=v["mode"],
        epochs=v["epochs"],
        stream_length=v["stream_length"],
        n_source=v["n_source"],
        source_epochs=v["source_epochs"],
        source_gamma=v["source_gamma"],
        source_mu=v["source_mu"],
        jitter_sigma=v["jitter_sigma"],
        order_seed=v["order_seed"],
        test_frac=v["test_frac"],
        eval_student=v["eval_student"],
    )


def _config_from_args(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    return build_run_config(values)


def _add_common(parser: argparse.ArgumentParser, checkpoint: bool) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    if checkpoint:
        parser.add_argument("--checkpoint", required=True, help="checkpoint file to start from")


def _load_start(args, config: RunConfig):
    state, bank = adapt.load_checkpoint(args.checkpoint)
    if state.student.feat_dim != config.adapt.feat_dim or state.student.raw_dim != config.domain.dim:
        raise ValueError(
            f"checkpoint dims ({state.student.raw_dim}->{state.student.feat_dim}) do not match "
            f"config ({config.domain.dim}->{config.adapt.feat_dim})"
        )
    return state, bank


def _cmd_train_source(args) -> int:
    config = _config_from_args(args)
    params, holdout = harness.train_source(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state, bank = adapt.init_adaptation(params, config.adapt)
    path = out / "checkpoint.mxad"
    adapt.save_checkpoint(path, state, bank)
    print(f"source holdout accuracy: {holdout:.4f}")
    print(f"checkpoint written: {path}")
    return 0


def _cmd_adapt(args, mode: str) -> int:
    config = _config_from_args(args)
    config = replace(config, mode=mode, out_dir=args.out)
    state, bank = _load_start(args, config)
    report = harness.run(config, state, bank)
    print(f"variant: {report.variant}")
    print(f"source-only accuracy: {report.source_only_acc:.4f}")
    print(f"final teacher accuracy: {report.final_teacher_acc:.4f}")
    if report.final_student_acc is not None:
        print(f"final student accuracy: {report.final_student_acc:.4f}")
    print(f"outputs written to: {args.out}")
    return 0


def _cmd_eval(args) -> int:
    config = _config_from_args(args)
    state, bank = _load_start(args, config)
    stream = streamsim.gen_target_stream(
        config.domain, config.shift, config.stream_length, config.order_seed, config.jitter_sigma
    )
    x, y = streamsim.flatten_stream(stream)
    params = state.student if args.student else state.teacher
    acc = harness.evaluate(params, x, y)
    print(f"{'student' if args.student else 'teacher'} accuracy: {acc:.4f}")
    return 0


def _cmd_ablate_memory(args) -> int:
    config = _config_from_args(args)
    config = replace(config, out_dir=args.out)
    state, bank = _load_start(args, config)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    rows = harness.ablate_memory(config, state, bank, sizes)
    print("n_memory,final_teacher_acc")
    for size, acc in rows:
        print(f"{size},{acc:.4f}")
    return 0


def _cmd_ordering_exp(args) -> int:
    config = _config_from_args(args)
    config = replace(config, out_dir=args.out)
    state, bank = _load_start(args, config)
    result = harness.ordering_experiment(config, state, bank, args.n_orders)
    print("order_seed,final_teacher_acc")
    for seed, acc in zip(result.order_seeds, result.accuracies):
        print(f"{seed},{acc:.4f}")
    print(f"mean: {result.mean:.4f}  std: {result.std:.4f}")
    return 0


def _cmd_config_schema(_args) -> int:
    width = max(len(k) for k in CONFIG_SCHEMA)
    print("# memadapt config keys (key = value per line, # comments allowed)")
    for key, (kind, default, help_text) in CONFIG_SCHEMA.items():
        print(f"{key:<{width}}  {kind:<5}  default={default!r:<18}  {help_text}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memadapt",
        description="Online source-free domain adaptation with a cross-attention memory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-source", help="train the source model, write a deployment checkpoint")
    _add_common(p, checkpoint=False)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_train_source)

    p = sub.add_parser("adapt-online", help="single-pass online adaptation over the target stream")
    _add_common(p, checkpoint=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=lambda a: _cmd_adapt(a, "online"))

    p = sub.add_parser("adapt-offline", help="multi-epoch adaptation on the target train split")
    _add_common(p, checkpoint=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=lambda a: _cmd_adapt(a, "offline"))

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured target stream")
    _add_common(p, checkpoint=True)
    p.add_argument("--student", action="store_true", help="evaluate the student instead of the teacher")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate-memory", help="one online run per memory size")
    _add_common(p, checkpoint=True)
    p.add_argument("--sizes", required=True, help="comma-separated memory sizes, e.g. 16,64,256")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_ablate_memory)

    p = sub.add_parser("ordering-exp", help="re-run the stream under several presentation orders")
    _add_common(p, checkpoint=True)
    p.add_argument("--n-orders", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_ordering_exp)

    p = sub.add_parser("config-schema", help="print every config key with type, default and doc")
    p.set_defaults(fn=_cmd_config_schema)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
