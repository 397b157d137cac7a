"""Command-line entry points tying the modules into reproducible experiments.

Every command reads a single YAML config file; outputs land in a timestamped
run directory (``<output_dir>/<timestamp>-<command>/``) containing a config
snapshot, ``checkpoints/``, ``logs/``, and ``reports/``. Exit codes: 0 on
success, 1 on runtime failure, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .augment import AugmentationPolicy
from .data import Dataset, export_dataset, load_manifest, split_by_patient, SplitSpec, TASKS
from .evaluation import build_report, evaluate_bundles, render_report_text, score_task, auc
from .inference import MODES, TreePipeline, TreeSpec, benchmark, infer_batch, scores_by_task
from .nnet import ArchitectureConfig, init_bundle, load_checkpoint, new_head, save_checkpoint
from .selfsup import SSLConfig, pretrain
from .supervised import (
    HEAD_KIND_FOR_PROTOCOL,
    ProtocolConfig,
    run_label_efficiency_sweep,
    train_protocol,
)
from .synthetic import SyntheticConfig, generate_synthetic

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad command usage or invalid configuration."""


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        raise ConfigError("a --config YAML file is required for this command")
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file not found: {file}")
    try:
        loaded = yaml.safe_load(file.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {file} is not valid YAML: {exc}") from exc
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {file} must hold a mapping at the top level")
    return loaded


def _section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return dict(value)


def _build(section_name: str, factory, kwargs: dict):
    try:
        return factory(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config section {section_name!r}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config section {section_name!r}: {exc}") from exc


def _make_run_dir(config: dict, args, command: str) -> Path:
    root = Path(args.out if getattr(args, "out", None) else config.get("output_dir", "runs"))
    name = getattr(args, "run_name", None) or f"{time.strftime('%Y%m%d-%H%M%S')}-{command}"
    run_dir = root / name
    suffix = 1
    while run_dir.exists() and getattr(args, "run_name", None) is None:
        suffix += 1
        run_dir = root / f"{name}-{suffix}"
    for sub in ("checkpoints", "logs", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    handler = logging.FileHandler(run_dir / "logs" / "luskit.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logging.getLogger("luskit").addHandler(handler)
    return run_dir


def _resolve_dataset(config: dict) -> Dataset:
    data_cfg = _section(config, "data")
    manifest = data_cfg.get("manifest")
    synthetic = data_cfg.get("synthetic")
    if (manifest is None) == (synthetic is None):
        raise ConfigError(
            "config section 'data' must specify exactly one source: 'manifest' or 'synthetic'"
        )
    if manifest is not None:
        return load_manifest(manifest)
    if not isinstance(synthetic, dict):
        raise ConfigError("config entry data.synthetic must be a mapping")
    return generate_synthetic(_build("data.synthetic", SyntheticConfig, synthetic))


def _split_dataset(config: dict, dataset: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    spec = _build("split", SplitSpec, _adapt_split(_section(config, "split")))
    labelled = dataset.filter(
        lambda r: any(v is not None for v in (r.view_label, r.ab_label, r.pe_label)),
        name=f"{dataset.name}-labelled",
    )
    return split_by_patient(labelled, spec)


def _adapt_split(section: dict) -> dict:
    section = dict(section)
    if "ratios" in section:
        section["ratios"] = tuple(section["ratios"])
    return section


def _pretrain_pool(dataset: Dataset, train: Dataset) -> Dataset:
    unlabelled = [
        r for r in dataset if all(v is None for v in (r.view_label, r.ab_label, r.pe_label))
    ]
    return Dataset(list(unlabelled) + list(train.records), name=f"{dataset.name}-pretrain-pool")


def _arch(config: dict) -> ArchitectureConfig:
    section = _section(config, "architecture")
    if "channels" in section:
        section["channels"] = tuple(section["channels"])
    return _build("architecture", ArchitectureConfig, section)


def _policy(config: dict) -> AugmentationPolicy:
    return _build("augmentation", AugmentationPolicy.from_dict, {"d": _section(config, "augmentation")})


def _global_seed(config: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    config = _load_config(args.config)
    data_cfg = _section(config, "data")
    if "synthetic" not in data_cfg or data_cfg.get("synthetic") is None:
        raise ConfigError("synth requires a data.synthetic config block")
    cfg = _build("data.synthetic", SyntheticConfig, dict(data_cfg["synthetic"]))
    out_dir = Path(args.out if args.out else Path(config.get("output_dir", "runs")) / "dataset")
    dataset = generate_synthetic(cfg)
    manifest = export_dataset(dataset, out_dir)
    print(f"wrote {len(dataset)} records to {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args.config)
    seed = _global_seed(config, args)
    run_dir = _make_run_dir(config, args, "pretrain")
    dataset = _resolve_dataset(config)
    train, _, _ = _split_dataset(config, dataset)
    pool = _pretrain_pool(dataset, train)
    arch = _arch(config)
    ssl_section = _section(config, "ssl")
    ssl_section.setdefault("seed", seed)
    if "vicreg_weights" in ssl_section:
        ssl_section["vicreg_weights"] = tuple(ssl_section["vicreg_weights"])
    ssl_config = _build("ssl", SSLConfig, ssl_section)
    bundle = init_bundle(arch, seed=seed)
    history = pretrain(
        pool,
        bundle,
        ssl_config,
        policy=_policy(config),
        checkpoint_dir=run_dir / "checkpoints",
    )
    final_path = save_checkpoint(bundle, run_dir / "checkpoints" / "final.ckpt")
    _write_json(run_dir / "logs" / "pretrain.json", history.records())
    with (run_dir / "logs" / "pretrain.log").open("w", encoding="utf-8") as fh:
        for record in history.records():
            fh.write(
                f"epoch {record['epoch']:3d}  mean_loss {record['mean_loss']:.6f}  "
                f"seconds {record['seconds']:.2f}\n"
            )
    print(f"pretrained {ssl_config.method} for {ssl_config.epochs} epochs on {len(pool)} images")
    print(f"final checkpoint: {final_path}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = _global_seed(config, args)
    run_dir = _make_run_dir(config, args, "train")
    dataset = _resolve_dataset(config)
    train, val, test = _split_dataset(config, dataset)
    arch = _arch(config)
    proto_section = _section(config, "protocol")
    proto_section.setdefault("seed", seed)
    proto = _build("protocol", ProtocolConfig, proto_section)

    checkpoint = _section(config, "train").get("checkpoint")
    if checkpoint:
        bundle = load_checkpoint(checkpoint, arch=arch)
    else:
        bundle = init_bundle(arch, seed=seed)
    bundle.heads[proto.task] = new_head(proto.head_kind, arch, seed=proto.seed)

    run = train_protocol(bundle, train, val, proto)
    scores, labels = score_task(bundle, test, proto.task)
    test_auc = auc(scores, labels)
    trained_path = save_checkpoint(bundle, run_dir / "checkpoints" / "trained.ckpt")
    _write_json(
        run_dir / "reports" / "train_run.json",
        {
            "protocol": run.protocol,
            "task": run.task,
            "train_losses": run.train_losses,
            "val_losses": run.val_losses,
            "selected_epoch": run.selected_epoch,
            "provenance": run.provenance,
            "test_auc": test_auc,
        },
    )
    print(
        f"{proto.protocol}/{proto.task}: selected epoch {run.selected_epoch}, "
        f"test AUC {test_auc:.4f}"
    )
    print(f"trained checkpoint: {trained_path}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    run_dir = _make_run_dir(config, args, "eval")
    eval_cfg = _section(config, "eval")
    fixture = eval_cfg.get("fixture")
    if fixture:
        fixture_path = Path(fixture)
        if not fixture_path.is_file():
            raise ConfigError(f"eval fixture not found: {fixture_path}")
        payload = json.loads(fixture_path.read_text(encoding="utf-8"))
        try:
            cell_aucs = {
                (c["task"], c["pretraining"], c["protocol"], c["dataset"]): float(c["auc"])
                for c in payload["cells"]
            }
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"eval fixture {fixture_path} is malformed: {exc}") from exc
        report = build_report(cell_aucs)
    else:
        checkpoints = eval_cfg.get("checkpoints")
        if not isinstance(checkpoints, dict) or not checkpoints:
            raise ConfigError("eval requires either eval.fixture or eval.checkpoints")
        dataset = _resolve_dataset(config)
        _, _, test = _split_dataset(config, dataset)
        bundles = {}
        for pretraining, per_protocol in checkpoints.items():
            if not isinstance(per_protocol, dict):
                raise ConfigError("eval.checkpoints must map pretraining -> protocol -> path")
            for protocol, path in per_protocol.items():
                bundles[(pretraining, protocol)] = load_checkpoint(path)
        report = evaluate_bundles(bundles, {"local_test": test})
    _write_json(run_dir / "reports" / "report.json", report.to_records())
    text = render_report_text(report)
    (run_dir / "reports" / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    seed = _global_seed(config, args)
    run_dir = _make_run_dir(config, args, "sweep")
    dataset = _resolve_dataset(config)
    train, val, test = _split_dataset(config, dataset)
    arch = _arch(config)
    sweep_cfg = _section(config, "sweep")
    fractions = tuple(float(f) for f in sweep_cfg.get("fractions", (0.01, 0.1, 0.5, 1.0)))
    tasks = tuple(sweep_cfg.get("tasks", TASKS))
    protocols = tuple(sweep_cfg.get("protocols", ("ft", "nc")))
    seeds = tuple(int(s) for s in sweep_cfg.get("seeds", (seed,)))
    pretrained_ckpt = sweep_cfg.get("pretrained_checkpoint")
    if not pretrained_ckpt:
        raise ConfigError("sweep requires sweep.pretrained_checkpoint")
    overrides = {
        key: sweep_cfg[key]
        for key in ("epochs", "batch_size", "extractor_lr", "head_lr")
        if key in sweep_cfg
    }

    def pretrained_factory(run_seed: int, protocol: str):
        bundle = load_checkpoint(pretrained_ckpt, arch=arch)
        kind = HEAD_KIND_FOR_PROTOCOL[protocol]
        for task in tasks:
            bundle.heads[task] = new_head(kind, arch, seed=run_seed)
        return bundle

    def scratch_factory(run_seed: int, protocol: str):
        kind = HEAD_KIND_FOR_PROTOCOL[protocol]
        return init_bundle(arch, seed=run_seed, head_kinds={task: kind for task in tasks})

    cells = run_label_efficiency_sweep(
        {"pretrained": pretrained_factory, "scratch": scratch_factory},
        train,
        val,
        test,
        fractions=fractions,
        tasks=tasks,
        seeds=seeds,
        protocols=protocols,
        config_overrides=overrides,
    )
    records = [
        {
            "source": c.source,
            "fraction": c.fraction,
            "task": c.task,
            "protocol": c.protocol,
            "seed_aucs": {str(s): a for s, a in c.seed_aucs},
            "mean_auc": c.mean_auc,
        }
        for c in cells
    ]
    _write_json(run_dir / "reports" / "sweep.json", records)
    lines = [f"{'source':<12} {'fraction':>8} {'task':<6} {'protocol':<8} {'mean_auc':>8}"]
    for c in cells:
        lines.append(f"{c.source:<12} {c.fraction:>8g} {c.task:<6} {c.protocol:<8} {c.mean_auc:>8.4f}")
    (run_dir / "reports" / "sweep.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def _bench_pipelines(config: dict, arch: ArchitectureConfig, seed: int) -> dict[str, TreePipeline]:
    bench_cfg = _section(config, "benchmark")
    spec = TreeSpec(threshold=float(bench_cfg.get("threshold", 0.5)))
    ckpts = bench_cfg.get("checkpoints") or {}
    pipelines: dict[str, TreePipeline] = {}
    shared_ckpt = ckpts.get("shared")
    if shared_ckpt:
        shared_bundle = load_checkpoint(shared_ckpt, arch=arch)
    else:
        shared_bundle = init_bundle(
            arch, seed=seed, head_kinds={t: "mlp32" for t in TASKS}, with_projector=False
        )
    pipelines["shared_backbone"] = TreePipeline.shared(shared_bundle, spec)
    serial_bundles = {}
    for task in TASKS:
        path = ckpts.get(task)
        if path:
            serial_bundles[task] = load_checkpoint(path, arch=arch)
        else:
            serial_bundles[task] = init_bundle(
                arch, seed=seed, head_kinds={task: "linear"}, with_projector=False
            )
    pipelines["serial_cnns"] = TreePipeline.serial(serial_bundles, spec)
    return pipelines


def cmd_bench(args) -> int:
    config = _load_config(args.config)
    seed = _global_seed(config, args)
    run_dir = _make_run_dir(config, args, "bench")
    arch = _arch(config)
    bench_cfg = _section(config, "benchmark")
    n = int(bench_cfg.get("n", 1000))
    warmup = int(bench_cfg.get("warmup", 20))
    modes = tuple(bench_cfg.get("modes", MODES))
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"benchmark mode {mode!r} must be one of {MODES}")
    if "data" in config and _section(config, "data"):
        images = _resolve_dataset(config)
        if len(images) == 0:
            raise ConfigError("benchmark image source dataset is empty")
        source: Dataset | np.ndarray = images
    else:
        rng = np.random.default_rng(seed)
        source = rng.random((32, 128, 128), dtype=np.float32)
    pipelines = _bench_pipelines(config, arch, seed)
    results = []
    for mode in modes:
        result = benchmark(pipelines[mode], source, n=n, warmup=warmup)
        results.append(result.to_record())
        print(
            f"{mode}: mean {result.mean_seconds * 1e3:.3f} ms  sd {result.sd_seconds * 1e3:.3f} ms  "
            f"flops/prediction {result.flops_per_prediction:,}"
        )
    _write_json(run_dir / "reports" / "benchmark.json", results)
    return 0


def cmd_infer(args) -> int:
    config = _load_config(args.config)
    run_dir = _make_run_dir(config, args, "infer")
    infer_cfg = _section(config, "infer")
    mode = infer_cfg.get("mode", "shared_backbone")
    if mode not in MODES:
        raise ConfigError(f"infer.mode must be one of {MODES}, got {mode!r}")
    spec = TreeSpec(threshold=float(infer_cfg.get("threshold", 0.5)))
    dataset = _resolve_dataset(config)
    if mode == "shared_backbone":
        ckpt = infer_cfg.get("checkpoint")
        if not ckpt:
            raise ConfigError("infer.checkpoint is required for shared_backbone mode")
        pipeline = TreePipeline.shared(load_checkpoint(ckpt), spec)
    else:
        ckpts = infer_cfg.get("checkpoints")
        if not isinstance(ckpts, dict) or set(ckpts) != set(TASKS):
            raise ConfigError("infer.checkpoints must map each of view/ab/pe to a checkpoint")
        pipeline = TreePipeline.serial({t: load_checkpoint(p) for t, p in ckpts.items()}, spec)
    outcomes = infer_batch(dataset, pipeline)
    with (run_dir / "reports" / "outcomes.jsonl").open("w", encoding="utf-8") as fh:
        for rec, outcome in zip(dataset, outcomes):
            fh.write(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "view_probability": outcome.view_probability,
                        "routed_task": outcome.routed_task,
                        "leaf_probability": outcome.leaf_probability,
                        "mode": outcome.mode,
                    }
                )
                + "\n"
            )
    summary = {"n": len(outcomes), "mode": mode}
    per_task = scores_by_task(dataset, outcomes, spec)
    for task, (scores, labels) in per_task.items():
        if len(labels) > 0 and len(set(labels.tolist())) == 2:
            summary[f"auc_{task}"] = auc(scores, labels)
    _write_json(run_dir / "reports" / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "infer": cmd_infer,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="luskit",
        description="Self-supervised pretraining and hierarchical inference for lung ultrasound classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic dataset (manifest + PNG frames)"),
        ("pretrain", "self-supervised pretraining of the feature extractor"),
        ("train", "supervised LC/FT/NC training of one task"),
        ("eval", "evaluate checkpoints or aggregate a fixture of AUCs"),
        ("sweep", "label-efficiency grid over fractions/tasks/protocols"),
        ("bench", "latency and FLOP comparison of the two inference modes"),
        ("infer", "run decision-tree inference over a dataset"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", help="YAML config file")
        p.add_argument("--out", "-o", help="output root (overrides config output_dir)")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--run-name", help="fixed run-directory name (default: timestamped)")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    command = _COMMANDS[args.command]
    try:
        return command(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
