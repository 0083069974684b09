"""Command-line interface: dataset tooling, training, evaluation and checks.

Commands
--------
``dataset gen``        write a synthetic dataset (and optionally a manifest)
``dataset inspect``    print header fields and per-class pixel means
``pretrain``           classification-pretrain a backbone, save checkpoint
``train``              episodic training; checkpoint + convergence CSV
``eval``               evaluate a checkpoint over N tasks, print the report
``gradcheck``          run the finite-difference gradient suite
``compare-baselines``  train several comparators on identical episode streams

Configuration is a flat UTF-8 ``key = value`` file with ``#`` comments and
no nesting; unknown keys are rejected and the fully resolved configuration
is echoed into the output directory as ``config.txt``.  All randomness
derives from one seed: each component stream is seeded with
FNV-1a(component name) XOR seed.

Exit status: 0 on success, 1 on configuration/file errors, 2 on numeric
aborts (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DatasetFormatError, DatasetStore, ManifestError, SplitManifest,
                   generate_synthetic, load_dataset, load_manifest,
                   proportional_split, save_manifest, write_dataset)
from .gradcheck import run_suite, summarize_suite
from .tensor import set_injected_backward_bug
from .training import (NumericsError, TrainConfig, evaluate, init_model,
                       pretrain_backbone, train)


class ConfigError(ValueError):
    """Bad configuration file or flag combination."""


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved flat configuration for a run."""

    dataset: str = ""
    manifest: str = ""
    checkpoint: str = ""
    init_backbone: str = ""
    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 15
    epochs: int = 120
    tasks_per_epoch: int = 100
    val_tasks: int = 50
    lr_initial: float = 0.001
    lr_halve_every: int = 10
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    comparator: str = "biattn"
    backbone: str = "tiny"
    stage_channels: str = ""
    input_size: int = 0
    in_channels: int = 0
    heads: int = 8
    hidden_size: int = 128
    relation_channels: int = 64
    relation_hidden: int = 64
    pretrain_passes: int = 10
    pretrain_lr: float = 0.01
    pretrain_batch: int = 64


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines, stripping ``#`` comments."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def resolve_config(raw: dict[str, str], seed: int | None = None,
                   comparator: str | None = None) -> RunConfig:
    values: dict = {}
    for key, text in raw.items():
        kind = _FIELD_TYPES[key]
        try:
            if kind in ("int", int):
                values[key] = int(text)
            elif kind in ("float", float):
                values[key] = float(text)
            else:
                values[key] = text
        except ValueError:
            raise ConfigError(f"key {key!r}: cannot parse {text!r} as {kind}") from None
    rc = RunConfig(**values)
    if seed is not None:
        rc = replace(rc, seed=seed)
    if comparator is not None:
        rc = replace(rc, comparator=comparator)
    return rc


def format_config(rc: RunConfig) -> str:
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(rc, f.name)
        lines.append(f"{f.name} = {value!r}" if isinstance(value, float)
                     else f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_run_config(path: str, seed: int | None, comparator: str | None = None
                    ) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return resolve_config(parse_config_text(text), seed, comparator)


def _load_data(rc: RunConfig) -> tuple[DatasetStore, SplitManifest]:
    if not rc.dataset or not rc.manifest:
        raise ConfigError("config must set 'dataset' and 'manifest' paths")
    try:
        store = load_dataset(rc.dataset)
        manifest = load_manifest(rc.manifest)
        manifest.validate_against(store)
    except (OSError, DatasetFormatError, ManifestError) as e:
        raise ConfigError(str(e)) from None
    return store, manifest


def _resolve_against_store(rc: RunConfig, store: DatasetStore) -> RunConfig:
    input_size = rc.input_size or store.height
    in_channels = rc.in_channels or store.channels
    if input_size != store.height or store.height != store.width:
        raise ConfigError(f"input_size {input_size} does not match dataset "
                          f"images {store.height}x{store.width}")
    if in_channels != store.channels:
        raise ConfigError(f"in_channels {in_channels} does not match dataset "
                          f"channels {store.channels}")
    return replace(rc, input_size=input_size, in_channels=in_channels)


def build_train_config(rc: RunConfig) -> TrainConfig:
    channels = ()
    if rc.stage_channels:
        try:
            channels = tuple(int(tok) for tok in rc.stage_channels.split(","))
        except ValueError:
            raise ConfigError(f"bad stage_channels {rc.stage_channels!r}") from None
    try:
        backbone = BackboneConfig(rc.backbone, rc.input_size, rc.in_channels, channels)
        return TrainConfig(backbone=backbone, n_way=rc.n_way, k_shot=rc.k_shot,
                           queries_per_class=rc.queries_per_class, epochs=rc.epochs,
                           tasks_per_epoch=rc.tasks_per_epoch, val_tasks=rc.val_tasks,
                           lr_initial=rc.lr_initial, lr_halve_every=rc.lr_halve_every,
                           optimizer=rc.optimizer, momentum=rc.momentum, seed=rc.seed,
                           comparator=rc.comparator, heads=rc.heads,
                           hidden_size=rc.hidden_size,
                           relation_channels=rc.relation_channels,
                           relation_hidden=rc.relation_hidden,
                           pretrain_passes=rc.pretrain_passes,
                           pretrain_lr=rc.pretrain_lr,
                           pretrain_batch=rc.pretrain_batch)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _prepare_out(rc: RunConfig, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(rc))


# ---------------------------------------------------------------------------
# commands


def cmd_dataset(args) -> int:
    if args.action == "gen":
        store = generate_synthetic(args.classes, args.per_class, args.size,
                                   args.seed, channels=args.channels)
        write_dataset(args.out, store)
        if args.manifest:
            save_manifest(args.manifest, proportional_split(args.classes))
        print(f"wrote {args.out}: {store.num_classes} classes x "
              f"{store.samples_per_class} samples, "
              f"{store.channels}x{store.height}x{store.width}")
        return 0
    store = load_dataset(args.path)
    print(f"classes={store.num_classes} samples_per_class={store.samples_per_class} "
          f"channels={store.channels} height={store.height} width={store.width}")
    means = store.class_pixel_means()
    for c, m in enumerate(means):
        print(f"class {c}: mean pixel {m:.2f}")
    return 0


def cmd_pretrain(args) -> int:
    rc = load_run_config(args.config, args.seed)
    store, manifest = _load_data(rc)
    rc = _resolve_against_store(rc, store)
    config = build_train_config(rc)
    _prepare_out(rc, args.out)
    params = pretrain_backbone(store, manifest, config)
    path = os.path.join(args.out, "backbone.fswt")
    save_checkpoint(path, params)
    print(f"wrote {path} ({len(params)} tensors)")
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.seed, args.comparator)
    store, manifest = _load_data(rc)
    rc = _resolve_against_store(rc, store)
    config = build_train_config(rc)
    _prepare_out(rc, args.out)
    initial = None
    if rc.init_backbone:
        try:
            initial = load_checkpoint(rc.init_backbone)
        except (OSError, CheckpointError) as e:
            raise ConfigError(f"init_backbone: {e}") from None
    result = train(config, store, manifest, initial_backbone=initial)
    ckpt = os.path.join(args.out, "checkpoint.fswt")
    save_checkpoint(ckpt, result.model.all_params())
    csv = os.path.join(args.out, "convergence.csv")
    result.log.write_csv(csv)
    last = result.log.records[-1]
    print(f"trained {config.epochs} epochs; final mean loss {last.mean_loss:.6f}; "
          f"episodes hash 0x{result.episodes_hash:016x}")
    print(f"wrote {ckpt} and {csv}")
    return 0


def cmd_eval(args) -> int:
    rc = load_run_config(args.config, args.seed, args.comparator)
    store, manifest = _load_data(rc)
    rc = _resolve_against_store(rc, store)
    config = build_train_config(rc)
    if not rc.checkpoint:
        raise ConfigError("config must set 'checkpoint' for eval")
    model = init_model(config)
    try:
        model.load_arrays(load_checkpoint(rc.checkpoint))
    except (OSError, CheckpointError, ValueError) as e:
        raise ConfigError(f"checkpoint: {e}") from None
    _prepare_out(rc, args.out)
    report = evaluate(model, store, manifest, args.split, args.tasks, rc.seed,
                      n_way=config.n_way, k_shot=config.k_shot,
                      queries_per_class=config.queries_per_class)
    line = report.format()
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(line + "\n")
    print(line)
    return 0


def cmd_gradcheck(args) -> int:
    set_injected_backward_bug(args.inject_bug)
    try:
        reports = run_suite(seeds=tuple(range(args.seeds)))
    finally:
        set_injected_backward_bug(False)
    ok, lines = summarize_suite(reports)
    for line in lines:
        print(line)
    checked = sum(r.coords_checked for r in reports)
    skipped = sum(r.coords_skipped for r in reports)
    print(f"{'PASS' if ok else 'FAIL'}: {checked} coordinates checked, "
          f"{skipped} skipped at kinks")
    return 0 if ok else 1


def cmd_compare_baselines(args) -> int:
    rc = load_run_config(args.config, args.seed)
    store, manifest = _load_data(rc)
    rc = _resolve_against_store(rc, store)
    _prepare_out(rc, args.out)
    names = [n.strip() for n in args.comparators.split(",") if n.strip()]
    hashes = {}
    losses = {}
    for name in names:
        config = build_train_config(replace(rc, comparator=name))
        result = train(config, store, manifest)
        result.log.write_csv(os.path.join(args.out, f"convergence_{name}.csv"))
        hashes[name] = result.episodes_hash
        losses[name] = [r.mean_loss for r in result.log.records]
        print(f"{name}: episodes hash 0x{result.episodes_hash:016x}")
    with open(os.path.join(args.out, "episode_hashes.txt"), "w", encoding="utf-8") as fh:
        for name in names:
            fh.write(f"{name} 0x{hashes[name]:016x}\n")
    if len(set(hashes.values())) != 1:
        print("warning: episode streams differ between comparators", file=sys.stderr)
    horizon = min(10, min(len(v) for v in losses.values()))
    obs_lines = [f"mean training loss over the first {horizon} epochs:"]
    averages = {name: float(np.mean(losses[name][:horizon])) for name in names}
    for name in names:
        obs_lines.append(f"  {name}: {averages[name]:.6f}")
    best = min(averages, key=lambda n: (averages[n], n))
    obs_lines.append(f"lowest early-epoch mean loss: {best}")
    obs = "\n".join(obs_lines) + "\n"
    with open(os.path.join(args.out, "observation.txt"), "w", encoding="utf-8") as fh:
        fh.write(obs)
    print(obs, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-biattn",
                                     description="Few-shot bi-attention workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ds = sub.add_parser("dataset", help="generate or inspect datasets")
    ds_sub = p_ds.add_subparsers(dest="action", required=True)
    p_gen = ds_sub.add_parser("gen", help="generate a synthetic dataset")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--classes", type=int, default=100)
    p_gen.add_argument("--per-class", dest="per_class", type=int, default=120)
    p_gen.add_argument("--size", type=int, default=32)
    p_gen.add_argument("--channels", type=int, default=1)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--manifest", default="",
                       help="also write a 60/20/20 split manifest here")
    p_gen.set_defaults(func=cmd_dataset)
    p_ins = ds_sub.add_parser("inspect", help="print dataset header and class means")
    p_ins.add_argument("--path", required=True)
    p_ins.set_defaults(func=cmd_dataset)

    def common(p, tasks_default=None):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        if tasks_default is not None:
            p.add_argument("--tasks", type=int, default=tasks_default)

    p_pre = sub.add_parser("pretrain", help="classification-pretrain the backbone")
    common(p_pre)
    p_pre.set_defaults(func=cmd_pretrain)

    p_train = sub.add_parser("train", help="episodic training")
    common(p_train)
    p_train.add_argument("--comparator", choices=["biattn", "relation", "proto"],
                         default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval, tasks_default=600)
    p_eval.add_argument("--split", choices=["train", "val", "test"], default="test")
    p_eval.add_argument("--comparator", choices=["biattn", "relation", "proto"],
                        default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_gc.add_argument("--seeds", type=int, default=5)
    p_gc.add_argument("--inject-bug", action="store_true",
                      help="test hook: flip one backward sign; the suite must fail")
    p_gc.set_defaults(func=cmd_gradcheck)

    p_cb = sub.add_parser("compare-baselines",
                          help="paired convergence runs over one episode stream")
    common(p_cb)
    p_cb.add_argument("--comparators", default="biattn,relation,proto")
    p_cb.set_defaults(func=cmd_compare_baselines)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DatasetFormatError, ManifestError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericsError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
