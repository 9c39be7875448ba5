"""Command-line entry points: make-data, train, eval and repro.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import query as q
from .errors import ConfigError, MamoError, NumericError, ParseError, SamplingExhaustedError, ValidationError
from .evaluation import ResultTable, mrr_table
from .kg import GraphSplit, generate_synthetic_kg
from .oracle import FewShotDataset, Setting, build_fewshot_dataset
from .train import Algorithm, TrainConfig, inference_adapt, maml_inference_adapt, make_optimizer, train

log = logging.getLogger("mamo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DESK_GRAPH = {
    "num_entities": 500,
    "num_relations": 8,
    "edges_per_relation": 600,
    "holdout_fraction": 0.2,
    "seed": 0,
}


@dataclass
class ExperimentManifest:
    """Everything that determines a run; written next to its outputs."""

    setting: str = Setting.MULTIHOP.value
    graph: dict = field(default_factory=lambda: {"synthetic": dict(DESK_GRAPH)})
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset_seed: int = 0
    pool_size_per_type: int = 10000
    ratio: float = 0.001
    eval_per_type: int = 100
    seeds: int = 3
    out: str = "runs/default"
    checkpoint: str | None = None

    def __post_init__(self):
        try:
            self.setting = Setting(self.setting).value
        except ValueError:
            raise ConfigError(f"unknown setting {self.setting!r}") from None
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if set(self.graph) - {"synthetic", "path"} or len(self.graph) != 1:
            raise ConfigError("graph must be {'synthetic': {...}} or {'path': DIR}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    @property
    def out_dir(self):
        return Path(self.out)

    @property
    def data_dir(self):
        return self.out_dir / "data"

    @property
    def graph_dir(self):
        return self.out_dir / "graph"


def run_label(config):
    if config.algorithm is Algorithm.VANILLA:
        return "Vanilla"
    if config.algorithm is Algorithm.MAML:
        return "MAML"
    return f"MAMO({config.scheme})"


def run_name(config):
    label = run_label(config).lower().replace("(", "-").replace(")", "")
    return f"{label}-seed{config.seed}"


def _check_fresh(path, force):
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)


def load_split(manifest):
    if "path" in manifest.graph:
        return GraphSplit.load(manifest.graph["path"])
    params = dict(manifest.graph["synthetic"])
    return generate_synthetic_kg(**params)


def cmd_make_data(manifest, force=False):
    """Write the graph split, few-shot dataset and manifest under ``manifest.out``."""
    for path in (manifest.graph_dir, manifest.data_dir):
        _check_fresh(path, force)
    split = load_split(manifest)
    dataset = build_fewshot_dataset(
        split, manifest.setting, manifest.pool_size_per_type, manifest.ratio, manifest.dataset_seed,
        eval_per_type=manifest.eval_per_type,
    )
    split.save(manifest.graph_dir)
    dataset.save(manifest.data_dir)
    (manifest.out_dir / "manifest.json").write_text(manifest.to_json())
    log.info("wrote %d training and %d evaluation queries to %s",
             len(dataset.all_train()), sum(map(len, dataset.eval_queries.values())), manifest.data_dir)
    return dataset


def load_dataset(manifest):
    if not (manifest.data_dir / "dataset.json").exists():
        raise FileNotFoundError(f"no dataset under {manifest.data_dir}; run make-data first")
    return FewShotDataset.load(manifest.data_dir)


def checkpoint_path(manifest, config):
    if manifest.checkpoint:
        return Path(manifest.checkpoint)
    return manifest.out_dir / "checkpoints" / f"{run_name(config)}.pt"


def cmd_train(manifest, resume=False):
    """Train the manifest's algorithm, checkpointing every K steps and at the end."""
    dataset = load_dataset(manifest)
    config = manifest.train
    ckpt = checkpoint_path(manifest, config)
    log_path = manifest.out_dir / "logs" / f"{run_name(config)}.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)

    store = optimizer = None
    start = 0
    if resume and ckpt.exists():
        store, meta, opt_state = bb.load_checkpoint(ckpt)
        if meta.get("algorithm") != config.algorithm.value or meta.get("scheme") != config.scheme:
            raise ConfigError(f"checkpoint {ckpt} was trained with a different algorithm/scheme")
        optimizer = make_optimizer(store, config.outer_lr)
        optimizer.load_state_dict(opt_state)
        start = meta["step"]
    elif config.steps == 0:
        store = bb.init_store(dataset.num_entities, dataset.num_relations, config.dim, config.hidden,
                              config.seed, config.depth_cap)
        optimizer = make_optimizer(store, config.outer_lr)
        _save(ckpt, store, optimizer, config, 0)

    def on_checkpoint(step, store, optimizer):
        _save(ckpt, store, optimizer, config, step)

    with log_path.open("a" if start else "w", encoding="utf-8") as fh:
        store, optimizer = train(dataset, config, store, optimizer, start_step=start, log_file=fh,
                                 on_checkpoint=on_checkpoint)
    return store, ckpt


def _save(path, store, optimizer, config, step):
    meta = {"algorithm": config.algorithm.value, "scheme": config.scheme, "step": step, "config": config.to_dict()}
    bb.save_checkpoint(path, store, meta=meta, optimizer_state=optimizer.state_dict())


def eval_rng(seed):
    return np.random.default_rng([int(seed), zlib.crc32(b"inference")])


def adapted_model(store, dataset, config):
    """What gets evaluated: the store itself, a store with overlays, or per-type stores."""
    if config.algorithm is Algorithm.MAMO:
        return inference_adapt(store, dataset, config.scheme, config, eval_rng(config.seed))
    if config.algorithm is Algorithm.MAML:
        return maml_inference_adapt(store, dataset, dataset.eval_types, config, eval_rng(config.seed))
    return store


def cmd_eval(manifest, checkpoint=None, scheme=None):
    """Evaluate a checkpoint (after test-time adaptation when meta-trained); write CSV + text."""
    dataset = load_dataset(manifest)
    ckpt = Path(checkpoint) if checkpoint else checkpoint_path(manifest, manifest.train)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    store, meta, _ = bb.load_checkpoint(ckpt)
    config = TrainConfig.from_dict(meta["config"])
    if scheme is not None and q.Scheme(scheme).value != config.scheme:
        raise ConfigError(f"--scheme {scheme} does not match the checkpoint's scheme {config.scheme}")
    config.inference_support = manifest.train.inference_support
    config.inference_steps = manifest.train.inference_steps
    config.inference_lr = manifest.train.inference_lr
    model = adapted_model(store, dataset, config)
    table = mrr_table(dataset, [(run_label(config), model, config.scheme)])
    stem = manifest.out_dir / "results" / ckpt.stem
    write_table(table, stem)
    return table


def write_table(table, stem):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".csv").write_text(table.to_csv())
    stem.with_suffix(".txt").write_text(table.to_text())


REPRO_ROWS = {
    Setting.MULTIHOP: [("vanilla", None), ("maml", None), ("mamo", "R"), ("mamo", "L"), ("mamo", "I"), ("mamo", "O")],
    Setting.EPFO: [("vanilla", None), ("maml", None), ("mamo", "R"), ("mamo", "L"), ("mamo", "I"), ("mamo", "O"),
                   ("mamo", "BO")],
    Setting.EFO1: [("vanilla", None), ("maml", None), ("mamo", "R"), ("mamo", "L"), ("mamo", "I"), ("mamo", "O"),
                   ("mamo", "BI"), ("mamo", "BO")],
}


def run_experiment(manifest, rows=None, dataset=None):
    """Train and evaluate every row for every seed; returns ``(mean_table, per_seed_tables)``."""
    if dataset is None:
        dataset = build_fewshot_dataset(
            load_split(manifest), manifest.setting, manifest.pool_size_per_type, manifest.ratio,
            manifest.dataset_seed, eval_per_type=manifest.eval_per_type,
        )
    rows = REPRO_ROWS[Setting(manifest.setting)] if rows is None else rows
    tables = []
    for i in range(manifest.seeds):
        entries = []
        for algorithm, scheme in rows:
            config = dataclasses.replace(manifest.train, algorithm=Algorithm(algorithm), scheme=scheme,
                                         seed=manifest.train.seed + i)
            store, _ = train(dataset, config)
            entries.append((run_label(config), adapted_model(store, dataset, config), config.scheme))
            log.info("seed %d: trained %s", config.seed, run_label(config))
        tables.append(mrr_table(dataset, entries))
    return ResultTable.mean_of(tables), tables


def cmd_repro(manifest, force=False, rows=None):
    """Synthesize data, train every algorithm row over all seeds and write the comparison table."""
    results = manifest.out_dir / "results"
    _check_fresh(results, force)
    dataset = cmd_make_data(manifest, force=force)
    mean, per_seed = run_experiment(manifest, rows, dataset)
    for i, table in enumerate(per_seed):
        write_table(table, results / f"repro-seed{manifest.train.seed + i}")
    write_table(mean, results / "repro")
    return mean


# --------------------------------------------------------------------------
# argument handling


def build_parser():
    parser = argparse.ArgumentParser(prog="mamo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="manifest JSON file")
        p.add_argument("--setting", choices=[s.value for s in Setting])
        p.add_argument("--algorithm", choices=[a.value for a in Algorithm])
        p.add_argument("--scheme", choices=[s.value for s in q.Scheme])
        p.add_argument("--seed", type=int, help="dataset seed for make-data/repro, training seed otherwise")
        p.add_argument("--steps", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--force", action="store_true")
        return p

    common(sub.add_parser("make-data", help="generate the graph split and few-shot dataset"))
    p = common(sub.add_parser("train", help="train one algorithm"))
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", type=Path)
    p = common(sub.add_parser("repro", help="desk-scale reproduction of one setting"))
    p.add_argument("--seeds", type=int)
    return parser


def manifest_from_args(args):
    manifest = ExperimentManifest.load(args.config) if args.config else ExperimentManifest()
    if args.setting:
        manifest.setting = args.setting
    train_changes = {}
    if args.algorithm:
        train_changes["algorithm"] = args.algorithm
    if args.scheme:
        train_changes["scheme"] = args.scheme
    if args.steps is not None:
        train_changes["steps"] = args.steps
    if args.seed is not None:
        if args.command in ("make-data", "repro"):
            manifest.dataset_seed = args.seed
            if "synthetic" in manifest.graph:
                manifest.graph["synthetic"]["seed"] = args.seed
        else:
            train_changes["seed"] = args.seed
    if train_changes:
        merged = manifest.train.to_dict() | train_changes
        manifest.train = TrainConfig.from_dict(merged)
    if args.out:
        manifest.out = str(args.out)
    if getattr(args, "seeds", None):
        manifest.seeds = args.seeds
    return manifest


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        manifest = manifest_from_args(args)
        if args.command == "make-data":
            cmd_make_data(manifest, force=args.force)
        elif args.command == "train":
            _, ckpt = cmd_train(manifest, resume=args.resume)
            print(ckpt)
        elif args.command == "eval":
            print(cmd_eval(manifest, args.checkpoint, args.scheme).to_text(), end="")
        else:
            print(cmd_repro(manifest, force=args.force).to_text(), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ParseError, ValidationError, SamplingExhaustedError, MamoError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
