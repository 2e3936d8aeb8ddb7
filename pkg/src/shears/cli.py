"""Staged pipeline driver: prune -> train -> search -> eval, plus bench/report.

One JSON config file drives every stage; any field can be overridden with
--set dotted.path=value. Stages read and write only under the workdir
(model/, adapter/, logs/, search/, reports/), so each one is independently
re-runnable and replayable from its seeds.

Exit codes: 0 ok, 2 config error, 3 missing/corrupt artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapters import SuperAdapter, attach, maximal_config, minimal_config
from .checkpoint import load_adapter, load_model, save_adapter, save_model
from .data import Dataset, TaskKind, TaskSpec, generate
from .errors import ArtifactError, ConfigError, NumericError, ShearsError
from .linalg import Rng
from .metrics import bench_inference, count_params
from .model import TARGET_KINDS, Model, ModelConfig, freeze_model, init_model
from .nls import OptimizerKind, TrainConfig, TrainMode, evaluate, make_evaluator, train
from .pruning import PruneMethod, sparsify_model
from .search import (
    CachedEvaluator,
    SearchSpace,
    evolutionary_search,
    heuristic_config,
    hill_climb,
)

EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4

DEFAULT_WORKDIR_ENV = "SHEARS_WORKDIR"


@dataclass
class PruneSettings:
    method: str = "wanda"
    sparsity: float = 0.5
    targets: tuple[str, ...] = TARGET_KINDS  # module kinds, expanded per block
    calib_size: int = 32
    calib_seed: int = 17


@dataclass
class AdapterSettings:
    targets: tuple[str, ...] = ("q", "k", "v", "up", "down")
    rank_choices: tuple[int, ...] = (32, 24, 16)
    alpha: float = 64.0
    seed: int = 23


@dataclass
class TrainSettings:
    epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    seed: int = 31
    mode: str = "nls"
    fixed_rank: int | None = None


@dataclass
class SearchSettings:
    strategy: str = "hillclimb"  # heuristic | hillclimb | evolutionary
    budget: int = 40
    pop_size: int = 20
    generations: int = 10
    seed: int = 41
    reference_points: list[list[float]] | None = None
    eval_batch_size: int = 64


@dataclass
class BenchSettings:
    repetitions: int = 5
    input_sizes: tuple[tuple[int, int], ...] = ((8, 32),)


@dataclass
class PipelineConfig:
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(
            vocab_size=16, d_model=32, n_blocks=2, d_ff=128, n_classes=4, seq_len=16, seed=7
        )
    )
    task: TaskSpec = field(
        default_factory=lambda: TaskSpec(
            kind=TaskKind.KEY_LOOKUP,
            n_train=2000,
            n_val=400,
            n_test=400,
            seq_len=16,
            vocab_size=16,
            n_classes=4,
            seed=11,
        )
    )
    prune: PruneSettings = field(default_factory=PruneSettings)
    adapter: AdapterSettings = field(default_factory=AdapterSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    search: SearchSettings = field(default_factory=SearchSettings)
    workdir: str = ""

    def resolve_workdir(self) -> Path:
        if self.workdir:
            return Path(self.workdir)
        return Path(os.environ.get(DEFAULT_WORKDIR_ENV, "shears_out"))


def _overlay_section(default, data: dict, path: str):
    known = {f.name for f in default.__dataclass_fields__.values()}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config field(s) {sorted(unknown)} under '{path}'")
    coerced = {}
    for key, value in data.items():
        if isinstance(value, list) and key in ("targets", "rank_choices", "input_sizes"):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        coerced[key] = value
    try:
        return replace(default, **coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config under '{path}': {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    """Overlay a (possibly partial) config dict onto the bundled defaults."""
    cfg = PipelineConfig()
    sections = ("model", "task", "prune", "adapter", "train", "search")
    unknown = set(data) - set(sections) - {"workdir", "bench"}
    if unknown:
        raise ConfigError(f"unknown top-level config field(s): {sorted(unknown)}")
    for name in sections:
        if name in data:
            if not isinstance(data[name], dict):
                raise ConfigError(f"config section '{name}' must be a JSON object")
            setattr(cfg, name, _overlay_section(getattr(cfg, name), dict(data[name]), name))
    if "workdir" in data:
        cfg.workdir = data["workdir"]
    return cfg


def _parse_set_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {dotted!r} crosses a non-object field")
        node[parts[-1]] = _parse_set_value(raw)
    return data


def apply_master_seed(data: dict, seed: int) -> dict:
    """--seed N re-seeds every stage at fixed offsets for full replayability."""
    data.setdefault("model", {})["seed"] = seed
    data.setdefault("task", {})["seed"] = seed + 1000
    data.setdefault("prune", {})["calib_seed"] = seed + 2000
    data.setdefault("adapter", {})["seed"] = seed + 3000
    data.setdefault("train", {})["seed"] = seed + 4000
    data.setdefault("search", {})["seed"] = seed + 5000
    return data


def load_config(path: str | None, overrides: list[str], seed: int | None) -> PipelineConfig:
    data: dict = {}
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.is_file():
            raise ConfigError(f"config file not found: {cfg_path}")
        try:
            data = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {cfg_path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {cfg_path} must hold a JSON object")
    if seed is not None:
        data = apply_master_seed(data, seed)
    if overrides:
        data = apply_overrides(data, overrides)
    cfg = config_from_dict(data)
    try:
        cfg.model.validate()
        cfg.task.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 <= cfg.prune.sparsity < 1.0:
        raise ConfigError(f"prune.sparsity must lie in [0, 1), got {cfg.prune.sparsity}")
    for kind in cfg.prune.targets + cfg.adapter.targets:
        if kind not in TARGET_KINDS:
            raise ConfigError(f"unknown target-module kind {kind!r}; choose from {TARGET_KINDS}")
    for enum_cls, value, name in (
        (PruneMethod, cfg.prune.method, "prune.method"),
        (OptimizerKind, cfg.train.optimizer, "train.optimizer"),
        (TrainMode, cfg.train.mode, "train.mode"),
    ):
        try:
            enum_cls(value)
        except ValueError:
            raise ConfigError(
                f"unknown {name} {value!r}; choose from {[e.value for e in enum_cls]}"
            ) from None
    if cfg.search.strategy not in ("heuristic", "hillclimb", "evolutionary"):
        raise ConfigError(f"unknown search.strategy {cfg.search.strategy!r}")
    return cfg


class WorkdirLock:
    """Single-writer guard: an exclusive lockfile under the workdir."""

    def __init__(self, workdir: Path):
        self.path = workdir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ArtifactError(
                f"workdir is locked by another run ({self.path}); remove the lockfile if stale"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc_info):
        self.path.unlink(missing_ok=True)


def _expand_targets(kinds: tuple[str, ...], n_blocks: int) -> list[str]:
    return [f"b{i}.{kind}" for i in range(n_blocks) for kind in TARGET_KINDS if kind in kinds]


def _datasets(cfg: PipelineConfig) -> tuple[Dataset, Dataset, Dataset]:
    return generate(cfg.task)


def _calibration(cfg: PipelineConfig, train_data: Dataset):
    rng = Rng(cfg.prune.calib_seed)
    size = min(cfg.prune.calib_size, train_data.n)
    idx = rng.permutation(train_data.n)[:size]
    return [train_data.batch(np.sort(idx))]


def _model_dir(workdir: Path) -> Path:
    return workdir / "model"


def _adapter_dir(workdir: Path) -> Path:
    return workdir / "adapter"


def _load_stage_model(workdir: Path) -> Model:
    path = _model_dir(workdir)
    if not (path / "meta.json").is_file():
        raise ArtifactError(f"no pruned model under {path}; run `shears prune` first")
    return load_model(path)


def _load_stage_adapter(workdir: Path) -> SuperAdapter:
    path = _adapter_dir(workdir)
    if not (path / "meta.json").is_file():
        raise ArtifactError(f"no trained adapter under {path}; run `shears train` first")
    return load_adapter(path)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))


def cmd_prune(cfg: PipelineConfig) -> int:
    workdir = cfg.resolve_workdir()
    with WorkdirLock(workdir):
        train_data, _, _ = _datasets(cfg)
        model = init_model(cfg.model, Rng(cfg.model.seed))
        targets = _expand_targets(cfg.prune.targets, cfg.model.n_blocks)
        if not targets:
            raise ConfigError("prune.targets selected no modules")
        calib = _calibration(cfg, train_data)
        pruned, report = sparsify_model(
            model, calib, targets, cfg.prune.sparsity, PruneMethod(cfg.prune.method)
        )
        save_model(pruned, _model_dir(workdir))
        _write_json(workdir / "reports" / "prune_report.json", report.to_dict())
        print(
            f"[prune] method={cfg.prune.method} sparsity={cfg.prune.sparsity} "
            f"targets={len(targets)} achieved={report.global_target_sparsity:.6f}"
        )
    return 0


def cmd_train(cfg: PipelineConfig, dense: bool = False) -> int:
    workdir = cfg.resolve_workdir()
    with WorkdirLock(workdir):
        train_data, val_data, _ = _datasets(cfg)
        if dense:
            # the frozen dense base becomes the stage artifact later stages load
            model = freeze_model(init_model(cfg.model, Rng(cfg.model.seed)))
            save_model(model, _model_dir(workdir))
        else:
            model = _load_stage_model(workdir)
        targets = _expand_targets(cfg.adapter.targets, cfg.model.n_blocks)
        adapter = attach(
            model,
            targets,
            rank_choices=cfg.adapter.rank_choices,
            alpha=cfg.adapter.alpha,
            rng=Rng(cfg.adapter.seed),
        )
        train_cfg = TrainConfig(
            epochs=cfg.train.epochs,
            batch_size=cfg.train.batch_size,
            learning_rate=cfg.train.learning_rate,
            optimizer=OptimizerKind(cfg.train.optimizer),
            seed=cfg.train.seed,
            mode=TrainMode(cfg.train.mode),
            fixed_rank=cfg.train.fixed_rank,
        )
        trained, log = train(model, adapter, train_data, val_data, train_cfg)
        save_adapter(trained, _adapter_dir(workdir))
        logs_dir = workdir / "logs"
        logs_dir.mkdir(parents=True, exist_ok=True)
        with open(logs_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for record in log.to_records():
                fh.write(json.dumps(record) + "\n")
        last = log.epochs[-1] if log.epochs else None
        summary = f"val_acc={last.val_accuracy:.4f}" if last else "no epochs run"
        print(f"[train] mode={cfg.train.mode} epochs={cfg.train.epochs} {summary}")
    return 0


def _named_config(adapter: SuperAdapter, which: str, workdir: Path) -> dict[str, int]:
    space = SearchSpace.from_adapter(adapter)
    if which == "heuristic":
        return heuristic_config(space)
    if which == "maximal":
        return maximal_config(adapter)
    if which == "minimal":
        return minimal_config(adapter)
    if which == "best":
        results_path = workdir / "search" / "results.json"
        if not results_path.is_file():
            raise ArtifactError(f"no search results under {results_path}; run `shears search`")
        return {k: int(v) for k, v in json.loads(results_path.read_text())["best"]["config"].items()}
    path = Path(which)
    if path.is_file():
        return {k: int(v) for k, v in json.loads(path.read_text()).items()}
    raise ConfigError(
        f"unknown eval target {which!r}; use heuristic|maximal|minimal|best or a config JSON path"
    )


def cmd_search(cfg: PipelineConfig) -> int:
    workdir = cfg.resolve_workdir()
    with WorkdirLock(workdir):
        model = _load_stage_model(workdir)
        adapter = _load_stage_adapter(workdir)
        _, val_data, _ = _datasets(cfg)
        space = SearchSpace.from_adapter(adapter)
        evaluator = CachedEvaluator(
            make_evaluator(model, adapter, val_data, cfg.search.eval_batch_size)
        )
        strategy = cfg.search.strategy
        front_payload = None
        if strategy == "heuristic":
            best = heuristic_config(space)
            evaluator(best)
        elif strategy == "hillclimb":
            hill_climb(
                evaluator, heuristic_config(space), space, cfg.search.budget, evaluator.cache
            )
            best, _ = evaluator.cache.best_by_metric()
        else:
            refs = (
                [tuple(p) for p in cfg.search.reference_points]
                if cfg.search.reference_points
                else None
            )
            front, best = evolutionary_search(
                evaluator,
                space,
                cfg.search.pop_size,
                cfg.search.generations,
                Rng(cfg.search.seed),
                reference_points=refs,
            )
            front_payload = [
                {"config": c.config, "metric": c.metric, "params": c.params} for c in front
            ]
        ranked = sorted(
            (
                {"config": dict(fp), "metric": obj[0], "params": obj[1]}
                for fp, obj in evaluator.cache.items()
            ),
            key=lambda row: (-row["metric"], row["params"]),
        )
        best_metric, best_params = evaluator(best)
        payload = {
            "strategy": strategy,
            "evaluations": evaluator.calls,
            "best": {"config": best, "metric": best_metric, "params": best_params},
            "ranked": ranked,
        }
        if front_payload is not None:
            payload["front"] = front_payload
        _write_json(workdir / "search" / "results.json", payload)
        print(
            f"[search] strategy={strategy} evals={evaluator.calls} "
            f"best_metric={best_metric:.4f} best_params={best_params}"
        )
    return 0


def cmd_eval(cfg: PipelineConfig, which: str) -> int:
    workdir = cfg.resolve_workdir()
    with WorkdirLock(workdir):
        model = _load_stage_model(workdir)
        adapter = _load_stage_adapter(workdir)
        _, _, test_data = _datasets(cfg)
        config = _named_config(adapter, which, workdir)
        test_loss, test_acc = evaluate(model, test_data, adapter, config)
        payload = {
            "which": which,
            "config": config,
            "test_loss": test_loss,
            "test_accuracy": test_acc,
        }
        _write_json(workdir / "reports" / f"eval_{Path(which).stem}.json", payload)
        print(f"[eval] {which}: test_acc={test_acc:.4f} test_loss={test_loss:.4f}")
    return 0


def cmd_bench(cfg: PipelineConfig, bench: BenchSettings | None = None) -> int:
    bench = bench or BenchSettings()
    workdir = cfg.resolve_workdir()
    with WorkdirLock(workdir):
        model = _load_stage_model(workdir)
        adapter_path = _adapter_dir(workdir) / "meta.json"
        adapter = load_adapter(_adapter_dir(workdir)) if adapter_path.is_file() else None
        config = heuristic_config(SearchSpace.from_adapter(adapter)) if adapter else None
        report = bench_inference(
            model, adapter, config, list(bench.input_sizes), bench.repetitions
        )
        _write_json(workdir / "reports" / "bench.json", report.to_dict())
        for case in report.cases:
            print(
                f"[bench] batch={case.batch} seq={case.seq_len} "
                f"dense={case.dense_median_s * 1e3:.2f}ms csr={case.csr_median_s * 1e3:.2f}ms "
                f"speedup={case.speedup:.2f} max_diff={case.max_abs_diff:.2e}"
            )
    return 0


def cmd_report(cfg: PipelineConfig) -> int:
    workdir = cfg.resolve_workdir()
    with WorkdirLock(workdir):
        model = _load_stage_model(workdir)
        adapter_path = _adapter_dir(workdir) / "meta.json"
        payload = {"base": count_params(model).to_dict()}
        if adapter_path.is_file():
            adapter = load_adapter(_adapter_dir(workdir))
            config = heuristic_config(SearchSpace.from_adapter(adapter))
            payload["with_adapter"] = count_params(model, adapter, config).to_dict()
            payload["merged"] = count_params(model, adapter, config, merged=True).to_dict()
        _write_json(workdir / "reports" / "params.json", payload)
        base = payload["base"]
        print(
            f"[report] base_total={base['base_total']} base_nonzero={base['base_nonzero']} "
            f"sparsity={base['base_sparsity']:.4f}"
        )
    return 0


def cmd_pipeline(cfg: PipelineConfig, dense: bool = False) -> int:
    if not dense:
        cmd_prune(cfg)
    cmd_train(cfg, dense=dense)
    cmd_search(cfg)
    cmd_eval(cfg, "best")
    cmd_report(cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shears",
        description="Prune, adapter-tune, and search a desk-scale transformer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prune", "train", "search", "eval", "bench", "report", "pipeline"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="JSON pipeline config path")
        cmd.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config field by dotted path (repeatable)",
        )
        cmd.add_argument("--seed", type=int, default=None, help="master seed override")
        cmd.add_argument("--workdir", default=None, help="working directory override")
        if name in ("train", "pipeline"):
            cmd.add_argument(
                "--dense",
                action="store_true",
                help="skip pruning: train adapters over the frozen dense model",
            )
        if name == "eval":
            cmd.add_argument(
                "--which",
                default="best",
                help="heuristic|maximal|minimal|best or a config JSON path",
            )
        if name == "bench":
            cmd.add_argument("--repetitions", type=int, default=5)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.workdir:
            cfg = replace(cfg, workdir=args.workdir)
        if args.command == "prune":
            return cmd_prune(cfg)
        if args.command == "train":
            return cmd_train(cfg, dense=args.dense)
        if args.command == "search":
            return cmd_search(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.which)
        if args.command == "bench":
            return cmd_bench(cfg, BenchSettings(repetitions=args.repetitions))
        if args.command == "report":
            return cmd_report(cfg)
        if args.command == "pipeline":
            return cmd_pipeline(cfg, dense=args.dense)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ShearsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
