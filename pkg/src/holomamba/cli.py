"""Command-line entry point: ``holomamba {ingest,train,eval,bench}``.

A JSON config file with flat keys (the :class:`RunConfig` fields) may be
given with ``--config``; explicit flags override it. Exit codes: 0 success,
1 usage/config error, 2 data error, 3 numeric/training error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .bench import MODES, bench
from .data import DatasetSplit, prepare_amazon, prepare_movielens, synthetic_generate
from .errors import ConfigError, DataError, TrainingError
from .metrics import evaluate
from .model import HoloMambaRec, ModelConfig
from .train import TrainConfig, train

log = logging.getLogger("holomamba")

DATASETS = ("movielens", "amazon", "synthetic")
DEFAULT_LAYERS = {"movielens": 3, "amazon": 2, "synthetic": 2}
PATH_FIELDS = ("ratings_path", "movies_path", "amazon_path", "out", "checkpoint")


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    ratings_path: str | None = None
    movies_path: str | None = None
    amazon_path: str | None = None
    out: str = "runs/default"
    checkpoint: str | None = None
    # model
    d: int = 96
    d_state: int = 16
    n_layers: int | None = None
    L: int = 50
    conv_width: int = 4
    use_binding: bool = True
    use_compression: bool = False
    bundle_k: int = 4
    dropout: float = 0.0
    seed: int = 42
    # optimisation
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    # synthetic data
    synthetic_users: int = 32
    synthetic_cycle: int = 3
    synthetic_items: int | None = None
    # eval / bench
    eval_only: bool = False
    compressed: bool = False
    eval_k: int = 10
    bench_lengths: list[int] = field(default_factory=lambda: [50, 256, 512])
    bench_repeats: int = 20

    def resolve(self) -> "RunConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.n_layers is None:
            self.n_layers = DEFAULT_LAYERS[self.dataset]
        for name in PATH_FIELDS:
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, str(Path(value).expanduser().resolve()))
        if self.checkpoint is None:
            self.checkpoint = str(Path(self.out) / "model.hmr")
        return self

    @property
    def split_path(self) -> Path:
        return Path(self.out) / "split.hmr"

    def model_config(self, split: DatasetSplit) -> ModelConfig:
        return ModelConfig(vocab_items=split.vocab_items, vocab_attrs=split.vocab_attrs, d=self.d,
                           d_state=self.d_state, n_layers=self.n_layers, L=split.L, conv_width=self.conv_width,
                           use_binding=self.use_binding, use_compression=self.use_compression,
                           bundle_k=self.bundle_k, dropout=self.dropout, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay, eval_k=self.eval_k)


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with flat RunConfig keys")
    common.add_argument("--dataset", choices=DATASETS)
    common.add_argument("--ratings-path", dest="ratings_path")
    common.add_argument("--movies-path", dest="movies_path")
    common.add_argument("--amazon-path", dest="amazon_path")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--layers", type=int, dest="n_layers")
    common.add_argument("--use-binding", type=_bool, dest="use_binding", metavar="BOOL")
    common.add_argument("--use-compression", type=_bool, dest="use_compression", metavar="BOOL")
    common.add_argument("--bundle-k", type=int, dest="bundle_k")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="holomamba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("ingest", parents=[common], help="parse raw files into a cached split")
    sub.add_parser("train", parents=[common], help="train and write checkpoint + metrics log")
    ev = sub.add_parser("eval", parents=[common], help="HR@10 / NDCG@10 of a checkpoint")
    ev.add_argument("--compressed", action="store_true", default=None,
                    help="bundle windows at inference time")
    sub.add_parser("bench", parents=[common], help="latency / memory across modes and lengths")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for name in known:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig(**values).resolve()


def _echo_config(cfg: RunConfig, command: str) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}_config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True))


def _load_split(cfg: RunConfig) -> DatasetSplit:
    if not cfg.split_path.exists():
        raise DataError(f"no cached split at {cfg.split_path}; run `holomamba ingest` first")
    return DatasetSplit.load(cfg.split_path)


def _load_model(cfg: RunConfig, split: DatasetSplit) -> HoloMambaRec:
    if not Path(cfg.checkpoint).exists():
        raise DataError(f"checkpoint {cfg.checkpoint} not found")
    model = HoloMambaRec.load(cfg.checkpoint)
    if (model.config.vocab_items, model.config.vocab_attrs) != (split.vocab_items, split.vocab_attrs):
        raise ConfigError(f"checkpoint vocab ({model.config.vocab_items} items, {model.config.vocab_attrs} attrs) "
                          f"does not match split ({split.vocab_items}, {split.vocab_attrs})")
    return model


def cmd_ingest(cfg: RunConfig) -> dict:
    if cfg.dataset == "movielens":
        if not (cfg.ratings_path and cfg.movies_path):
            raise ConfigError("movielens needs ratings_path and movies_path")
        split, counts = prepare_movielens(cfg.ratings_path, cfg.movies_path, cfg.L)
    elif cfg.dataset == "amazon":
        if not cfg.amazon_path:
            raise ConfigError("amazon needs amazon_path")
        split, counts = prepare_amazon(cfg.amazon_path, cfg.L)
    else:
        split = synthetic_generate(cfg.synthetic_users, cfg.synthetic_cycle, cfg.L, cfg.seed, cfg.synthetic_items)
        counts = split.sidecar()
    _echo_config(cfg, "ingest")
    split.save(cfg.split_path)
    return counts


def cmd_train(cfg: RunConfig) -> dict:
    split = _load_split(cfg)
    model = HoloMambaRec(cfg.model_config(split))
    _echo_config(cfg, "train")
    report = train(model, split, cfg.train_config(), log_path=Path(cfg.out) / "metrics.jsonl",
                   checkpoint_path=cfg.checkpoint)
    return report.final


def cmd_eval(cfg: RunConfig) -> dict:
    split = _load_split(cfg)
    model = _load_model(cfg, split)
    _echo_config(cfg, "eval")
    hr, ndcg = evaluate(model, split, cfg.eval_k, compressed=cfg.compressed)
    record = {"hr10": hr, "ndcg10": ndcg, "compressed": cfg.compressed, "users": split.num_users}
    with open(Path(cfg.out) / "eval.jsonl", "a") as fh:
        fh.write(json.dumps(record) + "\n")
    return record


def cmd_bench(cfg: RunConfig) -> list[dict]:
    split = _load_split(cfg)
    model = _load_model(cfg, split)
    _echo_config(cfg, "bench")
    records = [bench(model, L, mode, repeats=cfg.bench_repeats, seed=cfg.seed)
               for mode in MODES for L in cfg.bench_lengths]
    with open(Path(cfg.out) / "bench.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_run_config(args)
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 3
    if isinstance(result, list):
        for rec in result:
            print(json.dumps(rec))
    else:
        print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
