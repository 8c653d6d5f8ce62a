"""Command-line front end.

Subcommands cover the full pipeline: ``fetch`` (structure images from
PubChem), ``build-pairs`` (canonical labeled pairs), ``train``, ``eval``,
``predict``, and ``baseline`` (SSIM or autoencoder similarity).

Options resolve in three layers: built-in defaults, then a ``--config``
file of flat ``key = value`` lines, then explicit flags.  Unknown config
keys are rejected.  Every failure prints a single ``error: ...`` line on
stderr and exits nonzero (2 when a named file is missing).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from .checkpoint import (
    CheckpointData,
    CheckpointError,
    load_checkpoint,
    unpack_model,
)
from .data import (
    DrugRecord,
    GrayImage,
    IngestionError,
    SplitDataset,
    build_pairs,
    fetch_pubchem_png,
    load_image,
    read_interactions,
    read_manifest,
    split,
    write_interactions,
    write_manifest,
)
from .eval import ae_similarity, classify_and_report, ssim_classify
from .network import (
    AutoencoderSpec,
    ConfigError,
    ModelState,
    ShapeError,
    StnSpec,
    TowerSpec,
    init_autoencoder,
    init_model,
)
from .objective import DistanceKind
from .optim import OptimizerKind, OptimizerState
from .training import (
    PairBatch,
    TrainConfig,
    TrainingError,
    pair_distances,
    select_threshold,
    train,
    train_autoencoder,
)

__all__ = ["RunConfig", "CliError", "resolve_config", "main"]

AUTOENCODER_EPOCHS = 10  # fixed training budget for the baseline


class CliError(Exception):
    """User-facing failure; rendered as one `error: ...` line."""

    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass
class RunConfig:
    """Resolved options for one command invocation."""

    image_size: int = 500
    epochs: int = 50
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 5e-5
    metric: str = "euclidean"
    margin: float = 1.0
    use_stn: bool = False
    rotate_eval: bool = False
    split_fraction: float = 0.66
    val_fraction: float = 0.1
    seed: int = 0
    threshold: Optional[float] = None
    conv_filters: Tuple[int, ...] = (64, 128, 128, 256)
    kernel: int = 9
    pool: int = 3
    fc_sizes: Tuple[int, ...] = (256, 128, 20)
    manifest: Optional[str] = None
    interactions: Optional[str] = None
    images: Optional[str] = None
    checkpoint: Optional[str] = None
    report: Optional[str] = None
    out: Optional[str] = None
    cids: Optional[str] = None
    kind: str = "ssim"
    criterion: str = "cosine"
    explicit: Set[str] = field(default_factory=set, repr=False)

    def validate(self) -> None:
        if self.image_size < 1:
            raise CliError(f"image_size must be >= 1, got {self.image_size}")
        if self.epochs < 0:
            raise CliError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise CliError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.margin < 0:
            raise CliError(f"margin must be >= 0, got {self.margin}")
        if not 0.0 < self.split_fraction < 1.0:
            raise CliError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise CliError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        try:
            OptimizerKind(self.optimizer)
        except ValueError:
            choices = ", ".join(k.value for k in OptimizerKind)
            raise CliError(f"unknown optimizer {self.optimizer!r} (choose from {choices})")
        try:
            DistanceKind(self.metric)
        except ValueError:
            choices = ", ".join(k.value for k in DistanceKind)
            raise CliError(f"unknown metric {self.metric!r} (choose from {choices})")
        if self.kind not in ("ssim", "autoencoder"):
            raise CliError(f"unknown baseline kind {self.kind!r} (choose from ssim, autoencoder)")
        if self.criterion not in ("cosine", "bce"):
            raise CliError(f"unknown criterion {self.criterion!r} (choose from cosine, bce)")


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)} - {"explicit"}
_INT_FIELDS = {"image_size", "epochs", "batch_size", "kernel", "pool", "seed"}
_FLOAT_FIELDS = {"lr", "margin", "split_fraction", "val_fraction", "threshold"}
_BOOL_FIELDS = {"use_stn", "rotate_eval"}
_INT_TUPLE_FIELDS = {"conv_filters", "fc_sizes"}


def _convert(name: str, value) -> object:
    if not isinstance(value, str):
        return value
    try:
        if name in _INT_FIELDS:
            return int(value)
        if name in _FLOAT_FIELDS:
            return float(value)
        if name in _INT_TUPLE_FIELDS:
            return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise CliError(f"bad value for {name}: {value!r}")
    if name in _BOOL_FIELDS:
        if value not in ("true", "false"):
            raise CliError(f"bad value for {name}: {value!r} (use true or false)")
        return value == "true"
    return value


def _parse_config_file(path: str) -> Dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such config file: {p}", exit_code=2)
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"bad config line {lineno}: {raw!r}")
        key = key.strip()
        if key not in _FIELD_NAMES:
            raise CliError(f"unknown config key: {key}")
        values[key] = value.strip()
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config-file values, then explicit flags."""
    cfg = RunConfig()
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in _parse_config_file(config_path).items():
            setattr(cfg, key, _convert(key, value))
            cfg.explicit.add(key)
    for name in _FIELD_NAMES:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            setattr(cfg, name, _convert(name, flag_value))
            cfg.explicit.add(name)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(cfg, name) is None:
            raise CliError(f"missing required option --{name.replace('_', '-')}")


def _load_dataset(cfg: RunConfig, seed: int, fraction: float) -> SplitDataset:
    records = read_manifest(cfg.manifest)
    pairs = build_pairs(records, read_interactions(cfg.interactions))
    if not pairs:
        raise CliError("no usable pairs in the interactions file")
    return split(pairs, fraction=fraction, seed=seed)


def _load_images(cfg: RunConfig, size: int) -> Dict[str, GrayImage]:
    images: Dict[str, GrayImage] = {}
    for rec in read_manifest(cfg.manifest):
        img = load_image(rec.image_path)
        if img.height != size or img.width != size:
            raise CliError(
                f"image for {rec.drug_id} is {img.height}x{img.width}, expected {size}x{size}"
            )
        images[rec.drug_id] = img
    return images


def _build_model(cfg: RunConfig) -> ModelState:
    spec = TowerSpec(
        input_size=cfg.image_size,
        conv_filters=cfg.conv_filters,
        kernel=cfg.kernel,
        pool=cfg.pool,
        fc_sizes=cfg.fc_sizes,
    )
    stn_spec = StnSpec() if cfg.use_stn else None
    return init_model(spec, stn_spec, seed=cfg.seed)


def _checkpoint_setting(
    cfg: RunConfig, data: CheckpointData, name: str, parse, default
):
    """Flag value if explicitly set, else the checkpoint's, else the default."""
    if name in cfg.explicit:
        return getattr(cfg, name)
    stored = data.config.get(name)
    if stored is not None:
        return parse(stored)
    return default


def _emit_report(cfg: RunConfig, report) -> None:
    text = report.to_text()
    if cfg.report:
        Path(cfg.report).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.report).write_text(text + "\n", encoding="utf-8")
    print(text)


def _session_factory():
    """Overridable hook so tests can inject a canned HTTP transport."""
    return None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fetch(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "cids", "images")
    cid_list = [c.strip() for c in cfg.cids.split(",") if c.strip()]
    if not cid_list:
        raise CliError("no CIDs given")
    session = _session_factory()
    size = f"{cfg.image_size}x{cfg.image_size}"
    records: List[DrugRecord] = []
    for cid in cid_list:
        path = fetch_pubchem_png(cid, cfg.images, image_size=size, session=session)
        records.append(DrugRecord(drug_id=cid, name=cid, image_path=str(path)))
    if cfg.manifest:
        write_manifest(records, cfg.manifest)
    print(f"fetched={len(records)} images={cfg.images}")
    return 0


def cmd_build_pairs(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "manifest", "interactions", "out")
    records = read_manifest(cfg.manifest)
    pairs = build_pairs(records, read_interactions(cfg.interactions))
    write_interactions([(p.a, p.b, p.label) for p in pairs], cfg.out)
    positives = sum(p.label for p in pairs)
    print(f"pairs={len(pairs)} positives={positives} negatives={len(pairs) - positives}")
    return 0


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "manifest", "interactions", "checkpoint")
    dataset = _load_dataset(cfg, cfg.seed, cfg.split_fraction)
    images = _load_images(cfg, cfg.image_size)
    batch = PairBatch.from_examples(dataset.train, images)
    model = _build_model(cfg)
    optimizer = OptimizerState.create(cfg.optimizer, learning_rate=cfg.lr)
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        margin=cfg.margin,
        metric=DistanceKind(cfg.metric),
        val_fraction=cfg.val_fraction,
    )
    extra = {
        "seed": str(cfg.seed),
        "epochs": str(cfg.epochs),
        "split_fraction": repr(cfg.split_fraction),
    }
    train(
        model,
        optimizer,
        batch,
        train_cfg,
        checkpoint_path=cfg.checkpoint,
        extra_config=extra,
        log=print,
    )
    return 0


def _fresh_threshold(
    model: ModelState,
    train_batch: PairBatch,
    cfg: RunConfig,
    metric: DistanceKind,
    margin: float,
    seed: int,
) -> float:
    """Recreate training's validation holdout and pick its best-F1 threshold."""
    rng = np.random.default_rng(seed)
    n_val = int(len(train_batch) * cfg.val_fraction)
    holdout = rng.permutation(len(train_batch))
    val = train_batch.subset(holdout[:n_val]) if n_val else train_batch
    d = pair_distances(model, val, metric, cfg.batch_size)
    return select_threshold(d, val.labels, margin / 2)


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "checkpoint", "manifest", "interactions")
    data = load_checkpoint(cfg.checkpoint)
    model = unpack_model(data)
    if "image_size" in cfg.explicit and cfg.image_size != model.spec.input_size:
        raise CliError(
            f"checkpoint incompatible: trained at image_size "
            f"{model.spec.input_size}, requested {cfg.image_size}"
        )
    metric = DistanceKind(_checkpoint_setting(cfg, data, "metric", str, cfg.metric))
    margin = _checkpoint_setting(cfg, data, "margin", float, cfg.margin)
    seed = _checkpoint_setting(cfg, data, "seed", int, cfg.seed)
    fraction = _checkpoint_setting(cfg, data, "split_fraction", float, cfg.split_fraction)

    dataset = _load_dataset(cfg, seed, fraction)
    images = _load_images(cfg, model.spec.input_size)
    test_batch = PairBatch.from_examples(dataset.test, images)

    if cfg.threshold is not None:
        tau = cfg.threshold
    elif "threshold" in data.config:
        tau = float(data.config["threshold"])
    else:
        train_batch = PairBatch.from_examples(dataset.train, images)
        tau = _fresh_threshold(model, train_batch, cfg, metric, margin, seed)

    distances = pair_distances(
        model, test_batch, metric, cfg.batch_size, rotate=cfg.rotate_eval
    )
    epochs = int(data.config["epochs"]) if "epochs" in data.config else None
    report = classify_and_report(distances, test_batch.labels, tau, seed=seed, epochs=epochs)
    _emit_report(cfg, report)
    return 0


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "checkpoint")
    for name in (args.image_a, args.image_b):
        if not Path(name).exists():
            raise CliError(f"no such image: {name}", exit_code=2)
    data = load_checkpoint(cfg.checkpoint)
    model = unpack_model(data)
    metric = DistanceKind(_checkpoint_setting(cfg, data, "metric", str, cfg.metric))
    if cfg.threshold is not None:
        tau = cfg.threshold
    elif "threshold" in data.config:
        tau = float(data.config["threshold"])
    else:
        raise CliError(
            "no decision threshold: pass --threshold or use a checkpoint that stores one"
        )
    size = model.spec.input_size
    sides = []
    for name in (args.image_a, args.image_b):
        img = load_image(name)
        if img.height != size or img.width != size:
            raise CliError(f"image {name} is {img.height}x{img.width}, expected {size}x{size}")
        sides.append(img.pixels[None, None, :, :])
    batch = PairBatch(sides[0], sides[1], np.zeros(1, dtype=np.float32))
    d = float(pair_distances(model, batch, metric, batch_size=1)[0])
    verdict = "true" if d >= tau else "false"
    print(f"distance={d:.6f} threshold={tau:.6f} interact={verdict}")
    return 0


def cmd_baseline(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "manifest", "interactions")
    dataset = _load_dataset(cfg, cfg.seed, cfg.split_fraction)
    images = _load_images(cfg, cfg.image_size)
    if cfg.kind == "ssim":
        report = ssim_classify(dataset.test, images)
    else:
        state = init_autoencoder(AutoencoderSpec(), seed=cfg.seed)
        train_ids = sorted({d for p in dataset.train for d in (p.a, p.b)})
        stack = np.stack([images[d].pixels for d in train_ids]).astype(np.float32)
        train_autoencoder(
            state,
            stack[:, None, :, :],
            epochs=AUTOENCODER_EPOCHS,
            batch_size=cfg.batch_size,
            seed=cfg.seed,
            log=print,
        )
        report = ae_similarity(state, dataset.test, images, criterion=cfg.criterion)
    report.seed = cfg.seed
    _emit_report(cfg, report)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value options file")
    p.add_argument("--seed", help="RNG seed for init, shuffling, and splits")
    p.add_argument("--images", help="directory of structure images")
    p.add_argument("--manifest", help="drug manifest CSV")
    p.add_argument("--interactions", help="labeled pair CSV")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--report", help="write the metrics report here")
    p.add_argument("--epochs", help="training epochs")
    p.add_argument("--metric", help="embedding distance: euclidean, manhattan, hellinger, jaccard")
    p.add_argument("--optimizer", help="adam, rmsprop, adadelta, or nadam")
    p.add_argument("--lr", help="learning rate")
    p.add_argument("--margin", help="contrastive margin")
    p.add_argument("--stn", action="store_true", default=None, dest="use_stn",
                   help="prepend a spatial transformer to both branches")
    p.add_argument("--rotate-eval", action="store_true", default=None, dest="rotate_eval",
                   help="rotate test images 90 degrees before evaluating")
    p.add_argument("--threshold", help="decision threshold override")
    p.add_argument("--image-size", dest="image_size", help="square image side length")
    p.add_argument("--batch-size", dest="batch_size", help="mini-batch size")
    p.add_argument("--split-fraction", dest="split_fraction", help="train fraction of pairs")
    p.add_argument("--val-fraction", dest="val_fraction", help="validation fraction of train")
    p.add_argument("--conv-filters", dest="conv_filters", help="comma list, e.g. 64,128,128,256")
    p.add_argument("--kernel", help="conv kernel size")
    p.add_argument("--pool", help="max-pool size")
    p.add_argument("--fc-sizes", dest="fc_sizes", help="comma list, e.g. 256,128,20")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sddi",
        description="Drug interaction prediction from molecular structure images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download structure images from PubChem")
    _add_shared_flags(p)
    p.add_argument("--cids", help="comma-separated PubChem compound ids")

    p = sub.add_parser("build-pairs", help="canonicalize labeled drug pairs")
    _add_shared_flags(p)
    p.add_argument("--out", help="write canonical pairs CSV here")

    p = sub.add_parser("train", help="train the pair model")
    _add_shared_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_shared_flags(p)

    p = sub.add_parser("predict", help="score one image pair")
    _add_shared_flags(p)
    p.add_argument("image_a", help="first structure image")
    p.add_argument("image_b", help="second structure image")

    p = sub.add_parser("baseline", help="run an image-similarity baseline")
    _add_shared_flags(p)
    p.add_argument("--kind", help="ssim or autoencoder")
    p.add_argument("--criterion", help="autoencoder similarity: cosine or bce")

    return parser


_COMMANDS = {
    "fetch": cmd_fetch,
    "build-pairs": cmd_build_pairs,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
}


def _fail(message: str, code: int) -> int:
    print(f"error: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg, args)
    except CliError as exc:
        return _fail(str(exc), exc.exit_code)
    except FileNotFoundError as exc:
        return _fail(f"no such file: {exc.filename or exc}", 2)
    except (
        CheckpointError,
        ConfigError,
        IngestionError,
        ShapeError,
        TrainingError,
        ValueError,
    ) as exc:
        return _fail(str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
