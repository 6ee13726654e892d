"""``lczmap`` command line: the whole pipeline as subcommands.

Every subcommand accepts ``--config``, ``--seed``, ``--deterministic``,
``--threads`` and ``--out``. Settings resolve as command-line flag, then
config file, then built-in default; the resolved configuration is logged
as one JSON line before any work starts.

Exit codes: 0 success, 1 data or runtime error, 2 usage or config error.
Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from ._io import atomic_write_text, dump_json
from .errors import ConfigError, DatasetFormatError, LczError
from .evaluation import classify_map, report, save_map
from .forest import ForestParams, RandomForest, train_rf
from .nn import gradcheck as gc
from .nn.model import Mscnn, MscnnConfig
from .nn.serialize import MAGIC as NN_MAGIC
from .nn.serialize import load_model, model_from_bytes, save_model
from .nn.train import TrainConfig, train_mscnn
from .raster import compute_ndvi, load_raster, map_point_to_pixel, save_raster
from .sampling import (
    FLAGS,
    LabeledPoint,
    RuleConfig,
    augment_rebalance,
    build_dataset,
    load_dataset,
    read_points_csv,
    rule_assist_label,
    save_dataset,
    stratified_split,
    summarize_site,
    write_points_csv,
)
from .synth import ScenarioSpec, generate_dataset, generate_scene
from .transfer import attach_heads, train_transfer

log = logging.getLogger("lczmap")

GRADCHECK_TOLERANCE = 1e-5

# sections whose keys are plain values rather than a module dataclass
_PLAIN_SECTIONS = {
    "sampling": {
        "patch_size": 32,
        "ratios": [0.7, 0.15, 0.15],
        "target_per_class": None,
        "nir_band": 3,
        "red_band": 2,
        "n_per_class": None,
    },
    "transfer": {"freeze_through": None, "hidden": 128},
    "map": {"cell_size_m": 100.0},
}

# keys owned by the top level (seed) or by the input data (model shape)
_RESERVED = {
    "scenario": {"seed"},
    "train": {"seed"},
    "model": {"in_channels", "input_size"},
}

_TYPED_SECTIONS = {
    "scenario": ScenarioSpec,
    "train": TrainConfig,
    "rules": RuleConfig,
    "forest": ForestParams,
    "model": MscnnConfig,
}


def _dataclass_defaults(cls, skip) -> dict:
    inst = cls()
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        v = getattr(inst, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    d: dict[str, Any] = {"seed": 0, "deterministic": False, "threads": 1}
    for name, cls in _TYPED_SECTIONS.items():
        d[name] = _dataclass_defaults(cls, _RESERVED.get(name, set()))
    for name, section in _PLAIN_SECTIONS.items():
        d[name] = dict(section)
    return d


def _merge(base: dict, update: Mapping, where: str) -> dict:
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    """Fully resolved settings of one run."""

    raw: dict = field(default_factory=default_config)

    @classmethod
    def resolve(cls, file_values: Optional[Mapping] = None, overrides: Optional[Mapping] = None) -> "RunConfig":
        """Defaults, then the config file, then dotted ``overrides`` such as ``train.max_epochs``."""
        raw = default_config()
        if file_values:
            raw = _merge(raw, file_values, "")
        for dotted, value in (overrides or {}).items():
            nested: dict = {}
            node = nested
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
            raw = _merge(raw, nested, "")
        run = cls(raw)
        run.validate()
        return run

    def validate(self) -> None:
        if not isinstance(self.raw["seed"], int) or self.raw["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if int(self.raw["threads"]) < 1:
            raise ConfigError("threads must be >= 1")
        for name in _TYPED_SECTIONS:
            try:
                getattr(self, name)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name} settings: {exc}") from exc
        ratios = self.raw["sampling"]["ratios"]
        if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("sampling.ratios must be three non-negative numbers summing to 1")

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def deterministic(self) -> bool:
        return bool(self.raw["deterministic"])

    @property
    def n_jobs(self) -> int:
        return 1 if self.deterministic else int(self.raw["threads"])

    @property
    def scenario(self) -> ScenarioSpec:
        return ScenarioSpec.from_dict({**self.raw["scenario"], "seed": self.seed})

    @property
    def train(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.raw["train"], "seed": self.seed})

    @property
    def rules(self) -> RuleConfig:
        return RuleConfig.from_dict(self.raw["rules"])

    @property
    def forest(self) -> ForestParams:
        return ForestParams.from_dict(self.raw["forest"])

    @property
    def model(self) -> MscnnConfig:
        return MscnnConfig.from_dict(self.raw["model"])

    def model_for(self, n_channels: int, patch_size: int) -> MscnnConfig:
        return MscnnConfig.from_dict({**self.raw["model"], "in_channels": n_channels, "input_size": patch_size})

    @property
    def sampling(self) -> dict:
        return self.raw["sampling"]

    @property
    def transfer(self) -> dict:
        return self.raw["transfer"]

    @property
    def map(self) -> dict:
        return self.raw["map"]

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))


# -- argument parsing ----------------------------------------------------------


def _override(p: argparse.ArgumentParser, flag: str, key: str, help: str, **kw) -> None:
    """Add a flag that overrides the config key ``key`` when given."""
    kw.setdefault("metavar", flag.lstrip("-").upper().replace("-", "_"))
    p.add_argument(flag, dest="cfg:" + key, default=argparse.SUPPRESS, help=f"{help} [config: {key}]", **kw)


def _common(p: argparse.ArgumentParser, out_help: str, out_required: bool = True) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--config", type=Path, help="JSON run configuration")
    _override(g, "--seed", "seed", "random seed (unsigned integer)", type=int)
    g.add_argument("--deterministic", dest="cfg:deterministic", action="store_const", const=True,
                   default=argparse.SUPPRESS, help="force sequential reference paths [config: deterministic]")
    _override(g, "--threads", "threads", "worker threads where a stage supports them", type=int)
    g.add_argument("--out", type=Path, required=out_required, help=out_help)
    g.add_argument("--quiet", action="store_true", help="only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lczmap", description="Local Climate Zone mapping pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic scene (and optionally a dataset)")
    _common(p, "output directory")
    _override(p, "--scenario", "scenario.scenario", "scenario kind", choices=("means", "texture", "shifted"))
    _override(p, "--classes", "scenario.classes", "classes to place, e.g. 1 2 A D", nargs="+")
    _override(p, "--width", "scenario.width", "scene width in pixels", type=int)
    _override(p, "--height", "scenario.height", "scene height in pixels", type=int)
    _override(p, "--blob-min", "scenario.blob_min", "smallest blob side in pixels", type=int)
    _override(p, "--blob-max", "scenario.blob_max", "largest blob side in pixels", type=int)
    _override(p, "--noise-sigma", "scenario.noise_sigma", "band noise standard deviation", type=float)
    _override(p, "--n-per-class", "sampling.n_per_class", "also write dataset.lcz1 with this many patches per class", type=int)

    p = sub.add_parser("ndvi", help="NDVI layer from a band stack")
    _common(p, "output raster header (.json)")
    p.add_argument("--raster", type=Path, required=True, help="input raster header")
    _override(p, "--nir", "sampling.nir_band", "NIR band index", type=int)
    _override(p, "--red", "sampling.red_band", "red band index", type=int)

    p = sub.add_parser("label-assist", help="propose labels for points from the guide layers")
    _common(p, "output points CSV")
    p.add_argument("--layers", type=Path, required=True,
                   help="directory with basemap/height/building_fraction/impervious/water rasters (tree and flag layers optional)")
    p.add_argument("--points", type=Path, required=True, help="candidate points CSV")
    p.add_argument("--rules", type=Path, help="rule thresholds JSON (same keys as the rules config section)")
    _override(p, "--patch-size", "sampling.patch_size", "summary window size in pixels", type=int)

    p = sub.add_parser("sample", help="cut labelled patches into an LCZ1 dataset")
    _common(p, "output dataset (.lcz1)")
    p.add_argument("--raster", type=Path, required=True, help="input raster header")
    p.add_argument("--points", type=Path, required=True, help="labelled points CSV")
    _override(p, "--patch-size", "sampling.patch_size", "patch size in pixels", type=int)

    p = sub.add_parser("augment", help="oversample minority classes with dihedral copies")
    _common(p, "output dataset (.lcz1)")
    p.add_argument("--dataset", type=Path, required=True, help="input dataset")
    _override(p, "--target", "sampling.target_per_class", "per-class target count (default: the largest class)", type=int)

    p = sub.add_parser("split", help="stratified train/val/test tagging")
    _common(p, "output dataset (.lcz1)")
    p.add_argument("--dataset", type=Path, required=True, help="input dataset")
    _override(p, "--ratios", "sampling.ratios", "train, val and test fractions", type=float, nargs=3)

    p = sub.add_parser("train-rf", help="fit the random-forest baseline")
    _common(p, "output forest (.json)")
    p.add_argument("--dataset", type=Path, required=True, help="training dataset (train split if tagged)")
    _override(p, "--n-trees", "forest.n_trees", "number of trees", type=int)
    _override(p, "--max-depth", "forest.max_depth", "maximum tree depth", type=int)
    _override(p, "--mtry", "forest.mtry", "features tried per split", type=int)

    for name, text in (("train-cnn", "train the multi-scale CNN from scratch"),
                       ("pretrain", "pretrain a backbone on a source-domain dataset")):
        p = sub.add_parser(name, help=text)
        _common(p, "output model (.lcznn); the history goes to <out>.history.json")
        p.add_argument("--dataset", type=Path, required=True, help="dataset with train and val splits")
        _train_overrides(p)

    p = sub.add_parser("transfer", help="new dense head on a pretrained backbone")
    _common(p, "output model (.lcznn); the history goes to <out>.history.json")
    p.add_argument("--backbone", type=Path, required=True, help="pretrained model")
    p.add_argument("--dataset", type=Path, required=True, help="target dataset with train and val splits")
    _override(p, "--freeze-through", "transfer.freeze_through",
              "freeze layers 0..N (0 multi-scale, 1-5 blocks, 6-7 dense; -1 none; default: whole backbone)", type=int)
    _override(p, "--hidden", "transfer.hidden", "width of the new hidden dense layer", type=int)
    _train_overrides(p)

    p = sub.add_parser("eval", help="metrics report on the test split")
    _common(p, "output report (.json)")
    p.add_argument("--model", type=Path, required=True, help="forest (.json) or CNN (.lcznn)")
    p.add_argument("--dataset", type=Path, required=True, help="dataset (test split if tagged)")

    p = sub.add_parser("map", help="classify a raster into an LCZ map")
    _common(p, "output map header (.json); palette goes to <stem>.palette.json")
    p.add_argument("--model", type=Path, required=True, help="forest (.json) or CNN (.lcznn)")
    p.add_argument("--raster", type=Path, required=True, help="input band stack header")
    _override(p, "--cell-size", "map.cell_size_m", "output cell size in metres", type=float)
    _override(p, "--patch-size", "sampling.patch_size", "patch size in pixels", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward passes")
    _common(p, "optional JSON results file", out_required=False)
    p.add_argument("--component", default="all", choices=(*gc.COMPONENTS, "all"), help="component to check")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step h")
    return parser


def _train_overrides(p: argparse.ArgumentParser) -> None:
    _override(p, "--epochs", "train.max_epochs", "maximum epochs", type=int)
    _override(p, "--batch-size", "train.batch_size", "minibatch size", type=int)
    _override(p, "--lr", "train.learning_rate", "initial learning rate", type=float)
    _override(p, "--decay", "train.decay", "learning-rate decay", type=float)
    _override(p, "--patience", "train.early_stop_patience", "early-stopping patience in epochs", type=int)
    p.add_argument("--no-early-stopping", dest="cfg:train.early_stopping", action="store_const", const=False,
                   default=argparse.SUPPRESS, help="train for the full epoch budget [config: train.early_stopping]")


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = {}
    if getattr(args, "config", None) is not None:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    return RunConfig.resolve(file_values, overrides)


# -- commands ------------------------------------------------------------------


def load_any_model(path: Path):
    raw = Path(path).read_bytes()
    if raw.startswith(NN_MAGIC):
        return model_from_bytes(raw)
    try:
        return RandomForest.from_dict(json.loads(raw))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: neither an LCZNN nor an LCZRF model") from exc


def _train_val(path: Path):
    ds = load_dataset(path)
    train, val = ds.split("train"), ds.split("val")
    if len(train) == 0 or len(val) == 0:
        raise DatasetFormatError(f"{path}: needs non-empty train and val splits (run `lczmap split`)")
    return train, val


def _training_part(ds):
    train = ds.split("train")
    return train if len(train) else ds


def cmd_synth(args, run: RunConfig) -> None:
    spec = run.scenario
    scene = generate_scene(spec)
    scene.save(args.out)
    log.info("scene %dx%d with %d blobs and %d labelled points", spec.width, spec.height,
             len(scene.blobs), len(scene.points))
    n = run.sampling["n_per_class"]
    if n:
        ds = generate_dataset(spec, int(n))
        save_dataset(ds, Path(args.out) / "dataset.lcz1")
        log.info("dataset of %d patches", len(ds))


def cmd_ndvi(args, run: RunConfig) -> None:
    grid = load_raster(args.raster)
    save_raster(compute_ndvi(grid, run.sampling["nir_band"], run.sampling["red_band"]), args.out)


def _optional_raster(path: Path):
    return load_raster(path) if path.exists() else None


def cmd_label_assist(args, run: RunConfig) -> None:
    d = Path(args.layers)
    basemap = load_raster(d / "basemap.json")
    ndvi = compute_ndvi(basemap, run.sampling["nir_band"], run.sampling["red_band"])
    layers = {name: load_raster(d / f"{name}.json") for name in ("height", "building_fraction", "impervious", "water")}
    flags = {name: g for name in FLAGS if (g := _optional_raster(d / f"{name}.json")) is not None}
    rules = RuleConfig.from_json(args.rules) if args.rules else run.rules
    size = int(run.sampling["patch_size"])
    out, agree, skipped = [], 0, 0
    points = read_points_csv(args.points)
    for p in points:
        try:
            center = map_point_to_pixel(basemap, p.x, p.y)
            site = summarize_site(basemap, ndvi, layers["height"], layers["building_fraction"],
                                  layers["impervious"], layers["water"], center, size,
                                  tree=_optional_raster(d / "tree.json"), flag_layers=flags)
        except LczError as exc:
            skipped += 1
            log.warning("skipping point (%s, %s): %s", p.x, p.y, exc)
            continue
        cls, rule = rule_assist_label(site, rules)
        agree += int(cls == p.label)
        out.append(LabeledPoint(p.x, p.y, cls, f"rule:{rule}"))
    write_points_csv(out, args.out)
    log.info("labelled %d points (%d skipped); %d agree with the input labels", len(out), skipped, agree)


def cmd_sample(args, run: RunConfig) -> None:
    grid = load_raster(args.raster)
    ds, skipped = build_dataset(grid, read_points_csv(args.points), int(run.sampling["patch_size"]))
    save_dataset(ds, args.out)
    log.info("%d patches, %d points skipped", len(ds), len(skipped))


def cmd_augment(args, run: RunConfig) -> None:
    ds = load_dataset(args.dataset)
    target = run.sampling["target_per_class"] or int(ds.histogram().max())
    save_dataset(augment_rebalance(ds, int(target), run.seed), args.out)


def cmd_split(args, run: RunConfig) -> None:
    ds = load_dataset(args.dataset)
    save_dataset(stratified_split(ds, tuple(run.sampling["ratios"]), run.seed), args.out)


def cmd_train_rf(args, run: RunConfig) -> None:
    train = _training_part(load_dataset(args.dataset))
    forest = train_rf(train, run.forest, seed=run.seed, n_jobs=run.n_jobs)
    forest.save(args.out)


def _save_trained(model, history, out: Path) -> None:
    save_model(model, out)
    atomic_write_text(Path(str(out) + ".history.json"), dump_json(history.to_dict()))


def cmd_train_cnn(args, run: RunConfig) -> None:
    train, val = _train_val(args.dataset)
    model = Mscnn(run.model_for(train.n_channels, train.patch_size), seed=run.seed)
    model, history = train_mscnn(model, train, val, run.train)
    _save_trained(model, history, args.out)


def cmd_transfer(args, run: RunConfig) -> None:
    backbone = load_model(args.backbone)
    train, val = _train_val(args.dataset)
    freeze = run.transfer["freeze_through"]
    if freeze is None:
        freeze = backbone.config.n_blocks
    model = attach_heads(backbone, int(freeze), hidden=int(run.transfer["hidden"]), seed=run.seed)
    frozen_before = model.checksum(model.frozen_names())
    model, history = train_transfer(model, train, val, run.train)
    if model.checksum(model.frozen_names()) != frozen_before:
        raise RuntimeError("frozen parameters changed during transfer training")
    _save_trained(model, history, args.out)


def cmd_eval(args, run: RunConfig) -> None:
    rep = report(load_any_model(args.model), load_dataset(args.dataset))
    rep.save(args.out)
    log.info("OA %.4f kappa %.4f macro-F1 %.4f", rep.overall_accuracy, rep.kappa, rep.macro_f1)


def cmd_map(args, run: RunConfig) -> None:
    model = load_any_model(args.model)
    grid = classify_map(model, load_raster(args.raster), float(run.map["cell_size_m"]),
                        patch_size=int(run.sampling["patch_size"]))
    save_map(grid, args.out)


def cmd_gradcheck(args, run: RunConfig) -> int:
    results = gc.gradient_check(args.component, h=args.step, seed=run.seed)
    ok = True
    for name, (err, secs) in results.items():
        passed = err < GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{name:<11} max_rel_error {err:.3e}  {secs:6.2f}s  {'PASS' if passed else 'FAIL'}")
    if args.out is not None:
        atomic_write_text(args.out, dump_json(
            {name: {"max_rel_error": err, "seconds": secs} for name, (err, secs) in results.items()}
        ))
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "ndvi": cmd_ndvi,
    "label-assist": cmd_label_assist,
    "sample": cmd_sample,
    "augment": cmd_augment,
    "split": cmd_split,
    "train-rf": cmd_train_rf,
    "train-cnn": cmd_train_cnn,
    "pretrain": cmd_train_cnn,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "map": cmd_map,
    "gradcheck": cmd_gradcheck,
}


def _error_line(kind: str, exc: BaseException) -> None:
    print(json.dumps({"status": "error", "kind": kind, "type": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        run = run_config_from_args(args)
    except ConfigError as exc:
        _error_line("usage", exc)
        return 2
    log.info("resolved config %s", run.to_json())
    try:
        rc = COMMANDS[args.command](args, run)
    except ConfigError as exc:
        _error_line("usage", exc)
        return 2
    except (LczError, OSError, ValueError, RuntimeError) as exc:
        _error_line("data", exc)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
