"""Command-line entry point: synth | train | predict | eval | verify | plot."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import data as D
from .evaluate import evaluate
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import predict, prepare
from .postprocess import PostprocessConfig, read_predictions, write_predictions
from .plot import render_timeline
from .training import NumericalError, TrainConfig, train

log = logging.getLogger("xltal")

EXIT_OK, EXIT_USER, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3


class UserError(Exception):
    pass


@dataclass(frozen=True)
class EvalConfig:
    recall_pooling: str = "group"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "postprocess": PostprocessConfig,
    "eval": EvalConfig,
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    tree = json.loads(json.dumps(tree))
    for item in overrides:
        if "=" not in item:
            raise UserError(f"override {item!r} is not section.key=value")
        path, value = item.split("=", 1)
        parts = path.split(".")
        if len(parts) == 1 and parts[0] == "seed":
            tree["seed"] = _parse_value(value)
            continue
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise UserError(f"unknown config path {path!r}")
        tree.setdefault(parts[0], {})[parts[1]] = _parse_value(value)
    return tree


def resolve_config(config_path: str | None, overrides: list[str]) -> tuple[RunConfig, dict]:
    """Build a RunConfig from an optional JSON file plus overrides.

    Returns the config and the raw (pre-default) tree so callers can tell
    which keys the user set. A top-level ``seed`` feeds both the model and
    training seeds.
    """
    tree = {}
    if config_path:
        tree = json.loads(Path(config_path).read_text())
    tree = apply_overrides(tree, overrides)
    unknown = set(tree) - set(SECTIONS) - {"seed"}
    if unknown:
        raise UserError(f"unknown config sections: {sorted(unknown)}")
    seed = int(tree.get("seed", 0))
    try:
        sections = {name: dict(tree.get(name, {})) for name in SECTIONS}
        sections["model"].setdefault("seed", seed)
        sections["train"].setdefault("seed", seed)
        cfg = RunConfig(
            model=ModelConfig.from_dict(sections["model"]),
            train=TrainConfig.from_dict(sections["train"]),
            postprocess=PostprocessConfig.from_dict(sections["postprocess"]),
            eval=EvalConfig.from_dict(sections["eval"]),
            seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise UserError(str(exc)) from exc
    return cfg, tree


def _load_data(data_dir: str):
    manifest = Path(data_dir) / "manifest.json"
    if not manifest.exists():
        raise UserError(f"no manifest.json in {data_dir}")
    return D.load_dataset(manifest)


# commands ------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        spec = D.SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise UserError(f"invalid synthetic spec: {exc}") from exc
    dataset = D.generate_synthetic(spec)
    try:
        manifest = D.save_dataset(args.out, dataset, spec.num_classes)
    except OSError as exc:
        raise UserError(f"cannot write to {args.out}: {exc}") from exc
    print(f"wrote {len(dataset)} videos to {manifest.parent}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, raw = resolve_config(args.config, args.set)
    dataset = _load_data(args.data)
    if not dataset:
        raise UserError("training needs a non-empty dataset")
    user_model = raw.get("model", {})
    fill = {}
    if "in_channels" not in user_model:
        fill["in_channels"] = dataset[0][0].channels
    if "num_classes" not in user_model:
        fill["num_classes"] = dataset[0][1].num_classes
    if fill:
        cfg = replace(cfg, model=replace(cfg.model, **fill))
    print("resolved config: " + json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr)
    prepared = prepare(dataset, cfg.model.input_len)
    model = Model(cfg.model)
    log_path = args.log or str(args.out) + ".loss.jsonl"

    def report(epoch, rec):
        print(
            f"epoch {epoch:4d}  l_cls {rec['l_cls']:.4f}  l_reg {rec['l_reg']:.4f}  total {rec['total']:.4f}",
            flush=True,
        )

    train(model, prepared, cfg.train, log_path=log_path, on_epoch=report)
    extra = {"postprocess": asdict(cfg.postprocess), "eval": asdict(cfg.eval), "seed": cfg.seed}
    save_checkpoint(args.out, model, extra)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        model, extra = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise UserError(f"cannot load checkpoint: {exc}") from exc
    pp = PostprocessConfig.from_dict(extra.get("postprocess", {}))
    if args.set:
        tree = apply_overrides({"postprocess": asdict(pp)}, args.set)
        pp = PostprocessConfig.from_dict(tree["postprocess"])
    dataset = _load_data(args.data)
    for seq, _ in dataset:
        if seq.channels != model.config.in_channels:
            raise UserError(
                f"{seq.video_id}: {seq.channels} channels but checkpoint expects {model.config.in_channels}"
            )
    prepared = prepare(dataset, model.config.input_len)
    preds = predict(model, [s for s, _ in prepared], pp)
    write_predictions(args.out, preds)
    print(f"wrote predictions for {len(preds)} videos to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = read_predictions(args.predictions)
    _, anns = D.load_annotations(args.annotations)
    for vid in sorted(set(preds) - set(anns)):
        log.warning("prediction for unknown video %s skipped", vid)
        del preds[vid]
    report = evaluate(preds, anns, recall_pooling=args.recall_pooling)
    print(json.dumps(report.to_json(), indent=1))
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    if args.corrupt_gradient:
        with verify.corrupted_gradient():
            results = verify.run_suites(args.level)
    else:
        results = verify.run_suites(args.level)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name:32s} {r.detail}  ({r.seconds:.1f}s)")
    ok = all(r.passed for r in results)
    print("all suites passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_plot(args) -> int:
    preds = read_predictions(args.predictions)
    _, anns = D.load_annotations(args.annotations)
    if args.video not in anns and args.video not in preds:
        raise UserError(f"unknown video {args.video}")
    ann = anns.get(args.video)
    svg = render_timeline(
        args.video,
        ann.instances if ann else [],
        preds.get(args.video, []),
        max_predictions=args.max_predictions,
    )
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xltal", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic planted-action dataset")
    s.add_argument("spec", help="JSON synthetic spec")
    s.add_argument("out", help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="JSON run config")
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    s.add_argument("--log", help="loss log path (default: <out>.loss.jsonl)")
    s.add_argument("data", help="dataset directory with manifest.json")
    s.add_argument("out", help="checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="run inference and write a predictions file")
    s.add_argument("--set", action="append", default=[], metavar="postprocess.KEY=VALUE")
    s.add_argument("checkpoint")
    s.add_argument("data")
    s.add_argument("out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score predictions against annotations")
    s.add_argument("predictions")
    s.add_argument("annotations")
    s.add_argument("--recall-pooling", choices=("group", "video"), default="group")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify", help="run the built-in verification suites")
    s.add_argument("level", nargs="?", choices=("quick", "full"), default="quick")
    s.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("plot", help="render a GT / prediction timeline as SVG")
    s.add_argument("predictions")
    s.add_argument("annotations")
    s.add_argument("video")
    s.add_argument("out")
    s.add_argument("--max-predictions", type=int, default=20)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
