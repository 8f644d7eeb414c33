import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from dualsearch import shared
from dualsearch.checkpoint import load_checkpoint
from dualsearch.contrastive import build_extractor
from dualsearch.dataclasses.metric_report import MetricReport
from dualsearch.dataclasses.run_config import COMMANDS, RunConfig, load_run_config
from dualsearch.dataset.natural_pool import load_natural_pool
from dualsearch.dataset.pair_dataset import load_exposure_pair, load_manifest
from dualsearch.errors import ArtifactError, ConfigError, DualSearchError, MissingFile
from dualsearch.fusion_net import fuse_pair
from dualsearch.losses import LossParams
from dualsearch.metrics.report import evaluate_report
from dualsearch.train_fusion import FINAL_WEIGHTS, run_train
from dualsearch.train_search import ARCHITECTURE_FILE, LOSS_WEIGHTS_FILE, run_search, write_search_artifacts
from dualsearch.utils.image_utils import encode_png
from helpers.mytqdm import mytqdm
from preload import preload, set_log_level

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
RUN_CONFIG_FILE = "run_config.json"
FUSED_DIR = "fused"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"


def _output(cfg: RunConfig, *parts: str) -> str:
    return os.path.join(cfg.paths.output_dir, *parts)


def _read_json(path: str, what: str) -> dict:
    if not path or not os.path.exists(path):
        raise ArtifactError(f"Missing {what}: {path or '(not configured)'}")
    try:
        with open(path, "r", encoding="utf-8") as openfile:
            data = json.load(openfile)
    except json.JSONDecodeError as e:
        raise ArtifactError(f"Unable to parse {what} {path}: {e}") from e
    if not isinstance(data, dict):
        raise ArtifactError(f"{what} {path} must hold a JSON object")
    return data


def _extractor(cfg: RunConfig):
    return build_extractor(cfg.extractor, cfg.paths.extractor_weights or "")


def cmd_search(cfg: RunConfig) -> int:
    cfg.require("train_manifest")
    search = cfg.resolved_search()
    if search.constraint in ("hybrid", "natural_only"):
        cfg.require("natural_manifest")
        try:
            pool = load_natural_pool(cfg.paths.natural_manifest, search.seed)
        except MissingFile as e:
            raise ConfigError(f"Natural pool unavailable: {e}") from e
    else:
        pool = None
    manifest = load_manifest(cfg.paths.train_manifest, "train")
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    cfg.save(_output(cfg, RUN_CONFIG_FILE))
    result = run_search(search, manifest, pool, cfg.network, cfg.extractor, _extractor(cfg),
                        output_dir=cfg.paths.output_dir, run_config=cfg.model_dump(),
                        deterministic=cfg.deterministic)
    write_search_artifacts(result, cfg.paths.output_dir)
    logger.info(result.msg)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    cfg.require("train_manifest")
    architecture = _read_json(cfg.paths.architecture or _output(cfg, ARCHITECTURE_FILE), "architecture")
    weights = _read_json(cfg.paths.loss_weights or _output(cfg, LOSS_WEIGHTS_FILE), "loss weights")
    try:
        loss = LossParams.from_dict(weights)
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"Malformed loss weights: {e!r}") from e
    manifest = load_manifest(cfg.paths.train_manifest, "train")
    needs_extractor = any(c.family.value == "PERC" for c in loss.candidates)
    extractor = _extractor(cfg) if needs_extractor else None
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    cfg.save(_output(cfg, RUN_CONFIG_FILE))
    run_train(cfg.resolved_train(), architecture, loss, manifest, extractor, cfg.paths.output_dir,
              run_config=cfg.model_dump(), deterministic=cfg.deterministic)
    return EXIT_OK


def _fused_dir(cfg: RunConfig) -> str:
    return cfg.paths.fused_dir or _output(cfg, FUSED_DIR)


def cmd_fuse(cfg: RunConfig) -> int:
    cfg.require("test_manifest")
    checkpoint = cfg.paths.checkpoint or _output(cfg, FINAL_WEIGHTS)
    try:
        model, _ = load_checkpoint(checkpoint)
    except ArtifactError as e:
        logger.error("%s", e)
        return EXIT_RUNTIME
    model = model.to(shared.get_device())
    manifest = load_manifest(cfg.paths.test_manifest, "test")
    fused_dir = _fused_dir(cfg)
    for entry in mytqdm(list(manifest), desc="Fusing", disable=not shared.show_progress):
        pair = load_exposure_pair(entry)
        encode_png(fuse_pair(model, pair), os.path.join(fused_dir, f"{entry.id}.png"))
    logger.info("Fused %d pair(s) into %s", len(manifest), fused_dir)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    cfg.require("test_manifest")
    fused_dir = _fused_dir(cfg)
    if not os.path.isdir(fused_dir) or not any(name.endswith(".png") for name in os.listdir(fused_dir)):
        logger.error("No fused images in %s", fused_dir)
        return EXIT_RUNTIME
    manifest = load_manifest(cfg.paths.test_manifest, "test")
    report: MetricReport = evaluate_report(fused_dir, manifest)
    report.write_json(_output(cfg, REPORT_JSON))
    report.write_csv(_output(cfg, REPORT_CSV))
    for name, value in report.aggregate.items():
        logger.info("%s: %.4f", name, value)
    if report.failed_all:
        logger.error("Every image failed evaluation")
        return EXIT_RUNTIME
    return EXIT_OK


HANDLERS = {"search": cmd_search, "train": cmd_train, "fuse": cmd_fuse, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualsearch", description="Dual search for multi-exposure fusion.",
                                     allow_abbrev=False)
    parser.add_argument("command", choices=COMMANDS)
    preload(parser)
    return parser


def split_overrides(extra: List[str]) -> List[str]:
    overrides = []
    for item in extra:
        if not item.startswith("--") or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"Unrecognized argument '{item}'")
        overrides.append(item)
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    set_log_level(args.log_level)
    shared.show_progress = not args.no_progress
    if args.force_cpu:
        shared.force_cpu = True
    try:
        overrides = split_overrides(extra)
        if args.seed is not None:
            overrides.append(f"--seed={args.seed}")
        cfg = load_run_config(args.command, args.config, overrides)
        return HANDLERS[args.command](cfg)
    except (ConfigError, ArtifactError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except (DualSearchError, RuntimeError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
