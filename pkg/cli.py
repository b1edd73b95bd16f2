# Copyright (c) 2025, Crowd Hat Contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Command line entry point `crowd-hat`.

Each stage of the pipeline is its own subcommand reading and writing files,
so the stages can be rerun one at a time; `pipeline` runs them all.

Exit codes: 0 on success, 2 on usage or configuration errors, 1 when a
stage fails.
"""

import argparse
import dataclasses
import logging
import os
import sys
from typing import List, Optional

from compress import dump_features
from config import PipelineConfig
from core import ConfigError, CrowdHatError, LoadStats, StageError, load_scenes, save_scenes
from net import load_model, save_model
from pipeline import (build_train_samples, compress_scenes, evaluate_predictions, infer_scenes,
                      load_predictions, load_train_samples, run_pipeline, run_sweep, save_predictions,
                      train_model, write_features, write_loss_curve, write_metrics_csv,
                      write_train_samples)
from synth import SynthConfig, simulate_dataset

logger = logging.getLogger("CrowdHat.cli")


def _load_config(opt) -> PipelineConfig:
    overrides = list(opt.overrides)
    for f in dataclasses.fields(SynthConfig):
        value = getattr(opt, f"synth_{f.name}", None)
        if value is not None:
            overrides.append(f"synth.{f.name}={value}")
    if getattr(opt, "workspace", None):
        overrides.append(f"paths.workspace={opt.workspace}")
    return PipelineConfig.load(opt.config, overrides)


def _scenes(path: str):
    stats = LoadStats()
    scenes = load_scenes(path, stats)
    logger.info(f"Loaded {stats.scenes} scenes from {path}")
    return scenes


def cmd_synth(opt, config: PipelineConfig) -> None:
    scenes = simulate_dataset(config.synth)
    save_scenes(scenes, opt.out)
    logger.info(f"Wrote {len(scenes)} scenes to {opt.out}")


def cmd_compress(opt, config: PipelineConfig) -> None:
    write_features(compress_scenes(_scenes(opt.scenes), config.compression, opt.progress), opt.out)


def cmd_dump_features(opt, config: PipelineConfig) -> None:
    scenes = [s for s in _scenes(opt.scenes) if s.id == opt.scene_id]
    if not scenes:
        raise CrowdHatError(f"no scene with id '{opt.scene_id}' in {opt.scenes}")
    features = compress_scenes(scenes, config.compression)[opt.scene_id]
    dump_features(features, opt.out)


def cmd_search(opt, config: PipelineConfig) -> None:
    samples = build_train_samples(_scenes(opt.scenes), config, progress=opt.progress)
    write_train_samples(samples, opt.out)
    logger.info(f"Wrote {len(samples)} training samples to {opt.out}")


def cmd_train(opt, config: PipelineConfig) -> None:
    model, curve = train_model(load_train_samples(opt.samples), config, opt.progress)
    save_model(model, opt.out)
    if opt.curve:
        write_loss_curve(curve, opt.curve)
    logger.info(f"Saved model to {opt.out}" + (f" (final loss {curve[-1]:.6f})" if curve else ""))


def cmd_infer(opt, config: PipelineConfig) -> None:
    model = load_model(opt.model)
    predictions = infer_scenes(_scenes(opt.scenes), model, config.compression, config.nms.conf_floor,
                               opt.progress)
    save_predictions(predictions, opt.out)
    logger.info(f"Wrote {len(predictions)} predictions to {opt.out}")


def cmd_eval(opt, config: PipelineConfig) -> None:
    result = evaluate_predictions(load_predictions(opt.predictions), _scenes(opt.scenes),
                                  config.nms.match_criterion())
    for metric, value in result.items():
        print(f"{metric:<10} {value:.4f}")
    if opt.out:
        write_metrics_csv([("predictions", m, "all", v) for m, v in result.items()], opt.out)


def cmd_pipeline(opt, config: PipelineConfig) -> None:
    summary = run_pipeline(config, opt.progress)
    for split, methods in sorted(summary["metrics"].items()):
        print(f"[{split}]")
        for method, values in methods.items():
            cells = "  ".join(f"{k}={v:.4f}" for k, v in sorted(values.items()))
            print(f"  {method:<18} {cells}")
    print(f"best fixed threshold {summary['best_fixed_threshold']:.2f}, "
          f"{summary['parameters']} parameters")


def cmd_sweep(opt, config: PipelineConfig) -> None:
    try:
        values = [int(v) for v in opt.values.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"--values must be comma-separated integers: {e}") from e
    for parameter, value, metric, metric_value in run_sweep(config, opt.param, values, opt.progress):
        print(f"{parameter}={value:<5} {metric:<14} {metric_value:.4f}")


def cmd_serve(opt, config: PipelineConfig) -> None:
    import server
    server.configure(opt.model, config)
    server.app.run(host=opt.host, port=opt.port, threaded=False, debug=False)


STAGES = {
    "synth": (cmd_synth, "out"),
    "compress": (cmd_compress, "out"),
    "dump-features": (cmd_dump_features, "out"),
    "search": (cmd_search, "out"),
    "train": (cmd_train, "out"),
    "infer": (cmd_infer, "out"),
    "eval": (cmd_eval, "predictions"),
    "pipeline": (cmd_pipeline, "workspace"),
    "sweep": (cmd_sweep, "workspace"),
    "serve": (cmd_serve, "model"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='Pipeline INI file')
    common.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='SECTION.KEY=VALUE', help='Config override (repeatable)')
    common.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--no-progress', dest='progress', action='store_false',
                        help='Disable progress bars')

    parser = argparse.ArgumentParser(prog='crowd-hat', description='Crowd Hat post-processing pipeline')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='Simulate a synthetic crowd benchmark')
    p.add_argument('--out', required=True, help='Output scenes JSONL')
    for f in dataclasses.fields(SynthConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"synth_{f.name}", default=None,
                       help=f"synth.{f.name} (default {f.default})")

    p = sub.add_parser('compress', parents=[common], help='Compress detector outputs into feature files')
    p.add_argument('--scenes', required=True)
    p.add_argument('--out', required=True, help='Output directory of <id>.bin files')

    p = sub.add_parser('dump-features', parents=[common], help='Write one scene\'s feature tensors as CSV')
    p.add_argument('--scenes', required=True)
    p.add_argument('--scene-id', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('search', parents=[common], help='Search per-region NMS threshold labels')
    p.add_argument('--scenes', required=True)
    p.add_argument('--out', required=True, help='Output directory of <id>.pkl training samples')

    p = sub.add_parser('train', parents=[common], help='Train the Hat network on saved samples')
    p.add_argument('--samples', required=True)
    p.add_argument('--out', required=True, help='Output checkpoint (.pt)')
    p.add_argument('--curve', default=None, help='Loss curve CSV')

    p = sub.add_parser('infer', parents=[common], help='Region-adaptive NMS + count alignment')
    p.add_argument('--scenes', required=True)
    p.add_argument('--model', required=True)
    p.add_argument('--out', required=True, help='Output predictions JSONL')

    p = sub.add_parser('eval', parents=[common], help='Score predictions against ground truth')
    p.add_argument('--predictions', required=True)
    p.add_argument('--scenes', required=True)
    p.add_argument('--out', default=None, help='Metrics CSV')

    p = sub.add_parser('pipeline', parents=[common], help='Run every stage end to end')
    p.add_argument('--workspace', default=None)

    p = sub.add_parser('sweep', parents=[common], help='Sensitivity sweep over S, L or K')
    p.add_argument('--workspace', default=None)
    p.add_argument('--param', required=True, choices=['S', 'L', 'K'])
    p.add_argument('--values', required=True, help='Comma-separated values, e.g. 2,4,8')

    p = sub.add_parser('serve', parents=[common], help='Serve a model over HTTP')
    p.add_argument('--model', default=None)
    p.add_argument('--host', default='127.0.0.1')
    p.add_argument('--port', type=int, default=50000)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        opt = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, opt.log_level),
        format='[%(name)s] [%(asctime)s.%(msecs)03d] [%(levelname)s] %(message)s',
        datefmt='%H:%M:%S')
    opt.progress = opt.progress and sys.stderr.isatty()

    try:
        config = _load_config(opt)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2

    handler, artifact_arg = STAGES[opt.command]
    artifact = getattr(opt, artifact_arg, None) or config.paths.workspace
    try:
        try:
            handler(opt, config)
        except (StageError, ConfigError):
            raise
        except Exception as e:
            raise StageError(opt.command, os.fspath(artifact), e) from e
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except StageError as e:
        logger.error(str(e), exc_info=opt.log_level == 'DEBUG')
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
