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

import argparse
import logging
import os
import tempfile
import time
from typing import Optional

from flask import Flask, Response, request

from binary_protocol import binary_to_dict, dict_to_binary
from config import PipelineConfig
from core import ModelFormatError, SceneFormatError, SceneRecord, scene_from_dict
from net import HatModel, load_model
from pipeline import infer_scene
from tools import measure_time, summarize_arrays

logger = logging.getLogger("CrowdHat.server")

app = Flask(__name__)

# Served model and the pipeline settings it was trained with
model: Optional[HatModel] = None
config: PipelineConfig = PipelineConfig()


def _binary_response(payload: dict, status: int) -> Response:
    return Response(dict_to_binary(payload), status=status, mimetype='application/octet-stream')


def _error(message: str, status: int) -> Response:
    return _binary_response({"status": "error", "message": message}, status)


def scene_from_payload(data: dict) -> SceneRecord:
    """
    Build the (ground-truth free) scene of an /infer request.

    The payload goes through the same validation and clamping as a scenes
    JSONL line; any points it carries are ignored.

    Raises:
        SceneFormatError: If a field is missing or malformed
    """
    if not isinstance(data, dict):
        raise SceneFormatError(f"request body must be a dict, got {type(data).__name__}")
    if "boxes" not in data:
        raise SceneFormatError("request is missing 'boxes'")
    fields = {k: data.get(k) for k in ("width", "height", "boxes", "proposals")}
    scene, clamped = scene_from_dict({"id": data.get("id", "request"), **fields})
    if clamped:
        logger.warning(f"Clamped {clamped} out-of-frame coordinates in request {scene.id}")
    return scene


def check_compatible(new_model: HatModel, cfg: PipelineConfig) -> None:
    """
    Raises:
        ModelFormatError: If the model was built for other compression settings
    """
    arch, comp = new_model.arch, cfg.compression
    if (arch.C, arch.S, arch.L) != (comp.channels, comp.S, comp.L):
        raise ModelFormatError(
            f"model expects C={arch.C}, S={arch.S}, L={arch.L} but the server compresses to "
            f"C={comp.channels}, S={comp.S}, L={comp.L}")


@app.route('/infer', methods=['POST'])
def infer():
    """
    Inference endpoint.

    Accepts a pickled scene dict and returns the Crowd Hat output pickled.
    """
    if model is None:
        return _error("Service not ready", 503)

    # 1. Deserialize request data
    begin_time = time.perf_counter()
    try:
        scene = scene_from_payload(binary_to_dict(request.data))
    except Exception as e:
        logger.warning(f"Malformed request: {e}")
        return _error(f"malformed request: {e}", 400)
    logger.info(f"Deserialize time = {1000 * (time.perf_counter() - begin_time):.2f} ms")

    # 2. Region-adaptive NMS + decouple-then-align
    try:
        begin_time = time.perf_counter()
        prediction = infer_scene(scene, model, config.compression, config.nms.conf_floor)
        logger.info(f"Inference time = {1000 * (time.perf_counter() - begin_time):.2f} ms "
                    f"({len(scene.boxes)} boxes -> {prediction.n_final})")
        for line in summarize_arrays({"boxes": prediction.boxes, "thresholds": prediction.thresholds}):
            logger.debug(line)

        # 3. Serialize response
        return _binary_response({
            "status": "ok",
            "id": prediction.id,
            "boxes": prediction.boxes,
            "n_hat": prediction.n_hat,
            "n_c": prediction.n_c,
            "n_final": prediction.n_final,
            "thresholds": prediction.thresholds,
        }, 200)
    except Exception as e:
        logger.error(f"Inference error: {e}", exc_info=True)
        return _error(str(e), 500)


@app.route('/update_model', methods=['POST'])
def update_model():
    """
    Swap the served model without restarting the server.

    Accepts a .pt checkpoint written by net.save_model().
    """
    global model

    if 'file' not in request.files:
        return {"status": "error", "message": "No file part"}, 400

    file = request.files['file']
    if file.filename == '':
        return {"status": "error", "message": "No selected file"}, 400

    if not file.filename.endswith('.pt'):
        return {"status": "error", "message": "Only .pt checkpoints are allowed"}, 400

    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, 'uploaded.pt')
        file.save(path)
        try:
            new_model = load_model(path)
            check_compatible(new_model, config)
        except ModelFormatError as e:
            logger.warning(f"Rejected model upload: {e}")
            return {"status": "error", "message": str(e)}, 400
        except Exception as e:
            logger.error(f"Failed to update model: {e}", exc_info=True)
            return {"status": "error", "message": str(e)}, 500

    model = new_model
    logger.info("Model updated successfully!")
    return {"status": "ok", "message": "Model updated successfully"}, 200


@app.route('/health', methods=['GET'])
def health():
    return {"status": "ok", "model_loaded": model is not None}, 200


@measure_time(logger)
def configure(model_path: Optional[str], cfg: PipelineConfig) -> None:
    """Install the pipeline config and (optionally) the initial model."""
    global model, config
    config = cfg
    model = None
    if model_path:
        logger.info(f"Loading model from {model_path}")
        new_model = load_model(model_path)
        check_compatible(new_model, cfg)
        model = new_model


def main(argv=None):
    logging.basicConfig(
        level=logging.INFO,
        format='[%(name)s] [%(asctime)s.%(msecs)03d] [%(levelname)s] %(message)s',
        datefmt='%H:%M:%S')

    parser = argparse.ArgumentParser(description='Crowd Hat inference server')
    parser.add_argument('--model', type=str, default=None,
                        help='Checkpoint written by net.save_model (can also be uploaded later)')
    parser.add_argument('--config', type=str, default=None,
                        help='Pipeline INI file the model was trained with')
    parser.add_argument('--set', dest='overrides', action='append', default=[],
                        help='Config override section.key=value (repeatable)')
    parser.add_argument('--port', type=int, default=50000,
                        help='Server port')
    parser.add_argument('--host', type=str, default='127.0.0.1',
                        help='Server host')
    opt = parser.parse_args(argv)

    logger.info(f"Starting server with config: {opt}")
    configure(opt.model, PipelineConfig.load(opt.config, opt.overrides))

    # Single-threaded for sequential processing
    logger.info(f"Server starting on {opt.host}:{opt.port}")
    app.run(host=opt.host, port=opt.port, threaded=False, debug=False)


if __name__ == "__main__":
    main()
