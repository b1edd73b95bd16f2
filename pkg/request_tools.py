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
import time
from typing import Any, Dict, Optional

import requests

from binary_protocol import binary_to_dict, dict_to_binary
from core import SceneRecord, load_scenes

logger = logging.getLogger("CrowdHat.client")


def scene_to_payload(scene: SceneRecord) -> Dict[str, Any]:
    """Request body of a scene; point annotations are never sent."""
    return {
        "id": scene.id,
        "width": scene.width,
        "height": scene.height,
        "boxes": scene.box_array,
        "proposals": scene.proposal_array,
    }


def _describe_failure(resp: requests.Response) -> str:
    """Status code plus the server's error message, if the body carries one."""
    try:
        body = binary_to_dict(resp.content)
    except Exception:
        body = None
    if isinstance(body, dict) and "message" in body:
        return f"HTTP {resp.status_code}: {body['message']}"
    return f"HTTP {resp.status_code}: {resp.text[:200]}"


def send_inference_request(
    payload: Dict[str, Any],
    url: str = 'http://127.0.0.1:50000/infer',
    timeout: int = 10,
    max_retries: int = 3,
    retry_delay: float = 1.0
) -> Dict[str, Any]:
    """
    POST a pickled payload and decode the pickled answer.

    Transport errors and 5xx answers are retried up to `max_retries` times;
    a 4xx answer means the payload itself was rejected and fails at once.

    Args:
        payload: Request dict, numpy arrays allowed
        url: /infer endpoint of the server
        timeout: Per-attempt HTTP timeout (seconds)
        max_retries: Retries after the first attempt
        retry_delay: Pause between attempts (seconds)

    Returns:
        Dict[str, Any]: The decoded response

    Raises:
        RuntimeError: On a rejected payload, an undecodable answer or once retries run out
    """
    try:
        body = dict_to_binary(payload)
    except Exception as e:
        raise RuntimeError(f"cannot serialize payload: {e}") from e
    headers = {'Content-Type': 'application/octet-stream'}

    attempts = max_retries + 1
    last_error: Optional[Exception] = None
    for attempt in range(1, attempts + 1):
        try:
            resp = requests.post(url, data=body, headers=headers, timeout=timeout)
        except requests.exceptions.RequestException as e:
            last_error = e
            logger.warning(f"[{attempt}/{attempts}] {type(e).__name__}: {e}")
        else:
            if resp.status_code == 200:
                try:
                    return binary_to_dict(resp.content)
                except Exception as e:
                    raise RuntimeError(f"cannot decode response from {url}: {e}") from e
            last_error = RuntimeError(_describe_failure(resp))
            if resp.status_code < 500:
                raise last_error
            logger.warning(f"[{attempt}/{attempts}] server error: {last_error}")
        if attempt < attempts:
            time.sleep(retry_delay)

    raise RuntimeError(f"Failed after {attempts} attempts. Last error: {last_error}")


def request_hat_inference(
    scene: SceneRecord,
    url: str = 'http://127.0.0.1:50000/infer',
    timeout: int = 10,
    max_retries: int = 3,
    retry_delay: float = 1.0
) -> Dict[str, Any]:
    """
    Run one scene through a remote Crowd Hat server.

    Returns:
        Dict[str, Any]: boxes, n_hat, n_c, n_final and thresholds

    Raises:
        RuntimeError: If the server answers with an error or cannot be reached
    """
    result = send_inference_request(scene_to_payload(scene), url, timeout, max_retries, retry_delay)
    if result.get("status") != "ok":
        raise RuntimeError(f"Inference failed: {result.get('message', result)}")
    return result


def main():
    logging.basicConfig(
        level=logging.INFO,
        format='[%(name)s] [%(asctime)s.%(msecs)03d] [%(levelname)s] %(message)s',
        datefmt='%H:%M:%S')
    parser = argparse.ArgumentParser(description='Send scenes to a Crowd Hat server')
    parser.add_argument('--scenes', required=True, help='Scenes JSONL')
    parser.add_argument('--url', default='http://127.0.0.1:50000/infer')
    parser.add_argument('--timeout', type=int, default=10)
    parser.add_argument('--max-retries', type=int, default=3)
    opt = parser.parse_args()

    for scene in load_scenes(opt.scenes):
        begin_time = time.perf_counter()
        result = request_hat_inference(scene, opt.url, opt.timeout, opt.max_retries)
        logger.info(f"{scene.id}: {len(scene.boxes)} boxes -> n_c={result['n_c']} "
                    f"n_hat={result['n_hat']:.2f} n_final={result['n_final']} "
                    f"({1000 * (time.perf_counter() - begin_time):.2f} ms)")


if __name__ == "__main__":
    main()
