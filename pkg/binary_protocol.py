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

import pickle
import struct
import logging
from typing import Any

import numpy as np

from compress import CHANNEL_ORDER, CompressedFeatures
from core import ShapeError

# Request bodies and training samples: pickle protocol 5 (out-of-band numpy buffers)
HIGHEST_PROTOCOL = 5
FIX_IMPORTS = False

# Feature files: <magic, C, S, L> as little-endian uint32, then row-major
# little-endian float64 t2d (C*S*S) followed by t1d (C*L)
FEATURE_MAGIC = 0x54414843  # "CHAT"
FEATURE_HEADER = struct.Struct("<4I")

logger = logging.getLogger("CrowdHat.protocol")


def dict_to_binary(data: Any) -> bytes:
    """
    Pickle a request, response or training sample (numpy arrays included).

    Args:
        data: Picklable object, usually a dict of arrays and scalars

    Returns:
        bytes: Uncompressed protocol 5 pickle
    """
    return pickle.dumps(data, protocol=HIGHEST_PROTOCOL, fix_imports=FIX_IMPORTS)


def binary_to_dict(data: bytes) -> Any:
    """
    Inverse of dict_to_binary().

    Args:
        data: Bytes produced by dict_to_binary()

    Returns:
        Any: The original object
    """
    return pickle.loads(data, fix_imports=FIX_IMPORTS)


def features_to_binary(features: CompressedFeatures) -> bytes:
    """
    Encode compressed features in the fixed on-disk layout.

    Args:
        features: Stacked t2d (C, S, S) and t1d (C, L)

    Returns:
        bytes: Header followed by float64 payload
    """
    C, S, L = features.C, features.S, features.L
    header = FEATURE_HEADER.pack(FEATURE_MAGIC, C, S, L)
    t2d = np.ascontiguousarray(features.t2d, dtype="<f8")
    t1d = np.ascontiguousarray(features.t1d, dtype="<f8")
    return header + t2d.tobytes() + t1d.tobytes()


def binary_to_features(data: bytes) -> CompressedFeatures:
    """
    Decode a feature blob written by features_to_binary().

    Raises:
        ShapeError: If the header is unknown or the payload length disagrees with it
    """
    if len(data) < FEATURE_HEADER.size:
        raise ShapeError(f"feature blob too short ({len(data)} bytes)")
    magic, C, S, L = FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise ShapeError(f"bad feature magic 0x{magic:08x}")
    expected = FEATURE_HEADER.size + 8 * (C * S * S + C * L)
    if len(data) != expected:
        raise ShapeError(f"feature blob is {len(data)} bytes, header implies {expected}")
    payload = np.frombuffer(data, dtype="<f8", offset=FEATURE_HEADER.size)
    t2d = payload[:C * S * S].reshape(C, S, S).astype(np.float64)
    t1d = payload[C * S * S:].reshape(C, L).astype(np.float64)
    return CompressedFeatures(t2d, t1d, CHANNEL_ORDER[:C])


def write_binary(path: str, blob: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(blob)
    logger.debug(f"Wrote {len(blob)} bytes to {path}")


def read_binary(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
