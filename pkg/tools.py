import time
from functools import wraps
from typing import Dict, List

import numpy as np
import torch


def measure_time(logger):
    """
    Returns a decorator that logs execution time using the specified logger.

    Args:
        logger: Logger instance to use for logging

    Returns:
        decorator: Function decorator that measures execution time
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            begin_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                elapsed_ms = 1000 * (time.perf_counter() - begin_time)
                logger.info("\033[1;31m" + f"{func.__name__}: {elapsed_ms:.2f} ms" + "\033[0m")
        return wrapper
    return decorator


def summarize_arrays(data: Dict[str, object]) -> List[str]:
    """
    One line per entry: shape, dtype, range and sum for arrays and tensors.

    Args:
        data: Mapping of names to numpy arrays, torch tensors or plain values

    Returns:
        List[str]: Human-readable summary lines
    """
    lines = []
    for k, v in data.items():
        if isinstance(v, torch.Tensor):
            v = v.detach().cpu().numpy()
        if isinstance(v, np.ndarray) and v.size:
            lines.append(f"{k}: {v.shape} {v.dtype} {v.min():.4f}~{v.max():.4f} sum={v.sum():.4f}")
        elif isinstance(v, np.ndarray):
            lines.append(f"{k}: {v.shape} {v.dtype} (empty)")
        else:
            lines.append(f"{k}: {v} {type(v).__name__}")
    return lines
