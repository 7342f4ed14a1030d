"""Input checks for the estimator wrappers."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .dataset import PromptSpec, parse_prompt
from .svbrdf import SvbrdfMaps, decode

__all__ = ["check_maps_list", "check_encoded", "check_prompts", "check_is_fitted_params"]


def check_maps_list(X) -> list:
    """Accept a single :class:`SvbrdfMaps`, a sequence of them, or encoded ``[N, 10, H, W]``."""
    if isinstance(X, SvbrdfMaps):
        return [X]
    if isinstance(X, np.ndarray):
        return [decode(x) for x in check_encoded(X)]
    items = list(X)
    if not items:
        raise ValueError("expected at least one material")
    for i, m in enumerate(items):
        if not isinstance(m, SvbrdfMaps):
            raise TypeError(f"item {i} is {type(m).__name__}, expected SvbrdfMaps")
    shapes = {m.shape for m in items}
    if len(shapes) != 1:
        raise ValueError(f"materials must share one size, got {sorted(shapes)}")
    return items


def check_encoded(X) -> np.ndarray:
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 10:
        raise ValueError(f"expected encoded maps shaped [N, 10, H, W], got {list(arr.shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("encoded maps contain non-finite values")
    return arr.astype(np.float32, copy=False)


def check_prompts(y: Iterable | str) -> list:
    """Parse prompts into :class:`PromptSpec` objects; a lone string is one prompt."""
    if isinstance(y, (str, PromptSpec)):
        y = [y]
    out = [p if isinstance(p, PromptSpec) else parse_prompt(str(p)) for p in y]
    if not out:
        raise ValueError("expected at least one prompt")
    return out


def check_is_fitted_params(est) -> None:
    from sklearn.exceptions import NotFittedError

    if getattr(est, "params_", None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit or load first")
