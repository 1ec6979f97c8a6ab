"""Groupwise DT-CMR motion correction."""

from ._core import (
    Error,
    evaluate,
    field_error,
    fit_tensor,
    load_series,
    make_phantom,
    nmi,
    pseudo_frames,
    register,
    save_series,
    set_threads,
    singular_values,
)

__all__ = [
    "Error",
    "evaluate",
    "field_error",
    "fit_tensor",
    "load_series",
    "make_phantom",
    "nmi",
    "pseudo_frames",
    "register",
    "save_series",
    "set_threads",
    "singular_values",
]
