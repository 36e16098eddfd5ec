"""Front-door adjustment over latent confounders.

Two query-based attentions estimate the mediator expectation and the
global-input expectation from their k-means dictionaries; the estimates
are fused by a linear layer. Both dictionaries are frozen constants.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .dictionaries import FrontDoorDictionaries
from .errors import ConfigError


def _dict_expectation(f: nc.Tensor, rows: np.ndarray, w_q: nc.Tensor, w_k: nc.Tensor):
    if len(rows) < 1:
        raise ConfigError("expectation over an empty dictionary")
    tape = f.tape
    d = f.value.shape[-1]
    protos = tape.constant(rows)
    q = nc.matmul(f, w_q)
    keys = nc.matmul(protos, w_k)
    alpha = nc.softmax(nc.matmul(q, nc.transpose(keys)) * (1.0 / np.sqrt(d)), axis=-1)
    return nc.matmul(alpha, protos), alpha


def mediator_expectation(f: nc.Tensor, mediator: np.ndarray, w_q: nc.Tensor, w_k: nc.Tensor) -> nc.Tensor:
    """Attention-weighted mean of mediator prototypes, queried by ``f``."""
    return _dict_expectation(f, mediator, w_q, w_k)[0]


def global_expectation(f: nc.Tensor, global_rows: np.ndarray, w_q: nc.Tensor, w_k: nc.Tensor) -> nc.Tensor:
    """Attention-weighted mean of global input prototypes, queried by ``f``."""
    return _dict_expectation(f, global_rows, w_q, w_k)[0]


def frontdoor_adjust(
    f: nc.Tensor,
    dicts: FrontDoorDictionaries,
    w_q_g: nc.Tensor,
    w_k_g: nc.Tensor,
    w_q_d: nc.Tensor,
    w_k_d: nc.Tensor,
    w_g: nc.Tensor,
    w_d: nc.Tensor,
    enabled: bool = True,
    residual: bool = False,
) -> nc.Tensor:
    """Linear fusion of the two expectation estimates.

    The output replaces ``f`` entirely by default; ``residual=True`` adds
    ``f`` back. With ``enabled=False`` (ablation) the module is the
    identity map.
    """
    if not enabled:
        return f
    e_glob = global_expectation(f, dicts.global_, w_q_g, w_k_g)
    e_med = mediator_expectation(f, dicts.mediator, w_q_d, w_k_d)
    u = nc.matmul(e_glob, w_g) + nc.matmul(e_med, w_d)
    if residual:
        u = u + f
    return u
