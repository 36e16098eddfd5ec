"""Back-door adjustment over observable demographic confounders.

A confounder context is retrieved from the prototype dictionary by scaled
dot-product attention and injected through a learnable residual. Dictionary
rows are statistical prototypes: constants with respect to the tape.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .dictionaries import ConfounderDictionary
from .errors import EmptyDictionaryError

MASK_LOGIT = -1e30


def retrieve_confounder(x: nc.Tensor, cdict: ConfounderDictionary, w_q: nc.Tensor, w_k: nc.Tensor):
    """Attention over initialized dictionary rows.

    ``x`` is (B, d). Returns (context (B, d), weights (B, K)); weights on
    uninitialized rows are exactly zero (masked before the softmax).
    """
    init = cdict.initialized
    if not init.any():
        raise EmptyDictionaryError(f"dictionary for modality {cdict.modality!r} has no initialized rows")
    tape = x.tape
    d = x.value.shape[-1]
    protos = tape.constant(cdict.prototypes)
    q = nc.matmul(x, w_q)
    keys = nc.matmul(protos, w_k)
    logits = nc.matmul(q, nc.transpose(keys)) * (1.0 / np.sqrt(d))
    mask = np.where(init, 0.0, MASK_LOGIT)
    alpha = nc.softmax(logits + mask, axis=-1)
    context = nc.matmul(alpha, protos)
    return context, alpha


def backdoor_adjust(x: nc.Tensor, cdict: ConfounderDictionary, w_q: nc.Tensor, w_k: nc.Tensor, gamma: nc.Tensor, enabled: bool = True) -> nc.Tensor:
    """Residual injection of the retrieved confounder context.

    With ``enabled=False`` (ablation) the module is the identity map.
    """
    if not enabled:
        return x
    context, _ = retrieve_confounder(x, cdict, w_q, w_k)
    return x + gamma * context
