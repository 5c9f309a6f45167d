"""Finite-difference verification of the full model gradient.

Central differences with a configurable step are compared elementwise
against the analytic gradient of the total loss. The relative error is
guarded: entries where both sides fall below the floor count as exact.
The floor (default 1e-5 for unit-scale losses) sits at the resolution
limit of the difference quotient itself; below it the oracle compares
roundoff to roundoff. It also covers parameters a configuration
legitimately leaves untouched (unused vocabulary rows, positions beyond
the longest sequence).

The sweep is embarrassingly parallel over parameter elements, so it can
fan out over worker processes that rebuild the model from a snapshot.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import from_json_dict, to_json_dict
from .model import MMFTModel
from .textpipe import QAExample, Vocabulary


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict  # name -> worst relative error
    n_elements: int
    step: float

    @property
    def worst_param(self) -> str:
        return max(self.per_param, key=self.per_param.get)


def guarded_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                           floor: float = 1e-5) -> float:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric) / np.where(scale < floor, 1.0, scale)
    err[scale < floor] = 0.0
    return float(err.max()) if err.size else 0.0


def _numeric_sweep(model: MMFTModel, examples, tasks, step: float) -> dict:
    """Central differences for the element ranges in ``tasks``."""

    def loss_value() -> float:
        return float(model.loss(examples)[1].value)

    out = {}
    for name, lo, hi in tasks:
        flat = model.params[name].value.ravel()
        numeric = np.zeros(hi - lo)
        for i in range(lo, hi):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_value()
            flat[i] = orig - step
            f_minus = loss_value()
            flat[i] = orig
            numeric[i - lo] = (f_plus - f_minus) / (2.0 * step)
        out[(name, lo)] = numeric
    return out


def _worker(payload) -> dict:
    config_dict, vocab_dict, snapshot, examples, tasks, step = payload
    model = MMFTModel(from_json_dict(config_dict), Vocabulary.from_dict(vocab_dict))
    model.restore(snapshot)
    return _numeric_sweep(model, examples, tasks, step)


def _split_tasks(model: MMFTModel, n_chunks: int) -> list[list[tuple]]:
    """Balance parameter elements over ``n_chunks`` contiguous ranges."""
    total = model.parameter_count()
    per_chunk = max(1, -(-total // n_chunks))
    chunks: list[list[tuple]] = [[]]
    room = per_chunk
    for name in sorted(model.params):
        size = model.params[name].value.size
        lo = 0
        while lo < size:
            take = min(size - lo, room)
            chunks[-1].append((name, lo, lo + take))
            lo += take
            room -= take
            if room == 0 and len(chunks) < n_chunks:
                chunks.append([])
                room = per_chunk
    return [c for c in chunks if c]


def check_model_gradients(model: MMFTModel, examples: list[QAExample],
                          step: float = 1e-5, floor: float = 1e-5,
                          n_jobs: int = 0) -> GradCheckReport:
    """Compare the backward pass of the total loss against central
    finite differences for every element of every parameter."""
    _, node, _ = model.loss(examples)
    dc.backward(node)
    analytic = {}
    for name, p in model.params.items():
        analytic[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.value)
        p.node.grad = None

    if n_jobs == 0:
        n_jobs = min(os.cpu_count() or 1, 4)
    numeric = {name: np.zeros(p.value.size) for name, p in model.params.items()}
    if n_jobs <= 1:
        results = [_numeric_sweep(model, examples, _split_tasks(model, 1)[0], step)]
    else:
        chunks = _split_tasks(model, n_jobs)
        payload_base = (to_json_dict(model.config), model.vocab.to_dict(),
                        model.snapshot(), examples)
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(_worker, [payload_base + (c, step) for c in chunks]))
    for result in results:
        for (name, lo), values in result.items():
            numeric[name][lo:lo + values.size] = values

    per_param = {
        name: guarded_relative_error(analytic[name].ravel(), numeric[name], floor)
        for name in model.params
    }
    return GradCheckReport(
        max_rel_err=max(per_param.values()),
        per_param=per_param,
        n_elements=model.parameter_count(),
        step=step,
    )
