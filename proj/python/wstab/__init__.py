"""Image-based table recognition: synthetic data, training, inference, TEDS."""

import json as _json

from . import _wstab
from ._wstab import (
    Error,
    canonical_html,
    classify,
    gradcheck,
    infer,
    recognize_pgm,
    teds,
    tokenize_cell,
    tokenize_structure,
)

__all__ = [
    "Error",
    "canonical_html",
    "classify",
    "generate",
    "gradcheck",
    "infer",
    "preset",
    "recognize_pgm",
    "score",
    "teds",
    "tokenize_cell",
    "tokenize_structure",
    "train",
]


def _dumps(overrides):
    return _json.dumps(overrides) if overrides else ""


def preset(name):
    return _json.loads(_wstab.preset_json(name))


def generate(out, n, preset="desk", gen=None, threads=1):
    _wstab.generate(str(out), n, preset, _dumps(gen), threads)


def train(data, out, preset="desk", net=None, train=None, threads=1):
    return _json.loads(_wstab.train_json(str(data), str(out), preset, _dumps(net), _dumps(train), threads))


def score(pred, gt, split="", threads=1):
    return _json.loads(_wstab.score_json(str(pred), str(gt), split, threads))
