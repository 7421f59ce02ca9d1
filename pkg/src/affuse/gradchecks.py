"""Finite-difference checks for every differentiable op and the fusion model."""
from __future__ import annotations

import numpy as np

from .data import CONTEXT_DIM
from .model import FusionModel, ModelConfig
from .nn import tensor as T
from .nn.gradcheck import grad_check
from .nn.layers import EncoderLayer, MultiHeadAttention, Parameter, positional_encoding

TOLERANCE = 1e-4

# distinct modality sets behind the ablation rows (GOC and FC share one)
ABLATION_MODALITIES = (
    ("context",),
    ("thermal",),
    ("thermal", "context"),
    ("au",),
    ("au", "context"),
    ("thermal", "au"),
    ("thermal", "au", "context"),
)


def _ops(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}

    a = Parameter(rng.normal(size=(3, 4)), "a")
    b = Parameter(rng.normal(size=(4, 2)), "b")
    w = rng.normal(size=(3, 2))
    out["matmul"] = grad_check(lambda: (T.matmul(a, b) * w).sum(), {"a": a, "b": b}, samples=None).worst

    x = Parameter(rng.normal(size=(2, 5)), "x")
    w = rng.normal(size=(2, 5))
    out["softmax"] = grad_check(lambda: (T.softmax(x, 1) * w).sum(), {"x": x}, samples=None).worst

    x = Parameter(rng.normal(size=(4, 8)), "x")
    g = Parameter(rng.normal(size=8), "gain")
    bb = Parameter(rng.normal(size=8), "bias")
    w = rng.normal(size=(4, 8))
    out["layer_norm"] = grad_check(lambda: (T.layer_norm(x, g, bb) * w).sum(),
                                   {"x": x, "gain": g, "bias": bb}, samples=None).worst

    logits = Parameter(rng.normal(size=(4, 4)), "logits")
    labels = rng.integers(0, 4, size=4)
    out["cross_entropy"] = grad_check(lambda: T.cross_entropy(logits, labels), {"logits": logits},
                                      samples=None).worst

    x = Parameter(rng.normal(size=(3, 8)), "x")
    w = rng.normal(size=(3, 8))
    mha = MultiHeadAttention(8, 2, rng)
    params = dict(mha.named_parameters(), x=x)
    out["multi_head_attention"] = grad_check(lambda: (mha(x) * w).sum(), params, samples=None).worst

    layer = EncoderLayer(8, 2, 32, rng)
    params = dict(layer.named_parameters(), x=x)
    out["encoder_layer"] = grad_check(lambda: (layer(x) * w).sum(), params, samples=12, seed=seed).worst

    pe = positional_encoding(3, 8)
    out["positional_encoding_add"] = grad_check(lambda: ((x + pe) * w).sum(), {"x": x}, samples=None).worst
    return out


def random_inputs(config: ModelConfig, batch: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    L = config.seq_len
    inputs = {}
    for m in config.modalities:
        d = config.input_dims[m]
        inputs[m] = rng.normal(size=(batch, d)) if m == "context" else rng.normal(size=(batch, L, d))
    return inputs


def model_check(modalities, mode: str, seed: int, samples: int = 3, batch: int = 3) -> float:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(modalities=tuple(modalities), mode=mode, d_model=8, heads=2, seed=seed)
    model = FusionModel(cfg)
    inputs = random_inputs(cfg, batch, rng)
    if "context" in inputs:
        # unit-scale stand-in for standardized embeddings
        inputs["context"] = inputs["context"] / np.sqrt(CONTEXT_DIM) * 8
    labels = rng.integers(0, 4, size=batch)
    report = grad_check(lambda: T.cross_entropy(model(inputs), labels), dict(model.named_parameters()),
                        samples=samples, seed=seed)
    return report.worst


def run_all(seeds=range(10), samples: int = 3) -> dict[str, float]:
    """Worst relative error per module across ``seeds``."""
    worst: dict[str, float] = {}
    for s in seeds:
        for name, err in _ops(s).items():
            worst[name] = max(worst.get(name, 0.0), err)
        for mods in ABLATION_MODALITIES:
            for mode in ("aggregate", "sequence"):
                key = f"fusion[{'+'.join(mods)}|{mode}]"
                worst[key] = max(worst.get(key, 0.0), model_check(mods, mode, s, samples))
    return worst
