"""Central finite-difference verification of the reverse-mode gradients.

Every check runs in float64 on small fixed instances. The analytic
gradient from ``backward`` is compared coordinate-by-coordinate against
(f(x+eps) - f(x-eps)) / (2 eps); large tensors are subsampled at a seeded
set of coordinates. The suite covers each differentiable operation, each
block, and a tiny end-to-end backbone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import attention, blocks
from .backbone import BackboneConfig, FPStageConfig, build
from .blocks import BlockConfig, BlockParams
from .points import PointCloud, feature_propagation
from .tensor import ParamStore, Tensor, backward, matmul, softmax_rows, tmean

DEFAULT_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4
_REL_FLOOR = 1e-6


def max_relative_error(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    eps: float = DEFAULT_EPS,
    max_coords: int = 6,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients of a scalar loss against central differences.

    Args:
        loss_fn: pure function of the listed tensors' ``data``.
        tensors: (name, tensor) pairs to differentiate with respect to.
        max_coords: coordinates sampled per tensor (all when smaller).

    Returns:
        {name: max relative error} plus "__max__" over all entries.
        Relative error uses max(|analytic|, |numeric|, 1e-6) as the scale.
    """
    for _, t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors}

    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in tensors:
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = loss_fn().item()
            flat[c] = orig - eps
            down = loss_fn().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[c])
            scale = max(abs(a), abs(numeric), _REL_FLOOR)
            worst = max(worst, abs(a - numeric) / scale)
        errors[name] = worst
    errors["__max__"] = max(errors.values()) if errors else 0.0
    return errors


@dataclass
class ComponentResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _const(rng, shape):
    return Tensor(rng.normal(size=shape))


def _leaf(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check_matmul(eps: float = DEFAULT_EPS) -> dict:
    rng = np.random.default_rng(11)
    a, b = _leaf(rng, (5, 7)), _leaf(rng, (7, 3))
    c = _const(rng, (5, 3))
    return max_relative_error(lambda: tmean(matmul(a, b) * c), [("a", a), ("b", b)], eps=eps)


def _check_softmax(eps: float = DEFAULT_EPS) -> dict:
    rng = np.random.default_rng(12)
    x = _leaf(rng, (4, 6))
    c = _const(rng, (4, 6))
    return max_relative_error(lambda: tmean(softmax_rows(x) * c), [("x", x)], eps=eps)


def _check_ffn(eps: float = DEFAULT_EPS) -> dict:
    rng = np.random.default_rng(13)
    store = ParamStore(13, dtype=np.float64)
    ffn = store.ffn("ffn", 5, 7, 4)
    x = _leaf(rng, (6, 5))
    c = _const(rng, (6, 4))
    tensors = [("x", x)] + list(store.items())
    return max_relative_error(lambda: tmean(ffn(x) * c), tensors, eps=eps)


def _check_relative_pe(eps: float = DEFAULT_EPS) -> dict:
    rng = np.random.default_rng(14)
    store = ParamStore(14, dtype=np.float64)
    pe = attention.make_pe_net(store, "pe", heads=2, hidden=6)
    xq, xk = _leaf(rng, (5, 3)), _leaf(rng, (7, 3))
    c = _const(rng, (2, 5, 7))
    tensors = [("xq", xq), ("xk", xk)] + list(store.items())
    return max_relative_error(lambda: tmean(attention.relative_pe(pe, xq, xk) * c), tensors, eps=eps)


def _attention_instance(mode: str):
    rng = np.random.default_rng(15)
    store = ParamStore(15, dtype=np.float64)
    pe = attention.make_pe_net(store, "pe", heads=2, hidden=4)
    proj = attention.make_linformer(store, "lin", n_max=6, r=2) if mode == "linformer" else None
    params = attention.AttentionParams.create(store, "attn", d_model=8, heads=2, pe_net=pe, linformer=proj)
    feats = _leaf(rng, (6, 8))
    coords = _leaf(rng, (6, 3))
    c = _const(rng, (6, 8))

    def loss():
        out, _ = attention.multi_head_attention(params, feats, feats, coords, coords, mode=mode)
        return tmean(out * c)

    return loss, [("feats", feats), ("coords", coords)] + list(store.items())


def _check_attention(eps: float = DEFAULT_EPS) -> dict:
    loss, tensors = _attention_instance("full")
    return max_relative_error(loss, tensors, eps=eps)


def _check_attention_linformer(eps: float = DEFAULT_EPS) -> dict:
    loss, tensors = _attention_instance("linformer")
    return max_relative_error(loss, tensors, eps=eps)


def _tiny_cloud(rng, n, channels):
    coords = Tensor(rng.uniform(-1, 1, size=(n, 3)), requires_grad=True)
    feats = Tensor(rng.normal(size=(n, channels)), requires_grad=True)
    return PointCloud(coords, feats)


def _check_refinement(eps: float = DEFAULT_EPS) -> dict:
    rng = np.random.default_rng(16)
    store = ParamStore(16, dtype=np.float64)
    cfg = BlockConfig(n_in=12, n_out=3, radius=1.5, k_samples=4, c_in=8, c_med=8, c_out=8,
                      layers_lt=1, layers_gt=1, heads=2, pe_hidden=4)
    params = BlockParams.create(store, "b", cfg, in_width=2)
    cloud = _tiny_cloud(rng, 12, 2)
    c = _const(rng, (3, 3))

    def loss():
        lt, _ = blocks.local_transformer(cloud, cfg, params)
        refined = blocks.refine_centroids(lt.last_record, lt.group_coords)
        return tmean(refined * c)

    tensors = [("coords", cloud.coords), ("feats", cloud.feats)] + list(store.items())
    return max_relative_error(loss, tensors, eps=eps)


def _check_feature_propagation(eps: float = DEFAULT_EPS) -> dict:
    rng = np.random.default_rng(17)
    store = ParamStore(17, dtype=np.float64)
    ffn = store.ffn("fp", 4 + 2, 6, 5)
    low = _tiny_cloud(rng, 5, 4)
    high_coords = _leaf(rng, (8, 3))
    skip = _leaf(rng, (8, 2))
    c = _const(rng, (8, 5))

    def loss():
        out = feature_propagation(low, high_coords, skip, ffn)
        return tmean(out * c)

    tensors = [
        ("low_coords", low.coords), ("low_feats", low.feats),
        ("high_coords", high_coords), ("skip", skip),
    ] + list(store.items())
    return max_relative_error(loss, tensors, eps=eps)


def _check_transblock(eps: float = DEFAULT_EPS) -> dict:
    rng = np.random.default_rng(18)
    store = ParamStore(18, dtype=np.float64)
    pe = attention.make_pe_net(store, "pe", heads=2, hidden=4)
    layers = [
        attention.AttentionParams.create(store, f"layer{i}", d_model=8, heads=2, pe_net=pe)
        for i in range(2)
    ]
    feats = _leaf(rng, (5, 8))
    coords = _leaf(rng, (5, 3))
    c = _const(rng, (5, 8))

    def loss():
        out, _ = attention.transblock(layers, feats, coords)
        return tmean(out * c)

    return max_relative_error(loss, [("feats", feats), ("coords", coords)] + list(store.items()), eps=eps)


def _block_instance():
    rng = np.random.default_rng(19)
    store = ParamStore(19, dtype=np.float64)
    cfg = BlockConfig(n_in=24, n_out=4, radius=1.2, k_samples=6, c_in=8, c_med=8, c_out=8,
                      layers_lt=1, layers_gt=1, layers_lgt=1, heads=2,
                      use_lgt=True, pe_hidden=4)
    params = BlockParams.create(store, "b", cfg, in_width=3)
    cloud = _tiny_cloud(rng, 24, 3)
    return rng, store, cfg, params, cloud


def _check_local_transformer(eps: float = DEFAULT_EPS) -> dict:
    rng, store, cfg, params, cloud = _block_instance()
    c = _const(rng, (cfg.n_out, cfg.c_in))

    def loss():
        lt, _ = blocks.local_transformer(cloud, cfg, params)
        return tmean(lt.token_feats * c)

    return max_relative_error(loss, [("coords", cloud.coords), ("feats", cloud.feats)] + list(store.items()), eps=eps)


def _check_global_transformer(eps: float = DEFAULT_EPS) -> dict:
    rng = np.random.default_rng(20)
    store = ParamStore(20, dtype=np.float64)
    cfg = BlockConfig(n_in=6, n_out=6, radius=1.0, k_samples=2, c_in=8, c_med=8, c_out=8,
                      layers_lt=1, layers_gt=2, heads=2, pe_hidden=4)
    params = BlockParams.create(store, "b", cfg, in_width=8)
    feats = _leaf(rng, (6, 8))
    coords = _leaf(rng, (6, 3))
    c = _const(rng, (6, 8))

    def loss():
        out, _ = blocks.global_transformer(feats, coords, cfg, params)
        return tmean(out * c)

    return max_relative_error(loss, [("feats", feats), ("coords", coords)] + list(store.items()), eps=eps)


def _check_local_global(eps: float = DEFAULT_EPS) -> dict:
    rng, store, cfg, params, cloud = _block_instance()
    low_feats = _leaf(rng, (4, 8))
    low_coords = _leaf(rng, (4, 3))
    c = _const(rng, (4, 8))

    def loss():
        out, _ = blocks.local_global_transformer(
            low_feats, low_coords, cloud.feats, cloud.coords, cfg, params
        )
        return tmean(out * c)

    tensors = [("low_feats", low_feats), ("low_coords", low_coords),
               ("cloud_feats", cloud.feats), ("cloud_coords", cloud.coords)] + list(store.items())
    return max_relative_error(loss, tensors, eps=eps)


def _check_pointformer_block(eps: float = DEFAULT_EPS) -> dict:
    rng, store, cfg, params, cloud = _block_instance()
    c = _const(rng, (cfg.n_out, cfg.c_out))

    def loss():
        out = blocks.pointformer_block(cloud, cfg, params)
        return tmean(out.feats * c)

    return max_relative_error(loss, [("coords", cloud.coords), ("feats", cloud.feats)] + list(store.items()), eps=eps)


def _check_backbone(eps: float = DEFAULT_EPS) -> dict:
    rng = np.random.default_rng(21)
    cfg = BackboneConfig(
        blocks=[
            BlockConfig(n_in=24, n_out=8, radius=1.0, k_samples=6, c_in=8, c_med=8, c_out=8,
                        layers_lt=1, layers_gt=1, heads=2, pe_hidden=4),
            BlockConfig(n_in=8, n_out=4, radius=1.6, k_samples=4, c_in=8, c_med=8, c_out=8,
                        layers_lt=1, layers_gt=1, heads=2, pe_hidden=4),
        ],
        fp_stages=[FPStageConfig(n_points=8, c_out=8)],
        seed=21,
        precision=64,
        input_channels=2,
    )
    model, store = build(cfg)
    cloud = _tiny_cloud(rng, 24, 2)
    c = _const(rng, (8, 8))

    def loss():
        result = model.forward(cloud)
        return tmean(result.final.feats * c)

    tensors = [("coords", cloud.coords), ("feats", cloud.feats)] + list(store.items())
    return max_relative_error(loss, tensors, eps=eps)


_OP_CHECKS = [
    ("matmul", _check_matmul),
    ("softmax_rows", _check_softmax),
    ("ffn", _check_ffn),
    ("relative_pe", _check_relative_pe),
    ("attention_full", _check_attention),
    ("attention_linformer", _check_attention_linformer),
    ("refine_centroids", _check_refinement),
    ("feature_propagation", _check_feature_propagation),
]

_BLOCK_CHECKS = [
    ("transblock", _check_transblock),
    ("local_transformer", _check_local_transformer),
    ("global_transformer", _check_global_transformer),
    ("local_global_transformer", _check_local_global),
    ("pointformer_block", _check_pointformer_block),
]

_BACKBONE_CHECKS = [
    ("backbone", _check_backbone),
]


def run_suite(scope: str = "all", tolerance: float = DEFAULT_TOLERANCE, eps: float = DEFAULT_EPS) -> list:
    """Run the fixed gradient-check suite at the requested scope.

    Returns:
        list of ComponentResult, one per component.
    """
    table = {
        "op": _OP_CHECKS,
        "block": _BLOCK_CHECKS,
        "backbone": _BACKBONE_CHECKS,
        "all": _OP_CHECKS + _BLOCK_CHECKS + _BACKBONE_CHECKS,
    }
    if scope not in table:
        raise ValueError(f"scope must be one of {sorted(table)}, got {scope}")
    results = []
    for name, fn in table[scope]:
        errors = fn(eps=eps)
        results.append(ComponentResult(name=name, max_rel_error=errors["__max__"], tolerance=tolerance))
    return results
