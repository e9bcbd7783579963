"""Multi-head attention with relative positional encoding.

One attention layer follows the projection / weighted-sum / residual-FFN
scheme: per-head query, key and value projections; logits are the scaled
dot product plus a per-head positional bias computed from coordinate
differences; softmax over keys; the concatenated head outputs are added to
the query features, and a position-wise feed-forward net with its own
residual closes the layer.

The low-rank ("linformer") variant projects keys, values and the
positional bias from n rows down to k_proj = ceil(n_max / r) rows before
the softmax, shrinking the score matrix from n_q x n_k to n_q x k_proj.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError
from .tensor import (
    FeedForward,
    LinearLayer,
    ParamStore,
    Tensor,
    concat,
    matmul,
    moveaxis,
    reshape,
    softmax_rows,
    sqrt,
)

_PE_CHUNK_ROWS = 1 << 18  # pairwise rows evaluated per pe_net call


@dataclass
class AttentionRecord:
    """Row-stochastic attention matrices of one layer: [..., M, n_q, n_k]."""

    weights: Tensor
    layer: int
    mode: str

    @property
    def heads(self) -> int:
        return self.weights.shape[-3]

    @property
    def n_keys(self) -> int:
        return self.weights.shape[-1]


@dataclass
class LinformerProjection:
    """Shared-across-heads key/value projections E, F: [k_proj, n_max]."""

    e: Tensor
    f: Tensor
    n_max: int
    r: int

    @property
    def k_proj(self) -> int:
        return self.e.shape[0]


def linformer_dim(n_max: int, r: int) -> int:
    return math.ceil(n_max / r)


class AttentionParams:
    """Parameters of one attention layer.

    Per-head projection layers map d_model -> d_head with M * d_head =
    d_model so the head concatenation restores the model width. ``pe_net``
    (a feed-forward net R^3 -> R^M, one bias scalar per head per pair) is
    shared by every layer of a stack. ``linformer`` is optional.
    """

    def __init__(
        self,
        wq: Sequence[LinearLayer],
        wk: Sequence[LinearLayer],
        wv: Sequence[LinearLayer],
        ffn: FeedForward,
        pe_net: Optional[FeedForward] = None,
        linformer: Optional[LinformerProjection] = None,
        ln_attn: Optional[tuple] = None,
        ln_ffn: Optional[tuple] = None,
    ):
        self.heads = len(wq)
        if self.heads < 1:
            raise DimensionError("attention needs at least one head")
        self.d_head = wq[0].d_out
        self.d_model = wq[0].d_in
        if self.d_model != self.heads * self.d_head:
            raise DimensionError(
                f"d_model ({self.d_model}) must equal heads*d_head ({self.heads}*{self.d_head})"
            )
        if pe_net is not None and pe_net.d_out != self.heads:
            raise DimensionError(
                f"pe_net must output one scalar per head ({self.heads}), got {pe_net.d_out}"
            )
        self.wq, self.wk, self.wv = list(wq), list(wk), list(wv)
        self.ffn = ffn
        self.pe_net = pe_net
        self.linformer = linformer
        self.ln_attn = ln_attn  # (gain, bias) or None; pre-norm before attention
        self.ln_ffn = ln_ffn

    @classmethod
    def create(
        cls,
        store: ParamStore,
        name: str,
        d_model: int,
        heads: int,
        pe_net: Optional[FeedForward] = None,
        ffn_hidden: Optional[int] = None,
        dropout_p: float = 0.0,
        linformer: Optional[LinformerProjection] = None,
        layernorm: bool = False,
    ) -> "AttentionParams":
        if d_model % heads != 0:
            raise DimensionError(f"heads ({heads}) must divide d_model ({d_model})")
        d_head = d_model // heads
        wq = [store.linear(f"{name}/head{m}/wq", d_model, d_head) for m in range(heads)]
        wk = [store.linear(f"{name}/head{m}/wk", d_model, d_head) for m in range(heads)]
        wv = [store.linear(f"{name}/head{m}/wv", d_model, d_head) for m in range(heads)]
        ffn = store.ffn(f"{name}/ffn", d_model, ffn_hidden or d_model, d_model, dropout_p=dropout_p)
        ln_attn = ln_ffn = None
        if layernorm:
            ln_attn = (
                store.create(f"{name}/ln_attn/gain", (d_model,), init="ones"),
                store.create(f"{name}/ln_attn/bias", (d_model,), init="zeros"),
            )
            ln_ffn = (
                store.create(f"{name}/ln_ffn/gain", (d_model,), init="ones"),
                store.create(f"{name}/ln_ffn/bias", (d_model,), init="zeros"),
            )
        return cls(wq, wk, wv, ffn, pe_net=pe_net, linformer=linformer, ln_attn=ln_attn, ln_ffn=ln_ffn)


def make_pe_net(store: ParamStore, name: str, heads: int, hidden: int) -> FeedForward:
    """Positional encoding net: coordinate difference (3) -> per-head bias (M)."""
    return store.ffn(name, 3, hidden, heads)


def make_linformer(store: ParamStore, name: str, n_max: int, r: int) -> LinformerProjection:
    if r < 1:
        raise ValueError(f"linformer factor must be >= 1, got {r}")
    k_proj = linformer_dim(n_max, r)
    e = store.create(f"{name}/e", (k_proj, n_max))
    f = store.create(f"{name}/f", (k_proj, n_max))
    return LinformerProjection(e=e, f=f, n_max=n_max, r=r)


def identity_linformer(n: int, dtype=np.float64) -> LinformerProjection:
    """r=1 projection with E = F = I; the low-rank path then matches full mode."""
    eye = Tensor(np.eye(n, dtype=dtype))
    return LinformerProjection(e=eye, f=eye, n_max=n, r=1)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / sqrt(var + eps)) * gain + bias


def relative_pe(pe_net: FeedForward, x_q: Tensor, x_k: Tensor) -> Tensor:
    """Per-head positional bias from pairwise coordinate differences.

    ``bias[..., m, i, j]`` is head m's output of ``pe_net(x_q[i] - x_k[j])``,
    so a global translation of both coordinate sets cancels exactly.

    Args:
        x_q: [..., n_q, 3] query coordinates.
        x_k: [..., n_k, 3] key coordinates.

    Returns:
        [..., M, n_q, n_k] bias tensor.
    """
    if not isinstance(x_q, Tensor):
        x_q = Tensor(x_q)
    if not isinstance(x_k, Tensor):
        x_k = Tensor(x_k)
    if x_q.shape[-1] != 3 or x_k.shape[-1] != 3:
        raise DimensionError(f"coordinates must be 3-wide, got {x_q.shape} and {x_k.shape}")
    n_q, n_k = x_q.shape[-2], x_k.shape[-2]
    lead = x_q.shape[:-2]
    diff = reshape(x_q, lead + (n_q, 1, 3)) - reshape(x_k, lead + (1, n_k, 3))
    flat = reshape(diff, (-1, 3))
    rows = flat.shape[0]
    if rows <= _PE_CHUNK_ROWS:
        out = pe_net(flat)
    else:
        chunks = [
            pe_net(flat[lo : min(lo + _PE_CHUNK_ROWS, rows)])
            for lo in range(0, rows, _PE_CHUNK_ROWS)
        ]
        out = concat(chunks, axis=0)
    heads = pe_net.d_out
    return moveaxis(reshape(out, lead + (n_q, n_k, heads)), -1, -3)


def _pad_rows(x: Tensor, n_total: int) -> Tensor:
    """Zero-pad axis -2 of ``x`` up to ``n_total`` rows."""
    n = x.shape[-2]
    if n == n_total:
        return x
    pad_shape = x.shape[:-2] + (n_total - n, x.shape[-1])
    return concat([x, Tensor(np.zeros(pad_shape, dtype=x.dtype))], axis=-2)


def linformer_project(e: Tensor, k_or_v: Tensor) -> Tensor:
    """Project n key/value rows down to k_proj rows: plain matrix product."""
    if e.ndim != 2 or e.shape[1] != k_or_v.shape[-2]:
        raise DimensionError(
            f"projection shape {e.shape} does not match rows of {k_or_v.shape}"
        )
    return matmul(e, k_or_v)


def multi_head_attention(
    params: AttentionParams,
    q_feats: Tensor,
    k_feats: Tensor,
    x_q: Tensor,
    x_k: Tensor,
    mode: str = "full",
    bias: Optional[Tensor] = None,
    residual: Optional[Tensor] = None,
    layer: int = 0,
    alloc_stats: Optional[dict] = None,
):
    """One multi-head attention step with residual.

    Per head: ``logits = Q K^T / sqrt(d_head) + bias[m]``, softmax over the
    key axis, output = attention-weighted values. The concatenated head
    outputs are added to ``residual`` (the query features by default). In
    linformer mode keys, values and the positional bias are first projected
    to k_proj rows.

    Args:
        q_feats: [..., n_q, d_model] query features.
        k_feats: [..., n_k, d_model] key/value features.
        x_q, x_k: matching coordinates, used for the positional bias.
        mode: "full" or "linformer".
        bias: optional precomputed [..., M, n_q, n_k] positional bias.
        alloc_stats: mutable dict; tracks score-matrix allocation if given.

    Returns:
        (out [..., n_q, d_model], AttentionRecord of the matrices used).
    """
    if q_feats.shape[-1] != params.d_model or k_feats.shape[-1] != params.d_model:
        raise DimensionError(
            f"attention expects width {params.d_model}, got {q_feats.shape} and {k_feats.shape}"
        )
    if mode not in ("full", "linformer"):
        raise ValueError(f"unknown attention mode: {mode}")
    if mode == "linformer" and params.linformer is None:
        raise ValueError("linformer mode requires projection parameters")

    n_k = k_feats.shape[-2]
    if bias is None and params.pe_net is not None:
        bias = relative_pe(params.pe_net, x_q, x_k)

    proj = params.linformer if mode == "linformer" else None
    bias_eff = bias
    if proj is not None:
        if n_k > proj.n_max:
            raise ValueError(f"linformer mode supports at most {proj.n_max} keys, got {n_k}")
        if bias is not None:
            pad = proj.n_max - n_k
            if pad:
                zshape = bias.shape[:-1] + (pad,)
                bias_padded = concat([bias, Tensor(np.zeros(zshape, dtype=bias.dtype))], axis=-1)
            else:
                bias_padded = bias
            bias_eff = matmul(bias_padded, params.linformer.e.swapaxes(0, 1))

    scale = 1.0 / math.sqrt(params.d_head)
    head_outs = []
    head_weights = []
    score_bytes = 0
    for m in range(params.heads):
        q = params.wq[m](q_feats)
        k = params.wk[m](k_feats)
        v = params.wv[m](k_feats)
        if proj is not None:
            k = linformer_project(proj.e, _pad_rows(k, proj.n_max))
            v = linformer_project(proj.f, _pad_rows(v, proj.n_max))
        logits = matmul(q, k.swapaxes(-1, -2)) * scale
        if bias_eff is not None:
            logits = logits + bias_eff[..., m, :, :]
        score_bytes += logits.data.nbytes
        weights = softmax_rows(logits)
        head_outs.append(matmul(weights, v))
        head_weights.append(reshape(weights, weights.shape[:-2] + (1,) + weights.shape[-2:]))

    if alloc_stats is not None:
        alloc_stats["score_bytes"] = alloc_stats.get("score_bytes", 0) + score_bytes
        alloc_stats["peak_score_bytes"] = max(alloc_stats.get("peak_score_bytes", 0), score_bytes)

    out = (residual if residual is not None else q_feats) + concat(head_outs, axis=-1)
    record = AttentionRecord(weights=concat(head_weights, axis=-3), layer=layer, mode=mode)
    return out, record


def transblock(
    layers: Sequence[AttentionParams],
    feats: Tensor,
    coords: Tensor,
    kv_feats: Optional[Tensor] = None,
    kv_coords: Optional[Tensor] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    alloc_stats: Optional[dict] = None,
):
    """Apply a stack of attention layers (self- or cross-attention).

    Each layer runs multi-head attention (cross when ``kv_feats`` is given,
    against the same key/value set at every layer) followed by the residual
    feed-forward step. The positional bias is computed once and reused: the
    pe_net and the coordinates are shared across the stack.

    Returns:
        (final features, list of per-layer AttentionRecords).
    """
    if len(layers) < 1:
        raise ValueError("transblock needs at least one layer")
    kv = kv_feats
    xk = kv_coords if kv_coords is not None else coords
    pe = layers[0].pe_net
    if any(layer.pe_net is not pe for layer in layers):
        raise ValueError("all layers of a transblock must share one pe_net")
    bias = relative_pe(pe, coords, xk) if pe is not None else None
    records = []
    for i, layer in enumerate(layers):
        mode = "linformer" if layer.linformer is not None else "full"
        if layer.ln_attn is not None:
            attn_in = layernorm(feats, *layer.ln_attn)
        else:
            attn_in = feats
        y, record = multi_head_attention(
            layer,
            attn_in,
            kv if kv is not None else attn_in,
            coords,
            xk,
            mode=mode,
            bias=bias,
            residual=feats,
            layer=i,
            alloc_stats=alloc_stats,
        )
        ffn_in = layernorm(y, *layer.ln_ffn) if layer.ln_ffn is not None else y
        feats = y + layer.ffn(ffn_in, training=training, rng=rng)
        records.append(record)
    return feats, records
