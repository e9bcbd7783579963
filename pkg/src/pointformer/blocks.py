"""The three named point-cloud transformer blocks.

A full block runs, in order: a Local Transformer over ball-query groups
(shared weights across groups), attention-driven centroid refinement, an
optional Local-Global cross-attention stage (centroids query the block's
input set), and a Global Transformer over the whole downsampled set.

Feature widths follow the block config: the local stage works at ``c_in``,
the local-global stage at ``c_med``, the global stage at ``c_out``; widths
change only in the input-embedding feed-forward nets, since attention
layers are residual and width-preserving.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (
    AttentionParams,
    AttentionRecord,
    make_linformer,
    make_pe_net,
    transblock,
)
from .errors import ConfigError, DimensionError
from .points import NeighborhoodIndex, PointCloud, ball_query, farthest_point_sample, group_features
from .tensor import ParamStore, Tensor, concat, gather, matmul, reshape

LT_CHUNK_GROUPS = 256  # groups attended per batched call; caps transient memory

_SUBBLOCKS = ("lt", "lgt", "gt")


def _no_linformer() -> dict:
    return {"lt": 0, "lgt": 0, "gt": 0}


@dataclass
class BlockConfig:
    """Hyperparameters of one block (one row of the architecture tables)."""

    n_in: int
    n_out: int
    radius: float
    k_samples: int
    c_in: int
    c_med: int
    c_out: int
    layers_lt: int = 2
    layers_gt: int = 2
    layers_lgt: int = 1
    heads: int = 4
    dropout: float = 0.0
    linformer_r: dict = field(default_factory=_no_linformer)
    use_lgt: bool = False
    use_refinement: bool = True
    group_readout: str = "token0"
    layernorm: str = "none"
    pe_hidden: int = 32
    ffn_hidden: int = 0
    fps_start: str = "lexicographic"

    def validate(self) -> None:
        if self.n_out < 1 or self.n_out > self.n_in:
            raise ConfigError(f"n_out must be in [1, n_in={self.n_in}], got {self.n_out}")
        if self.radius <= 0:
            raise ConfigError(f"radius must be positive, got {self.radius}")
        if self.k_samples < 1:
            raise ConfigError(f"k_samples must be >= 1, got {self.k_samples}")
        for label, width in (("c_in", self.c_in), ("c_med", self.c_med), ("c_out", self.c_out)):
            if width < 1:
                raise ConfigError(f"{label} must be positive, got {width}")
            if width % self.heads != 0:
                raise ConfigError(f"heads ({self.heads}) must divide {label} ({width})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.layers_lt < 1 or self.layers_gt < 1:
            raise ConfigError("layers_lt and layers_gt must be >= 1")
        if self.use_lgt and self.layers_lgt < 1:
            raise ConfigError("layers_lgt must be >= 1 when use_lgt is set")
        unknown = set(self.linformer_r) - set(_SUBBLOCKS)
        if unknown:
            raise ConfigError(f"unknown linformer_r keys: {sorted(unknown)}")
        if any(r < 0 for r in self.linformer_r.values()):
            raise ConfigError("linformer_r factors must be >= 0 (0 disables)")
        if self.use_refinement and self.linformer_r.get("lt", 0) >= 1:
            raise ConfigError(
                "coordinate refinement reads full attention rows; disable it or set linformer_r['lt']=0"
            )
        if self.group_readout not in ("token0", "maxpool"):
            raise ConfigError(f"unknown group_readout: {self.group_readout}")
        if self.layernorm not in ("none", "pre"):
            raise ConfigError(f"unknown layernorm setting: {self.layernorm}")

    def to_dict(self) -> dict:
        return {
            "n_in": self.n_in,
            "n_out": self.n_out,
            "radius": self.radius,
            "k_samples": self.k_samples,
            "c_in": self.c_in,
            "c_med": self.c_med,
            "c_out": self.c_out,
            "layers_lt": self.layers_lt,
            "layers_gt": self.layers_gt,
            "layers_lgt": self.layers_lgt,
            "heads": self.heads,
            "dropout": self.dropout,
            "linformer_r": dict(self.linformer_r),
            "use_lgt": self.use_lgt,
            "use_refinement": self.use_refinement,
            "group_readout": self.group_readout,
            "layernorm": self.layernorm,
            "pe_hidden": self.pe_hidden,
            "ffn_hidden": self.ffn_hidden,
            "fps_start": self.fps_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class BlockOutput:
    """Result of one full block."""

    centroids: Tensor                      # [N', 3], refined when enabled
    feats: Tensor                          # [N', c_out]
    pre_refinement_centroids: Tensor       # [N', 3], raw sampled coordinates
    neighborhood: NeighborhoodIndex
    lt_records: list = field(default_factory=list)
    gt_records: list = field(default_factory=list)
    lgt_records: list = field(default_factory=list)


class BlockParams:
    """All parameters of one block, created under a name prefix."""

    def __init__(self, lt_embed, lt_layers, gt_embed, gt_layers,
                 lgt_embed_q=None, lgt_embed_kv=None, lgt_layers=None):
        self.lt_embed = lt_embed
        self.lt_layers = lt_layers
        self.gt_embed = gt_embed
        self.gt_layers = gt_layers
        self.lgt_embed_q = lgt_embed_q
        self.lgt_embed_kv = lgt_embed_kv
        self.lgt_layers = lgt_layers or []

    @classmethod
    def create(cls, store: ParamStore, name: str, cfg: BlockConfig, in_width: int) -> "BlockParams":
        cfg.validate()
        ln = cfg.layernorm == "pre"

        def make_stack(prefix: str, d_model: int, n_layers: int, n_max_keys: int, r: int):
            pe = make_pe_net(store, f"{prefix}/pe", cfg.heads, cfg.pe_hidden)
            layers = []
            for i in range(n_layers):
                proj = None
                if r >= 1:
                    proj = make_linformer(store, f"{prefix}/layer{i}/linformer", n_max_keys, r)
                layers.append(
                    AttentionParams.create(
                        store,
                        f"{prefix}/layer{i}",
                        d_model,
                        cfg.heads,
                        pe_net=pe,
                        ffn_hidden=cfg.ffn_hidden or None,
                        dropout_p=cfg.dropout,
                        linformer=proj,
                        layernorm=ln,
                    )
                )
            return layers

        lt_embed = store.ffn(f"{name}/lt/embed", in_width, cfg.c_in, cfg.c_in)
        lt_layers = make_stack(f"{name}/lt", cfg.c_in, cfg.layers_lt,
                               cfg.k_samples, cfg.linformer_r.get("lt", 0))
        lgt_embed_q = lgt_embed_kv = None
        lgt_layers = None
        if cfg.use_lgt:
            lgt_embed_q = store.ffn(f"{name}/lgt/embed_q", cfg.c_in, cfg.c_med, cfg.c_med)
            lgt_embed_kv = store.ffn(f"{name}/lgt/embed_kv", in_width, cfg.c_med, cfg.c_med)
            lgt_layers = make_stack(f"{name}/lgt", cfg.c_med, cfg.layers_lgt,
                                    cfg.n_in, cfg.linformer_r.get("lgt", 0))
        gt_in = cfg.c_med if cfg.use_lgt else cfg.c_in
        gt_embed = store.ffn(f"{name}/gt/embed", gt_in, cfg.c_out, cfg.c_out)
        gt_layers = make_stack(f"{name}/gt", cfg.c_out, cfg.layers_gt,
                               cfg.n_out, cfg.linformer_r.get("gt", 0))
        return cls(lt_embed, lt_layers, gt_embed, gt_layers, lgt_embed_q, lgt_embed_kv, lgt_layers)


@dataclass
class LocalTransformerResult:
    token_feats: Tensor            # [N', c_in] readout per group
    group_coords: Tensor           # [N', K, 3] absolute coordinates
    centroid_ids: np.ndarray
    last_record: AttentionRecord   # final-layer attention over each group
    records: list                  # all layers, empty unless retained


def local_transformer(
    cloud: PointCloud,
    cfg: BlockConfig,
    params: BlockParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    retain_records: bool = False,
    chunk_groups: int = LT_CHUNK_GROUPS,
    alloc_stats: Optional[dict] = None,
):
    """Shared transformer stack over every ball-query group.

    Sampling, grouping, a position-wise input embedding, then the layer
    stack applied to each K-token group (one parameter set for all groups).
    The group collapses to its centroid token's output feature (or a max
    pool, per config).

    Returns:
        (LocalTransformerResult, NeighborhoodIndex)
    """
    centroid_ids = farthest_point_sample(cloud, cfg.n_out, start=cfg.fps_start)
    nbr = ball_query(cloud, centroid_ids, cfg.radius, cfg.k_samples)
    embedded = params.lt_embed(cloud.feats, training=training, rng=rng)
    grouped_coords, grouped_feats, rel_coords = group_features(
        PointCloud(cloud.coords, embedded), nbr
    )

    n_groups = cfg.n_out
    readouts = []
    per_layer_chunks: list[list] = [[] for _ in params.lt_layers]
    for lo in range(0, n_groups, chunk_groups):
        hi = min(lo + chunk_groups, n_groups)
        feats_chunk, recs = transblock(
            params.lt_layers,
            grouped_feats[lo:hi],
            rel_coords[lo:hi],
            training=training,
            rng=rng,
            alloc_stats=alloc_stats,
        )
        if cfg.group_readout == "maxpool":
            readouts.append(feats_chunk.max(axis=1))
        else:
            readouts.append(feats_chunk[:, 0, :])
        for layer_idx, rec in enumerate(recs):
            if retain_records or layer_idx == len(params.lt_layers) - 1:
                per_layer_chunks[layer_idx].append(rec)

    token_feats = readouts[0] if len(readouts) == 1 else concat(readouts, axis=0)

    def merge(layer_idx: int) -> AttentionRecord:
        chunks = per_layer_chunks[layer_idx]
        weights = chunks[0].weights if len(chunks) == 1 else concat([c.weights for c in chunks], axis=0)
        return AttentionRecord(weights=weights, layer=layer_idx, mode=chunks[0].mode)

    last_record = merge(len(params.lt_layers) - 1)
    records = [merge(i) for i in range(len(params.lt_layers))] if retain_records else []
    result = LocalTransformerResult(
        token_feats=token_feats,
        group_coords=grouped_coords,
        centroid_ids=centroid_ids,
        last_record=last_record,
        records=records,
    )
    return result, nbr


def refine_centroids(lt_last_layer: AttentionRecord, group_coords: Tensor) -> Tensor:
    """Shift each centroid to its group's attention-weighted average.

    The weight vector is the head-mean of the centroid token's attention
    row (row 0) in the final local-transformer layer; the refined centroid
    is the weighted average of the group's absolute coordinates, hence a
    convex combination that stays inside the group's bounding box. The
    result is differentiable through the attention weights.
    """
    if lt_last_layer.mode != "full":
        raise ValueError("refinement needs full-mode attention rows over the group tokens")
    k = group_coords.shape[-2]
    if lt_last_layer.n_keys != k:
        raise DimensionError(
            f"attention row length {lt_last_layer.n_keys} does not match group size {k}"
        )
    n_groups = group_coords.shape[0]
    row0 = lt_last_layer.weights[:, :, 0, :]        # [N', M, K]
    w = row0.mean(axis=1)                           # head mean -> [N', K]
    refined = matmul(reshape(w, (n_groups, 1, k)), group_coords)
    return reshape(refined, (n_groups, 3))


def global_transformer(
    feats: Tensor,
    coords: Tensor,
    cfg: BlockConfig,
    params: BlockParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    alloc_stats: Optional[dict] = None,
):
    """Self-attention over the entire point set of a stage.

    Input embedding followed by the layer stack over all points as one
    group; switches to the low-rank path when the config enables it.

    Returns:
        (feats [N, c_out], records)
    """
    x = params.gt_embed(feats, training=training, rng=rng)
    return transblock(params.gt_layers, x, coords, training=training, rng=rng, alloc_stats=alloc_stats)


def local_global_transformer(
    low_feats: Tensor,
    low_coords: Tensor,
    high_feats: Tensor,
    high_coords: Tensor,
    cfg: BlockConfig,
    params: BlockParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    alloc_stats: Optional[dict] = None,
):
    """Cross-attention: low-resolution centroids query high-resolution points.

    Both sides get their own input embedding; every layer attends to the
    same embedded high-resolution keys/values, with the positional bias on
    (x_query - x_key).

    Returns:
        (feats [N', c_med], records)
    """
    if params.lgt_layers is None or not params.lgt_layers:
        raise ConfigError("block was built without local-global layers")
    q = params.lgt_embed_q(low_feats, training=training, rng=rng)
    kv = params.lgt_embed_kv(high_feats, training=training, rng=rng)
    return transblock(
        params.lgt_layers, q, low_coords,
        kv_feats=kv, kv_coords=high_coords,
        training=training, rng=rng, alloc_stats=alloc_stats,
    )


def pointformer_block(
    cloud: PointCloud,
    cfg: BlockConfig,
    params: BlockParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    retain_records: bool = False,
    alloc_stats: Optional[dict] = None,
) -> BlockOutput:
    """One full block: local stage, refinement, cross stage, global stage.

    Refinement runs immediately after the local stage so every downstream
    positional bias sees the refined coordinates. The cross stage queries
    the block's input set; the global stage consumes whichever features the
    previous stage produced.
    """
    lt_result, nbr = local_transformer(
        cloud, cfg, params,
        training=training, rng=rng,
        retain_records=retain_records, alloc_stats=alloc_stats,
    )
    raw_centroids = gather(cloud.coords, lt_result.centroid_ids)
    if cfg.use_refinement:
        centroids = refine_centroids(lt_result.last_record, lt_result.group_coords)
    else:
        centroids = raw_centroids

    feats = lt_result.token_feats
    lgt_records: list = []
    if cfg.use_lgt:
        feats, lgt_records = local_global_transformer(
            feats, centroids, cloud.feats, cloud.coords, cfg, params,
            training=training, rng=rng, alloc_stats=alloc_stats,
        )
    feats, gt_records = global_transformer(
        feats, centroids, cfg, params,
        training=training, rng=rng, alloc_stats=alloc_stats,
    )
    return BlockOutput(
        centroids=centroids,
        feats=feats,
        pre_refinement_centroids=raw_centroids,
        neighborhood=nbr,
        lt_records=lt_result.records if retain_records else [],
        gt_records=gt_records if retain_records else [],
        lgt_records=lgt_records if retain_records else [],
    )
