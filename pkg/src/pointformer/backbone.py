"""Multi-scale U-Net assembly of blocks plus feature-propagation upsampling.

A backbone is a configured chain of downsampling blocks (each block's
output count feeds the next block) followed by upsampling stages that
interpolate features back onto earlier stages' points through skip
connections. Bundled presets under ``configs/`` reproduce the published
indoor and outdoor architecture tables.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blocks import BlockConfig, BlockParams, pointformer_block
from .errors import ConfigError, DimensionError
from .points import PointCloud, feature_propagation
from .tensor import LinearLayer, ParamStore, Tensor, backward, concat, tmean

PRESET_NAMES = ("indoor_table7", "kitti_table8")


@dataclass
class FPStageConfig:
    """One upsampling stage: interpolate onto the block stage with this resolution."""

    n_points: int
    c_out: int

    def to_dict(self) -> dict:
        return {"n_points": self.n_points, "c_out": self.c_out}


@dataclass
class BackboneConfig:
    blocks: list
    fp_stages: list = field(default_factory=list)
    seed: int = 0
    precision: int = 32
    input_channels: int = 0

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("backbone needs at least one block")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        for i, b in enumerate(self.blocks):
            b.validate()
            if i > 0 and b.n_in != self.blocks[i - 1].n_out:
                raise ConfigError(
                    f"block {i} expects {b.n_in} input points but block {i - 1} emits "
                    f"{self.blocks[i - 1].n_out}"
                )
        resolutions = [b.n_out for b in self.blocks]
        for i, fp in enumerate(self.fp_stages):
            if fp.n_points not in resolutions:
                raise ConfigError(
                    f"fp stage {i} targets resolution {fp.n_points}, which no block emits "
                    f"(available: {resolutions})"
                )

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "precision": self.precision,
            "input_channels": self.input_channels,
            "blocks": [b.to_dict() for b in self.blocks],
            "fp_stages": [fp.to_dict() for fp in self.fp_stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        cfg = cls(
            blocks=[BlockConfig.from_dict(b) for b in d["blocks"]],
            fp_stages=[FPStageConfig(**fp) for fp in d.get("fp_stages", [])],
            seed=d.get("seed", 0),
            precision=d.get("precision", 32),
            input_channels=d.get("input_channels", 0),
        )
        cfg.validate()
        return cfg


def load_config(path_or_preset: str) -> BackboneConfig:
    """Load a backbone config from a JSON file or a bundled preset name."""
    if path_or_preset in PRESET_NAMES:
        text = (
            importlib.resources.files("pointformer")
            .joinpath(f"configs/{path_or_preset}.json")
            .read_text()
        )
    else:
        with open(path_or_preset, "r", encoding="utf-8") as fh:
            text = fh.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {path_or_preset}: {exc}") from exc
    return BackboneConfig.from_dict(payload)


@dataclass
class StageOutput:
    name: str
    n_points: int
    coords: Tensor
    feats: Tensor


@dataclass
class ForwardResult:
    stages: list
    records: list  # one {"lt": [...], "lgt": [...], "gt": [...]} dict per block

    def stage(self, name: str) -> StageOutput:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def final(self) -> StageOutput:
        return self.stages[-1]


class Backbone:
    """Read-only model handle; all state lives in the ParamStore."""

    def __init__(self, cfg: BackboneConfig, store: ParamStore, block_params: list, fp_ffns: list):
        self.cfg = cfg
        self.store = store
        self.block_params = block_params
        self.fp_ffns = fp_ffns

    @property
    def final_width(self) -> int:
        if self.cfg.fp_stages:
            return self.cfg.fp_stages[-1].c_out
        return self.cfg.blocks[-1].c_out

    def forward(
        self,
        cloud: PointCloud,
        retain_records: bool = False,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        alloc_stats: Optional[dict] = None,
    ) -> ForwardResult:
        """Run every down stage then every upsampling stage.

        The input features are the constant channel 1 concatenated with the
        cloud's own channels (which must match the configured
        ``input_channels``).

        Raises:
            ValueError: if the cloud has fewer points than the first
                block's output count.
        """
        cfg = self.cfg
        if cloud.n_points < cfg.blocks[0].n_out:
            raise ValueError(
                f"need at least {cfg.blocks[0].n_out} input points, got {cloud.n_points}"
            )
        if cloud.n_channels != cfg.input_channels:
            raise DimensionError(
                f"config expects {cfg.input_channels} feature channels, cloud has {cloud.n_channels}"
            )
        ones = Tensor(np.ones((cloud.n_points, 1), dtype=cfg.dtype))
        feats = concat([ones, cloud.feats], axis=1) if cloud.n_channels else ones
        current = PointCloud(cloud.coords, feats)

        stages: list[StageOutput] = []
        records: list[dict] = []
        for i, (bcfg, bparams) in enumerate(zip(cfg.blocks, self.block_params)):
            out = pointformer_block(
                current, bcfg, bparams,
                training=training, rng=rng,
                retain_records=retain_records, alloc_stats=alloc_stats,
            )
            stages.append(StageOutput(f"down{i}", bcfg.n_out, out.centroids, out.feats))
            records.append({"lt": out.lt_records, "lgt": out.lgt_records, "gt": out.gt_records})
            current = PointCloud(out.centroids, out.feats)

        for i, (fp, ffn) in enumerate(zip(cfg.fp_stages, self.fp_ffns)):
            source = _skip_source(stages, fp.n_points)
            new_feats = feature_propagation(
                current, source.coords, source.feats, ffn, training=training, rng=rng
            )
            stages.append(StageOutput(f"up{i}", fp.n_points, source.coords, new_feats))
            current = PointCloud(source.coords, new_feats)
        return ForwardResult(stages=stages, records=records)


def _skip_source(stages: list, n_points: int) -> StageOutput:
    for s in reversed(stages):
        if s.name.startswith("down") and s.n_points == n_points:
            return s
    raise ConfigError(f"no down stage with resolution {n_points} for skip connection")


def build(cfg: BackboneConfig) -> tuple[Backbone, ParamStore]:
    """Create and initialize all parameters for a backbone config.

    Parameters are drawn in a fixed order from the seeded store, so equal
    seeds give bit-identical stores.

    Raises:
        ConfigError: on chaining violations (block t+1's expected input
            count must equal block t's output count).
    """
    cfg.validate()
    store = ParamStore(cfg.seed, dtype=cfg.dtype)
    block_params = []
    width = 1 + cfg.input_channels
    widths_by_resolution: dict[int, int] = {}
    for i, bcfg in enumerate(cfg.blocks):
        block_params.append(BlockParams.create(store, f"block{i}", bcfg, width))
        width = bcfg.c_out
        widths_by_resolution[bcfg.n_out] = bcfg.c_out
    fp_ffns = []
    for i, fp in enumerate(cfg.fp_stages):
        if fp.n_points not in widths_by_resolution:
            raise ConfigError(f"fp stage {i} targets unknown resolution {fp.n_points}")
        c_skip = widths_by_resolution[fp.n_points]
        fp_ffns.append(store.ffn(f"fp{i}/ffn", width + c_skip, fp.c_out, fp.c_out))
        width = fp.c_out
        widths_by_resolution[fp.n_points] = fp.c_out
    return Backbone(cfg, store, block_params, fp_ffns), store


# -- bundled synthetic scene and the overfit demonstration ----------------------


SCENE_SEED = 20210321
SCENE_POINTS = 64
SCENE_CHANNELS = 8


def synthetic_scene(dtype=np.float32) -> PointCloud:
    """The bundled 64-point scene: two Gaussian clusters plus scatter."""
    rng = np.random.default_rng(SCENE_SEED)
    a = rng.normal(loc=(-1.0, 0.0, 0.0), scale=0.35, size=(24, 3))
    b = rng.normal(loc=(1.2, 0.8, -0.3), scale=0.45, size=(24, 3))
    scatter = rng.uniform(-2.0, 2.0, size=(16, 3))
    coords = np.concatenate([a, b, scatter]).astype(dtype)
    feats = rng.normal(size=(SCENE_POINTS, SCENE_CHANNELS)).astype(dtype)
    return PointCloud(Tensor(coords), Tensor(feats))


def overfit_config(seed: int = 0, precision: int = 64) -> BackboneConfig:
    """Tiny two-block config sized for the bundled scene."""
    return BackboneConfig(
        blocks=[
            BlockConfig(n_in=SCENE_POINTS, n_out=32, radius=0.9, k_samples=8,
                        c_in=16, c_med=16, c_out=32, layers_lt=1, layers_gt=1,
                        heads=2, pe_hidden=8),
            BlockConfig(n_in=32, n_out=16, radius=1.4, k_samples=8,
                        c_in=32, c_med=32, c_out=32, layers_lt=1, layers_gt=1,
                        heads=2, pe_hidden=8),
        ],
        fp_stages=[FPStageConfig(n_points=32, c_out=32)],
        seed=seed,
        precision=precision,
        input_channels=SCENE_CHANNELS,
    )


class OverfitDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


def overfit(
    model: Backbone,
    store: ParamStore,
    steps: int = 2000,
    lr="auto",
    scene: Optional[PointCloud] = None,
    targets: Optional[np.ndarray] = None,
) -> list:
    """Gradient-descent regression of per-point scalars on the bundled scene.

    Plain gradient descent on every parameter. With ``lr="auto"`` the rate
    starts at 0.5 and halves whenever a step fails to improve the loss
    (the step is undone first), which keeps the trace finite and
    deterministic. A fixed numeric ``lr`` runs unguarded and raises
    ``OverfitDivergence`` if the loss leaves the reals.

    Returns:
        One loss value per step (the loss *before* that step's update),
        plus the final loss appended, so ``len == steps + 1``.
    """
    cfg = model.cfg
    if scene is None:
        scene = synthetic_scene(dtype=cfg.dtype)
    rng = np.random.default_rng(SCENE_SEED + 1)
    n_targets = cfg.fp_stages[-1].n_points if cfg.fp_stages else cfg.blocks[-1].n_out
    if targets is None:
        targets = rng.uniform(-1.0, 1.0, size=n_targets)
    targets_t = Tensor(np.asarray(targets, dtype=cfg.dtype).reshape(-1, 1))

    head_name = "overfit_head"
    if f"{head_name}/weight" in store:
        head = LinearLayer(store[f"{head_name}/weight"], store[f"{head_name}/bias"])
        head.weight.data = np.zeros_like(head.weight.data)
        head.bias.data = np.zeros_like(head.bias.data)
    else:
        head = store.linear(head_name, model.final_width, 1, init="zeros")

    auto = lr == "auto"
    rate = 0.5 if auto else float(lr)

    def evaluate() -> float:
        store.zero_grad()
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                result = model.forward(scene)
                pred = head(result.final.feats)
                err = pred - targets_t
                loss = tmean(err * err)
                backward(loss)
                value = loss.item()
        except (ValueError, FloatingPointError):
            # non-finite coordinates abort the forward pass; treat as divergence
            return float("inf")
        return value if np.isfinite(value) else float("inf")

    def descend():
        for _, p in store.items():
            if p.grad is not None:
                p.data = p.data - rate * p.grad

    losses: list[float] = []
    prev_state = store.snapshot()
    prev_loss = evaluate()
    if not np.isfinite(prev_loss):
        raise OverfitDivergence(0)
    for step in range(steps):
        losses.append(prev_loss)
        descend()
        loss = evaluate()
        if auto and (not np.isfinite(loss) or loss > 2.0 * prev_loss):
            # diverging: undo the step and halve the rate
            store.restore(prev_state)
            rate *= 0.5
            loss = evaluate()
        elif not np.isfinite(loss):
            raise OverfitDivergence(step + 1)
        else:
            prev_state = store.snapshot()
        prev_loss = loss
    losses.append(prev_loss)
    return losses
