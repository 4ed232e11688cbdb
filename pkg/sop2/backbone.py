"""Sparse-voxel transformer detector: VFE, prompted set attention blocks, BEV scatter and head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ModelConfig, PromptMode, TuningMode
from .errors import DimensionError, WiringError
from .layers import LayerNorm, Linear, Mlp, Module
from .logging_config import logger as structured_logger
from .numkernel import (
    AttentionWeights,
    BoolArray,
    FloatArray,
    IntArray,
    Tensor,
    absolute,
    log_sigmoid,
    mhsa,
    mul,
    power,
    reshape,
    scatter_rows,
    sigmoid,
    slice_axis,
    sub,
    take,
    tensor_sum,
)
from .partition import PartitionSchedule, SetPartition, plan_partition, scatter_back, set_means
from .pointcloud import Extent, GridSize, PointCloud, SceneLabel, VoxelFeatureEncoder, VoxelGrid, voxelize
from .prompts import (
    PromptedSets,
    PromptGenerator,
    PromptPool,
    PromptToken,
    attach_generated_prompts,
    attach_pool_prompts,
    attach_prompt_tokens,
)

NUM_CLASSES = 3
NUM_BOX_PARAMS = 5  # dx, dy, log length, log width, yaw
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2


# ==================== TRANSFORMER LAYERS ====================

class EncoderLayer(Module):
    """Post-norm attention + MLP sublayers used by one set partition."""

    def __init__(self, channels: int, heads: int, mlp_ratio: int, rng: np.random.Generator,
                 ln_eps: float = 1e-5):
        self.heads = heads
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)
        self.norm1 = LayerNorm(channels, ln_eps)
        self.mlp = Mlp([channels, mlp_ratio * channels, channels], rng)
        self.norm2 = LayerNorm(channels, ln_eps)

    def attention_weights(self) -> AttentionWeights:
        return AttentionWeights(self.q, self.k, self.v, self.out)


class TransformerBlock(Module):
    """Two encoder layers: the X-sorted partition, then the Y-sorted one."""

    def __init__(self, channels: int, heads: int, mlp_ratio: int, rng: np.random.Generator,
                 ln_eps: float = 1e-5):
        self.layers = [EncoderLayer(channels, heads, mlp_ratio, rng, ln_eps) for _ in range(2)]


# ==================== HEAD ====================

class Detections(NamedTuple):
    logits: Tensor  # (H, W, 3)
    regression: Tensor  # (H, W, 5)


class DetectionHead(Module):
    def __init__(self, channels: int, head_channels: int, rng: np.random.Generator):
        self.cls = Mlp([channels, head_channels, NUM_CLASSES], rng)
        self.reg = Mlp([channels, head_channels, NUM_BOX_PARAMS], rng)

    def __call__(self, bev: Tensor) -> Detections:
        return head_forward(bev, self)


def head_forward(bev: Tensor, head: DetectionHead) -> Detections:
    """Pointwise class logits and box regression for every BEV cell."""
    return Detections(head.cls(bev), head.reg(bev))


def bev_scatter(features: Tensor, coords: IntArray, grid_shape: Tuple[int, int]) -> Tensor:
    """Dense (H, W, C) map; cell (ix, iy) holds voxel (ix, iy), empty cells are zero."""
    height, width = grid_shape
    if features.shape[0] != len(coords):
        raise DimensionError(f"{features.shape[0]} feature rows for {len(coords)} coords")
    cells = coords[:, 0] * width + coords[:, 1]
    flat = scatter_rows(features, cells, np.ones(len(cells), dtype=bool), height * width)
    return reshape(flat, (height, width, features.shape[-1]))


# ==================== LOSS ====================

@dataclass(frozen=True)
class Targets:
    heatmap: BoolArray  # (H, W, 3)
    cells: IntArray  # (P,) flat index ix * W + iy of positive cells
    regression: FloatArray  # (P, 5)

    @property
    def num_positive(self) -> int:
        return int(self.cells.size)


def rasterize_targets(label: SceneLabel, extent: Extent, grid_size: GridSize,
                      grid_shape: Tuple[int, int]) -> Targets:
    """Mark each box centre cell; a later box wins the regression target of a shared cell."""
    height, width = grid_shape
    heatmap = np.zeros((height, width, NUM_CLASSES), dtype=bool)
    by_cell: Dict[int, FloatArray] = {}
    for cx, cy, length, box_width, yaw, cls in label.boxes:
        u = (cx - extent[0]) / grid_size[0]
        v = (cy - extent[1]) / grid_size[1]
        ix = min(max(int(math.floor(u)), 0), height - 1)
        iy = min(max(int(math.floor(v)), 0), width - 1)
        heatmap[ix, iy, int(cls)] = True
        by_cell[ix * width + iy] = np.array([
            u - (ix + 0.5), v - (iy + 0.5), math.log(length), math.log(box_width), yaw,
        ])
    cells = np.array(sorted(by_cell), dtype=np.int64)
    regression = np.array([by_cell[c] for c in cells]).reshape(-1, NUM_BOX_PARAMS)
    return Targets(heatmap, cells, regression)


def focal_loss(logits: Tensor, targets: BoolArray, alpha: float = FOCAL_ALPHA,
               gamma: int = FOCAL_GAMMA) -> Tensor:
    """Summed binary focal loss; positives weigh ``alpha``, negatives ``1 - alpha``."""
    t = targets.astype(np.float64)
    pos = mul(power(sigmoid(-logits), gamma), -log_sigmoid(logits))
    neg = mul(power(sigmoid(logits), gamma), -log_sigmoid(-logits))
    weighted = mul(pos, Tensor(alpha * t)) + mul(neg, Tensor((1.0 - alpha) * (1.0 - t)))
    return tensor_sum(weighted)


def detection_loss(det: Detections, label: SceneLabel, extent: Extent, grid_size: GridSize) -> Tensor:
    """Focal heatmap loss plus L1 box loss at centre cells, each over max(1, #positives)."""
    height, width = det.logits.shape[:2]
    targets = rasterize_targets(label, extent, grid_size, (height, width))
    norm = 1.0 / max(1, targets.num_positive)
    loss = focal_loss(det.logits, targets.heatmap) * norm
    if targets.num_positive:
        flat = reshape(det.regression, (height * width, NUM_BOX_PARAMS))
        residual = sub(take(flat, targets.cells), targets.regression)
        loss = loss + tensor_sum(absolute(residual)) * norm
    return loss


# ==================== MODEL ====================

@dataclass(frozen=True)
class PartitionTrace:
    """What one set partition saw and produced during a forward pass."""

    partition: int
    sets: SetPartition  # gathered input sets, before prompting
    prompt_count: int
    output: Tensor  # (V, C) voxel features after the partition
    selected: Optional[IntArray] = None


@dataclass(frozen=True)
class ForwardResult:
    detections: Detections
    voxels: VoxelGrid
    trace: List[PartitionTrace]
    aux_loss: Optional[Tensor] = None  # summed pool key-pull terms


PromptMechanism = Union[PromptToken, PromptGenerator, PromptPool]


class Sop2Detector(Module):
    """Voxel encoder, 2 * blocks prompted set partitions and a per-cell head.

    Each part draws its initial weights from its own random stream, so models
    that differ only in prompt wiring share identical backbone and head weights.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config.channels
        backbone_rng = np.random.default_rng([config.seed, 0])
        head_rng = np.random.default_rng([config.seed, 1])

        self.vfe = VoxelFeatureEncoder(c, backbone_rng, config.vfe_layers)
        self.blocks = [
            TransformerBlock(c, config.heads, config.mlp_ratio, backbone_rng, config.ln_eps)
            for _ in range(config.blocks)
        ]
        self.head = DetectionHead(c, config.head_channels, head_rng)

        self.prompt_tokens: Dict[str, PromptToken] = {}
        self.generators: Dict[str, PromptGenerator] = {}
        self.pools: Dict[str, PromptPool] = {}
        for j in range(1, config.num_partitions + 1):
            mode = config.mode_for(j)
            rng = np.random.default_rng([config.seed, 2, j])
            if mode is PromptMode.TOKEN:
                self.prompt_tokens[str(j)] = PromptToken(j, config.num_tokens, c, rng, config.prompt_init)
            elif mode is PromptMode.GENERATOR:
                self.generators[str(j)] = PromptGenerator(
                    j, c, rng, config.generator_layers, config.num_generated
                )
            elif mode is PromptMode.POOL:
                self.pools[str(j)] = PromptPool(
                    j, c, rng, config.pool_size, config.prompt_length, config.top_k,
                    config.prompt_init, config.cos_eps,
                )

    @property
    def schedule(self) -> PartitionSchedule:
        return PartitionSchedule.from_config(self.config)

    def layer_for(self, partition: int) -> EncoderLayer:
        block = self.schedule.block_of(partition)
        return self.blocks[block].layers[(partition - 1) % 2]

    def mechanism_for(self, partition: int) -> Optional[PromptMechanism]:
        key = str(partition)
        for table in (self.prompt_tokens, self.generators, self.pools):
            if key in table:
                return table[key]  # type: ignore[return-value]
        return None

    def attach(self, sp: SetPartition) -> PromptedSets:
        mechanism = self.mechanism_for(sp.index)
        if isinstance(mechanism, PromptToken):
            return attach_prompt_tokens(sp, mechanism)
        if isinstance(mechanism, PromptGenerator):
            return attach_generated_prompts(sp, mechanism)
        if isinstance(mechanism, PromptPool):
            return attach_pool_prompts(sp, mechanism, self.config.key_pull_weight)
        assert sp.sets is not None
        return PromptedSets(sp.index, sp.sets, sp.masks, 0)

    def partition_forward(self, features: Tensor, vg: VoxelGrid, partition: int) -> Tuple[Tensor, PartitionTrace, Optional[Tensor]]:
        schedule = self.schedule
        plan = plan_partition(
            vg.coords, schedule.window_for(partition), schedule.axis_for(partition),
            self.config.set_size, vg.grid_shape, partition,
        )
        sp = plan.gather(features)
        if sp.num_sets == 0:
            return features, PartitionTrace(partition, sp, 0, features), None

        layer = self.layer_for(partition)
        prompted = self.attach(sp)
        attended = mhsa(prompted.tokens, prompted.masks, layer.attention_weights(), layer.heads)
        attended = strip_prompts(attended, prompted.prompt_count, sp.set_size)

        assert sp.sets is not None
        h = layer.norm1(sp.sets + attended)
        h = layer.norm2(h + layer.mlp(h))
        out = scatter_back(sp, h)

        structured_logger.log_partition(partition, sp.num_sets, prompted.prompt_count)
        trace = PartitionTrace(partition, sp, prompted.prompt_count, out, prompted.selected)
        return out, trace, prompted.key_loss

    def __call__(self, pc: PointCloud) -> ForwardResult:
        return model_forward(pc, self)


def strip_prompts(outputs: Tensor, prompt_count: int, set_size: int) -> Tensor:
    """Drop the leading ``prompt_count`` rows of every set."""
    if outputs.ndim != 3 or outputs.shape[1] != prompt_count + set_size:
        raise WiringError(
            f"{outputs.shape} rows per set, expected {prompt_count} prompts + {set_size} voxels"
        )
    if prompt_count == 0:
        return outputs
    return slice_axis(outputs, prompt_count, prompt_count + set_size, axis=1)


def block_forward(model: Sop2Detector, features: Tensor, vg: VoxelGrid,
                  block: int) -> Tuple[Tensor, List[PartitionTrace], List[Tensor]]:
    """Run both partitions of ``block`` (0-based); the voxel count never changes."""
    if features.shape[0] != vg.num_voxels:
        raise DimensionError(f"{features.shape[0]} feature rows for {vg.num_voxels} voxels")
    traces: List[PartitionTrace] = []
    aux: List[Tensor] = []
    for partition in model.schedule.partitions_of_block(block):
        features, trace, key_loss = model.partition_forward(features, vg, partition)
        traces.append(trace)
        if key_loss is not None:
            aux.append(key_loss)
    return features, traces, aux


def model_forward(pc: PointCloud, model: Sop2Detector) -> ForwardResult:
    """voxelize -> VFE -> blocks -> BEV scatter -> head."""
    config = model.config
    vg = voxelize(pc, config.grid_size, config.max_points_per_voxel)
    features = model.vfe(vg)
    trace: List[PartitionTrace] = []
    aux: List[Tensor] = []
    for block in range(config.blocks):
        features, block_trace, block_aux = block_forward(model, features, vg, block)
        trace.extend(block_trace)
        aux.extend(block_aux)

    bev = bev_scatter(features, vg.coords, config.grid_shape)
    aux_loss: Optional[Tensor] = None
    for term in aux:
        aux_loss = term if aux_loss is None else aux_loss + term
    return ForwardResult(model.head(bev), vg.with_features(features), trace, aux_loss)


_MODE_PROMPTS = {
    TuningMode.PROMPT_TOKEN: PromptMode.TOKEN,
    TuningMode.PROMPT_GENERATOR: PromptMode.GENERATOR,
    TuningMode.SOP2: PromptMode.POOL,
    TuningMode.SOP2_PLUS_LORA: PromptMode.POOL,
}


def config_for_mode(config: ModelConfig, mode: Union[TuningMode, str]) -> ModelConfig:
    """Model config whose prompt mechanism matches tuning ``mode``."""
    prompt_mode = _MODE_PROMPTS.get(TuningMode(mode), PromptMode.NONE)
    if prompt_mode is config.prompt_mode:
        return config
    return config.model_copy(update={"prompt_mode": prompt_mode})


def set_embeddings(trace: Sequence[PartitionTrace]) -> List[Tuple[int, int, FloatArray]]:
    """(partition, set index, masked-mean feature) for every set in ``trace``."""
    rows = []
    for item in trace:
        if item.sets.num_sets == 0:
            continue
        for i, vector in enumerate(set_means(item.sets)):
            rows.append((item.partition, i, vector))
    return rows
