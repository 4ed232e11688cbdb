"""Tuning modes, LoRA adapters, parameter accounting, training and cell-level evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .backbone import (
    NUM_CLASSES,
    Detections,
    Sop2Detector,
    config_for_mode,
    detection_loss,
    rasterize_targets,
)
from .config import ModelConfig, RunConfig, TrainConfig, TuningMode, settings
from .errors import CheckpointError, ConfigurationError, NumericalError
from .layers import Linear, LoraLinear
from .logging_config import logger as structured_logger
from .numkernel import FloatArray, Tape, Tensor, assert_finite, no_tape
from .pointcloud import Scene, generate_scenes
from .schemas import CLASS_NAMES, PARAM_GROUPS, ClassMetrics, EpochRecord, EvalMetrics, ParamReport, TrainLog

logger = logging.getLogger(__name__)

ModeLike = Union[TuningMode, str]

ALL_GROUPS: FrozenSet[str] = frozenset(PARAM_GROUPS)

MODE_GROUPS: Dict[TuningMode, FrozenSet[str]] = {
    TuningMode.FROM_SCRATCH: ALL_GROUPS,
    TuningMode.FULL_FINETUNE: ALL_GROUPS,
    TuningMode.HEAD_FINETUNE: frozenset({"head"}),
    TuningMode.BITFIT: frozenset({"biases", "head"}),
    TuningMode.LORA: frozenset({"lora", "head"}),
    TuningMode.PROMPT_TOKEN: frozenset({"prompts", "head"}),
    TuningMode.PROMPT_GENERATOR: frozenset({"generators", "head"}),
    TuningMode.SOP2: frozenset({"pools", "head"}),
    TuningMode.SOP2_PLUS_LORA: frozenset({"pools", "lora", "head"}),
}

# Groups that must hold parameters before a mode can train.
REQUIRED_GROUPS: Dict[TuningMode, FrozenSet[str]] = {
    TuningMode.LORA: frozenset({"lora"}),
    TuningMode.PROMPT_TOKEN: frozenset({"prompts"}),
    TuningMode.PROMPT_GENERATOR: frozenset({"generators"}),
    TuningMode.SOP2: frozenset({"pools"}),
    TuningMode.SOP2_PLUS_LORA: frozenset({"pools", "lora"}),
}

LORA_MODES = frozenset({TuningMode.LORA, TuningMode.SOP2_PLUS_LORA})
PROJECTIONS = ("q", "k", "v", "out")
PROMPT_GROUPS = frozenset({"prompts", "pools", "generators", "lora"})


# ==================== PARAMETER GROUPS ====================

def param_group(name: str) -> str:
    """Group of a parameter, from its dotted name."""
    root = name.split(".", 1)[0]
    leaf = name.rsplit(".", 1)[-1]
    if root == "head":
        return "head"
    if root == "prompt_tokens":
        return "prompts"
    if root in ("pools", "generators"):
        return root
    if leaf in ("lora_a", "lora_b"):
        return "lora"
    if leaf in ("bias", "beta"):
        return "biases"
    return "backbone"


def group_sizes(model: Sop2Detector) -> Dict[str, int]:
    sizes = {group: 0 for group in PARAM_GROUPS}
    for name, p in model.named_parameters():
        sizes[param_group(name)] += p.size
    return sizes


def set_trainable(model: Sop2Detector, mode: ModeLike) -> None:
    """Flag exactly the parameters ``mode`` trains; everything else is frozen."""
    mode = TuningMode(mode)
    sizes = group_sizes(model)
    missing = sorted(g for g in REQUIRED_GROUPS.get(mode, ()) if sizes[g] == 0)
    if missing:
        raise ConfigurationError(f"mode {mode.value} needs {', '.join(missing)} but the model has none")
    allowed = MODE_GROUPS[mode]
    for name, p in model.named_parameters():
        p.requires_grad = param_group(name) in allowed


def count_params(model: Sop2Detector, mode: ModeLike) -> ParamReport:
    mode = TuningMode(mode)
    allowed = MODE_GROUPS[mode]
    sizes = group_sizes(model)
    counts = {group: (size if group in allowed else 0) for group, size in sizes.items()}
    return ParamReport(mode=mode.value, trainable=sum(counts.values()), total=sum(sizes.values()), **counts)


# ==================== LORA ====================

def lora_wrap(layer: Linear, rank: int, alpha: float, rng: np.random.Generator) -> LoraLinear:
    return LoraLinear(layer, rank, alpha, rng)


def apply_lora(model: Sop2Detector, rank: int, alpha: float, seed: int = 0) -> int:
    """Wrap Q, K, V and output projections of every attention layer; returns the count wrapped."""
    rng = np.random.default_rng([seed, 3])
    wrapped = 0
    for block in model.blocks:
        for layer in block.layers:
            for attr in PROJECTIONS:
                base = getattr(layer, attr)
                if isinstance(base, LoraLinear):
                    continue
                setattr(layer, attr, lora_wrap(base, rank, alpha, rng))
                wrapped += 1
    return wrapped


# ==================== MODEL ASSEMBLY ====================

def load_pretrained(model: Sop2Detector, state: Mapping[str, FloatArray]) -> List[str]:
    """Copy backbone and head tensors of a pretrained model in; prompt tensors keep their init."""
    wanted = {name for name, _ in model.named_parameters() if param_group(name) not in PROMPT_GROUPS}
    missing = sorted(wanted - set(state))
    if missing:
        raise CheckpointError(f"pretrained state lacks {len(missing)} tensors, first {missing[0]}")
    return model.load_state_dict({k: v for k, v in state.items() if k in wanted}, strict=False)


def build_model(config: ModelConfig, mode: Optional[ModeLike] = None,
                pretrained: Optional[Mapping[str, FloatArray]] = None) -> Sop2Detector:
    """Detector wired for ``mode``: prompt mechanism from the mode, pretrained weights, then LoRA."""
    if mode is not None:
        config = config_for_mode(config, mode)
    model = Sop2Detector(config)
    if pretrained is not None:
        loaded = load_pretrained(model, pretrained)
        logger.debug("loaded %d pretrained tensors", len(loaded))
    if mode is not None and TuningMode(mode) in LORA_MODES:
        apply_lora(model, config.lora_rank, config.lora_alpha, config.seed)
    return model


# ==================== OPTIMIZER ====================

def cosine_lr(step: int, total_steps: int, base_lr: float, warmup: float = 0.05) -> float:
    """Linear warmup over the first ``warmup`` share of steps, then cosine decay towards zero."""
    warmup_steps = math.ceil(warmup * total_steps) if warmup > 0 else 0
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params: Iterable[Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.assign_(p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


# ==================== TRAINING ====================

def select_fraction(count: int, fraction: float, seed: int) -> List[int]:
    """ceil(fraction * count) scene indices, drawn by a seeded permutation and kept sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must be in (0, 1], got {fraction}")
    take = min(count, math.ceil(fraction * count - 1e-9))
    order = np.random.default_rng([seed, 5]).permutation(count)
    return sorted(int(i) for i in order[:take])


def scene_losses(model: Sop2Detector, scene: Scene) -> Tuple[Tensor, Optional[Tensor]]:
    """Detection loss of one scene and the key-pull term, if the model has pools."""
    result = model(scene.cloud)
    config = model.config
    task = detection_loss(result.detections, scene.label, config.extent, config.grid_size)
    return task, result.aux_loss


def scene_loss(model: Sop2Detector, scene: Scene) -> Tensor:
    """The training objective: detection loss plus the key-pull term."""
    task, aux = scene_losses(model, scene)
    return task if aux is None else task + aux


def train_step(model: Sop2Detector, scene: Scene, optimizer: Adam, lr: float) -> Tuple[float, float]:
    """One Adam step on one scene; returns (detection loss, key-pull term)."""
    for p in model.parameters():
        p.grad = None
    with Tape() as tape:
        task, aux = scene_losses(model, scene)
        loss = task if aux is None else task + aux
        tape.backward(loss)
    if settings.nan_check:
        assert_finite(loss, "loss")
        for name, p in model.named_parameters():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"{name}.grad")
    optimizer.step(lr)
    return task.item(), 0.0 if aux is None else aux.item()


def train(model: Sop2Detector, scenes: Sequence[Scene], config: TrainConfig,
          mode: Optional[ModeLike] = None) -> TrainLog:
    """Adam over the parameters ``mode`` trains; one step per scene, shuffled each epoch."""
    mode = TuningMode(mode if mode is not None else config.mode)
    set_trainable(model, mode)
    subset = select_fraction(len(scenes), config.fraction, config.seed) if scenes else []
    if not subset:
        raise ConfigurationError("training subset is empty")

    optimizer = Adam(
        [p for p in model.parameters() if p.requires_grad], config.beta1, config.beta2, config.adam_eps
    )
    log = TrainLog(mode=mode.value, seed=config.seed, scenes_used=len(subset))
    rng = np.random.default_rng([config.seed, 6])
    total_steps = config.epochs * len(subset)
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        lr = config.lr
        for index in rng.permutation(subset):
            lr = cosine_lr(step, total_steps, config.lr, config.warmup)
            losses.append(train_step(model, scenes[int(index)], optimizer, lr))
            step += 1
        task, aux = np.mean(losses, axis=0)
        record = EpochRecord(
            epoch=epoch, loss=float(task), key_loss=float(aux), lr=lr, mode=mode.value, seed=config.seed
        )
        log.epochs.append(record)
        structured_logger.log_epoch(
            record.epoch, record.loss, record.lr, record.mode, record.seed, record.key_loss
        )
    return log


# ==================== EVALUATION ====================

def _dilate(mask: np.ndarray) -> np.ndarray:
    """Grow a (H, W, K) mask by one cell in every direction (Chebyshev radius 1)."""
    padded = np.pad(mask, ((1, 1), (1, 1), (0, 0)))
    height, width = mask.shape[:2]
    out = np.zeros_like(mask)
    for dx in range(3):
        for dy in range(3):
            out |= padded[dx:dx + height, dy:dy + width]
    return out


@dataclass
class CellCounts:
    true_positives: int = 0
    predictions: int = 0
    hits: int = 0
    labels: int = 0

    def add(self, predicted: np.ndarray, labelled: np.ndarray) -> None:
        self.predictions += int(predicted.sum())
        self.labels += int(labelled.sum())
        self.true_positives += int((predicted & _dilate(labelled[..., None])[..., 0]).sum())
        self.hits += int((labelled & _dilate(predicted[..., None])[..., 0]).sum())

    def metrics(self) -> ClassMetrics:
        if self.predictions:
            precision = self.true_positives / self.predictions
        else:
            precision = 1.0 if self.labels == 0 else 0.0
        if self.labels:
            recall = self.hits / self.labels
        else:
            recall = 1.0 if self.predictions == 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return ClassMetrics(
            true_positives=self.true_positives, predictions=self.predictions,
            hits=self.hits, labels=self.labels, precision=precision, recall=recall, f1=f1,
        )


def score_cells(pairs: Iterable[Tuple[np.ndarray, np.ndarray]]) -> EvalMetrics:
    """Metrics from (predicted, labelled) boolean (H, W, 3) heatmap pairs."""
    counts = [CellCounts() for _ in range(NUM_CLASSES)]
    for predicted, labelled in pairs:
        for k in range(NUM_CLASSES):
            counts[k].add(predicted[..., k], labelled[..., k])
    per_class = {name: c.metrics() for name, c in zip(CLASS_NAMES, counts)}
    return EvalMetrics(
        per_class=per_class,
        mean_precision=float(np.mean([m.precision for m in per_class.values()])),
        mean_recall=float(np.mean([m.recall for m in per_class.values()])),
        mean_f1=float(np.mean([m.f1 for m in per_class.values()])),
    )


def check_detections(det: Detections) -> None:
    """Raise NumericalError naming the head output that went non-finite."""
    if settings.nan_check:
        assert_finite(det.logits, "logits")
        assert_finite(det.regression, "regression")


def predicted_cells(det: Detections) -> np.ndarray:
    """Cells whose class probability exceeds 0.5."""
    return det.logits.data > 0.0


def evaluate(model: Sop2Detector, scenes: Sequence[Scene]) -> EvalMetrics:
    config = model.config
    pairs = []
    with no_tape():
        for scene in scenes:
            det = model(scene.cloud).detections
            check_detections(det)
            targets = rasterize_targets(scene.label, config.extent, config.grid_size, config.grid_shape)
            pairs.append((predicted_cells(det), targets.heatmap))
    return score_cells(pairs)


# ==================== TRANSFER ====================

@dataclass
class TransferResult:
    model: Sop2Detector
    log: TrainLog
    elapsed: float


def target_scenes(run: RunConfig, count: Optional[int] = None, offset: int = 0) -> List[Scene]:
    return generate_scenes(run.train.seed, run.target, run.model.extent,
                           count if count is not None else run.train.scenes, offset)


def source_scenes(run: RunConfig) -> List[Scene]:
    return generate_scenes(run.train.seed, run.source, run.model.extent, run.train.source_scenes,
                           offset=50_000)


def pretrain(run: RunConfig, scenes: Optional[Sequence[Scene]] = None) -> Dict[str, FloatArray]:
    """Train a prompt-free detector from scratch on source-domain scenes; returns its state."""
    scenes = list(scenes) if scenes is not None else source_scenes(run)
    model = build_model(run.model, TuningMode.FROM_SCRATCH)
    config = run.train.model_copy(
        update={"epochs": run.train.pretrain_epochs, "fraction": 1.0, "lr": run.train.pretrain_lr}
    )
    train(model, scenes, config, TuningMode.FROM_SCRATCH)
    return model.state_dict()


def transfer(run: RunConfig, mode: ModeLike, pretrained: Mapping[str, FloatArray],
             scenes: Optional[Sequence[Scene]] = None) -> TransferResult:
    """Fine-tune a pretrained detector on target-domain scenes under ``mode``."""
    started = time.perf_counter()
    scenes = list(scenes) if scenes is not None else target_scenes(run)
    model = build_model(run.model, mode, pretrained)
    log = train(model, scenes, run.train, mode)
    return TransferResult(model, log, time.perf_counter() - started)


def pretrain_and_transfer(run: RunConfig, mode: ModeLike) -> TransferResult:
    return transfer(run, mode, pretrain(run))
