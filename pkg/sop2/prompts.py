"""Prompt tokens, prompt generators and scene-oriented prompt pools.

Each mechanism belongs to exactly one set partition and prepends prompt rows
to every set of that partition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.typing import ArrayLike

from .errors import ContractError, DimensionError, WiringError
from .layers import Module, Mlp, uniform
from .numkernel import (
    BoolArray,
    IntArray,
    Tensor,
    broadcast_to,
    concat_tokens,
    cosine_similarity,
    masked_max,
    max_pool_rows,
    mean,
    reshape,
    sub,
    take,
    take_along_last,
)
from .partition import SetPartition


@dataclass(frozen=True)
class PromptedSets:
    partition: int
    tokens: Tensor  # (N, p + n_s, C), prompt rows first
    masks: BoolArray  # (N, p + n_s)
    prompt_count: int
    selected: Optional[IntArray] = None  # (N, K) pool entries chosen per set
    key_loss: Optional[Tensor] = None  # weighted pull of selected keys towards their queries

    @property
    def tokens_per_set(self) -> int:
        return int(self.tokens.shape[1])


class PromptToken(Module):
    def __init__(self, partition: int, num_tokens: int, channels: int,
                 rng: np.random.Generator, init: float = 0.02):
        self.partition = partition
        self.tokens = uniform(rng, (num_tokens, channels), init)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


class PromptGenerator(Module):
    """Per-partition MLP mapping a max-pooled set summary to ``num_generated`` prompts."""

    def __init__(self, partition: int, channels: int, rng: np.random.Generator,
                 layers: int = 4, num_generated: int = 1):
        self.partition = partition
        self.num_generated = num_generated
        self.mlp = Mlp([channels] * layers + [channels * num_generated], rng)


class PromptPool(Module):
    """M keys paired with M prompt-value blocks; each set draws its top-K values."""

    def __init__(self, partition: int, channels: int, rng: np.random.Generator,
                 pool_size: int = 40, prompt_length: int = 5, top_k: int = 8,
                 init: float = 0.02, cos_eps: float = 1e-8):
        if top_k > pool_size:
            raise WiringError(f"top_k {top_k} exceeds pool size {pool_size}")
        self.partition = partition
        self.top_k = top_k
        self.cos_eps = cos_eps
        self.keys = uniform(rng, (pool_size, channels), init)
        self.values = uniform(rng, (pool_size, prompt_length, channels), init)

    @property
    def pool_size(self) -> int:
        return self.keys.shape[0]

    @property
    def prompt_length(self) -> int:
        return self.values.shape[1]

    @property
    def prompt_count(self) -> int:
        return self.top_k * self.prompt_length


def _check_wiring(sp: SetPartition, partition: int, channels: int) -> Tensor:
    if sp.index != partition:
        raise WiringError(f"prompt for partition {partition} attached to partition {sp.index}")
    if sp.sets is None:
        raise ContractError("partition has no gathered sets")
    if sp.sets.shape[-1] != channels:
        raise DimensionError(f"prompt channels {channels} vs set channels {sp.sets.shape[-1]}")
    return sp.sets


def _prompted(sp: SetPartition, sets: Tensor, prompts: Tensor, **extra: object) -> PromptedSets:
    count = prompts.shape[1]
    masks = np.concatenate([np.ones((sp.num_sets, count), dtype=bool), sp.masks], axis=1)
    return PromptedSets(sp.index, concat_tokens(prompts, sets), masks, count, **extra)  # type: ignore[arg-type]


def attach_prompt_tokens(sp: SetPartition, pt: PromptToken) -> PromptedSets:
    """[PT_j; S_i] for every set; all sets share the same token tensor."""
    sets = _check_wiring(sp, pt.partition, pt.tokens.shape[1])
    if pt.num_tokens == 0:
        return PromptedSets(sp.index, sets, sp.masks, 0)
    shape = (sp.num_sets, pt.num_tokens, pt.tokens.shape[1])
    prompts = broadcast_to(reshape(pt.tokens, (1,) + pt.tokens.shape), shape)
    return _prompted(sp, sets, prompts)


def generate_prompts(sp: SetPartition, g: PromptGenerator) -> Tensor:
    """Set-wise dynamic prompts, (N, n_G, C)."""
    channels = g.mlp.layers[0].in_features
    sets = _check_wiring(sp, g.partition, channels)
    summary = masked_max(sets, sp.masks)
    return reshape(g.mlp(summary), (sp.num_sets, g.num_generated, channels))


def attach_generated_prompts(sp: SetPartition, g: PromptGenerator) -> PromptedSets:
    prompts = generate_prompts(sp, g)
    assert sp.sets is not None
    return _prompted(sp, sp.sets, prompts)


def pool_query(set_tokens: Tensor, mask: ArrayLike) -> Tensor:
    """Query key of one set: channelwise max over its valid voxels."""
    return max_pool_rows(set_tokens, mask)


def top_k_indices(scores: np.ndarray, k: int) -> IntArray:
    """Indices of the k largest scores per row, best first; ties go to the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k].astype(np.int64)


class PoolSelection(NamedTuple):
    indices: IntArray  # (K,)
    prompts: Tensor  # (K, n_P, C)
    scores: Tensor  # (K,)


def pool_select(pool: PromptPool, query: Tensor) -> PoolSelection:
    channels = pool.keys.shape[1]
    if query.shape != (channels,):
        raise DimensionError(f"query {query.shape} for keys of width {channels}")
    all_scores = cosine_similarity(reshape(query, (1, channels)), pool.keys, pool.cos_eps)
    indices = top_k_indices(all_scores.data, pool.top_k)
    return PoolSelection(indices, take(pool.values, indices), take(all_scores, indices))


def attach_pool_prompts(sp: SetPartition, pool: PromptPool, key_pull_weight: float = 0.1) -> PromptedSets:
    """Prepend each set's top-K pool values, flattened to (K * n_P, C) rows.

    Selection is hard. The pull term ``key_pull_weight * mean(1 - score)`` over the
    selected keys is differentiable in both the keys and the set features.
    """
    channels = pool.keys.shape[1]
    sets = _check_wiring(sp, pool.partition, channels)
    n = sp.num_sets
    query = masked_max(sets, sp.masks)
    scores = cosine_similarity(
        reshape(query, (n, 1, channels)),
        reshape(pool.keys, (1, pool.pool_size, channels)),
        pool.cos_eps,
    )
    selected = top_k_indices(scores.data, pool.top_k)
    prompts = reshape(take(pool.values, selected), (n, pool.prompt_count, channels))

    key_loss = None
    if key_pull_weight > 0 and n > 0:
        key_loss = mean(sub(1.0, take_along_last(scores, selected))) * key_pull_weight
    return _prompted(sp, sets, prompts, selected=selected, key_loss=key_loss)


def pool_value_rows(pool: PromptPool) -> np.ndarray:
    """Pool values flattened to (M * n_P, C) rows, entry-major."""
    return pool.values.data.reshape(-1, pool.values.shape[-1])
