import numpy as np
import pytest

from sop2.errors import WiringError
from sop2.numkernel import (
    AttentionWeights,
    Tape,
    Tensor,
    cosine_similarity,
    finite_diff_grad,
    linear,
    masked_max,
    mhsa,
    relative_error,
    tensor_sum,
)
from sop2.partition import Axis, plan_partition
from sop2.prompts import (
    PromptGenerator,
    PromptPool,
    PromptToken,
    attach_generated_prompts,
    attach_pool_prompts,
    attach_prompt_tokens,
    generate_prompts,
    pool_query,
    pool_select,
    pool_value_rows,
    top_k_indices,
)


def make_sets(rng, voxels, set_size, channels, index=1, grid=24):
    cells = rng.choice(grid * grid, size=voxels, replace=False)
    coords = np.column_stack([cells // grid, cells % grid])
    features = Tensor(rng.normal(size=(voxels, channels)))
    return plan_partition(coords, (12, 12), Axis.X, set_size, grid_shape=(grid, grid), index=index).gather(features)


def full_sort_top_k(scores, k):
    return sorted(range(len(scores)), key=lambda m: (-scores[m], m))[:k]


@pytest.mark.slow
def test_prompted_token_counts_follow_mechanism(rng):
    for _ in range(200):
        n_s = int(rng.integers(1, 37))
        channels = 4
        sp = make_sets(rng, int(rng.integers(1, 80)), n_s, channels)

        n_t = int(rng.integers(0, 5))
        prompted = attach_prompt_tokens(sp, PromptToken(1, n_t, channels, rng))
        assert prompted.tokens.shape == (sp.num_sets, n_t + n_s, channels)

        n_g = int(rng.integers(1, 5))
        prompted = attach_generated_prompts(sp, PromptGenerator(1, channels, rng, layers=2, num_generated=n_g))
        assert prompted.tokens.shape == (sp.num_sets, n_g + n_s, channels)

        m = int(rng.integers(1, 41))
        n_p = int(rng.integers(1, 6))
        k = int(rng.integers(1, m + 1))
        prompted = attach_pool_prompts(sp, PromptPool(1, channels, rng, m, n_p, k))
        assert prompted.tokens.shape == (sp.num_sets, k * n_p + n_s, channels)
        assert prompted.masks.shape == prompted.tokens.shape[:2]
        assert np.all(prompted.masks[:, :k * n_p])


def test_full_sized_token_prompt_gives_37_rows(rng):
    sp = make_sets(rng, 60, 36, 192)
    prompted = attach_prompt_tokens(sp, PromptToken(1, 1, 192, rng))
    assert prompted.tokens_per_set == 37


def test_prompt_tokens_are_shared_by_every_set(rng):
    sp = make_sets(rng, 40, 6, 4)
    token = PromptToken(1, 2, 4, rng)
    token.tokens.requires_grad = True
    with Tape() as tape:
        prompted = attach_prompt_tokens(sp, token)
        tape.backward(tensor_sum(prompted.tokens))
    np.testing.assert_array_equal(prompted.tokens.data[0, :2], prompted.tokens.data[-1, :2])
    np.testing.assert_array_equal(token.tokens.grad, np.full((2, 4), float(sp.num_sets)))


def test_zero_token_prompt_leaves_sets_unchanged(rng):
    sp = make_sets(rng, 20, 6, 4)
    prompted = attach_prompt_tokens(sp, PromptToken(1, 0, 4, rng))
    assert prompted.prompt_count == 0
    assert prompted.tokens is sp.sets


@pytest.mark.parametrize("build,attach", [
    (lambda rng: PromptToken(2, 1, 4, rng), attach_prompt_tokens),
    (lambda rng: PromptGenerator(2, 4, rng), attach_generated_prompts),
    (lambda rng: PromptPool(2, 4, rng, 4, 2, 2), attach_pool_prompts),
])
def test_mechanism_on_wrong_partition_is_a_wiring_error(rng, build, attach):
    sp = make_sets(rng, 20, 6, 4, index=1)
    with pytest.raises(WiringError):
        attach(sp, build(rng))


def test_pool_top_k_larger_than_pool_is_rejected(rng):
    with pytest.raises(WiringError):
        PromptPool(1, 4, rng, pool_size=3, prompt_length=1, top_k=4)


def test_zero_generator_emits_zero_prompts(rng):
    sp = make_sets(rng, 20, 6, 4)
    generator = PromptGenerator(1, 4, rng, layers=4)
    for p in generator.parameters():
        p.assign_(np.zeros(p.shape))
    prompts = generate_prompts(sp, generator)
    assert prompts.shape == (sp.num_sets, 1, 4)
    np.testing.assert_array_equal(prompts.data, 0.0)


def test_generator_has_requested_layer_count(rng):
    generator = PromptGenerator(1, 192, rng, layers=4)
    assert len(generator.mlp.layers) == 4
    assert generator.num_parameters() == 4 * (192 * 192 + 192)


def test_pool_query_is_channelwise_max_over_valid_rows():
    tokens = Tensor(np.array([[1.0, -1.0], [0.5, 3.0], [9.0, 9.0]]))
    np.testing.assert_array_equal(pool_query(tokens, [True, True, False]).data, [1.0, 3.0])


@pytest.mark.slow
def test_pool_select_matches_full_sort_oracle(rng):
    for _ in range(1000):
        m = int(rng.integers(1, 41))
        k = int(rng.integers(1, m + 1))
        channels = int(rng.integers(2, 9))
        pool = PromptPool(1, channels, rng, m, 2, k)
        pool.keys.assign_(rng.normal(size=(m, channels)))
        query = Tensor(rng.normal(size=channels))
        selection = pool_select(pool, query)
        scores = cosine_similarity(Tensor(query.data[None]), pool.keys).data
        assert selection.indices.tolist() == full_sort_top_k(scores.tolist(), k)
        for c in (1e-3, 1.0, 1e3):
            scaled = pool_select(pool, Tensor(query.data * c))
            assert scaled.indices.tolist() == selection.indices.tolist()


def test_pool_select_returns_paired_values_and_scores(rng):
    pool = PromptPool(1, 3, rng, pool_size=5, prompt_length=2, top_k=2)
    selection = pool_select(pool, Tensor(rng.normal(size=3)))
    assert selection.prompts.shape == (2, 2, 3)
    np.testing.assert_array_equal(selection.prompts.data[0], pool.values.data[selection.indices[0]])
    assert selection.scores.data[0] >= selection.scores.data[1]


def test_top_k_ties_prefer_lower_index():
    scores = np.array([0.5, 0.9, 0.5, 0.9, 0.1])
    assert top_k_indices(scores, 3).tolist() == [1, 3, 0]


def test_key_pull_only_moves_selected_keys(rng):
    sp = make_sets(rng, 30, 6, 4)
    pool = PromptPool(1, 4, rng, pool_size=6, prompt_length=2, top_k=2)
    pool.keys.requires_grad = True
    with Tape() as tape:
        prompted = attach_pool_prompts(sp, pool, key_pull_weight=0.1)
        tape.backward(prompted.key_loss)
    chosen = np.unique(prompted.selected)
    untouched = np.setdiff1d(np.arange(6), chosen)
    assert np.all(pool.keys.grad[untouched] == 0.0)
    assert np.any(pool.keys.grad[chosen] != 0.0)
    query = masked_max(sp.sets, sp.masks).data
    scores = cosine_similarity(Tensor(query[:, None]), Tensor(pool.keys.data[None])).data
    expected = 0.1 * np.mean(1.0 - np.take_along_axis(scores, prompted.selected, axis=1))
    assert prompted.key_loss.item() == pytest.approx(expected, rel=1e-12)


def test_key_pull_gradient_reaches_the_set_features(rng):
    grid = 24
    cells = rng.choice(grid * grid, size=20, replace=False)
    coords = np.column_stack([cells // grid, cells % grid])
    plan = plan_partition(coords, (12, 12), Axis.X, 6, grid_shape=(grid, grid), index=1)
    features = Tensor(rng.normal(size=(20, 4)), requires_grad=True)
    pool = PromptPool(1, 4, rng, pool_size=6, prompt_length=2, top_k=2)

    def pull(f):
        return attach_pool_prompts(plan.gather(f), pool, key_pull_weight=0.1).key_loss

    with Tape() as tape:
        tape.backward(pull(features))
    assert np.any(features.grad != 0.0)
    numeric = finite_diff_grad(pull, features).data
    assert relative_error(features.grad, numeric) < 1e-6


def test_unselected_values_do_not_affect_prompted_sets(rng):
    sp = make_sets(rng, 10, 12, 4, grid=12)
    assert sp.num_sets == 1
    pool = PromptPool(1, 4, rng, pool_size=8, prompt_length=2, top_k=2)
    prompted = attach_pool_prompts(sp, pool)
    unused = np.setdiff1d(np.arange(8), np.unique(prompted.selected))
    assert unused.size
    values = pool.values.data.copy()
    values[unused] += 5.0
    pool.values.assign_(values)
    again = attach_pool_prompts(sp, pool)
    np.testing.assert_array_equal(again.tokens.data, prompted.tokens.data)


def test_prompt_rows_act_as_extra_keys_for_voxel_queries(rng):
    sp = make_sets(rng, 5, 8, 4)
    pool = PromptPool(1, 4, rng, pool_size=4, prompt_length=1, top_k=2)
    prompted = attach_pool_prompts(sp, pool)
    pairs = [(Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=4))) for _ in range(4)]
    weights = AttentionWeights.from_tensors(*pairs)
    out = mhsa(prompted.tokens, prompted.masks, weights, heads=1).data

    (wq, bq), (wk, bk), (wv, bv), (wo, bo) = pairs
    tokens = prompted.tokens.data[0][prompted.masks[0]]
    q = linear(Tensor(tokens), wq, bq).data
    k = linear(Tensor(tokens), wk, bk).data
    v = linear(Tensor(tokens), wv, bv).data
    scores = q @ k.T / 2.0
    attn = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn /= attn.sum(axis=1, keepdims=True)
    expected = linear(Tensor(attn @ v), wo, bo).data
    np.testing.assert_allclose(out[0][prompted.masks[0]][2:], expected[2:], atol=1e-10)


def test_pool_value_rows_flatten_entry_major(rng):
    pool = PromptPool(1, 3, rng, pool_size=4, prompt_length=5, top_k=2)
    rows = pool_value_rows(pool)
    assert rows.shape == (20, 3)
    np.testing.assert_array_equal(rows[6], pool.values.data[1, 1])
