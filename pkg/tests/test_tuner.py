import math

import numpy as np
import pytest

from sop2.backbone import Sop2Detector
from sop2.config import ModelConfig, TrainConfig, TuningMode, desk_config
from sop2.errors import CheckpointError, ConfigurationError, NumericalError
from sop2.numkernel import Tensor
from sop2.tuner import (
    Adam,
    apply_lora,
    build_model,
    cosine_lr,
    count_params,
    evaluate,
    load_pretrained,
    param_group,
    pretrain,
    pretrain_and_transfer,
    score_cells,
    select_fraction,
    set_trainable,
    train,
    train_step,
    transfer,
)

from conftest import tiny_model_config

FROZEN_MODES = [
    "head_finetune", "bitfit", "lora", "prompt_token", "prompt_generator", "sop2", "sop2_plus_lora",
]


def quick_train(**fields):
    return TrainConfig(**{"epochs": 1, "lr": 1e-2, "warmup": 0.0, **fields})


@pytest.fixture
def pretrained_state(tiny_config):
    return Sop2Detector(tiny_config).state_dict()


# ==================== PARAMETER GROUPS ====================

@pytest.mark.parametrize("name,group", [
    ("head.cls.layers.0.weight", "head"),
    ("head.reg.layers.1.bias", "head"),
    ("prompt_tokens.3.tokens", "prompts"),
    ("pools.1.keys", "pools"),
    ("generators.2.mlp.layers.0.bias", "generators"),
    ("blocks.0.layers.1.q.lora_b", "lora"),
    ("blocks.0.layers.1.q.base.bias", "biases"),
    ("blocks.1.layers.0.norm1.beta", "biases"),
    ("blocks.1.layers.0.norm1.gamma", "backbone"),
    ("vfe.layers.0.weight", "backbone"),
])
def test_param_group_from_name(name, group):
    assert param_group(name) == group


def test_prompt_modes_need_their_mechanism(tiny_config):
    model = Sop2Detector(tiny_config)
    with pytest.raises(ConfigurationError, match="pools"):
        set_trainable(model, "sop2")
    with pytest.raises(ConfigurationError, match="lora"):
        set_trainable(model, "lora")


@pytest.mark.parametrize("mode", list(TuningMode))
def test_reported_counts_match_trainable_flags(mode, pretrained_state):
    model = build_model(tiny_model_config(), mode, pretrained_state)
    set_trainable(model, mode)
    report = count_params(model, mode)
    flagged = sum(p.size for p in model.parameters() if p.requires_grad)
    assert report.trainable == flagged
    assert report.total == model.num_parameters()


def test_head_finetune_trains_only_the_head(tiny_config):
    model = Sop2Detector(tiny_config)
    report = count_params(model, "head_finetune")
    assert report.backbone == 0 and report.biases == 0
    assert report.trainable == report.head > 0


def test_full_scale_prompt_counts():
    config = ModelConfig()
    assert count_params(build_model(config, "sop2"), "sop2").pools == 368_640
    assert count_params(build_model(config, "prompt_generator"), "prompt_generator").generators == 1_185_792
    assert count_params(build_model(config, "prompt_token"), "prompt_token").prompts == 1_536
    assert count_params(build_model(config, "lora"), "lora").lora == 49_152


# ==================== LORA ====================

def test_lora_wraps_every_projection_once(tiny_config):
    model = Sop2Detector(tiny_config)
    assert apply_lora(model, 4, 8.0) == 2 * 4
    assert apply_lora(model, 4, 8.0) == 0


def test_lora_model_starts_equal_to_the_plain_one(tiny_scenes, pretrained_state, tiny_config):
    plain = Sop2Detector(tiny_config)
    wrapped = build_model(tiny_config, "lora", pretrained_state)
    cloud = tiny_scenes[0].cloud
    np.testing.assert_allclose(
        wrapped(cloud).detections.logits.data, plain(cloud).detections.logits.data, rtol=0, atol=1e-12
    )


def test_lora_training_leaves_base_weights_alone(tiny_scenes, pretrained_state, tiny_config):
    model = build_model(tiny_config, "lora", pretrained_state)
    before = model.state_dict()
    train(model, tiny_scenes, quick_train(), "lora")
    after = model.state_dict()
    for name in before:
        if name.endswith("q.base.weight"):
            np.testing.assert_array_equal(before[name], after[name])
    assert any(
        not np.array_equal(before[name], after[name]) for name in before if name.endswith("lora_b")
    )


# ==================== PRETRAINED WEIGHTS ====================

def test_load_pretrained_keeps_prompt_init(tiny_config):
    source = Sop2Detector(tiny_config.model_copy(update={"seed": 9}))
    model = build_model(tiny_config, "sop2", source.state_dict())
    keys_before = Sop2Detector(tiny_model_config(prompt_mode="pool")).pools["1"].keys.data
    np.testing.assert_array_equal(model.pools["1"].keys.data, keys_before)
    np.testing.assert_array_equal(model.head.cls.layers[0].weight.data, source.head.cls.layers[0].weight.data)


def test_load_pretrained_reports_missing_tensors(tiny_config, pretrained_state):
    del pretrained_state["head.cls.layers.0.weight"]
    with pytest.raises(CheckpointError):
        load_pretrained(Sop2Detector(tiny_config), pretrained_state)


# ==================== FREEZE INTEGRITY ====================

@pytest.mark.parametrize("mode", FROZEN_MODES)
def test_frozen_tensors_survive_twenty_steps(mode, tiny_scenes, pretrained_state):
    model = build_model(tiny_model_config(), mode, pretrained_state)
    set_trainable(model, mode)
    frozen = {name: p.data.tobytes() for name, p in model.named_parameters() if not p.requires_grad}
    trainable = {name: p.data.copy() for name, p in model.named_parameters() if p.requires_grad}

    log = train(model, tiny_scenes, quick_train(epochs=5), mode)
    assert len(log.epochs) == 5 and log.scenes_used == 4

    for name, p in model.named_parameters():
        if name in frozen:
            assert p.data.tobytes() == frozen[name], name
    assert any(not np.array_equal(trainable[name], p.data)
               for name, p in model.named_parameters() if name in trainable)


# ==================== TRAINING ====================

def test_zero_epochs_give_an_empty_log(tiny_scenes, tiny_config):
    log = train(Sop2Detector(tiny_config), tiny_scenes, quick_train(epochs=0), "from_scratch")
    assert log.epochs == [] and log.initial_loss is None and log.to_jsonl() == ""


def test_training_is_deterministic(tiny_scenes, tiny_config):
    logs = [
        train(Sop2Detector(tiny_config), tiny_scenes, quick_train(epochs=2), "full_finetune")
        for _ in range(2)
    ]
    assert logs[0].to_jsonl() == logs[1].to_jsonl()


def test_train_log_records_every_epoch(tiny_scenes, tiny_config):
    log = train(Sop2Detector(tiny_config), tiny_scenes, quick_train(epochs=3, seed=4), "from_scratch")
    assert [r.epoch for r in log.epochs] == [1, 2, 3]
    assert all(r.mode == "from_scratch" and r.seed == 4 for r in log.epochs)
    assert len(log.to_jsonl().splitlines()) == 3


def test_key_pull_is_logged_apart_from_the_detection_loss(tiny_scenes, tiny_config, pretrained_state):
    pooled = build_model(tiny_config, "sop2", pretrained_state)
    head = build_model(tiny_config, "head_finetune", pretrained_state)
    pooled_log = train(pooled, tiny_scenes, quick_train(), "sop2")
    head_log = train(head, tiny_scenes, quick_train(), "head_finetune")
    assert pooled_log.epochs[0].key_loss > 0.0
    assert head_log.epochs[0].key_loss == 0.0
    assert np.isfinite(pooled_log.epochs[0].loss)


def test_pretraining_runs_at_its_own_learning_rate(quick_run, mocker):
    spy = mocker.patch("sop2.tuner.train")
    pretrain(quick_run)
    config = spy.call_args.args[2]
    assert config.lr == quick_run.train.pretrain_lr
    assert config.epochs == quick_run.train.pretrain_epochs and config.fraction == 1.0


@pytest.mark.parametrize("count,fraction,expected", [(100, 0.05, 5), (30, 0.05, 2), (8, 1.0, 8), (8, 0.5, 4)])
def test_select_fraction_takes_the_ceiling(count, fraction, expected):
    picked = select_fraction(count, fraction, seed=0)
    assert len(picked) == expected
    assert picked == sorted(set(picked))
    assert picked == select_fraction(count, fraction, seed=0)


def test_select_fraction_rejects_zero():
    with pytest.raises(ConfigurationError):
        select_fraction(10, 0.0, seed=0)


def test_cosine_schedule_warms_up_then_decays():
    assert cosine_lr(0, 100, 1.0, 0.05) == pytest.approx(0.2)
    assert cosine_lr(4, 100, 1.0, 0.05) == pytest.approx(1.0)
    assert cosine_lr(5, 100, 1.0, 0.05) == pytest.approx(1.0)
    assert cosine_lr(52, 100, 1.0, 0.05) == pytest.approx(0.5 * (1 + math.cos(math.pi * 47 / 95)))
    assert cosine_lr(0, 10, 1.0, 0.0) == pytest.approx(1.0)


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    p.grad = np.array([0.3, -4.0, 0.0])
    Adam([p]).step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.5], atol=1e-6)


def test_non_finite_loss_stops_training(tiny_scenes, tiny_config, mocker):
    mocker.patch("sop2.tuner.scene_losses", return_value=(Tensor(np.nan, requires_grad=True), None))
    model = Sop2Detector(tiny_config)
    set_trainable(model, "from_scratch")
    optimizer = Adam(model.parameters())
    with pytest.raises(NumericalError) as excinfo:
        train_step(model, tiny_scenes[0], optimizer, 1e-3)
    assert excinfo.value.exit_code == 4


# ==================== EVALUATION ====================

def heatmap(cells, shape=(6, 6)):
    out = np.zeros(shape + (3,), dtype=bool)
    for ix, iy, k in cells:
        out[ix, iy, k] = True
    return out


def test_perfect_predictions_score_one():
    labels = heatmap([(0, 0, 0), (3, 4, 1), (5, 5, 2)])
    metrics = score_cells([(labels, labels)])
    assert metrics.mean_precision == metrics.mean_recall == metrics.mean_f1 == 1.0


def test_no_predictions_score_zero_on_labelled_classes():
    metrics = score_cells([(heatmap([]), heatmap([(1, 1, 0)]))])
    car = metrics.per_class["car"]
    assert (car.precision, car.recall, car.f1) == (0.0, 0.0, 0.0)
    assert metrics.per_class["pedestrian"].f1 == 1.0


def test_neighbouring_cells_count_as_matches():
    predicted = heatmap([(1, 1, 0)])
    labelled = heatmap([(0, 0, 0), (5, 5, 0)])
    car = score_cells([(predicted, labelled)]).per_class["car"]
    assert car.precision == 1.0
    assert car.recall == 0.5
    assert car.f1 == pytest.approx(2 / 3)


def test_evaluate_scores_every_class(tiny_scenes, tiny_config):
    metrics = evaluate(Sop2Detector(tiny_config), tiny_scenes)
    assert set(metrics.per_class) == {"car", "pedestrian", "cyclist"}
    assert 0.0 <= metrics.mean_f1 <= 1.0
    assert "mean" in metrics.to_table()


def test_evaluate_rejects_non_finite_logits(tiny_scenes, tiny_config):
    model = Sop2Detector(tiny_config)
    model.head.cls.layers[1].bias.assign_(np.full(3, np.nan))
    with pytest.raises(NumericalError, match="logits"):
        evaluate(model, tiny_scenes)


@pytest.mark.slow
def test_training_overfits_a_single_scene(tiny_scenes, tiny_config):
    log = train(Sop2Detector(tiny_config), tiny_scenes[:1], quick_train(epochs=60), "from_scratch")
    assert log.final_loss < 0.5 * log.initial_loss


# ==================== DESK TRANSFER ====================

def test_pretrain_then_transfer_uses_the_pool_model(quick_run):
    result = pretrain_and_transfer(quick_run, "sop2")
    assert result.model.pools
    assert len(result.log.epochs) == 1 and result.log.scenes_used == 2
    assert result.elapsed >= 0.0


@pytest.fixture(scope="module")
def desk_pretrained():
    return pretrain(desk_config())


@pytest.mark.slow
def test_pool_tuning_transfers_to_the_target_domain(desk_pretrained):
    run = desk_config()
    pooled = transfer(run, "sop2", desk_pretrained)
    head = transfer(run, "head_finetune", desk_pretrained)
    assert pooled.log.final_loss < 0.5 * pooled.log.initial_loss
    assert pooled.log.final_loss <= head.log.final_loss
