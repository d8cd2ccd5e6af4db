import numpy as np
import pytest

from mmretrieval.data_org import Sample
from mmretrieval.encoders import ModelConfig, RetrievalModel
from mmretrieval.proxy_loss import LossConfig
from mmretrieval.training import (TOWER_GROUPS, CurriculumPhase, TrainConfig, TrainingSet, TrainState, default_plan,
                                  run_curriculum, run_phase, sgd_step, split_medium)


def toy_samples(seed, products=4, per_product=12, n_raw=16):
    """Linearly separable products: well-spread prototypes plus small noise; first 5 of each are queries."""
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((products, n_raw)) * 2
    out = []
    for p in range(products):
        for j in range(per_product):
            raw = protos[p] + 0.2 * rng.standard_normal(n_raw)
            s = Sample(len(out), "query", raw) if j < 5 else Sample(len(out), "doc", raw, [2 * p, 2 * p + 1])
            s.category = 100 + p
            out.append(s)
    return out


def toy_state(seed=0, lr=0.001, **loss_kw):
    cfg = ModelConfig(d=8, e=4, grid=4, channels=8, n_raw=16, vocab=32, backbone_hidden=16, head_hidden=16)
    loss = LossConfig(**{"knn_enabled": False, **loss_kw})
    return TrainState(model=RetrievalModel(cfg, seed), store=None, loss_cfg=loss, lr=lr, seed=seed)


def everything(state):
    vals = {k: p.value.copy() for k, p in state.model.params.items()}
    vals["proxies"] = state.store.w.value.copy()
    return vals


def test_zero_learning_rate_changes_nothing():
    state = toy_state(lr=0.0)
    data = TrainingSet(toy_samples(0))
    state.ensure_categories(data.category_ids(), np.random.default_rng(0))
    trainable = {p.name: p.value.copy() for p in state.all_params()}
    sgd_step(state, data, np.arange(len(data)))
    assert all(np.array_equal(v, state.model.params[k].value if k in state.model.params else state.store.w.value)
               for k, v in trainable.items())
    assert state.iteration == 1
    # with the heads frozen they run on stored statistics, so nothing at all moves
    before = everything(state)
    state.model.set_frozen(["query_transform", "doc_transform"])
    sgd_step(state, data, np.arange(len(data)))
    assert all(np.array_equal(v, everything(state)[k]) for k, v in before.items())


def test_update_is_plain_sgd():
    state = toy_state(lr=0.01)
    data = TrainingSet(toy_samples(0))
    state.ensure_categories(data.category_ids(), np.random.default_rng(0))
    before = state.model["fusion.m_k"].value.copy()
    sgd_step(state, data, np.arange(16))
    p = state.model["fusion.m_k"]
    np.testing.assert_array_equal(p.value, before - 0.01 * p.grad)
    np.testing.assert_allclose(np.linalg.norm(state.store.w.value, axis=1), 1.0, atol=1e-15)


def test_step_log_fields():
    state = toy_state()
    data = TrainingSet(toy_samples(0))
    state.ensure_categories(data.category_ids(), np.random.default_rng(0))
    sgd_step(state, data, np.arange(20), phase="A")
    entry = state.log[-1]
    assert set(entry) == {"iter", "phase", "loss", "dot_products_total", "per_shard"}
    assert entry["dot_products_total"] == 20 * 4 == sum(entry["per_shard"])


def test_failed_step_leaves_state_unchanged():
    state = toy_state()
    data = TrainingSet(toy_samples(0))
    state.ensure_categories(data.category_ids(), np.random.default_rng(0))
    before = everything(state)
    state.model["text.w"].value[0, 0] = np.inf
    before["text.w"] = state.model["text.w"].value.copy()
    with pytest.raises(FloatingPointError):
        sgd_step(state, data, np.arange(len(data)))
    after = everything(state)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert state.iteration == 0 and not state.log


@pytest.mark.parametrize("seed", range(3))
def test_toy_loss_halves_in_fifty_steps(seed):
    state = toy_state(seed)
    run_phase(state, CurriculumPhase("A", "large", (), 50, batch_size=16), TrainingSet(toy_samples(seed)),
              TrainConfig())
    losses = state.phase_log[-1]["losses"]
    assert len(losses) == 50
    assert losses[-1] <= 0.5 * losses[0]


def test_frozen_towers_bit_identical():
    state = toy_state()
    data = TrainingSet(toy_samples(0))
    run_phase(state, CurriculumPhase("A", "large", (), 5, batch_size=16), data, TrainConfig())
    h = state.model.group_hash(TOWER_GROUPS)
    proxies = state.store.w.value.copy()
    run_phase(state, CurriculumPhase("B", "large", TOWER_GROUPS, 20, batch_size=16), data, TrainConfig(),
              phase_index=1)
    assert state.model.group_hash(TOWER_GROUPS) == h
    assert not np.array_equal(state.store.w.value, proxies)
    # groups are unfrozen again once the phase is over
    assert all(p.trainable for p in state.model.trainables())


def test_new_categories_get_random_unit_proxies():
    state = toy_state()
    samples = toy_samples(0)
    medium = TrainingSet([s for s in samples if s.category in (100, 101)])
    run_phase(state, CurriculumPhase("A", "medium", (), 3, batch_size=8), medium, TrainConfig())
    assert state.store.num_categories == 2
    run_phase(state, CurriculumPhase("B", "large", TOWER_GROUPS, 3, batch_size=8), TrainingSet(samples),
              TrainConfig(), phase_index=1)
    assert state.store.num_categories == 4 and state.phase_log[-1]["new_proxies"] == 2
    np.testing.assert_allclose(np.linalg.norm(state.store.w.value, axis=1), 1.0, atol=1e-15)


def test_zero_iteration_phase_only_logs():
    state = toy_state()
    data = TrainingSet(toy_samples(0))
    run_phase(state, CurriculumPhase("A", "large", (), 2, batch_size=8), data, TrainConfig())
    before, it = everything(state), state.iteration
    run_phase(state, CurriculumPhase("C", "large", (), 0), data, TrainConfig(), phase_index=1)
    assert all(np.array_equal(v, everything(state)[k]) for k, v in before.items())
    assert state.iteration == it and state.phase_log[-1]["iterations"] == 0


def test_unknown_group_and_dataset():
    state = toy_state()
    data = TrainingSet(toy_samples(0))
    with pytest.raises(KeyError):
        run_phase(state, CurriculumPhase("B", "large", ("encoder",), 2), data, TrainConfig())
    with pytest.raises(KeyError):
        run_curriculum(toy_state(), [CurriculumPhase("A", "huge", (), 1)], {"large": data}, TrainConfig())


def test_plateau_stop():
    state = toy_state(lr=0.0)
    data = TrainingSet(toy_samples(0))
    # with lr = 0 the loss cannot improve, so the first full comparison window stops the phase
    run_phase(state, CurriculumPhase("B", "large", TOWER_GROUPS, 500, batch_size=48, stop_on_plateau=True), data,
              TrainConfig(plateau_window=10))
    assert state.phase_log[-1]["stopped_on_plateau"] and state.iteration == 20


def test_determinism_and_single_phase_plan():
    data = {"large": TrainingSet(toy_samples(1)), "medium": TrainingSet(toy_samples(1)[:24])}
    plan = [CurriculumPhase("A", "medium", (), 5, 8), CurriculumPhase("B", "large", TOWER_GROUPS, 5, 8),
            CurriculumPhase("C", "large", (), 5, 8)]
    a, _ = run_curriculum(toy_state(3), plan, data, TrainConfig())
    b, _ = run_curriculum(toy_state(3), plan, data, TrainConfig())
    assert a.param_hash() == b.param_hash()
    one, report = run_curriculum(toy_state(3), plan[:1], data, TrainConfig())
    plain = toy_state(3)
    run_phase(plain, plan[0], data["medium"], TrainConfig())
    assert one.param_hash() == plain.param_hash() and len(report["phases"]) == 1


def test_cache_refreshed_on_schedule():
    state = toy_state(knn_enabled=True, knn_fraction=0.5, refresh_interval=7)
    run_phase(state, CurriculumPhase("A", "large", (), 20, 8), TrainingSet(toy_samples(0)), TrainConfig())
    assert state.cache.built_at_iter == 14
    assert state.cache.built_at_iter <= state.iteration < state.cache.built_at_iter + 7


def test_split_medium_and_default_plan():
    samples = toy_samples(0, products=8)
    medium = split_medium(samples, 0.25, seed=0)
    assert len({s.category for s in medium}) == 2
    assert split_medium(samples, 0.25, seed=0) == medium
    plan = default_plan()
    assert [p.name for p in plan] == ["A", "B", "C"]
    assert set(TOWER_GROUPS) <= set(plan[1].frozen) and not plan[0].frozen and not plan[2].frozen
