from __future__ import annotations

import itertools

import numpy as np
import pytest

from durable_lab.datagen import (
    EmptySplitError,
    batch_sampler,
    export_csv,
    generate,
    generate_unrelated,
)
from durable_lab.errors import ConfigError
from durable_lab.evalsuite import accuracy
from durable_lab.factmodel import (
    ParamEntry,
    ParamKind,
    ParamSet,
    Regime,
    bind,
    example_losses,
    init_model,
    loss_forget,
    loss_retain,
)
from durable_lab.optim import AdamW, OptimConfig, OptimState, clip_gradients, cosine_lr, step
from durable_lab.quantsim import QuantScope, QuantSpec
from durable_lab.unlearn import (
    Method,
    MethodConfig,
    PretrainConfig,
    SafConfig,
    alpha_schedule,
    lambda_rule,
    pretrain,
    run_method,
    saf_step,
    saliency_mask,
)


def scalar_params(value: float = 1.0) -> ParamSet:
    return ParamSet({"w": ParamEntry(np.array([[value]]), ParamKind.BASE)}, 1.0)


# ---------------------------------------------------------------------------#
# Dataset
# ---------------------------------------------------------------------------#


def test_splits_partition_entities(tiny_dataset):
    """
    Every fact lands in exactly one split and splits never share entities.
    """
    ds = tiny_dataset
    all_idx = np.concatenate([ds.forget, ds.retain, ds.holdout])
    assert np.array_equal(np.sort(all_idx), np.arange(ds.facts.shape[0]))
    f, r, h = (set(ds.entities_of(s).tolist()) for s in ("forget", "retain", "holdout"))
    assert len(f) == 2 and len(h) == 2 and len(r) == 6
    assert not (f & r or f & h or r & h)


def test_generate_is_seeded():
    """
    Same seed, same facts and splits; another seed differs.
    """
    a, b, c = generate(seed=5), generate(seed=5), generate(seed=6)
    assert np.array_equal(a.facts, b.facts) and np.array_equal(a.forget, b.forget)
    assert not np.array_equal(a.facts, c.facts)


def test_default_dataset_shape():
    """
    220 entities x 10 attributes with 20 forget and 20 holdout entities.
    """
    ds = generate()
    assert ds.facts.shape == (2200, 3)
    assert ds.forget.size == 200 and ds.holdout.size == 200 and ds.retain.size == 1800


def test_unrelated_corpus_uses_fresh_entities(tiny_dataset):
    """
    Attack entities start after the base range.
    """
    extra = generate_unrelated(tiny_dataset, 4, seed=9)
    assert extra.facts[:, 0].min() == 10 and extra.facts[:, 0].max() == 13
    assert extra.forget.size == 0 and extra.retain.size == 12


def test_too_many_forget_entities():
    """
    Forget + holdout must leave something to retain.
    """
    with pytest.raises(ConfigError):
        generate(n_entities=4, forget_entities=2, holdout_entities=2)


def test_batch_sampler_cycles_each_pass():
    """
    Every pass visits each index once; the last chunk of a pass may be short.
    """
    split = np.arange(5)
    batches = list(itertools.islice(batch_sampler(split, 2, seed=0), 6))
    assert [b.size for b in batches] == [2, 2, 1, 2, 2, 1]
    assert sorted(np.concatenate(batches[:3]).tolist()) == [0, 1, 2, 3, 4]



def test_batch_sampler_defaults_to_four():
    """
    Without an explicit size the sampler yields batches of four.
    """
    batches = list(itertools.islice(batch_sampler(np.arange(10)), 3))
    assert [b.size for b in batches] == [4, 4, 2]

def test_batch_sampler_empty_split():
    """
    Sampling an empty split fails loudly.
    """
    with pytest.raises(EmptySplitError):
        next(batch_sampler(np.array([], dtype=np.int64), 2, seed=0))


def test_export_csv_header_and_rows(tiny_dataset):
    """
    One CSV row per fact after the header.
    """
    lines = export_csv(tiny_dataset).splitlines()
    assert lines[0] == "entity,attribute,value,split"
    assert len(lines) == 31
    assert {line.rsplit(",", 1)[1] for line in lines[1:]} == {"forget", "retain", "holdout"}


# ---------------------------------------------------------------------------#
# Optimizer
# ---------------------------------------------------------------------------#


def test_cosine_schedule_endpoints():
    """
    Full rate at t = 0, half at T/2, zero at T.
    """
    assert cosine_lr(0, 300, 1e-3) == 1e-3
    assert cosine_lr(150, 300, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(300, 300, 1e-3) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        cosine_lr(301, 300, 1e-3)


def test_first_adamw_step_scalar_oracle():
    """
    With unit gradient and no decay the bias-corrected first step is lr/(1+eps).
    """
    cfg = OptimConfig(lr=1e-3, weight_decay=0.0, total_steps=10)
    params = scalar_params(1.0)
    state = OptimState.create(cfg, params)
    state, params = step(state, params, {"w": np.array([[1.0]])})
    assert params["w"][0, 0] == 1.0 - 1e-3 / (1.0 + 1e-8)
    assert state.step == 1


def test_clip_scales_gradient():
    """
    Norm 10 with clip 1 shrinks the gradient by a factor 10.
    """
    clipped, norm = clip_gradients({"a": np.array([6.0, 8.0])}, 1.0)
    assert norm == 10.0
    np.testing.assert_allclose(clipped["a"], [0.6, 0.8])


def test_clip_is_noop_below_threshold():
    """
    Updates are identical with and without clipping when the norm is small.
    """
    params = scalar_params(0.5)
    grads = {"w": np.array([[0.3]])}
    with_clip = step(OptimState.create(OptimConfig(), params), params, grads)[1]
    no_clip = step(OptimState.create(OptimConfig(clip_norm=None), params), params, grads)[1]
    assert with_clip.equals(no_clip)


def test_frozen_entries_do_not_move(tiny_cfg):
    """
    Only trainable entries are updated.
    """
    params = init_model(tiny_cfg).with_regime(Regime.ADAPTERS)
    grads = {n: np.ones_like(params[n]) for n in params}
    _, updated = step(OptimState.create(OptimConfig(), params), params, grads)
    assert np.array_equal(updated["layer1.weight"], params["layer1.weight"])
    assert not np.array_equal(updated["layer1.lora_A"], params["layer1.lora_A"])


def test_masked_coordinates_keep_value():
    """
    A zero mask entry freezes that coordinate, decay included.
    """
    params = ParamSet({"w": ParamEntry(np.array([[1.0, 1.0]]), ParamKind.BASE)}, 1.0)
    grads = {"w": np.array([[0.5, 0.5]])}
    _, updated = step(
        OptimState.create(OptimConfig(), params), params, grads, {"w": np.array([[1.0, 0.0]])}
    )
    assert updated["w"][0, 1] == 1.0 and updated["w"][0, 0] < 1.0


def test_missing_gradient_is_an_error():
    """
    Every trainable entry needs a gradient.
    """
    params = scalar_params()
    with pytest.raises(ValueError):
        step(OptimState.create(OptimConfig(), params), params, {})


# ---------------------------------------------------------------------------#
# Schedules
# ---------------------------------------------------------------------------#


def test_alpha_schedule_values():
    """
    t_w = 100, T = 300: zero at 100, half at 150, full from 200 on.
    """
    assert alpha_schedule(100, 100, 300, 3.0) == 0.0
    assert alpha_schedule(150, 100, 300, 3.0) == 1.5
    assert alpha_schedule(200, 100, 300, 3.0) == 3.0
    assert alpha_schedule(300, 100, 300, 3.0) == 3.0


def test_alpha_schedule_clamps_out_of_range_steps():
    """
    Steps before 1 or past T read the schedule at the nearest end.
    """
    assert alpha_schedule(0, 100, 300, 3.0) == 0.0
    assert alpha_schedule(-5, 0, 300, 3.0) == alpha_schedule(1, 0, 300, 3.0) == pytest.approx(0.02)
    assert alpha_schedule(400, 100, 300, 3.0) == 3.0


def test_lambda_rule():
    """
    λ = max(1, α + 1): 4 at α = 3, 1 at α = 0.
    """
    assert lambda_rule(3.0) == 4.0
    assert lambda_rule(0.0) == 1.0
    assert SafConfig(alpha_max=3.0).lam == 4.0


def test_warmup_off_starts_ramp_immediately():
    """
    Without warmup the quantization term is active from step 1.
    """
    cfg = SafConfig(alpha_max=3.0, warmup=False, steps=300)
    assert cfg.alpha(1) > 0.0


def test_saf_rejects_warmup_past_end():
    """
    t_w must lie inside the run.
    """
    with pytest.raises(ConfigError):
        SafConfig(steps=50, warmup_steps=50)


# ---------------------------------------------------------------------------#
# Pretraining and unlearning
# ---------------------------------------------------------------------------#


@pytest.fixture
def theta0(tiny_cfg, tiny_dataset):
    """Tiny model memorized for a few hundred steps."""
    return pretrain(
        init_model(tiny_cfg), tiny_dataset, PretrainConfig(epochs=60, lr=0.03, batch_size=8), seed=1
    )


def test_pretrain_leaves_adapters_untouched(tiny_cfg, tiny_dataset, theta0):
    """
    Adapters stay at their identity-delta init and θ₀ comes back in FULL regime.
    """
    init = init_model(tiny_cfg)
    assert np.array_equal(theta0["layer1.lora_B"], init["layer1.lora_B"])
    assert not theta0.is_frozen("layer1.weight") and theta0.is_frozen("layer1.lora_A")


def test_pretrain_improves_training_accuracy(tiny_cfg, tiny_dataset, theta0):
    """
    Memorization raises accuracy on trained facts above the untrained model.
    """
    trained = tiny_dataset.batch(tiny_dataset.trained)
    assert accuracy(theta0, trained) > accuracy(init_model(tiny_cfg), trained)


def test_saf_alpha_zero_equals_graddiff_bitwise(theta0, tiny_dataset):
    """
    At α_max = 0 the quantization term vanishes; SAF (λ = 1 by rule) and
    GradDiff (λ = 1) share seed and batches and end bit-identical.
    """
    saf = MethodConfig(Method.SAF, steps=6, warmup_steps=2, alpha_max=0.0)
    gd = MethodConfig(Method.GRADDIFF, steps=6, lam=1.0)
    a = run_method(saf, theta0, tiny_dataset, seed=3)
    b = run_method(gd, theta0, tiny_dataset, seed=3)
    assert a.equals(b)


def test_saf_without_retain_term_equals_ga_bitwise(theta0, tiny_dataset):
    """
    α_max = 0 and λ = 0 reduce SAF to plain gradient ascent.
    """
    saf = MethodConfig(Method.SAF, steps=6, warmup_steps=2, alpha_max=0.0, lam=0.0)
    ga = MethodConfig(Method.GA, steps=6)
    assert run_method(saf, theta0, tiny_dataset, seed=3).equals(
        run_method(ga, theta0, tiny_dataset, seed=3)
    )


def test_salun_full_mask_equals_graddiff_bitwise(theta0, tiny_dataset):
    """
    A saliency fraction of 1.0 masks nothing, so SalUn is GradDiff.
    """
    salun = MethodConfig(Method.SALUN, steps=6, lam=1.0, salun_fraction=1.0)
    gd = MethodConfig(Method.GRADDIFF, steps=6, lam=1.0)
    assert run_method(salun, theta0, tiny_dataset, seed=3).equals(
        run_method(gd, theta0, tiny_dataset, seed=3)
    )


def test_taskarith_zero_eta_returns_theta0(theta0, tiny_dataset):
    """
    With η = 0 the negated task vector is empty and θ₀ comes back unchanged.
    """
    ta = MethodConfig(Method.TASKARITH, ta_eta=0.0, ta_ft_steps=4)
    theta = run_method(ta, theta0, tiny_dataset, seed=3)
    assert theta.equals(theta0.with_regime(Regime.ADAPTERS))


def test_ga_moves_adapters_only(theta0, tiny_dataset):
    """
    The default regime updates adapters and leaves the base frozen.
    """
    theta = run_method(MethodConfig(Method.GA, steps=5), theta0, tiny_dataset, seed=0)
    assert np.array_equal(theta["layer2.weight"], theta0["layer2.weight"])
    assert not np.array_equal(theta["layer2.lora_B"], theta0["layer2.lora_B"])


def test_on_step_hook_sees_every_step(theta0, tiny_dataset):
    """
    The step hook is called once per optimizer step with the step index.
    """
    seen = []
    run_method(
        MethodConfig(Method.NPO, steps=4), theta0, tiny_dataset, seed=0,
        on_step=lambda t, _p: seen.append(t),
    )
    assert seen == [1, 2, 3, 4]


def test_saf_step_quantized_term_changes_update(theta0, tiny_dataset):
    """
    One SAF step moves the adapters; a non-zero α changes where they go.
    """
    params = theta0.with_regime(Regime.ADAPTERS)
    forget = tiny_dataset.split_batch("forget")
    retain = tiny_dataset.split_batch("retain")
    spec = QuantSpec.int4(QuantScope.ALL_TRAINABLE)

    def one_step(alpha: float) -> ParamSet:
        opt = AdamW(OptimConfig(lr=1e-2, total_steps=1), params)
        return saf_step(params, forget, retain, alpha, 1.0, spec, opt)

    plain, quantized = one_step(0.0), one_step(2.0)
    assert not plain.equals(params)
    assert not plain.equals(quantized)
    assert np.array_equal(plain["layer1.weight"], params["layer1.weight"])


def test_split_losses_are_mean_cross_entropy(tiny_params, tiny_dataset):
    """
    loss_forget and loss_retain average the per-example losses.
    """
    forget = tiny_dataset.split_batch("forget")
    retain = tiny_dataset.split_batch("retain")
    assert loss_forget(bind(tiny_params), forget).item() == pytest.approx(
        float(np.mean(example_losses(tiny_params, forget))), rel=1e-12
    )
    assert loss_retain(bind(tiny_params), retain).item() == pytest.approx(
        float(np.mean(example_losses(tiny_params, retain))), rel=1e-12
    )


@pytest.mark.parametrize(
    "cfg",
    [
        MethodConfig(Method.SCRUB, steps=3),
        MethodConfig(Method.SALUN, steps=3, salun_fraction=0.25),
        MethodConfig(Method.TASKARITH, ta_ft_steps=3),
        MethodConfig(Method.SAF, steps=4, warmup_steps=1, alpha_max=3.0),
    ],
    ids=lambda c: c.label,
)
def test_every_method_runs_and_is_deterministic(cfg, theta0, tiny_dataset):
    """
    Each method produces a changed checkpoint, identically on a re-run.
    """
    a = run_method(cfg, theta0, tiny_dataset, seed=11)
    b = run_method(cfg, theta0, tiny_dataset, seed=11)
    assert a.equals(b)
    assert not a.equals(theta0.with_regime(cfg.regime))


def test_saliency_mask_fraction(theta0, tiny_dataset):
    """
    The mask keeps ceil(fraction·N) coordinates across all trainable entries.
    """
    params = theta0.with_regime(Regime.ADAPTERS)
    masks = saliency_mask(params, tiny_dataset.split_batch("forget"), 0.5)
    total = sum(params[n].size for n in params.trainable_names())
    assert int(sum(m.sum() for m in masks.values())) == (total + 1) // 2


def test_unlearning_needs_forget_split(theta0):
    """
    A dataset without forget entities cannot be unlearned.
    """
    ds = generate(n_entities=10, n_attributes=3, value_vocab=5, forget_entities=0, holdout_entities=2)
    with pytest.raises(ConfigError):
        run_method(MethodConfig(Method.GA, steps=2), theta0, ds, seed=0)
