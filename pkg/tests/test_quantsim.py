from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest

from durable_lab.errors import ConfigError, QuantScopeError
from durable_lab.factmodel import ParamEntry, ParamKind, ParamSet, bind, merge_adapters
from durable_lab.quantsim import (
    Granularity,
    QuantScope,
    QuantSpec,
    noise_report,
    noise_stats,
    quantize,
    quantize_array,
    round_half_away,
    row_scales,
    scope_names,
    ste_quantize,
)


# ---------------------------------------------------------------------------#
# Helpers
# ---------------------------------------------------------------------------#
def scalar_quantize(x: float, peak: float, bits: int) -> float:
    """Element-at-a-time reference: round half away from zero, clamp, rescale."""
    d = 2 ** (bits - 1) - 1
    if peak == 0.0:
        return 0.0
    s = peak / d
    q = int(Decimal(x / s).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    q = max(-d, min(d, q))
    return (q / d) * peak


def reference(w: np.ndarray, bits: int, granularity: Granularity) -> np.ndarray:
    out = np.empty_like(w)
    if granularity is Granularity.GLOBAL:
        peak = float(np.max(np.abs(w)))
        for idx, x in np.ndenumerate(w):
            out[idx] = scalar_quantize(float(x), peak, bits)
        return out
    for r in range(w.shape[0]):
        peak = float(np.max(np.abs(w[r])))
        for c in range(w.shape[1]):
            out[r, c] = scalar_quantize(float(w[r, c]), peak, bits)
    return out


def corpus(n: int = 1000, seed: int = 2024):
    """Seeded matrices with shapes up to 128x128 and mixed magnitudes."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        rows = int(rng.integers(1, 129))
        cols = int(rng.integers(1, 129))
        # most matrices are small so the scalar loop stays fast
        if rng.random() < 0.9:
            rows, cols = min(rows, 12), min(cols, 12)
        scale = 10.0 ** rng.uniform(-3, 1)
        yield rng.normal(scale=scale, size=(rows, cols))


# ---------------------------------------------------------------------------#
# Kernels
# ---------------------------------------------------------------------------#


def test_round_half_away_ties():
    """
    Ties round away from zero in both directions.
    """
    x = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49, -0.51])
    np.testing.assert_array_equal(round_half_away(x), [-3, -2, -1, 1, 2, 3, 0, -1])


def test_int4_per_row_worked_example():
    """
    Row max 0.7 with d = 7: scale 0.1, so 0.25 → code 3 (tie away) and
    -0.7 → -7.
    """
    w = np.array([[0.25, -0.7, 0.0]])
    q = quantize_array(w, 4, Granularity.PER_ROW)
    np.testing.assert_allclose(q, [[0.3, -0.7, 0.0]], rtol=0, atol=1e-15)


def test_constant_row_is_fixed_point():
    """
    A row of identical values quantizes to itself exactly.
    """
    w = np.full((2, 5), 0.37)
    assert np.array_equal(quantize_array(w, 4, Granularity.PER_ROW), w)


def test_zero_row_stays_zero():
    """
    An all-zero row has no scale and maps to zeros.
    """
    w = np.array([[0.0, 0.0], [1.0, -1.0]])
    q = quantize_array(w, 4, Granularity.PER_ROW)
    assert np.array_equal(q[0], [0.0, 0.0])


def test_row_scales_of_int4():
    """
    s_r is the row maximum over 7 for INT4.
    """
    np.testing.assert_allclose(row_scales(np.array([[0.7, -0.1], [-1.4, 0.0]]), 4), [0.1, 0.2])


def test_oracle_equivalence_over_corpus():
    """
    INT4 per-row and INT8 global agree exactly with the scalar reference on
    1000 seeded matrices.
    """
    for w in corpus():
        assert np.array_equal(
            quantize_array(w, 4, Granularity.PER_ROW), reference(w, 4, Granularity.PER_ROW)
        )
        assert np.array_equal(
            quantize_array(w, 8, Granularity.GLOBAL), reference(w, 8, Granularity.GLOBAL)
        )


def test_quantizer_laws_over_corpus():
    """
    Idempotence, sign symmetry and the per-row noise bound hold on every
    matrix of the corpus.
    """
    for w in corpus():
        for bits, gran in ((4, Granularity.PER_ROW), (8, Granularity.GLOBAL)):
            q = quantize_array(w, bits, gran)
            assert np.array_equal(quantize_array(q, bits, gran), q)
            assert np.array_equal(quantize_array(-w, bits, gran), -q)
        q4 = quantize_array(w, 4, Granularity.PER_ROW)
        s = row_scales(w, 4)
        # one ulp of slack for the division/multiplication round trip
        assert np.all(np.abs(q4 - w) <= s[:, None] / 2 * (1 + 1e-12))


# ---------------------------------------------------------------------------#
# Specs
# ---------------------------------------------------------------------------#


def test_spec_granularity_defaults():
    """
    INT4 defaults to per-row and INT8 to global.
    """
    assert QuantSpec.int4().granularity is Granularity.PER_ROW
    assert QuantSpec.int8().granularity is Granularity.GLOBAL
    assert QuantSpec.int8().divisor == 127 and QuantSpec.int4().label == "int4"


def test_spec_rejects_other_bit_widths():
    """
    Only 4 and 8 bits are simulated.
    """
    with pytest.raises(ConfigError):
        QuantSpec(bits=3)


def test_spec_from_dict_rejects_unknown_keys():
    """
    Typos in a quant section are configuration errors.
    """
    with pytest.raises(ConfigError):
        QuantSpec.from_dict({"bits": 4, "scale": 1})


# ---------------------------------------------------------------------------#
# Parameter sets
# ---------------------------------------------------------------------------#


def test_adapters_only_scope_leaves_base_untouched(tiny_params):
    """
    Adapter-only quantization changes adapters and nothing else.
    """
    q = quantize(tiny_params, QuantSpec.int4())
    for name in tiny_params:
        if "lora" in name:
            continue
        assert np.array_equal(q[name], tiny_params[name])
    assert not np.array_equal(q["layer1.lora_B"], tiny_params["layer1.lora_B"])


def test_embeddings_are_never_in_scope(tiny_params):
    """
    Even the widest scope selects linear matrices only.
    """
    names = scope_names(tiny_params, QuantScope.ALL_TRAINABLE)
    assert "embed.entity" not in names and "layer1.weight" in names


def test_none_scope_is_identity(tiny_params):
    """
    Scope none returns the very same parameter set.
    """
    assert quantize(tiny_params, QuantSpec.int4(QuantScope.NONE)) is tiny_params


def test_merged_scope_requires_merged_set(tiny_params):
    """
    Merged-model scope refuses a set that still carries adapters.
    """
    with pytest.raises(QuantScopeError):
        quantize(tiny_params, QuantSpec.int4(QuantScope.MERGED_MODEL))
    merged = merge_adapters(tiny_params)
    assert scope_names(merged, QuantScope.MERGED_MODEL) == [
        "layer1.weight", "layer2.weight", "head.weight",
    ]


def test_adapter_scope_on_adapter_free_set_is_an_error(tiny_params):
    """
    A scope that selects nothing is reported instead of silently passing.
    """
    with pytest.raises(QuantScopeError):
        quantize(merge_adapters(tiny_params), QuantSpec.int4())


def test_int4_noise_exceeds_int8_noise(tiny_params):
    """
    INT4 perturbs the weights more than INT8; the report carries the ratio.
    """
    specs = (QuantSpec.int4(QuantScope.ALL_TRAINABLE), QuantSpec.int8(QuantScope.ALL_TRAINABLE))
    report = noise_report(tiny_params, specs)
    assert report["int4"]["delta_inf"] > report["int8"]["delta_inf"]
    assert report["ratio"]["delta_inf"] > 1.0


def test_noise_stats_zero_for_identical_sets(tiny_params):
    """
    No perturbation, no noise.
    """
    stats = noise_stats(tiny_params, tiny_params)
    assert (stats.delta_inf, stats.delta_2, stats.relative_2) == (0.0, 0.0, 0.0)


def test_noise_stats_worked_example():
    """
    Row [0.7, -0.35, 0.1] against its INT4 image [0.7, -0.4, 0.1] has
    delta_inf 0.05.
    """
    w = np.array([[0.7, -0.35, 0.1]])
    original = ParamSet({"w": ParamEntry(w, ParamKind.BASE)}, 1.0)
    quantized = original.replace({"w": quantize_array(w, 4, Granularity.PER_ROW)})
    stats = noise_stats(original, quantized)
    assert stats.delta_inf == pytest.approx(0.05, abs=1e-12)
    assert stats.delta_2 == pytest.approx(0.05, abs=1e-12)


def test_quantize_then_merge_differs_from_merge_then_quantize(tiny_params):
    """
    Quantizing the adapters before merging is not the same as quantizing
    the merged weights.
    """
    rng = np.random.default_rng(7)
    params = tiny_params.replace(
        {n: rng.normal(0.0, 0.1, tiny_params[n].shape) for n in tiny_params if n.endswith("lora_B")}
    )
    adapter_first = merge_adapters(quantize(params, QuantSpec.int4(QuantScope.ADAPTERS_ONLY)))
    merged_first = quantize(merge_adapters(params), QuantSpec.int4(QuantScope.MERGED_MODEL))
    assert list(adapter_first) == list(merged_first)
    assert not np.array_equal(adapter_first["layer1.weight"], merged_first["layer1.weight"])


# ---------------------------------------------------------------------------#
# Straight-through estimator
# ---------------------------------------------------------------------------#


def test_ste_forward_matches_quantized_model(tiny_params, tiny_dataset):
    """
    The STE graph's loss equals the loss of the quantized parameter set.
    """
    spec = QuantSpec.int4(QuantScope.ALL_TRAINABLE)
    batch = tiny_dataset.split_batch("forget")
    ste_loss = ste_quantize(bind(tiny_params), spec).loss(batch).item()
    q_loss = bind(quantize(tiny_params, spec)).loss(batch).item()
    assert ste_loss == q_loss


def test_ste_gradient_equals_gradient_at_quantized_point(tiny_params, tiny_dataset):
    """
    ∇θ L_f(Q_STE(θ)) equals ∇L_f evaluated at Q(θ) for every entry.
    """
    spec = QuantSpec.int4(QuantScope.ALL_TRAINABLE)
    batch = tiny_dataset.split_batch("forget")
    g = bind(tiny_params)
    ste_grads = g.tape.backward(ste_quantize(g, spec).loss(batch))
    gq = bind(quantize(tiny_params, spec))
    q_grads = gq.tape.backward(gq.loss(batch))
    for name in tiny_params:
        np.testing.assert_allclose(ste_grads[name], q_grads[name], rtol=1e-6, atol=1e-12)
