import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import model_gradcheck
from phonocard.errors import ConfigError, ShapeError, StateError
from phonocard.model import (VARIANT_TITLES, VARIANTS, ConvStreamSpec, DualStreamModel,
                             ModelConfig, build_variant)
from phonocard.nn import checkpoint

F64 = np.float64


@pytest.fixture(scope="module")
def full():
    return build_variant("Full", seed=3)


def batch(rng, n=2, length=2500, frames=18):
    return rng.standard_normal((n, length)), rng.standard_normal((n, frames, 13))


class TestShapes:
    def test_lengths(self):
        assert ConvStreamSpec().lengths() == [2500, 1250, 625, 312, 156]
        assert ConvStreamSpec().flatten_size == 156 * 256 == 39936

    def test_spec_layout(self):
        spec = ConvStreamSpec()
        assert len(spec.conv_blocks) == 6
        assert sum(b is None for b in spec.blocks) == 4
        assert spec.conv_blocks == [(32, 16), (16, 32), (8, 64), (8, 64), (8, 128), (4, 256)]

    def test_conv_stream(self, full, rng):
        x = rng.uniform(0, 2, (2, 1, 2500)).astype(np.float32)
        out, _ = full.conv_stream_forward(x)
        assert out.shape == (2, 64) and np.all(np.isfinite(out))
        with pytest.raises(ShapeError):
            full.conv_stream_forward(np.zeros((2, 1, 2000), np.float32))

    def test_recurrent_stream(self, full, rng):
        out, _ = full.recurrent_stream_forward(rng.standard_normal((3, 18, 13)).astype(np.float32))
        assert out.shape == (3, 64)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_outputs_are_probabilities(self, variant, rng):
        model = build_variant(variant, seed=1, config=ModelConfig.reduced())
        waves, mfccs = batch(rng, 4, 100, 5)
        p, _ = model.forward(waves, mfccs)
        assert p.shape == (4,) and np.all((p > 0) & (p < 1))

    def test_rnn_raw_takes_sequence(self, rng):
        model = build_variant("RnnRaw", seed=0)
        p, cache = model.forward(rng.standard_normal((1, 2500)))
        assert cache["rnn"]["gru"]["x"].shape == (1, 2500, 1)
        assert p.shape == (1,)

    def test_missing_inputs(self, rng):
        waves, mfccs = batch(rng)
        with pytest.raises(ConfigError):
            build_variant("Full").forward(waves, None)
        with pytest.raises(ConfigError):
            build_variant("ConvOnly").forward(None, mfccs)
        with pytest.raises(ConfigError):
            build_variant("Bogus")


def test_parameter_census(full):
    blocks = [(32, 16), (16, 32), (8, 64), (8, 64), (8, 128), (4, 256)]
    conv, in_ch = 0, 1
    for k, f in blocks:
        conv += k * in_ch * f + f + 2 * f   # weights, bias, gamma and beta
        in_ch = f
    conv += 156 * 256 * 64 + 64
    gru = 3 * (128 * 13 + 128 * 128 + 128) + 128 * 64 + 64
    fusion = (128 * 64 + 64) + (64 * 128 + 128)
    head = (128 * 32 + 32) + (32 + 1)
    assert full.n_parameters() == conv + gru + fusion + head == 2_895_633


class TestAttention:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 5))
    def test_mask_in_unit_interval(self, seed, scale):
        model = build_variant("Full", seed=3, config=ModelConfig.reduced(), dtype=F64)
        c = scale * np.random.default_rng(seed).standard_normal((5, 128))
        m, _ = model.attention_mask(c)
        assert np.all((m > 0) & (m < 1))

    def test_saturated_mask_matches_no_attention(self, rng):
        waves, mfccs = batch(rng, 3)
        a = build_variant("Full", seed=7)
        b = build_variant("DualNoAttention", seed=7)
        a.layers["att_up"].params["bias"][...] = 40
        np.testing.assert_allclose(a.forward(waves, mfccs)[0], b.forward(waves, mfccs)[0],
                                   rtol=0, atol=1e-6)

    def test_closed_mask_is_constant(self, rng):
        model = build_variant("Full", seed=7)
        model.layers["att_up"].params["bias"][...] = -40
        p1, _ = model.forward(*batch(rng, 3))
        p2, _ = model.forward(*batch(rng, 3))
        np.testing.assert_allclose(np.concatenate([p1, p2]), p1[0], rtol=0, atol=1e-6)


def test_shared_layers_identical_across_variants():
    a, b = build_variant("Full", seed=5), build_variant("ConvOnly", seed=5)
    for name in ("conv0.weight", "conv5.weight", "conv_fc.weight"):
        np.testing.assert_array_equal(a.parameters()[name], b.parameters()[name])


class TestRecurrentStream:
    def test_time_order_matters(self, rng):
        model = build_variant("RnnMfcc", seed=2, dtype=F64)
        seq = rng.standard_normal((2, 18, 13))
        a, _ = model.recurrent_stream_forward(seq)
        b, _ = model.recurrent_stream_forward(seq[:, ::-1])
        assert np.max(np.abs(a - b)) > 1e-6

    def test_zero_gru_gives_dense_bias(self, rng):
        model = build_variant("RnnMfcc", seed=2)
        for v in model.layers["gru"].params.values():
            v[...] = 0
        model.layers["gru_fc"].params["bias"][...] = rng.standard_normal(64)
        out, _ = model.recurrent_stream_forward(np.zeros((2, 18, 13), np.float32))
        np.testing.assert_array_equal(out, np.broadcast_to(model.layers["gru_fc"].params["bias"],
                                                           (2, 64)))


class TestBackward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_reduced_gradcheck(self, variant, rng):
        model = build_variant(variant, seed=11, config=ModelConfig.reduced(), dtype=F64)
        waves, mfccs = batch(rng, 2, 100, 6)
        errors = model_gradcheck(model, waves, mfccs, np.array([0, 1]), rng)
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, (worst, errors[worst])

    def test_zero_upstream(self, rng):
        model = build_variant("Full", seed=0, config=ModelConfig.reduced(), dtype=F64)
        p, cache = model.forward(*batch(rng, 2, 100, 6), training=True)
        grads = model.backward(cache, np.zeros_like(p))
        assert not any(g.any() for g in grads.values())

    def test_covers_every_parameter_once(self, rng):
        model = build_variant("Full", seed=0, config=ModelConfig.reduced(), dtype=F64)
        p, cache = model.forward(*batch(rng, 2, 100, 6), training=True)
        grads = model.backward(cache, np.ones_like(p))
        params = model.parameters()
        assert list(grads) == list(params)
        assert all(grads[k].shape == params[k].shape for k in params)

    def test_parameters_untouched(self, rng):
        model = build_variant("Full", seed=0, config=ModelConfig.reduced(), dtype=F64)
        before = {k: v.copy() for k, v in model.parameters().items()}
        p, cache = model.forward(*batch(rng, 2, 100, 6), training=True)
        model.backward(cache, np.ones_like(p))
        for k, v in model.parameters().items():
            np.testing.assert_array_equal(v, before[k])

    def test_foreign_cache(self, rng):
        cfg = ModelConfig.reduced()
        a, b = build_variant("Full", 0, cfg), build_variant("Full", 0, cfg)
        p, cache = a.forward(*batch(rng, 2, 100, 6), training=True)
        with pytest.raises(StateError):
            b.backward(cache, np.ones_like(p))


class TestDeterminism:
    def test_same_seed_same_checkpoint(self):
        cfg = ModelConfig.reduced()
        blobs = [checkpoint.encode(*build_variant("Full", 4, cfg).to_checkpoint())
                 for _ in range(2)]
        assert blobs[0] == blobs[1]
        assert blobs[0] != checkpoint.encode(*build_variant("Full", 5, cfg).to_checkpoint())

    def test_eval_forward_repeatable(self, full, rng):
        waves, mfccs = batch(rng)
        a, _ = full.forward(waves, mfccs)
        b, _ = full.forward(waves, mfccs)
        assert a.tobytes() == b.tobytes()

    def test_checkpoint_restores_model(self, rng, tmp_path):
        cfg = ModelConfig.reduced()
        model = build_variant("Full", 4, cfg)
        waves, mfccs = batch(rng, 3, 100, 6)
        model.forward(waves, mfccs, training=True)  # move running statistics
        checkpoint.save(tmp_path / "m.ckpt", *model.to_checkpoint())
        clone = DualStreamModel.from_checkpoint(*checkpoint.load(tmp_path / "m.ckpt"))
        assert clone.forward(waves, mfccs)[0].tobytes() == model.forward(waves, mfccs)[0].tobytes()


def test_variant_titles():
    assert [VARIANT_TITLES[v] for v in VARIANTS] == [
        "Convolution Stream", "Recurrent Stream with Raw Data",
        "Recurrent Stream with MFCC Feature", "Dual Stream Network without Attention",
        "Proposed Method"]
