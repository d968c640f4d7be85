import numpy as np
import pytest

from fuselm.autodiff import ShapeError, Tensor, grad_check, mul, parameter, sum_all
from fuselm.slm import (
    ALPHABET,
    LMConfig,
    LMParams,
    PAPER_SCALE,
    Task,
    TaskPrompt,
    Vocab,
    causal_mask,
    sinusoidal_encoding,
)

VOCAB = Vocab()
SMALL = LMConfig(n_blocks=3, d=16, heads=2, ffn=32, max_len=64)


def _params(seed=0, cfg=SMALL, d0=6):
    return LMParams(cfg, VOCAB, d0, np.random.default_rng(seed))


def _fused(rng, t0=5, d0=6, grad=False):
    arr = rng.standard_normal((t0, d0))
    return parameter(arr) if grad else Tensor(arr)


class TestVocab:
    def test_alphabet_size(self):
        assert len(ALPHABET) == 30
        assert VOCAB.n_text == 30

    def test_round_trip(self):
        text = "the cat's hat."
        assert VOCAB.decode(VOCAB.encode(text)) == text

    def test_unknown_symbol_rejected(self):
        with pytest.raises(ValueError):
            VOCAB.encode("Ш")

    def test_prompt_ids_reserved_and_disjoint(self):
        asr = set(VOCAB.prompt_ids(Task.ASR))
        ser = set(VOCAB.prompt_ids(Task.SER))
        text = set(range(VOCAB.n_text))
        assert asr.isdisjoint(text) and ser.isdisjoint(text) and asr.isdisjoint(ser)
        specials = {VOCAB.pad, VOCAB.bos, VOCAB.eos}
        assert asr.isdisjoint(specials) and ser.isdisjoint(specials)

    def test_decode_skips_specials(self):
        ids = list(VOCAB.encode("ab")) + [VOCAB.eos]
        assert VOCAB.decode(ids) == "ab"


class TestAssemble:
    def test_lengths_without_targets(self):
        params = _params()
        rng = np.random.default_rng(1)
        prompt = TaskPrompt.for_task(Task.ASR, VOCAB)
        lm_in = params.assemble_input(_fused(rng, t0=24), prompt)
        assert lm_in.total_len == 26
        assert lm_in.embedded.shape == (26, SMALL.d)

    def test_lengths_with_targets(self):
        params = _params()
        rng = np.random.default_rng(1)
        prompt = TaskPrompt.for_task(Task.ASR, VOCAB)
        lm_in = params.assemble_input(_fused(rng, t0=24), prompt, targets=[1, 2, 3, 4, 5])
        assert lm_in.total_len == 31
        assert lm_in.embedded.shape == (31, SMALL.d)

    def test_first_decode_position_is_bos(self):
        params = _params()
        rng = np.random.default_rng(1)
        prompt = TaskPrompt.for_task(Task.SER, VOCAB)
        lm_in = params.assemble_input(_fused(rng, t0=24), prompt)
        assert lm_in.first_decode_position == 24 + len(prompt.token_ids)

    def test_empty_speech_rejected(self):
        params = _params()
        prompt = TaskPrompt.for_task(Task.ASR, VOCAB)
        with pytest.raises(ShapeError, match="empty speech"):
            params.assemble_input(Tensor(np.zeros((0, 6))), prompt)

    def test_wrong_speech_width_rejected(self):
        params = _params()
        prompt = TaskPrompt.for_task(Task.ASR, VOCAB)
        with pytest.raises(ShapeError):
            params.assemble_input(Tensor(np.zeros((4, 9))), prompt)


class TestEncodeLayers:
    def test_output_count_and_shapes(self):
        params = _params()
        rng = np.random.default_rng(2)
        prompt = TaskPrompt.for_task(Task.ASR, VOCAB)
        lm_in = params.assemble_input(_fused(rng), prompt, targets=[3, 1])
        outs = params.encode_layers(lm_in)
        assert len(outs) == SMALL.n_blocks
        for r in outs:
            assert r.shape == (lm_in.total_len, SMALL.d)

    def test_causality_exhaustive(self):
        # perturbing position t leaves every layer's outputs at positions < t
        # unchanged; checked for every position of a T=10 input
        params = _params(seed=3)
        rng = np.random.default_rng(3)
        prompt = TaskPrompt.for_task(Task.ASR, VOCAB)
        fused = rng.standard_normal((5, 6))
        targets = [2, 7, 4]
        base_in = params.assemble_input(Tensor(fused), prompt, targets=targets)
        assert base_in.total_len == 10
        base_outs = [r.data.copy() for r in params.encode_layers(base_in)]

        for t in range(10):
            bumped = params.assemble_input(Tensor(fused), prompt, targets=targets)
            bump = np.zeros_like(bumped.embedded.data)
            bump[t] = 0.37
            bumped_embedded = Tensor(bumped.embedded.data + bump)
            bumped.embedded = bumped_embedded
            outs = params.encode_layers(bumped)
            for m, (a, b) in enumerate(zip(base_outs, outs)):
                np.testing.assert_array_equal(
                    a[:t], b.data[:t],
                    err_msg=f"layer {m + 1} leaked at position {t}",
                )
                assert not np.allclose(a[t], b.data[t])

    def test_prompt_change_affects_only_prompt_and_later(self):
        params = _params(seed=4)
        rng = np.random.default_rng(4)
        fused = Tensor(rng.standard_normal((5, 6)))
        out_asr = params.encode_layers(
            params.assemble_input(fused, TaskPrompt.for_task(Task.ASR, VOCAB))
        )
        out_ser = params.encode_layers(
            params.assemble_input(fused, TaskPrompt.for_task(Task.SER, VOCAB))
        )
        for a, b in zip(out_asr, out_ser):
            np.testing.assert_array_equal(a.data[:5], b.data[:5])
            assert not np.allclose(a.data[5:], b.data[5:])

    def test_forward_deterministic(self):
        params = _params(seed=5)
        rng = np.random.default_rng(5)
        fused = rng.standard_normal((4, 6))
        prompt = TaskPrompt.for_task(Task.SER, VOCAB)
        a = params.encode_layers(params.assemble_input(Tensor(fused), prompt))
        b = params.encode_layers(params.assemble_input(Tensor(fused), prompt))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_gradient_through_stack_matches_finite_differences(self):
        # scalar readout of the last layer, gradient w.r.t. block-1 parameters
        params = _params(seed=6)
        rng = np.random.default_rng(6)
        fused = Tensor(rng.standard_normal((3, 6)))
        prompt = TaskPrompt.for_task(Task.ASR, VOCAB)
        readout = rng.standard_normal((5, SMALL.d))

        def f(_wq, _w1):
            lm_in = params.assemble_input(fused, prompt)
            r_last = params.encode_layers(lm_in)[-1]
            return sum_all(mul(r_last, readout))

        wq = params.blocks[0].Wq
        w1 = params.blocks[0].W1
        err = grad_check(f, [wq, w1], coords_per_input=60, seed=1)
        assert err < 1e-4


def test_causal_mask_shape_and_values():
    m = causal_mask(4).data
    assert m.shape == (4, 4)
    assert np.all(m[np.tril_indices(4)] == 0.0)
    assert np.all(m[np.triu_indices(4, k=1)] < -1e29)


def test_sinusoidal_encoding_bounded():
    pe = sinusoidal_encoding(50, 16)
    assert pe.shape == (50, 16)
    assert np.all(np.abs(pe) <= 1.0)


def test_paper_scale_config_constructs():
    assert PAPER_SCALE.n_blocks == 12
    assert PAPER_SCALE.d == 768
    assert PAPER_SCALE.heads == 12
    assert PAPER_SCALE.ffn == 2048


def test_lmconfig_requires_two_blocks():
    with pytest.raises(ValueError):
        LMConfig(n_blocks=1)
