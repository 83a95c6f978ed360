import numpy as np
import pytest

import dkvcache


def small_model():
    cfg = dkvcache.ModelConfig()
    cfg.n_layers = 2
    cfg.d_model = 64
    cfg.d_head = 16
    cfg.d_ff = 128
    cfg.vocab_size = 128
    cfg.mask_token_id = 127
    return dkvcache.Model(cfg)


def test_schedule():
    assert list(dkvcache.schedule(10, 4, 10)) == [3, 3, 2, 2]


def test_forward_shape():
    model = small_model()
    logits = np.asarray(model.forward([1, 2, 3, 127, 127]))
    assert logits.shape == (5, 128)
    assert np.isfinite(logits).all()


def test_decode_one_matches_uncached():
    model = small_model()
    prompt = [4, 5, 6, 7]
    kwargs = dict(gen_len=16, steps=16, block_size=8, seed=2, record_timing=False)
    ref = dkvcache.generate(model, prompt, cache="none", **kwargs)
    out = dkvcache.generate(model, prompt, cache="decode(1)", **kwargs)
    assert list(out["tokens"]) == list(ref["tokens"])
    assert 127 not in list(ref["tokens"])


def test_bad_variant_raises():
    with pytest.raises(Exception):
        dkvcache.normalize_variant("sometimes")
