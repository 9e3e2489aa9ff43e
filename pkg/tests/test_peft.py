import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptsam import numcore as nc
from ptsam.numcore import ConfigurationError, Tensor, gradcheck
from ptsam.peft import (
    AdapterConfig,
    LoraPair,
    Mode,
    apply_adapter,
    build_token_stream,
    count_trainable,
    load_adapter,
    lora_forward,
    parse_mode,
    save_adapter,
    reference_counts,
    trainable_names,
)
from ptsam.samarch import base_tokens, build_model, forward_segment, predict_masks, preset
from ptsam.traineng import AdamW, TrainConfig, combined_loss, training_forward


def desk_model(seed=0):
    return build_model(preset("desk"), seed=seed)


def _image(seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (1, 64, 64)).astype(np.float32)


def adapted(mode, **kw):
    m = desk_model()
    return apply_adapter(m, AdapterConfig(mode=mode, **kw), seed=0)


# ---------------------------------------------------------------- trainable sets


def test_pt_md_trains_only_decoder_prompts():
    assert trainable_names(adapted("PT_MD")) == ["adapter.p_md"]


def test_pt_md_ie_adds_one_prompt_per_encoder_layer():
    names = trainable_names(adapted("PT_MD_IE"))
    assert names == ["adapter.p_md"] + [f"adapter.p_ie.{i}" for i in range(4)]


def test_lora_md_wraps_every_decoder_q_and_v():
    m = adapted("LORA_MD")
    # 2 layers x 3 attentions + final attention = 7 modules, q and v each
    assert len(m.lora) == 14
    assert all(k.startswith("dec.") and k.endswith(("q_proj", "v_proj")) for k in m.lora)
    assert len(trainable_names(m)) == 28


def test_lora_md_ie_also_wraps_encoder():
    m = adapted("LORA_MD_IE")
    assert len(m.lora) == 14 + 2 * 4


def test_full_md_trains_exactly_the_decoder_group():
    m = adapted("FULL_MD")
    assert set(trainable_names(m)) == set(m.reg.names("decoder"))


def test_full_md_lora_ie_combines_decoder_and_encoder_lora():
    m = adapted("FULL_MD_LORA_IE")
    names = set(trainable_names(m))
    assert set(m.reg.names("decoder")) <= names
    assert all(k.startswith("enc.") for k in m.lora)
    assert not any(n.startswith("enc.") or n.startswith("neck.") for n in names)


@pytest.mark.parametrize("mode", list(Mode))
def test_count_matches_sum_of_trainable_numel(mode):
    m = adapted(mode)
    by_hand = sum(int(np.prod(m.reg[n].shape)) for n in trainable_names(m))
    assert count_trainable(m) == by_hand


def test_prompt_count_examples_at_vitb_scale():
    counts = reference_counts()
    assert counts["PT_MD"] == 8 * 256
    assert counts["PT_MD_IE"] == 8 * 256 + 12 * 8 * 768
    assert counts["LORA_MD"] == 23_552
    assert counts["LORA_MD_IE"] == 171_008


def test_desk_counts_scale_with_sizes():
    assert count_trainable(adapted("PT_MD", n_md=3)) == 3 * 64
    assert count_trainable(adapted("PT_MD_IE", n_md=2, n_ie=5)) == 2 * 64 + 4 * 5 * 64
    r2 = count_trainable(adapted("LORA_MD", lora_rank=2))
    r4 = count_trainable(adapted("LORA_MD", lora_rank=4))
    assert r4 == 2 * r2


def test_invalid_adapter_configs():
    with pytest.raises(ConfigurationError):
        parse_mode("PROMPT")
    with pytest.raises(ConfigurationError):
        AdapterConfig(mode="PT_MD_IE", n_ie=0).validate()
    with pytest.raises(ConfigurationError):
        AdapterConfig(mode="LORA_MD", lora_rank=0).validate()
    m = adapted("PT_MD")
    with pytest.raises(ConfigurationError):
        apply_adapter(m, AdapterConfig(mode="PT_MD"))


def test_adapter_text_roundtrip():
    for mode in Mode:
        c = AdapterConfig(mode=mode, n_md=3, n_ie=5, lora_rank=2, lora_alpha=4.0)
        assert AdapterConfig.from_text(c.to_text()) == c
    c = AdapterConfig(mode="pt_md")
    assert AdapterConfig.from_text(c.to_text()) == c


# ---------------------------------------------------------------- token stream


def test_token_stream_layout():
    m = adapted("PT_MD")
    stream = build_token_stream(m).data
    base = base_tokens(m.cfg, m.reg).data
    assert stream.shape == (13, 64)
    np.testing.assert_array_equal(stream[:8], m.reg["adapter.p_md"].data)
    np.testing.assert_array_equal(stream[8:], base)


def test_token_stream_without_prompts_is_the_base_block():
    m = adapted("PT_MD", n_md=0)
    assert build_token_stream(m).shape == (5, 64)
    assert count_trainable(m) == 0


def test_removing_prompts_restores_base_output_bitwise():
    img = _image(2)
    ref = forward_segment(desk_model(), img).data
    m = adapted("PT_MD_IE")
    assert forward_segment(m, img).data.tobytes() != ref.tobytes()
    for name in [n for n in m.reg.names("adapter")]:
        m.reg._entries.pop(name)
    m.adapter = None
    assert forward_segment(m, img).data.tobytes() == ref.tobytes()


# ---------------------------------------------------------------- LoRA


def test_lora_with_zero_b_is_identity():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((5, 7)))
    x = Tensor(rng.standard_normal((3, 7)))
    pair = LoraPair("t", Tensor(rng.standard_normal((2, 7))), Tensor(np.zeros((5, 2))), 2, 2.0)
    np.testing.assert_array_equal(lora_forward(x, w, pair).data, nc.linear(x, w).data)


def test_lora_full_rank_can_reach_any_update():
    # with r = min(d_in, d_out), B A can equal any target delta
    rng = np.random.default_rng(1)
    target = rng.standard_normal((4, 4))
    a = np.eye(4)
    pair = LoraPair("t", Tensor(a), Tensor(target), 4, 4.0)
    x = Tensor(rng.standard_normal((6, 4)))
    w = Tensor(np.zeros((4, 4)))
    np.testing.assert_allclose(lora_forward(x, w, pair).data, x.data @ target.T, rtol=1e-5, atol=1e-6)


def test_lora_gradients_with_respect_to_a_and_b():
    rng = np.random.default_rng(2)
    w = Tensor(rng.standard_normal((5, 6)))
    x = Tensor(rng.standard_normal((3, 6)))

    def f(a, b):
        return nc.sum_all(nc.mul(lora_forward(x, w, LoraPair("t", a, b, 2, 3.0)), Tensor(np.ones((3, 5)))))

    rep = gradcheck(f, [Tensor(rng.standard_normal((2, 6))), Tensor(rng.standard_normal((5, 2)))])
    assert rep.passed


@pytest.mark.parametrize("mode", ["LORA_MD", "LORA_MD_IE", "FULL_MD_LORA_IE"])
def test_zero_initialised_lora_leaves_forward_unchanged(mode):
    img = _image(3)
    ref = forward_segment(desk_model(), img).data
    assert forward_segment(adapted(mode), img).data.tobytes() == ref.tobytes()


# ---------------------------------------------------------------- freezing


def _grad_step(m):
    img = _image(4)
    gt = (img[0] > 0.5).astype(np.float32)
    m.reg.zero_grad()
    logits, aux = training_forward(m, img)
    nc.backward(combined_loss(logits, gt, TrainConfig()) + aux)


@pytest.mark.parametrize("mode", list(Mode))
def test_gradients_reach_trainables_only(mode):
    m = adapted(mode)
    if mode in (Mode.LORA_MD, Mode.LORA_MD_IE, Mode.FULL_MD_LORA_IE):
        # B starts at zero so A would get no gradient; nudge B to test the path
        for pair in m.lora.values():
            pair.B.data[...] = 0.01
    _grad_step(m)
    trainable = set(trainable_names(m))
    for e in m.reg:
        t = e.tensor
        if e.name in trainable:
            assert t.grad is not None, e.name
            if e.group == "adapter":
                assert np.any(t.grad != 0), e.name
        else:
            assert t.grad is None, e.name


@pytest.mark.parametrize("mode", list(Mode))
def test_frozen_parameters_stay_bit_exact_through_updates(mode):
    m = adapted(mode)
    before = {n: m.reg[n].data.tobytes() for n in m.reg.names() if n not in set(trainable_names(m))}
    opt = AdamW({n: m.reg[n] for n in trainable_names(m)})
    for _ in range(2):
        _grad_step(m)
        opt.step(1e-3)
    for n, raw in before.items():
        assert m.reg[n].data.tobytes() == raw, n


# ---------------------------------------------------------------- persistence


@pytest.mark.parametrize("mode", list(Mode))
def test_adapter_checkpoint_roundtrip(tmp_path, mode):
    m = adapted(mode)
    for n in trainable_names(m):
        m.reg[n].data[...] += 0.01
    save_adapter(m, tmp_path / "ad")
    fresh = load_adapter(desk_model(), tmp_path / "ad")
    assert fresh.adapter == m.adapter
    img = _image(5)
    assert forward_segment(fresh, img).data.tobytes() == forward_segment(m, img).data.tobytes()


def test_pt_md_adapter_payload_size(tmp_path):
    m = adapted("PT_MD")
    _, payload = save_adapter(m, tmp_path / "ad")
    assert payload.stat().st_size == len(b"NT1 2 8 64\n") + 8 * 64 * 4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 6), st.integers(1, 4))
def test_prompt_count_property(n_md, n_ie):
    m = apply_adapter(build_model(preset("desk"), materialize=False), AdapterConfig(mode="PT_MD_IE", n_md=n_md, n_ie=n_ie))
    assert count_trainable(m) == 64 * n_md + 4 * 64 * n_ie


def test_iou_and_masks_unchanged_by_zero_prompt_count():
    img = _image(6)
    a = predict_masks(desk_model(), img)
    b = predict_masks(adapted("PT_MD", n_md=0), img)
    assert a[0].data.tobytes() == b[0].data.tobytes()
