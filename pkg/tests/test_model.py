import numpy as np
import pytest
import torch

from videdit.model import (Recorder, TemporalAttention, UNet, forward2d, forward3d, inflate,
                           parameter_digest, st_attention, temporal_attention)

from oracles import capture_st, st_maps_bruteforce


@pytest.fixture(autouse=True, scope="module")
def float64_default():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(scope="module")
def model2d():
    torch.manual_seed(0)
    return UNet().to(torch.float64)


@pytest.fixture(scope="module")
def model3d(model2d):
    return inflate(model2d)


def _perturb_temporal(model, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if ".attn_temp." in n:
                p.add_(0.2 * torch.randn(p.shape, generator=g))


class TestTextEncoder:
    def test_empty_prompt_is_null(self, model2d):
        e = model2d.encode_text("")
        v = model2d.text.vocab
        assert e.null_flag
        assert e.token_ids.tolist() == [v.bos_id] + [v.pad_id] * 7
        assert e.key_mask.all()

    def test_prompt_ids(self, model2d):
        v = model2d.text.vocab
        e = model2d.encode_text("a red square")
        assert e.token_ids.tolist()[:5] == [v.bos_id, v.index["a"], v.index["red"], v.index["square"], v.pad_id]
        assert not e.null_flag
        assert e.key_mask.tolist() == [True] * 4 + [False] * 4

    def test_deterministic(self, model2d):
        a, b = model2d.encode_text("a red square"), model2d.encode_text("a red square")
        assert torch.equal(a.embeddings, b.embeddings)


class TestForward2D:
    def test_zero_head_gives_zero(self):
        m = UNet().to(torch.float64)
        with torch.no_grad():
            m.conv_out.weight.zero_()
            m.conv_out.bias.zero_()
        out = forward2d(m, torch.randn(4, 16, 16), 10, m.encode_text("a red square"))
        assert torch.count_nonzero(out) == 0

    @pytest.mark.parametrize("hw", [8, 16, 32])
    def test_shape_contract(self, model2d, hw):
        z = torch.randn(4, hw, hw)
        assert forward2d(model2d, z, 500, model2d.encode_text("a blue circle")).shape == z.shape

    def test_bitwise_stable(self, model2d):
        z = torch.randn(4, 16, 16, generator=torch.Generator().manual_seed(3))
        text = model2d.encode_text("a red square")
        with torch.no_grad():
            assert torch.equal(forward2d(model2d, z, 321, text), forward2d(model2d, z, 321, text))

    def test_nonfinite_reports_layer(self):
        from videdit.errors import NumericalError

        m = UNet().to(torch.float64)
        with torch.no_grad():
            m.res_mid.conv1.weight.fill_(float("nan"))
        with pytest.raises(NumericalError, match="res_mid"):
            forward2d(m, torch.randn(4, 16, 16), 10, m.encode_text("a red square"))


class TestInflate:
    def test_single_frame_matches_2d(self, model2d, model3d):
        z = torch.randn(1, 4, 16, 16)
        text = model2d.encode_text("a green circle moving up")
        with torch.no_grad():
            a = forward3d(model3d, z, 700, text)[0]
            b = forward2d(model2d, z[0], 700, text)
        assert (a[0] - b).abs().max() < 1e-6

    def test_static_clip_matches_2d_per_frame(self, model2d, model3d):
        frame = torch.randn(4, 16, 16)
        z = frame.expand(8, -1, -1, -1).clone()
        text = model2d.encode_text("a red square moving left")
        with torch.no_grad():
            a = forward3d(model3d, z, 300, text)[0]
            b = forward2d(model2d, frame, 300, text)
        assert (a - b).abs().max() < 1e-6

    def test_conv_kernels_copied_with_unit_depth(self, model2d, model3d):
        w2 = model2d.conv_in.weight
        w3 = model3d.conv_in.weight
        assert w3.shape == (w2.shape[0], w2.shape[1], 1, 3, 3)
        assert torch.equal(w3[:, :, 0], w2)

    def test_parameter_counts(self, model2d, model3d):
        p2 = dict(model2d.named_parameters())
        p3 = dict(model3d.named_parameters())
        assert set(p2) <= set(p3)
        assert all(p2[n].numel() == p3[n].numel() for n in p2)
        assert all(".attn_temp." in n for n in set(p3) - set(p2))

    def test_values_preserved(self, model2d, model3d):
        p3 = dict(model3d.named_parameters())
        for n, p in model2d.named_parameters():
            assert torch.equal(p3[n].reshape(p.shape), p)

    def test_refuses_double_inflation(self, model3d):
        with pytest.raises(ValueError):
            inflate(model3d)

    def test_unknown_layer_rejected(self):
        m = UNet().to(torch.float64)
        m.extra = torch.nn.Dropout()
        with pytest.raises(TypeError):
            inflate(m)


class TestForward3D:
    def test_record_flag(self, model3d):
        z = torch.randn(3, 4, 16, 16)
        text = model3d.encode_text("a red square")
        with torch.no_grad():
            _, none = forward3d(model3d, z, 100, text, record=False)
            _, recs = forward3d(model3d, z, 100, text, record=True)
        assert none == []
        assert len(recs) == 6
        assert sorted(r.attn_type for r in recs) == ["cross", "cross", "st", "st", "temporal", "temporal"]

    def test_record_shapes_and_rows(self, model3d):
        nf = 4
        m = inflate(UNet().to(torch.float64))
        _perturb_temporal(m)
        text = m.encode_text("a red square")
        with torch.no_grad():
            _, recs = forward3d(m, torch.randn(nf, 4, 16, 16), 100, text, record=True)
        shapes = {r.attn_type: tuple(r.map.shape) for r in recs}
        assert shapes == {"cross": (nf, 64, 8), "st": (nf, 64, 128), "temporal": (64, nf, nf)}
        for r in recs:
            assert torch.allclose(r.map.sum(-1), torch.ones(()), atol=1e-5)

    def test_padding_columns_are_empty(self, model3d):
        text = model3d.encode_text("a red square")
        with torch.no_grad():
            _, recs = forward3d(model3d, torch.randn(2, 4, 16, 16), 100, text, record=True)
        for r in recs:
            if r.attn_type == "cross":
                assert torch.count_nonzero(r.map[..., 4:]) == 0


@pytest.mark.parametrize("nf", [1, 2, 4, 8])
@pytest.mark.parametrize("block", ["attn_down", "attn_up"])
def test_st_attention_matches_restricted_full_attention(model3d, nf, block):
    z = torch.randn(nf, 4, 16, 16, generator=torch.Generator().manual_seed(nf))
    x, got = capture_st(model3d, z, 400, model3d.encode_text("a red square moving left"), block)
    oracle = st_maps_bruteforce(x, getattr(model3d, block).attn1, nf)
    assert np.abs(got.numpy() - oracle).max() < 1e-6


def test_st_attention_single_frame_duplicate_columns():
    torch.manual_seed(2)
    lin = [torch.nn.Linear(6, 6, bias=False) for _ in range(3)]
    z1 = torch.randn(5, 6)
    _, amap = st_attention(z1, z1, z1, *lin)
    assert amap.shape == (5, 10)
    assert torch.allclose(amap[:, :5], amap[:, 5:])


def test_st_attention_identical_queries_identical_rows():
    torch.manual_seed(3)
    lin = [torch.nn.Linear(6, 6, bias=False) for _ in range(3)]
    zf = torch.randn(1, 6).expand(4, -1)
    _, amap = st_attention(zf, torch.randn(4, 6), torch.randn(4, 6), *lin)
    assert torch.allclose(amap, amap[:1].expand_as(amap))


class TestTemporalAttention:
    def test_identity_at_init(self):
        mod = TemporalAttention(8, 2, "t")
        z = torch.randn(5, 8, 3, 3)
        assert torch.equal(temporal_attention(z, mod), z)

    def test_single_frame_map_is_identity(self):
        mod = TemporalAttention(8, 2, "t")
        maps = []
        temporal_attention(torch.randn(1, 8, 3, 3), mod, lambda l, k, p: maps.append(p) or p)
        assert torch.equal(maps[0], torch.ones_like(maps[0]))

    def test_per_location_independence(self):
        torch.manual_seed(4)
        mod = TemporalAttention(8, 2, "t")
        torch.nn.init.normal_(mod.to_out.weight)
        z = torch.randn(4, 8, 3, 3)
        perm = torch.randperm(9)
        flat = z.reshape(4, 8, 9)
        out = temporal_attention(flat[:, :, perm].reshape(4, 8, 3, 3), mod).reshape(4, 8, 9)
        ref = temporal_attention(z, mod).reshape(4, 8, 9)[:, :, perm]
        assert torch.allclose(out, ref, atol=1e-12)


def test_parameter_digest_changes_with_weights():
    m = UNet().to(torch.float64)
    before = parameter_digest(m)
    with torch.no_grad():
        m.conv_in.bias.add_(1.0)
    assert parameter_digest(m) != before


def test_recorder_averages_heads():
    rec = Recorder(step_index=7)
    probs = torch.rand(2, 3, 4, 5)
    assert rec("x", "cross", probs) is probs
    assert rec.records[0].step_index == 7
    assert torch.allclose(rec.records[0].map, probs.mean(1))


def test_inflate_ignores_default_dtype(model2d):
    a = inflate(model2d)
    torch.set_default_dtype(torch.float32)
    try:
        b = inflate(model2d)
    finally:
        torch.set_default_dtype(torch.float64)
    assert parameter_digest(a) == parameter_digest(b)
