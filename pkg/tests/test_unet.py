import numpy as np
import pytest

from vidtune.checks import randomize_parameters, tiny_unet_case
from vidtune.errors import ConfigurationError, DimensionError, IntegrityError
from vidtune.gradcheck import gradcheck
from vidtune.tensor import Parameter, Tape, Tensor, backward
from vidtune.unet import (
    ParamGroupTag,
    UNet,
    UNetConfig,
    collect_trainable_params,
    inflate_from_2d,
)

SMALL = dict(in_channels=3, base_width=8, channel_mults=(1, 2), attention_levels=(1,),
             d_cond=4, m_max=8, temb_dim=16, groups=4, ffn_mult=2)


def small_cfg(**kw):
    return UNetConfig(**{**SMALL, **kw})


def inflated_pair(seed=0, kind="sparse_causal"):
    net2d = UNet(small_cfg(seed=seed))
    randomize_parameters(net2d, np.random.default_rng(seed + 50))
    video = inflate_from_2d(net2d.state_dict(), small_cfg(seed=seed + 1, video=True, attention=kind))
    return net2d, video


def inputs(seed, m, b=1):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, 3, m, 8, 8)), rng.standard_normal((3, 4))


# -- forward contract ---------------------------------------------------------------


def test_output_shape():
    net = UNet(small_cfg(video=True))
    x, c = inputs(0, 3, b=2)
    assert net(x, 10, c).shape == x.shape


def test_indivisible_spatial_dims():
    net = UNet(small_cfg(video=True))
    with pytest.raises(ConfigurationError):
        net(np.zeros((1, 3, 2, 6, 7)), 1, np.zeros((3, 4)))


def test_too_many_frames():
    net = UNet(small_cfg(video=True, m_max=2))
    with pytest.raises(ConfigurationError):
        net(np.zeros((1, 3, 3, 8, 8)), 1, np.zeros((3, 4)))


def test_wrong_channel_count():
    with pytest.raises(DimensionError):
        UNet(small_cfg(video=True))(np.zeros((1, 2, 1, 8, 8)), 1, np.zeros((3, 4)))


def test_attention_block_layout():
    net = UNet(small_cfg(video=True))
    blocks = net.attention_blocks()
    assert len(blocks) == 2
    for blk in blocks:
        assert blk.is_video
        assert not blk.attn_t.w_out.data.any()
    assert not any(b.is_video for b in UNet(small_cfg()).attention_blocks())


# -- causality --------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["sparse_causal", "causal"])
def test_end_to_end_causality(kind):
    net = UNet(small_cfg(video=True, attention=kind, seed=3))
    randomize_parameters(net, np.random.default_rng(4))
    m = 4
    x0, c = inputs(5, m)
    r = np.random.default_rng(6)
    for i in range(m):
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            y = net(x, 30, c)
            loss = (y[:, :, i] * r.standard_normal(y[:, :, i].shape)).sum()
        backward(loss, tape)
        for j in range(m):
            if j > i:
                assert not x.grad[:, :, j].any(), (i, j)
            else:
                assert x.grad[:, :, j].any(), (i, j)


@pytest.mark.parametrize("kind", ["sparse_causal", "frame_individual"])
def test_identical_frames_give_identical_outputs(kind):
    _, video = inflated_pair(7, kind)
    x, c = inputs(8, 1)
    y = video(np.repeat(x, 3, axis=2), 50, c).data
    for i in range(1, 3):
        if kind == "frame_individual":
            np.testing.assert_array_equal(y[:, :, i], y[:, :, 0])
        else:
            # the duplicated bank [v_1; v_1] sums 2N softmax terms instead of N
            np.testing.assert_allclose(y[:, :, i], y[:, :, 0], atol=1e-12, rtol=0)


# -- gradients ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(2))
def test_tiny_unet_gradcheck_sampled(seed):
    _, f, params = tiny_unet_case(seed)
    rep = gradcheck(f, params, rtol=1e-4, atol=1e-8, max_entries=400, seed=seed)
    assert rep.passed, rep


def test_tiny_unet_has_expected_shape():
    net, f, params = tiny_unet_case(0)
    assert net.config.base_width == 8 and net.config.levels == 1
    assert params[0].shape == (1, 2, 2, 4, 4)


# -- tags and trainable set ---------------------------------------------------------------


def test_every_parameter_has_one_tag():
    net = UNet(small_cfg(video=True))
    tagged = net.tagged_parameters()
    assert len(tagged) == len(net.parameters())
    assert all(isinstance(tag, ParamGroupTag) for _, _, tag in tagged)


def test_untagged_parameter_is_integrity_error():
    net = UNet(small_cfg(video=True))
    net.attention_blocks()[0].ln1.scale = Parameter(np.ones(16))
    with pytest.raises(IntegrityError):
        collect_trainable_params(net)


def projection_matrices(names):
    return [n for n in names if n.split(".")[-1] in ("w_q", "w_k", "w_v", "w_out")]


def test_default_trainable_set():
    net = UNet(small_cfg(video=True))
    names = [n for n, _ in collect_trainable_params(net)]
    mats = projection_matrices(names)
    assert len(mats) == 2 * (1 + 1 + 4) == 12
    assert sum(n.endswith("attn1.w_q") for n in mats) == 2
    assert sum(n.endswith("attn2.w_q") for n in mats) == 2
    assert sum(".attn_t." in n for n in mats) == 8
    tags = dict((n, p.tag) for n, p, _ in net.tagged_parameters())
    assert {tags[n] for n in names} <= {ParamGroupTag.SCATTN_Q, ParamGroupTag.CROSSATTN_Q, ParamGroupTag.TEMPATTN_ALL}
    everything = {n for n, t in tags.items() if t in (ParamGroupTag.SCATTN_Q, ParamGroupTag.CROSSATTN_Q, ParamGroupTag.TEMPATTN_ALL)}
    assert set(names) == everything


def test_trainable_set_never_contains_backbone_or_kv():
    net = UNet(small_cfg(video=True))
    for n, p in collect_trainable_params(net):
        assert p.tag is not ParamGroupTag.BACKBONE_FROZEN
        assert not n.endswith(("attn1.w_k", "attn1.w_v", "attn2.w_k", "attn2.w_v"))
        assert "conv" not in n


def test_freeze_all_policy():
    assert collect_trainable_params(UNet(small_cfg(video=True)), "freeze-all") == []


def test_output_projection_switches():
    net = UNet(small_cfg(video=True, scattn_out_trainable=True, crossattn_out_trainable=True))
    mats = projection_matrices([n for n, _ in collect_trainable_params(net)])
    assert len(mats) == 16


def test_unknown_policy():
    with pytest.raises(ConfigurationError):
        collect_trainable_params(UNet(small_cfg(video=True)), "sometimes")


# -- inflation --------------------------------------------------------------------------------


def test_inflated_kernels_are_reshaped_copies():
    net2d, video = inflated_pair(9)
    own = dict(video.named_parameters())
    for name, p in net2d.named_parameters():
        if p.ndim == 4:
            assert own[name].shape == p.shape[:2] + (1,) + p.shape[2:]
            np.testing.assert_array_equal(own[name].data[:, :, 0], p.data)
        else:
            np.testing.assert_array_equal(own[name].data, p.data)


def test_parameter_count_difference_is_temporal_attention():
    net2d, video = inflated_pair(10)
    temporal = sum(p.size for _, p, t in video.tagged_parameters() if t is ParamGroupTag.TEMPATTN_ALL)
    assert video.num_parameters() - temporal == net2d.num_parameters()


def test_single_frame_inflation_identity():
    net2d, video = inflated_pair(11)
    x, c = inputs(12, 1)
    diff = np.abs(video(x, 40, c).data - net2d(x, 40, c).data).max()
    assert diff < 1e-10


def test_frame_individual_inflation_is_bitwise_per_frame():
    net2d, video = inflated_pair(13, kind="frame_individual")
    x, c = inputs(14, 4)
    y = video(x, 40, c).data
    for i in range(4):
        ref = net2d(x[:, :, i : i + 1], 40, c).data
        assert y[:, :, i : i + 1].tobytes() == ref.tobytes()


def test_sparse_causal_first_frame_matches_2d():
    net2d, video = inflated_pair(15)
    x, c = inputs(16, 5)
    y = video(x, 40, c).data
    ref = net2d(x[:, :, :1], 40, c).data
    assert np.abs(y[:, :, :1] - ref).max() < 1e-10


def test_inflation_shape_mismatch_names_parameter():
    net2d = UNet(small_cfg())
    params = net2d.state_dict()
    params["conv_in.weight"] = np.zeros((8, 3, 5, 5))
    with pytest.raises(ConfigurationError, match="conv_in.weight"):
        inflate_from_2d(params, small_cfg(video=True))


def test_inflation_rejects_other_width():
    params = UNet(small_cfg()).state_dict()
    with pytest.raises(ConfigurationError):
        inflate_from_2d(params, small_cfg(video=True, base_width=16))


def test_config_round_trip():
    cfg = small_cfg(video=True, attention="causal")
    assert UNetConfig.from_dict(cfg.to_dict()) == cfg


def test_invalid_attention_level():
    with pytest.raises(ConfigurationError):
        small_cfg(attention_levels=(2,))
