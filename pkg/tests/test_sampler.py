from dataclasses import replace

import numpy as np
import pytest

from vidtune.attention import DotProductCounter
from vidtune.checkpoint import load_tensor_file
from vidtune.diffusion import build_schedule
from vidtune.errors import ConfigurationError, ContractError
from vidtune.sampler import SampleRequest, extend_video_autoregressive, initial_latents, sample_video
from vidtune.unet import UNet, UNetConfig

CFG = UNetConfig(in_channels=3, base_width=8, channel_mults=(1,), attention_levels=(0,), d_cond=4,
                 m_max=24, temb_dim=8, groups=4, ffn_mult=2, video=True)
RES = 4


def make_net(kind="sparse_causal", seed=0):
    net = UNet(CFG.inflated(seed=seed), build_schedule(100, 1e-3, 0.2))
    # the temporal output projection starts at zero; give it weight so frames interact
    rng = np.random.default_rng(seed + 1)
    for blk in net.attention_blocks():
        blk.attn_t.w_out.data = 0.3 * rng.standard_normal(blk.attn_t.w_out.shape)
    net.attention_kind = kind
    return net


def request(frames=4, **kw):
    prompt = np.random.default_rng(7).standard_normal((3, 4))
    kw.setdefault("steps", 4)
    return SampleRequest(prompt, frames=frames, resolution=RES, **kw)


def test_fixed_seed_is_bitwise_reproducible():
    a = sample_video(make_net(), request())
    b = sample_video(make_net(), request())
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.frames.shape == (4, 3, RES, RES)
    assert all(np.isfinite(x).all() for x in a.trajectory)
    c = sample_video(make_net(), request(seed=1))
    assert not np.array_equal(a.frames, c.frames)


def test_eta_positive_is_reproducible_and_differs():
    a = sample_video(make_net(), request(eta=1.0))
    b = sample_video(make_net(), request(eta=1.0))
    assert a.frames.tobytes() == b.frames.tobytes()
    assert not np.array_equal(a.frames, sample_video(make_net(), request()).frames)


def test_guidance_irrelevant_when_both_branches_null():
    zeros = np.zeros((3, 4))
    outs = [sample_video(make_net(), SampleRequest(zeros, frames=3, resolution=RES, steps=3, guidance=w)).frames
            for w in (0.0, 1.0, 7.5, 20.0)]
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], rtol=0, atol=1e-12)


def test_guidance_one_equals_conditional_only():
    # w = 1 leaves only the conditional prediction, whatever the null prompt is
    net = make_net()
    a = sample_video(net, request(guidance=1.0))
    b = sample_video(net, request(guidance=1.0, null_prompt=np.ones((3, 4))))
    np.testing.assert_allclose(a.frames, b.frames, rtol=0, atol=1e-12)


def test_frames_beyond_m_max_rejected():
    with pytest.raises(ConfigurationError):
        sample_video(make_net(), request(frames=25))
    with pytest.raises(ConfigurationError):
        SampleRequest(np.zeros((1, 4)), frames=0)


def test_default_frame_count_is_eight():
    assert SampleRequest(np.zeros((1, 4))).frames == 8


def test_initial_latents_are_per_frame():
    a = initial_latents(3, 3, RES, range(5))
    b = initial_latents(3, 3, RES, range(2, 7))
    assert a[:, 2:].tobytes() == b[:, :3].tobytes()


def test_latent_dump_round_trips(tmp_path):
    res = sample_video(make_net(), request(frames=2), dump_path=tmp_path / "dump.bin")
    tf = load_tensor_file(tmp_path / "dump.bin")
    assert len(tf.tensors) == len(res.trajectory) == 5
    assert tf.tensors["step_0004"].tobytes() == res.latent.tobytes()
    assert tf.meta["timesteps"] == res.timesteps


# -- extension ---------------------------------------------------------------------


def test_prefix_frames_of_longer_run_are_bitwise_equal():
    net = make_net()
    short = sample_video(net, request(frames=4))
    long = sample_video(net, request(frames=7))
    assert long.latent[:, :4].tobytes() == short.latent[:, :4].tobytes()


def test_full_attention_breaks_prefix_invariance():
    net = make_net("full")
    short = sample_video(net, request(frames=4))
    long = sample_video(net, request(frames=7))
    assert not np.array_equal(long.latent[:, :4], short.latent[:, :4])


def test_extension_matches_joint_run_bitwise():
    net = make_net()
    prefix = sample_video(net, request(frames=4))
    ext = extend_video_autoregressive(net, prefix, 3)
    joint = sample_video(net, request(frames=7))
    assert ext.frames.shape == (7, 3, RES, RES)
    assert ext.frames[:4].tobytes() == prefix.frames.tobytes()
    assert ext.latent.tobytes() == joint.latent.tobytes()
    assert ext.prefix_deviation == 0.0


def test_extension_with_stochastic_ddim():
    net = make_net()
    prefix = sample_video(net, request(frames=3, eta=0.5))
    ext = extend_video_autoregressive(net, prefix, 2)
    assert ext.latent[:, :3].tobytes() == prefix.latent.tobytes()
    assert ext.prefix_deviation == 0.0


def test_extend_zero_frames_is_identity():
    net = make_net()
    prefix = sample_video(net, request(frames=3))
    same = extend_video_autoregressive(net, prefix, 0)
    assert same.frames.tobytes() == prefix.frames.tobytes()
    assert same.latent.tobytes() == prefix.latent.tobytes()


def test_extension_needs_trajectory():
    net = make_net()
    prefix = sample_video(net, request(frames=2))
    prefix.trajectory = []
    with pytest.raises(ContractError):
        extend_video_autoregressive(net, prefix, 2)
    with pytest.raises(ContractError):
        extend_video_autoregressive(net, None, 2)


def test_extension_reports_deviation_for_non_causal_attention():
    net = make_net("full")
    prefix = sample_video(net, request(frames=3))
    ext = extend_video_autoregressive(net, prefix, 2)
    assert ext.prefix_deviation > 0
    assert ext.latent[:, :3].tobytes() == prefix.latent.tobytes()  # stored prefix is kept


def test_extension_8_16_24_count_grows_linearly():
    net = make_net()
    steps = 2
    c8 = DotProductCounter()
    r8 = sample_video(net, request(frames=8, steps=steps), counter=c8)
    c16, c24 = DotProductCounter(), DotProductCounter()
    r16 = extend_video_autoregressive(net, r8, 8, counter=c16)
    r24 = extend_video_autoregressive(net, r16, 8, counter=c24)
    assert r24.frames.shape[0] == 24
    assert r24.latent[:, :8].tobytes() == r8.latent.tobytes()
    # every SC-Attn call costs (2m - 1) N^2, so count / (2m - 1) is one constant
    per = [c.count / (2 * m - 1) for c, m in ((c8, 8), (c16, 16), (c24, 24))]
    assert per[0] == per[1] == per[2] and per[0] == int(per[0])
    assert c24.count - c16.count == c16.count - c8.count


def test_per_step_cost_linear_for_sc_quadratic_for_full():
    counts = {}
    for kind in ("sparse_causal", "full"):
        net = make_net(kind)
        for m in (4, 8, 16):
            c = DotProductCounter()
            sample_video(net, request(frames=m, steps=1), counter=c)
            counts[kind, m] = c.count
    sc = [counts["sparse_causal", m] for m in (4, 8, 16)]
    full = [counts["full", m] for m in (4, 8, 16)]
    assert sc[0] * 15 == sc[1] * 7 and sc[1] * 31 == sc[2] * 15  # proportional to 2m - 1
    assert full[1] == 4 * full[0] and full[2] == 4 * full[1]  # proportional to m^2


# -- x0 clipping and pooled latents ------------------------------------------------


def test_clipped_sampling_ends_inside_unit_box():
    # the last step lands on the clipped x0 estimate (alpha_bar_0 = 1), up to
    # the rounding of re-deriving eps from it
    net = make_net()
    free = sample_video(net, request(guidance=20.0))
    clipped = sample_video(net, request(guidance=20.0, clip_x0=True))
    assert np.abs(free.latent).max() > 1.0
    assert np.abs(clipped.latent).max() <= 1.0 + 1e-12


def test_clipped_sampling_keeps_extension_bitwise():
    net = make_net()
    prefix = sample_video(net, request(frames=3, clip_x0=True, eta=0.5))
    ext = extend_video_autoregressive(net, prefix, 2)
    joint = sample_video(net, request(frames=5, clip_x0=True, eta=0.5))
    assert ext.latent.tobytes() == joint.latent.tobytes()
    assert ext.prefix_deviation == 0.0


def test_pooled_latents_decode_to_full_resolution():
    net = UNet(replace(CFG, latent_factor=2).inflated(), build_schedule(100, 1e-3, 0.2))
    res = sample_video(net, SampleRequest(np.ones((3, 4)), frames=2, resolution=2 * RES, steps=3))
    assert res.latent.shape == (3, 2, RES, RES)
    assert res.frames.shape == (2, 3, 2 * RES, 2 * RES)
    # nearest-neighbour decode: each 2x2 block is constant
    np.testing.assert_array_equal(res.frames[..., ::2, ::2], res.frames[..., 1::2, 1::2])
    with pytest.raises(ConfigurationError):
        sample_video(net, SampleRequest(np.ones((3, 4)), frames=1, resolution=2 * RES + 1, steps=2))
