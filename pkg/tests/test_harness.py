import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidtune.errors import ConfigurationError, ContractError, SpecificationError, VocabularyError
from vidtune.harness.bench import plot_benchmark, read_csv, run_benchmark, time_ratios, write_csv
from vidtune.harness.export import (
    ExportError,
    decode_ppm,
    encode_ppm,
    export_frames,
    quantize,
    read_ppm,
)
from vidtune.harness.metrics import (
    dominant_hue,
    frame_consistency_score,
    mean_displacement,
    rgb_to_hsv,
    subject_centroids,
)
from vidtune.harness.pretrain import PretrainConfig, pretrain_toy_t2i, text_encoder_from
from vidtune.harness.synthetic import SyntheticSceneSpec, generate_synthetic_clip, still_corpus
from vidtune.harness.text import MAX_TOKENS, VOCABULARY, TextEncoder, encode_prompt
from vidtune.tuner import load_checkpoint, save_checkpoint
from vidtune.unet import UNetConfig

# -- synthetic scenes ----------------------------------------------------------------


def test_static_scene_frames_identical():
    clip = generate_synthetic_clip(SyntheticSceneSpec(motion=(0, 0)), 6, 32, seed=3)
    for f in clip.frames[1:]:
        assert f.tobytes() == clip.frames[0].tobytes()


@pytest.mark.parametrize("shape", ["square", "circle", "triangle"])
def test_centroid_moves_two_pixels_per_frame(shape):
    clip = generate_synthetic_clip(SyntheticSceneSpec(shape=shape, motion=(2, 0)), 8, 32, seed=1)
    c = subject_centroids(clip.frames)
    np.testing.assert_allclose(np.diff(c[:, 0]), 2.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.diff(c[:, 1]), 0.0, rtol=0, atol=1e-12)


def test_clip_deterministic_and_in_range():
    spec = SyntheticSceneSpec(color="blue", background="gray", motion=(1, -1))
    a = generate_synthetic_clip(spec, 5, 32, seed=9)
    b = generate_synthetic_clip(spec, 5, 32, seed=9)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.frames.min() >= 0.0 and a.frames.max() <= 1.0
    assert a.frames.shape == (5, 3, 32, 32)


def test_caption_tokens():
    assert SyntheticSceneSpec().caption() == ["red", "square", "moving", "right", "on", "white"]
    assert SyntheticSceneSpec(motion=(0, 0), shape="circle").caption() == ["red", "circle", "on", "white"]


def test_subject_leaving_canvas_is_rejected():
    with pytest.raises(SpecificationError):
        generate_synthetic_clip(SyntheticSceneSpec(motion=(5, 0), size=8), 8, 32)
    with pytest.raises(SpecificationError):
        generate_synthetic_clip(SyntheticSceneSpec(motion=(2, 0), start=(28.0, 16.0)), 8, 32)
    with pytest.raises(SpecificationError):
        SyntheticSceneSpec(shape="hexagon")


def test_still_corpus_captions_in_vocabulary():
    images, captions = still_corpus(30, 32, seed=0)
    assert images.shape == (30, 3, 32, 32)
    assert all(t in VOCABULARY for c in captions for t in c)


# -- prompts --------------------------------------------------------------------------


def test_empty_prompt_is_null_embedding():
    enc = TextEncoder(6)
    e = enc.encode([])
    assert e.is_null
    assert e.rows.shape == (MAX_TOKENS, 6) and not e.rows.any()


def test_same_tokens_same_rows_and_locality():
    enc = TextEncoder(6, seed=2)
    a = enc.encode("red square on white")
    b = enc.encode("red square on white")
    c = enc.encode("red circle on white")
    assert a.rows.tobytes() == b.rows.tobytes()
    changed = np.flatnonzero((a.rows != c.rows).any(axis=1))
    assert changed.tolist() == [1]
    assert a.mask.tolist() == [True] * 4 + [False] * (MAX_TOKENS - 4)


def test_unknown_token_listed():
    with pytest.raises(VocabularyError, match="octagon"):
        encode_prompt(["red", "octagon"], np.zeros((len(VOCABULARY), 2)))


# -- metrics ---------------------------------------------------------------------------


def test_consistency_of_identical_frames_is_one():
    f = np.random.default_rng(0).random((1, 3, 32, 32))
    assert frame_consistency_score(np.repeat(f, 4, axis=0)) == pytest.approx(1.0, abs=1e-12)


def test_consistency_of_negated_frame_is_minus_one():
    f = np.random.default_rng(1).random((3, 32, 32))
    assert frame_consistency_score(np.stack([f, 1.0 - f])) == pytest.approx(-1.0, abs=1e-12)


def test_consistency_of_noise_frames_is_small():
    for seed in range(100):
        frames = np.random.default_rng(seed).random((2, 3, 32, 32))
        assert abs(frame_consistency_score(frames)) < 0.2, seed


def test_consistency_needs_two_frames():
    with pytest.raises(ContractError):
        frame_consistency_score(np.zeros((1, 3, 32, 32)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_consistency_bounded(seed, m):
    frames = np.random.default_rng(seed).random((m, 3, 16, 16))
    assert -1.0 <= frame_consistency_score(frames) <= 1.0


@pytest.mark.parametrize("color", ["red", "green", "blue", "yellow", "purple", "orange"])
def test_dominant_hue_names_subject_color(color):
    clip = generate_synthetic_clip(SyntheticSceneSpec(color=color, background="white"), 4, 32)
    assert dominant_hue(clip.frames) == color


def test_dominant_hue_none_for_blank():
    assert dominant_hue(np.ones((2, 3, 32, 32))) is None


def test_rgb_to_hsv_primaries():
    hsv = rgb_to_hsv(np.eye(3))
    np.testing.assert_allclose(hsv[:, 0], [0.0, 120.0, 240.0])
    np.testing.assert_allclose(hsv[:, 1:], 1.0)


def test_mean_displacement_left_motion():
    clip = generate_synthetic_clip(SyntheticSceneSpec(motion=(-1, 0)), 6, 32, seed=2)
    np.testing.assert_allclose(mean_displacement(clip.frames), [-1.0, 0.0], atol=1e-12)


# -- PPM export ------------------------------------------------------------------------


def test_zero_frame_ppm_bytes():
    data = encode_ppm(np.zeros((3, 2, 3)))
    assert data == b"P6\n3 2\n255\n" + b"\x00" * 18


def test_half_rounds_to_128():
    assert quantize(np.array([0.5]))[0] == 128
    assert quantize(np.array([0.0, 1.0, -0.1, 1.2])).tolist() == [0, 255, 0, 255]


def test_pixel_order_is_row_major_rgb():
    f = np.zeros((3, 1, 2))
    f[0, 0, 1] = 1.0  # red at x=1
    f[2, 0, 0] = 1.0  # blue at x=0
    assert encode_ppm(f).endswith(bytes([0, 0, 255, 255, 0, 0]))


def test_export_round_trip(tmp_path):
    frames = np.random.default_rng(0).random((3, 3, 8, 8))
    paths = export_frames(frames, tmp_path / "out")
    assert [p.name for p in paths] == ["frame_0001.ppm", "frame_0002.ppm", "frame_0003.ppm", "contact_sheet.ppm"]
    for f, p in zip(frames, paths):
        assert np.abs(read_ppm(p) - f).max() <= 1 / 255
    sheet = read_ppm(paths[-1])
    assert sheet.shape == (3, 8, 24)


def test_ppm_comment_header():
    body = bytes([10, 20, 30])
    assert (decode_ppm(b"P6\n# note\n1 1\n255\n" + body) * 255).round().ravel().tolist() == [10, 20, 30]


def test_export_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExportError, match="file"):
        export_frames(np.zeros((1, 3, 2, 2)), blocker / "sub")


# -- benchmark ---------------------------------------------------------------------------


def test_benchmark_counts_and_csv(tmp_path):
    rows = run_benchmark(ms=(1, 2, 4), Ns=(4, 16), repetitions=1)
    for r in rows:
        assert r.dot_products == r.closed_form
        if r.kind == "sparse_causal":
            assert r.dot_products == (2 * r.m - 1) * r.N**2
    for n in (4, 16):
        assert len({r.dot_products for r in rows if r.m == 1 and r.N == n}) == 1
    path = write_csv(rows, tmp_path / "bench.csv")
    assert read_csv(path) == rows
    assert path.read_text().splitlines()[0] == "kind,m,N,dot_products,closed_form,time_median_s,time_std_s"
    png = plot_benchmark(rows, tmp_path / "bench.png")
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_benchmark_rejects_bad_sizes():
    with pytest.raises(ConfigurationError):
        run_benchmark(ms=(0,), Ns=(4,))
    with pytest.raises(ConfigurationError):
        run_benchmark(repetitions=0)


def test_full_to_sc_time_ratio_grows():
    rows = run_benchmark(kinds=("sparse_causal", "full"), ms=(4, 8, 16, 32), Ns=(64,), repetitions=9,
                         d_model=64)
    ratios = [r for _, r in time_ratios(rows, "full", "sparse_causal", 64)]
    assert all(b > a for a, b in zip(ratios, ratios[1:])), ratios


# -- pretraining -------------------------------------------------------------------------

TINY2D = UNetConfig(in_channels=3, base_width=8, channel_mults=(1,), attention_levels=(0,), d_cond=4,
                    m_max=8, temb_dim=8, groups=4, ffn_mult=2)


def test_pretrain_needs_corpus():
    images, captions = still_corpus(50, 8, sizes=(2, 4))
    with pytest.raises(ConfigurationError):
        pretrain_toy_t2i(images, captions, PretrainConfig(steps=1, unet=TINY2D))


def test_pretrain_rejects_video_config():
    with pytest.raises(ConfigurationError):
        PretrainConfig(unet=TINY2D.inflated())


def test_pretrain_loss_decreases_and_round_trips(tmp_path):
    images, captions = still_corpus(200, 8, sizes=(2, 4))
    cfg = PretrainConfig(steps=200, batch=8, lr=3e-3, T=100, beta_end=0.2, unet=TINY2D)
    ck = pretrain_toy_t2i(images, captions, cfg)
    k = len(ck.losses) // 10
    assert ck.losses[-k:].mean() < ck.losses[:k].mean()
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "t2i.ckpt"))
    assert back.extras["text_embedding"].tobytes() == ck.extras["text_embedding"].tobytes()
    enc = text_encoder_from(back)
    assert enc.vocabulary == VOCABULARY
    for n in ck.params:
        assert back.params[n].tobytes() == ck.params[n].tobytes()


def test_ablation_pipeline_smoke():
    from vidtune.harness.pipeline import VARIANTS, run_ablation
    from vidtune.tuner import TrainingConfig

    images, captions = still_corpus(200, 16)
    cfg2d = UNetConfig(base_width=8, channel_mults=(1, 2), d_cond=4, temb_dim=8, groups=4, ffn_mult=2)
    ck = pretrain_toy_t2i(images, captions, PretrainConfig(steps=2, batch=2, T=50, unet=cfg2d))
    res = run_ablation(ck, SyntheticSceneSpec(size=4, motion=(1, 0)), tune_cfg=TrainingConfig(
        steps=2, frames=4, resolution=16), seeds=(0, 1), steps=2)
    assert {(s.variant, s.seed) for s in res.scores} == {(v, s) for v in VARIANTS for s in (0, 1)}
    assert set(res.verdicts()[0]) == {"consistency", "motion", "hue"}
    assert set(res.majority()) == {"consistency", "motion", "hue"}
    assert res.samples[("tuned_sc", 0)].frames.shape == (4, 3, 16, 16)
    assert res.tuned["tuned_sc"].step == 2
