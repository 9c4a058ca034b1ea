import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from flostream.core import NoiseSpec, VideoClip
from flostream.data import (ClipFormatError, SynthSpec, add_noise, clip_from_bytes, clip_to_bytes,
                            mirror_clip, read_clip, sample_patches, synth_clip, write_clip)

from oracles import translate_with_zeros


def test_zero_motion_static_clip():
    clean, fwd, bwd = synth_clip(SynthSpec(motion=(0, 0), T=4, height=16, width=16))
    assert all(torch.equal(clean[0], f) for f in clean)
    assert all(torch.count_nonzero(f.data) == 0 for f in fwd + bwd)


def test_wrap_motion_is_roll():
    clean, fwd, _ = synth_clip(SynthSpec(motion=(2, 0), T=3, height=20, width=24, seed=4))
    f1 = clean[0].numpy()
    np.testing.assert_array_equal(clean[1].numpy(), np.roll(f1, 2, axis=2))
    np.testing.assert_array_equal(clean[2].numpy(), np.roll(f1, 4, axis=2))
    assert (fwd[0].data[0] == 2).all() and (fwd[0].src, fwd[0].dst) == (1, 2)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), mode=st.sampled_from(["wrap", "fresh"]))
def test_flows_explain_consecutive_frames(seed, mode):
    """frame_{t+1}(x + dx, y + dy) == frame_t(x, y) wherever both are inside the frame."""
    spec = SynthSpec(T=4, height=18, width=22, seed=seed, mode=mode, motion_max=3)
    clean, fwd, bwd = synth_clip(spec, dtype=torch.float64)
    for t, (dx, dy) in enumerate(spec.motions()):
        moved = translate_with_zeros(clean[t].numpy(), dx, dy)
        valid = translate_with_zeros(np.ones_like(clean[t].numpy()), dx, dy) > 0
        np.testing.assert_array_equal(clean[t + 1].numpy()[valid], moved[valid])
        assert (fwd[t].data[0] == dx).all() and (bwd[t].data[1] == -dy).all()


def test_fresh_mode_brings_new_content():
    clean, _, _ = synth_clip(SynthSpec(motion=(2, 0), T=3, height=16, width=16, mode="fresh", seed=1))
    # the two left columns of frame 2 did not exist in frame 1
    assert not torch.equal(clean[1][..., :2], torch.roll(clean[0], 2, dims=-1)[..., :2])


def test_seed_reproducibility():
    spec = SynthSpec(T=5, height=16, width=16, seed=11)
    a, _, _ = synth_clip(spec)
    b, _, _ = synth_clip(spec)
    assert torch.equal(a.frames, b.frames)
    c, _, _ = synth_clip(SynthSpec(T=5, height=16, width=16, seed=12))
    assert not torch.equal(a.frames, c.frames)


@pytest.mark.parametrize("pattern", ["random-texture", "checker", "moving-bars"])
def test_patterns_in_unit_range(pattern):
    clean, _, _ = synth_clip(SynthSpec(pattern=pattern, T=2, height=16, width=16, channels=3))
    assert clean.frames.shape == (2, 3, 16, 16)
    assert clean.frames.min() >= 0 and clean.frames.max() <= 1


def test_synth_errors():
    with pytest.raises(ValueError):
        synth_clip(SynthSpec(pattern="clouds"))
    with pytest.raises(ValueError):
        synth_clip(SynthSpec(mode="mirror"))
    with pytest.raises(ValueError):
        SynthSpec(T=4, motion=[(1, 0)]).motions()


def test_zero_sigma_is_identity():
    clip = VideoClip(torch.rand(2, 1, 8, 8))
    assert torch.equal(add_noise(clip, NoiseSpec(sigma=0.0), 3).frames, clip.frames)


def test_noise_std_sigma25():
    clip = VideoClip(torch.full((1, 1, 256, 256), 0.5, dtype=torch.float64))
    noisy = add_noise(clip, NoiseSpec.from_255(25), seed=0)
    std = float((noisy.frames - clip.frames).std())
    assert 24.0 / 255 <= std <= 26.0 / 255


def test_clipped_noise_bounds():
    clip = VideoClip(torch.rand(3, 1, 64, 64))
    noisy = add_noise(clip, NoiseSpec.from_255(50, kind="clipped-awgn"), seed=1)
    assert noisy.frames.min() >= 0 and noisy.frames.max() <= 1


def test_noise_seeded():
    clip = VideoClip(torch.rand(2, 1, 8, 8))
    spec = NoiseSpec.from_255(10)
    assert torch.equal(add_noise(clip, spec, 5).frames, add_noise(clip, spec, 5).frames)
    assert not torch.equal(add_noise(clip, spec, 5).frames, add_noise(clip, spec, 6).frames)


def test_full_size_patch_is_whole_clip():
    clip = VideoClip(torch.rand(4, 1, 12, 12))
    (patch,) = sample_patches(clip, 1, 12, 4, seed=0)
    assert torch.equal(patch.frames, clip.frames)


def test_patches_match_origin():
    clip = VideoClip(torch.rand(6, 1, 20, 24))
    for crop, (t0, y0, x0) in sample_patches(clip, 5, 8, 3, seed=2, with_origin=True):
        assert torch.equal(crop.frames, clip.frames[t0:t0 + 3, :, y0:y0 + 8, x0:x0 + 8])
    with pytest.raises(ValueError):
        sample_patches(clip, 1, 21, 3, 0)
    with pytest.raises(ValueError):
        sample_patches(clip, 1, 8, 7, 0)


def test_mirror_clip():
    clip = VideoClip(torch.arange(3.0).view(3, 1, 1, 1).expand(3, 1, 2, 2).contiguous())
    m = mirror_clip(clip)
    assert m.frames[:, 0, 0, 0].tolist() == [0, 1, 2, 2, 1, 0]
    assert mirror_clip(clip, 4).T == 4
    with pytest.raises(ValueError):
        mirror_clip(clip, 7)


def test_raw_container_round_trip(tmp_path):
    clip = VideoClip(torch.rand(3, 3, 5, 7))
    write_clip(clip, tmp_path / "c.flov")
    back = read_clip(tmp_path / "c.flov")
    assert torch.equal(back.frames, clip.frames)
    raw = clip_to_bytes(clip)
    assert raw[:5] == b"FLOV1" and len(raw) == 21 + 3 * 3 * 5 * 7 * 4


def test_raw_container_errors():
    raw = clip_to_bytes(VideoClip(torch.rand(2, 1, 4, 4)))
    with pytest.raises(ClipFormatError):
        clip_from_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(ClipFormatError):
        clip_from_bytes(raw[:-4])


@pytest.mark.parametrize("channels", [1, 3])
def test_png_directory_round_trip(tmp_path, channels):
    clip = VideoClip(torch.rand(3, channels, 9, 11))
    write_clip(clip, tmp_path / "frames")
    back = read_clip(tmp_path / "frames")
    assert back.frames.shape == clip.frames.shape
    assert float((back.frames - clip.frames).abs().max()) <= 1 / 510 + 1e-7


def test_png_directory_gap_is_error(tmp_path):
    write_clip(VideoClip(torch.rand(3, 1, 6, 6)), tmp_path / "frames")
    (tmp_path / "frames" / "frame_00002.png").unlink()
    with pytest.raises(ClipFormatError):
        read_clip(tmp_path / "frames")


def test_png_directory_shape_mismatch(tmp_path):
    write_clip(VideoClip(torch.rand(2, 1, 6, 6)), tmp_path / "frames")
    write_clip(VideoClip(torch.rand(3, 1, 7, 7)), tmp_path / "other")
    (tmp_path / "other" / "frame_00003.png").rename(tmp_path / "frames" / "frame_00003.png")
    with pytest.raises(ClipFormatError):
        read_clip(tmp_path / "frames")


def test_missing_paths(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_clip(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ClipFormatError):
        read_clip(tmp_path / "empty")
