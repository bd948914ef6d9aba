from dataclasses import replace

import numpy as np
import pytest

from videdit.data import COLORS, SceneParams, Vocab, generate_scene, random_image, sprite_stencil


def test_caption_grammar():
    p = SceneParams(color="blue", shape="circle", direction="up")
    assert p.caption == "a blue circle moving up"


def test_zero_velocity_gives_identical_frames():
    scene = generate_scene(SceneParams(speed=0), seed=3)
    assert all(np.array_equal(scene.frames[0], f) for f in scene.frames)


def test_same_seed_is_bitwise_identical():
    a = generate_scene(SceneParams(shape="triangle"), seed=11)
    b = generate_scene(SceneParams(shape="triangle"), seed=11)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert np.array_equal(a.masks, b.masks)


@pytest.mark.parametrize("shape", ["square", "circle", "triangle", "diamond"])
@pytest.mark.parametrize("direction", ["left", "right", "up", "down"])
def test_rigid_sprite_mask_count_constant(shape, direction):
    scene = generate_scene(SceneParams(shape=shape, direction=direction), seed=0)
    counts = scene.masks.reshape(scene.masks.shape[0], -1).sum(axis=1)
    assert np.all(counts == sprite_stencil(shape, 5).sum())


def test_masks_cover_exactly_the_sprite_pixels():
    scene = generate_scene(SceneParams(color="green"), seed=5)
    green = np.asarray(COLORS["green"])[:, None]
    for f in range(scene.frames.shape[0]):
        rgb = scene.frames[f, :3].reshape(3, -1)
        is_green = np.all(np.isclose(rgb, green), axis=0)
        assert np.array_equal(is_green, scene.masks[f].ravel())


def test_fourth_channel_is_luminance():
    scene = generate_scene(SceneParams(), seed=0)
    np.testing.assert_allclose(scene.frames[:, 3], scene.frames[:, :3].mean(axis=1))
    assert scene.frames.min() >= 0 and scene.frames.max() <= 1


def test_leaving_canvas_needs_wrap():
    p = SceneParams(start=(5, 10), direction="right", speed=2)
    with pytest.raises(ValueError, match="wrap"):
        generate_scene(p, seed=0)
    scene = generate_scene(replace(p, wrap=True), seed=0)
    assert np.all(scene.masks.reshape(8, -1).sum(1) == 25)


def test_random_image_caption_and_range():
    img, cap = random_image(np.random.default_rng(0))
    assert img.shape == (4, 16, 16)
    assert cap.startswith("a ") and " moving " in cap


class TestVocab:
    def test_tokenize(self):
        v = Vocab.default()
        ids = v.tokenize("a red square", 8)
        assert ids[:4] == [v.bos_id, v.index["a"], v.index["red"], v.index["square"]]
        assert ids[4:] == [v.pad_id] * 4

    def test_empty_prompt(self):
        v = Vocab.default()
        assert v.tokenize("", 8) == [v.bos_id] + [v.pad_id] * 7

    def test_unknown_word(self):
        v = Vocab.default()
        assert v.tokenize("a purple square", 8)[2] == v.unk_id

    def test_too_long(self):
        with pytest.raises(ValueError):
            Vocab.default().tokenize("a a a a a a a a", 8)
