"""Procedural sprite videos with captions and exact object masks."""
from __future__ import annotations

from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.9, 0.15, 0.85),
    "white": (0.97, 0.97, 0.97),
    "orange": (0.98, 0.55, 0.05),
}
SHAPES = ("square", "circle", "triangle", "diamond")
DIRECTIONS: dict[str, tuple[int, int]] = {
    "left": (0, -1),
    "right": (0, 1),
    "up": (-1, 0),
    "down": (1, 0),
}

PAD, BOS, UNK = "<pad>", "<bos>", "<unk>"


class Vocab:
    def __init__(self, words: list[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        for special in (PAD, BOS, UNK):
            if special not in self.index:
                raise ValueError(f"vocabulary lacks {special}")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def default(cls) -> "Vocab":
        text = resources.files("videdit").joinpath("vocab.txt").read_text()
        return cls([line.strip() for line in text.splitlines() if line.strip()])

    def tokenize(self, prompt: str, max_len: int) -> list[int]:
        """BOS, lower-cased whitespace words, then PAD up to ``max_len``."""
        ids = [self.bos_id] + [self.index.get(w, self.unk_id) for w in prompt.lower().split()]
        if len(ids) > max_len:
            raise ValueError(f"prompt {prompt!r} has {len(ids)} tokens, max is {max_len}")
        return ids + [self.pad_id] * (max_len - len(ids))

    def word_positions(self, prompt: str, word: str) -> list[int]:
        words = prompt.lower().split()
        return [i + 1 for i, w in enumerate(words) if w == word.lower()]


@dataclass(frozen=True)
class SceneParams:
    color: str = "red"
    shape: str = "square"
    direction: str = "right"
    size: int = 5
    speed: int = 1
    start: tuple[int, int] | None = None
    num_frames: int = 8
    height: int = 16
    width: int = 16
    channels: int = 4
    wrap: bool = False

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} moving {self.direction}"


@dataclass
class Scene:
    params: SceneParams
    frames: np.ndarray  # F x C x H x W in [0, 1]
    masks: np.ndarray  # F x H x W bool
    caption: str


def sprite_stencil(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "square":
        m = np.ones((size, size), dtype=bool)
    elif shape == "circle":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2 - 0.25
    elif shape == "diamond":
        m = np.abs(yy - c) + np.abs(xx - c) <= c + 0.01
    elif shape == "triangle":
        # apex on top, base on the last row
        half = (yy + 1) * (size / 2.0) / size
        m = np.abs(xx - c) <= half
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def background(height: int, width: int, seed: int) -> np.ndarray:
    """Smooth grey texture, 3 x H x W, values roughly in [0.25, 0.55]."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(3, height // 4 + 2, width // 4 + 2))
    ys = np.linspace(0, coarse.shape[1] - 1.001, height)
    xs = np.linspace(0, coarse.shape[2] - 1.001, width)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c = coarse
    tex = (c[:, y0][:, :, x0] * (1 - fy) * (1 - fx) + c[:, y0 + 1][:, :, x0] * fy * (1 - fx)
           + c[:, y0][:, :, x0 + 1] * (1 - fy) * fx + c[:, y0 + 1][:, :, x0 + 1] * fy * fx)
    grey = tex.mean(axis=0, keepdims=True)
    tex = 0.7 * grey + 0.3 * tex
    return 0.25 + 0.3 * tex


def _positions(p: SceneParams) -> list[tuple[int, int]]:
    dy, dx = DIRECTIONS[p.direction]
    if p.start is None:
        travel = p.speed * (p.num_frames - 1)
        # center the motion path on the canvas
        r0 = (p.height - p.size) // 2 - (dy * travel) // 2
        c0 = (p.width - p.size) // 2 - (dx * travel) // 2
    else:
        r0, c0 = p.start
    return [(r0 + dy * p.speed * f, c0 + dx * p.speed * f) for f in range(p.num_frames)]


def generate_scene(params: SceneParams, seed: int) -> Scene:
    p = params
    if p.color not in COLORS or p.shape not in SHAPES or p.direction not in DIRECTIONS:
        raise ValueError(f"unknown caption word in {p}")
    if p.channels not in (3, 4):
        raise ValueError("channels must be 3 or 4")
    if p.size < 1 or p.size > min(p.height, p.width) or p.num_frames < 1:
        raise ValueError(f"invalid scene size parameters {p}")
    stencil = sprite_stencil(p.shape, p.size)
    bg = background(p.height, p.width, seed)
    color = np.asarray(COLORS[p.color])[:, None, None]
    frames = np.empty((p.num_frames, p.channels, p.height, p.width))
    masks = np.zeros((p.num_frames, p.height, p.width), dtype=bool)
    for f, (r, c) in enumerate(_positions(p)):
        inside = 0 <= r and r + p.size <= p.height and 0 <= c and c + p.size <= p.width
        if not inside and not p.wrap:
            raise ValueError(f"sprite leaves the canvas at frame {f} (pos {r},{c}); enable wrap")
        rows = (np.arange(r, r + p.size) % p.height)[:, None]
        cols = (np.arange(c, c + p.size) % p.width)[None, :]
        masks[f, rows, cols] = stencil
        rgb = np.where(masks[f][None], color, bg)
        frames[f, :3] = rgb
        if p.channels == 4:
            frames[f, 3] = rgb.mean(axis=0)
    return Scene(params=p, frames=frames, masks=masks, caption=p.caption)


def random_scene_params(rng: np.random.Generator, **overrides) -> SceneParams:
    params = SceneParams(
        color=str(rng.choice(list(COLORS))),
        shape=str(rng.choice(SHAPES)),
        direction=str(rng.choice(list(DIRECTIONS))),
    )
    return replace(params, **overrides)


def random_image(rng: np.random.Generator, height: int = 16, width: int = 16,
                 channels: int = 4, size: int = 5) -> tuple[np.ndarray, str]:
    """One pretraining sample: a single sprite frame at a random position."""
    p = random_scene_params(rng, num_frames=1, height=height, width=width,
                            channels=channels, size=size)
    start = (int(rng.integers(0, height - size + 1)), int(rng.integers(0, width - size + 1)))
    scene = generate_scene(replace(p, start=start), seed=int(rng.integers(0, 2**31 - 1)))
    return scene.frames[0], scene.caption


def edit_target(params: SceneParams, rng: np.random.Generator) -> tuple[str, str, str]:
    """Pick a color swap for an edit: (target prompt, source word, target word)."""
    choices = [c for c in COLORS if c != params.color]
    new = str(rng.choice(choices))
    return replace(params, color=new).caption, params.color, new
