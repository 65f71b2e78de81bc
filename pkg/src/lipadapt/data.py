"""Synthetic talking-face clip generator with controllable speaker traits.

Each speaker is a procedural identity: a static background texture and
brightness level plus a mouth ellipse whose position, aspect and motion
amplitude are speaker-specific. Content (a word id or a symbol sequence)
drives the mouth aperture trajectory; the speaker's ``dynamics_gain`` and
``shape_ratio`` scale how that trajectory is rendered. Everything is a pure
function of its arguments and seeds, so datasets are exactly reproducible.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

Content = "int | tuple[int, ...]"

# Salts keep the derived RNG streams (profiles, textures, per-clip noise,
# split construction) statistically independent of each other.
_PROFILE_SALT = 0x5F1D
_TEXTURE_SALT = 0x7E37
_NOISE_SALT = 0x90D3
_SPLIT_SALT = 0xA2C5

DEFAULT_FRAMES = 16
DEFAULT_HEIGHT = 32
DEFAULT_WIDTH = 32
DEFAULT_NOISE_STD = 0.02
DEFAULT_FPS = 16.0

# Mouth geometry (pixels). Vertical semi-axis = base + gain * aperture * motion;
# horizontal semi-axis = shape_ratio * (base + coupling * gain * aperture).
_V_BASE = 1.2
_V_MOTION = 3.2
_W_BASE = 3.2
_W_MOTION = 0.8
_MOUTH_VALUE = 0.06
_EDGE = 0.25
_TEXTURE_AMP = 0.12

# Aperture mix. The slow sinusoid carries most of the swing; the fast one is
# a small timing cue that separates the members of a word pair, so its pixel
# footprint rides near the rendering threshold for weak-dynamics speakers.
_A_SLOW = 0.40
_A_FAST = 0.05

_SPLIT_CODES = {"train": 0, "adapt": 1, "test": 2}


@dataclass(frozen=True)
class SpeakerProfile:
    """Static per-speaker rendering traits, deterministic in (speaker_id, global_seed)."""

    speaker_id: int
    texture_seed: int
    mouth_center: tuple[float, float]  # (row, col) in pixels
    brightness: float  # in [0.3, 0.7]
    dynamics_gain: float  # in [0.5, 1.5], scales lip motion amplitude
    shape_ratio: float  # in [0.6, 1.4], mouth ellipse aspect


@dataclass(eq=False)
class VideoClip:
    """One talking-speaker sample: (T, H, W) grayscale frames in [0, 1]."""

    frames: np.ndarray
    speaker_id: int
    content: int | tuple[int, ...]
    clip_id: str = ""

    def validate(self) -> None:
        if self.frames.ndim != 3 or self.frames.shape[0] < 2:
            raise ValueError("clip must be (T, H, W) with T >= 2")
        if float(self.frames.min()) < 0.0 or float(self.frames.max()) > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if isinstance(self.content, tuple) and len(self.content) == 0:
            raise ValueError("content must be non-empty")


@dataclass(eq=False)
class DatasetSplits:
    """Seen-speaker training clips plus unseen-speaker test/adaptation pools."""

    train: list[VideoClip]
    unseen_test: list[VideoClip]
    adaptation: dict[int, list[VideoClip]] = field(default_factory=dict)

    @property
    def train_speakers(self) -> set[int]:
        return {c.speaker_id for c in self.train}

    @property
    def unseen_speakers(self) -> set[int]:
        return {c.speaker_id for c in self.unseen_test}


def make_speaker_profile(speaker_id: int, global_seed: int) -> SpeakerProfile:
    """Derive the deterministic trait bundle for one speaker."""
    if speaker_id < 0:
        raise ValueError("speaker_id must be >= 0")
    rng = np.random.default_rng(
        np.random.SeedSequence((int(global_seed), int(speaker_id), _PROFILE_SALT))
    )
    texture_seed = int(rng.integers(0, 2**31 - 1))
    brightness = float(rng.uniform(0.3, 0.7))
    dynamics_gain = float(rng.uniform(0.5, 1.5))
    shape_ratio = float(rng.uniform(0.6, 1.4))
    row = float(rng.uniform(10.0, 21.0))
    col = float(rng.uniform(10.0, 21.0))
    return SpeakerProfile(
        speaker_id=int(speaker_id),
        texture_seed=texture_seed,
        mouth_center=(row, col),
        brightness=brightness,
        dynamics_gain=dynamics_gain,
        shape_ratio=shape_ratio,
    )


def background_texture(profile: SpeakerProfile, height: int, width: int) -> np.ndarray:
    """Static background for a speaker: brightness plus three oriented gratings."""
    rng = np.random.default_rng(
        np.random.SeedSequence((profile.texture_seed, _TEXTURE_SALT))
    )
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    tex = np.zeros((height, width), dtype=np.float64)
    for amp in (0.5, 0.3, 0.2):
        kr = rng.uniform(0.2, 0.9) * rng.choice((-1.0, 1.0))
        kc = rng.uniform(0.2, 0.9) * rng.choice((-1.0, 1.0))
        phase = rng.uniform(0.0, 2.0 * math.pi)
        tex += amp * np.sin(kr * rows + kc * cols + phase)
    return profile.brightness + _TEXTURE_AMP * tex


def _symbol_params(symbol: int) -> tuple[float, float, float, float]:
    # Symbols form minimal pairs: 2j and 2j+1 share the slow sinusoid and
    # differ only in the fast component's phase, so telling them apart needs
    # fine aperture timing. Speakers render that timing with amplitude scaled
    # by dynamics_gain, which makes weak-dynamics speakers genuinely harder.
    # Low-discrepancy spread keeps distinct pairs well separated.
    pair, member = divmod(int(symbol), 2)
    k = float(pair) + 1.0
    frac = lambda x: x - math.floor(x)  # noqa: E731
    f1 = 1.0 + 1.5 * frac(k * 0.6180339887498949)
    f2 = 3.0 + 1.5 * frac(k * 0.3819660112501051)
    p1 = 2.0 * math.pi * frac(k * 0.7548776662466927)
    p2 = 2.0 * math.pi * frac(k * 0.5698402909980532) + member * math.pi
    return f1, f2, p1, p2


def _validate_content(content) -> tuple[int, ...]:
    if isinstance(content, (int, np.integer)):
        symbols = (int(content),)
    elif isinstance(content, tuple) and content:
        try:
            symbols = tuple(int(s) for s in content)
        except (TypeError, ValueError):
            raise ValueError(f"unknown content symbol in {content!r}") from None
    else:
        raise ValueError(f"unknown content symbol {content!r}")
    if any(s < 0 for s in symbols):
        raise ValueError(f"unknown content symbol {content!r}")
    return symbols


def aperture_trajectory(content, n_frames: int) -> np.ndarray:
    """Normalised mouth-opening trajectory in [0, 1] for a word or symbol sequence.

    A single symbol maps to a fixed two-sinusoid curve; a sequence renders each
    symbol's curve over its own contiguous span of frames.
    """
    symbols = _validate_content(content)
    segments = np.array_split(np.arange(n_frames), len(symbols))
    out = np.empty(n_frames, dtype=np.float64)
    for symbol, seg in zip(symbols, segments):
        if len(seg) == 0:
            continue
        f1, f2, p1, p2 = _symbol_params(symbol)
        local = (seg - seg[0]) / max(len(seg), 1)
        out[seg] = (
            0.5
            + _A_SLOW * np.sin(2.0 * math.pi * f1 * local + p1)
            + _A_FAST * np.sin(2.0 * math.pi * f2 * local + p2)
        )
    return out


def mouth_bbox(
    profile: SpeakerProfile, height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH
) -> tuple[int, int, int, int]:
    """Content-independent (r0, r1, c0, c1) box bounding the mouth for all contents."""
    row, col = profile.mouth_center
    v_max = _V_BASE + profile.dynamics_gain * _V_MOTION
    w_max = profile.shape_ratio * (_W_BASE + _W_MOTION * profile.dynamics_gain)
    r0 = max(0, int(math.floor(row - v_max)))
    r1 = min(height, int(math.ceil(row + v_max)) + 1)
    c0 = max(0, int(math.floor(col - w_max)))
    c1 = min(width, int(math.ceil(col + w_max)) + 1)
    return r0, r1, c0, c1


def render_clip(
    profile: SpeakerProfile,
    content,
    noise_seed: int,
    *,
    n_frames: int = DEFAULT_FRAMES,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    noise_std: float = DEFAULT_NOISE_STD,
    clip_id: str = "",
) -> VideoClip:
    """Render one clip: static background + animated mouth ellipse + observation noise."""
    aperture = aperture_trajectory(content, n_frames)
    gain = profile.dynamics_gain
    v = _V_BASE + gain * aperture * _V_MOTION  # (T,)
    w = profile.shape_ratio * (_W_BASE + _W_MOTION * gain * aperture)

    bg = background_texture(profile, height, width)
    row, col = profile.mouth_center
    dy = np.arange(height, dtype=np.float64)[:, None] - row
    dx = np.arange(width, dtype=np.float64)[None, :] - col
    rho = np.sqrt(
        (dy[None, :, :] / v[:, None, None]) ** 2
        + (dx[None, :, :] / w[:, None, None]) ** 2
    )
    # Soft inner edge; support is strictly rho < 1, so the mask never leaves
    # the profile's mouth_bbox.
    mask = np.clip((1.0 - rho) / _EDGE, 0.0, 1.0)
    frames = bg[None, :, :] * (1.0 - mask) + _MOUTH_VALUE * mask
    if noise_std > 0.0:
        rng = np.random.default_rng(
            np.random.SeedSequence((int(noise_seed), _NOISE_SALT))
        )
        frames = frames + rng.normal(0.0, noise_std, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    if isinstance(content, tuple):
        content = tuple(int(s) for s in content)
    else:
        content = int(content)
    return VideoClip(frames=frames, speaker_id=profile.speaker_id, content=content, clip_id=clip_id)


def _noise_seed(global_seed: int, speaker_id: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence(
        (int(global_seed), int(speaker_id), _SPLIT_CODES[split], int(index), _NOISE_SALT)
    )
    return int(ss.generate_state(1)[0])


def _speaker_contents(
    rng: np.random.Generator,
    n_clips: int,
    task: str,
    n_words: int,
    alphabet_size: int,
    min_symbols: int,
    max_symbols: int,
    require_coverage: bool = False,
) -> list:
    if task == "word":
        if require_coverage and n_clips < n_words:
            raise ValueError(
                f"clips_per_speaker={n_clips} cannot cover all {n_words} words"
            )
        full, rem = divmod(n_clips, n_words)
        contents = list(range(n_words)) * full + rng.permutation(n_words)[:rem].tolist()
        rng.shuffle(contents)
        return [int(w) for w in contents]
    contents = []
    for i in range(n_clips):
        length = int(rng.integers(min_symbols, max_symbols + 1))
        seq = rng.integers(0, alphabet_size, size=length).tolist()
        if i < alphabet_size:
            seq[0] = i  # guarantee every symbol occurs for this speaker
        contents.append(tuple(int(s) for s in seq))
    return contents


def build_splits(
    n_train_speakers: int,
    n_unseen_speakers: int,
    n_words: int,
    clips_per_speaker: int,
    global_seed: int,
    *,
    task: str = "word",
    alphabet_size: int = 5,
    min_symbols: int = 2,
    max_symbols: int = 6,
    adapt_clips_per_speaker: int = 300,
    test_clips_per_speaker: int = 25,
    n_frames: int = DEFAULT_FRAMES,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    noise_std: float = DEFAULT_NOISE_STD,
) -> DatasetSplits:
    """Generate disjoint seen/unseen speaker pools with balanced word coverage.

    Train speakers get ``clips_per_speaker`` clips each; every unseen speaker
    gets a private adaptation pool and a test pool with disjoint noise streams.
    """
    for name, value in (
        ("n_train_speakers", n_train_speakers),
        ("n_unseen_speakers", n_unseen_speakers),
        ("n_words", n_words),
        ("clips_per_speaker", clips_per_speaker),
    ):
        if value < 1:
            raise ValueError(f"{name} must be >= 1")

    render_kw = dict(n_frames=n_frames, height=height, width=width, noise_std=noise_std)
    content_kw = dict(
        task=task,
        n_words=n_words,
        alphabet_size=alphabet_size,
        min_symbols=min_symbols,
        max_symbols=max_symbols,
    )

    def make_pool(speaker_id: int, split: str, n_clips: int) -> list[VideoClip]:
        profile = make_speaker_profile(speaker_id, global_seed)
        rng = np.random.default_rng(
            np.random.SeedSequence(
                (int(global_seed), int(speaker_id), _SPLIT_CODES[split], _SPLIT_SALT)
            )
        )
        contents = _speaker_contents(
            rng, n_clips, require_coverage=(split == "train"), **content_kw
        )
        clips = []
        for idx, content in enumerate(contents):
            clips.append(
                render_clip(
                    profile,
                    content,
                    _noise_seed(global_seed, speaker_id, split, idx),
                    clip_id=f"s{speaker_id:03d}_{split}_{idx:04d}",
                    **render_kw,
                )
            )
        return clips

    train: list[VideoClip] = []
    for speaker in range(n_train_speakers):
        train.extend(make_pool(speaker, "train", clips_per_speaker))

    unseen_test: list[VideoClip] = []
    adaptation: dict[int, list[VideoClip]] = {}
    for speaker in range(n_train_speakers, n_train_speakers + n_unseen_speakers):
        adaptation[speaker] = make_pool(speaker, "adapt", adapt_clips_per_speaker)
        unseen_test.extend(make_pool(speaker, "test", test_clips_per_speaker))

    return DatasetSplits(train=train, unseen_test=unseen_test, adaptation=adaptation)


def budget_subset(
    adaptation_clips: list[VideoClip],
    budget_minutes: float,
    fps: float,
    rng: np.random.Generator,
) -> list[VideoClip]:
    """First floor(budget_minutes * 60 * fps / T) clips of a seeded shuffle."""
    if budget_minutes < 0:
        raise ValueError("budget_minutes must be >= 0")
    if budget_minutes == 0 or not adaptation_clips:
        return []
    n_frames = adaptation_clips[0].frames.shape[0]
    n = int(math.floor(budget_minutes * 60.0 * fps / n_frames))
    order = rng.permutation(len(adaptation_clips))
    return [adaptation_clips[i] for i in order[:n]]


# ---------------------------------------------------------------------------
# Persistence: a directory of .npy tensors plus one line-delimited manifest.
# ---------------------------------------------------------------------------

def content_to_str(content) -> str:
    if isinstance(content, tuple):
        return "s:" + ",".join(str(int(x)) for x in content)
    return f"w:{int(content)}"


def content_from_str(text: str):
    kind, _, body = text.partition(":")
    if kind == "w":
        return int(body)
    if kind == "s":
        return tuple(int(x) for x in body.split(","))
    raise ValueError(f"bad content field {text!r}")


def save_dataset(splits: DatasetSplits, directory: str, header: str = "") -> str:
    """Write clips/*.npy and manifest.tsv under ``directory``; returns manifest path."""
    clip_dir = os.path.join(directory, "clips")
    os.makedirs(clip_dir, exist_ok=True)
    manifest_path = os.path.join(directory, "manifest.tsv")

    def rows():
        for clip in splits.train:
            yield clip, "train"
        for clip in splits.unseen_test:
            yield clip, "test"
        for speaker in sorted(splits.adaptation):
            for clip in splits.adaptation[speaker]:
                yield clip, "adapt"

    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        for clip, tag in rows():
            rel = os.path.join("clips", f"{clip.clip_id}.npy")
            np.save(os.path.join(directory, rel), clip.frames)
            fh.write(
                f"{rel}\t{clip.speaker_id}\t{content_to_str(clip.content)}\t{tag}\n"
            )
    return manifest_path


def load_dataset(directory: str) -> DatasetSplits:
    """Rebuild DatasetSplits from a manifest directory, preserving record order."""
    manifest_path = os.path.join(directory, "manifest.tsv")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(manifest_path)
    splits = DatasetSplits(train=[], unseen_test=[], adaptation={})
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            rel, speaker_s, content_s, tag = line.split("\t")
            clip = VideoClip(
                frames=np.load(os.path.join(directory, rel)),
                speaker_id=int(speaker_s),
                content=content_from_str(content_s),
                clip_id=os.path.splitext(os.path.basename(rel))[0],
            )
            if tag == "train":
                splits.train.append(clip)
            elif tag == "test":
                splits.unseen_test.append(clip)
            elif tag == "adapt":
                splits.adaptation.setdefault(clip.speaker_id, []).append(clip)
            else:
                raise ValueError(f"bad split tag {tag!r}")
    return splits
