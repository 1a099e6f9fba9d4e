"""Synthetic episodic "video feature" data with controllable misalignment.

Videos are generated directly in feature space as C,T,H,W blocks: background
noise everywhere, plus a class-specific temporal signature modulating a
class-specific actor patch. Misalignment is injected along three axes:

- duration: the action occupies a random sub-interval of the clip,
- evolution: the action's internal progression is resampled through a random
  monotone piecewise-linear time warp,
- spatial: the actor patch is placed at a jittered centre per frame.

Every video carries its ground truth (interval, centres, warp), so alignment
behaviour can be verified against known answers.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Array

MAGIC = b"TA2N"
FORMAT_VERSION = 1
WARP_KNOTS = 3  # interior knots of the evolution warp
SIGNATURE_LENGTH = 64
TEMPLATE_SIZE = 3
SIGNATURE_COSINE_CEILING = 0.3


class DatasetIOError(Exception):
    """Base class for dataset file problems."""

    code = "io"


class BadMagicError(DatasetIOError):
    code = "bad_magic"


class UnsupportedVersionError(DatasetIOError):
    code = "unsupported_version"


class TruncatedFileError(DatasetIOError):
    code = "truncated"


@dataclass(frozen=True)
class MisalignmentConfig:
    """Strengths of the three injected misalignment axes plus noise floor."""

    duration_jitter: float = 0.0  # in [0, 1]; spreads start time and length
    evolution_severity: float = 0.0  # >= 0; bounds warp slopes in [1/(1+s), 1+s]
    spatial_jitter: float = 0.0  # in grid cells
    background_noise_scale: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.duration_jitter <= 1.0:
            raise ValueError("duration_jitter must lie in [0, 1]")
        for name in ("evolution_severity", "spatial_jitter", "background_noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class VideoFeature:
    """One generated video plus the ground truth used for verification."""

    feature: Array  # (C, T, H, W)
    label: int
    start: float  # action interval [start, end] in normalized clip time
    end: float
    centers: Array  # (T, 2) actor centre per frame as (x, y)
    warp_id: int
    warp_knots: Array  # (WARP_KNOTS + 2,) y-values of the evolution warp

    def evolution_curve(self, points: int) -> Array:
        """The ground-truth warp sampled uniformly on [0, 1]."""
        xs = np.linspace(0.0, 1.0, len(self.warp_knots))
        return np.interp(np.linspace(0.0, 1.0, points), xs, self.warp_knots)


@dataclass
class ClassSignature:
    """Canonical evolution curve and actor patch for one class."""

    class_index: int
    signature: Array  # (C, SIGNATURE_LENGTH)
    template: Array  # (C, TEMPLATE_SIZE, TEMPLATE_SIZE)


@dataclass
class Dataset:
    channels: int
    frames: int
    height: int
    width: int
    num_classes: int
    split_counts: tuple[int, int, int]  # train, val, test class counts
    config: MisalignmentConfig
    seed: int
    videos: list[VideoFeature] = field(default_factory=list)

    def split_classes(self, split: str) -> list[int]:
        n_train, n_val, n_test = self.split_counts
        ranges = {
            "train": range(0, n_train),
            "val": range(n_train, n_train + n_val),
            "test": range(n_train + n_val, n_train + n_val + n_test),
        }
        if split not in ranges:
            raise ValueError(f"unknown split {split!r}")
        return list(ranges[split])

    def videos_of_class(self, label: int) -> list[VideoFeature]:
        return [v for v in self.videos if v.label == label]

    def dims(self) -> tuple[int, int, int, int]:
        return (self.channels, self.frames, self.height, self.width)


@dataclass
class Episode:
    """One N-way K-shot task with labels re-indexed to 0..N-1."""

    n_way: int
    k_shot: int
    n_query: int
    support: list[list[VideoFeature]]  # [class][shot]
    query: list[VideoFeature]
    query_labels: list[int]
    class_ids: list[int]  # episode label -> dataset class id


# ---------------------------------------------------------------------------
# generation


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(list(key))


def _sample_warp_knots(rng: np.random.Generator, severity: float) -> Array:
    """Monotone piecewise-linear bijection of [0,1] with bounded slopes."""
    if severity <= 0.0:
        return np.linspace(0.0, 1.0, WARP_KNOTS + 2)
    lo, hi = 1.0 / (1.0 + severity), 1.0 + severity
    segments = WARP_KNOTS + 1
    for _ in range(200):
        slopes = rng.uniform(lo, hi, segments)
        slopes = slopes / slopes.mean()  # total rise must be exactly 1
        if np.all(slopes >= lo - 1e-12) and np.all(slopes <= hi + 1e-12):
            ys = np.concatenate([[0.0], np.cumsum(slopes) / segments])
            ys[-1] = 1.0
            return ys
    raise RuntimeError("warp sampling did not converge; severity too extreme")


def _smooth_curve(rng: np.random.Generator, length: int) -> Array:
    ts = np.linspace(0.0, 1.0, length)
    out = np.zeros(length)
    for freq in (1, 2, 3):
        out += rng.normal(0.0, 1.0) * np.sin(2 * np.pi * freq * ts + rng.uniform(0, 2 * np.pi))
    return out


def make_class_signatures(
    num_classes: int,
    channels: int,
    seed: int,
    cosine_ceiling: float = SIGNATURE_COSINE_CEILING,
) -> list[ClassSignature]:
    """Per-class signatures with pairwise cosine similarity below the ceiling."""
    signatures: list[ClassSignature] = []
    flats: list[Array] = []
    for c in range(num_classes):
        for attempt in range(100):
            rng = _rng(seed, 1, c, attempt)
            sig = np.stack([_smooth_curve(rng, SIGNATURE_LENGTH) for _ in range(channels)])
            sig /= np.sqrt((sig**2).mean()) + 1e-12
            flat = sig.ravel()
            flat_n = flat / np.linalg.norm(flat)
            if all(abs(flat_n @ other) < cosine_ceiling for other in flats):
                template = _rng(seed, 2, c).uniform(0.5, 1.5, (channels, TEMPLATE_SIZE, TEMPLATE_SIZE))
                signatures.append(ClassSignature(c, sig, template))
                flats.append(flat_n)
                break
        else:
            raise RuntimeError("could not generate sufficiently distinct class signatures")
    return signatures


def _splat_patch(frame: Array, patch: Array, cx: float, cy: float) -> None:
    """Bilinearly splat a (C,h,w) patch centred at fractional (cx, cy).

    Contributions falling outside the grid are dropped (the actor is
    partially out of view), so off-centre placements never error.
    """
    c, ph, pw = patch.shape
    height, width = frame.shape[1], frame.shape[2]
    y0 = cy - (ph - 1) / 2.0
    x0 = cx - (pw - 1) / 2.0
    for dy in range(ph):
        for dx in range(pw):
            y, x = y0 + dy, x0 + dx
            iy, ix = int(np.floor(y)), int(np.floor(x))
            fy, fx = y - iy, x - ix
            for oy, wy in ((iy, 1 - fy), (iy + 1, fy)):
                if not 0 <= oy < height or wy == 0.0:
                    continue
                for ox, wx in ((ix, 1 - fx), (ix + 1, fx)):
                    if not 0 <= ox < width or wx == 0.0:
                        continue
                    frame[:, oy, ox] += wy * wx * patch[:, dy, dx]


def _interp_signature(signature: Array, pos: float) -> Array:
    """Linear interpolation of a (C, L) signature at fractional position."""
    idx = pos * (signature.shape[1] - 1)
    lo = int(np.floor(idx))
    hi = min(lo + 1, signature.shape[1] - 1)
    frac = idx - lo
    return (1 - frac) * signature[:, lo] + frac * signature[:, hi]


def generate_video(
    sig: ClassSignature,
    dims: tuple[int, int, int, int],
    config: MisalignmentConfig,
    seed: int,
    video_id: int,
) -> VideoFeature:
    channels, frames, height, width = dims
    rng_sig = _rng(seed, 3, video_id, 0)
    rng_noise = _rng(seed, 3, video_id, 1)

    length = 1.0 - config.duration_jitter * rng_sig.uniform() * 0.75
    start = rng_sig.uniform() * (1.0 - length)
    end = start + length
    knots = _sample_warp_knots(rng_sig, config.evolution_severity)

    base = rng_sig.uniform(-config.spatial_jitter, config.spatial_jitter, 2)
    wander = rng_sig.uniform(
        -config.spatial_jitter / 4.0, config.spatial_jitter / 4.0, (frames, 2)
    )
    grid_centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    centers = np.clip(
        grid_centre + base + wander, [0.0, 0.0], [width - 1.0, height - 1.0]
    )

    feature = rng_noise.normal(0.0, config.background_noise_scale, (channels, frames, height, width))
    knot_xs = np.linspace(0.0, 1.0, len(knots))
    for t in range(frames):
        t_norm = t / (frames - 1) if frames > 1 else 0.0
        if not start - 1e-12 <= t_norm <= end + 1e-12:
            continue
        phase = (t_norm - start) / (end - start)
        evo = float(np.interp(phase, knot_xs, knots))
        frame_vec = _interp_signature(sig.signature, evo)
        _splat_patch(
            feature[:, t], frame_vec[:, None, None] * sig.template, centers[t, 0], centers[t, 1]
        )
    return VideoFeature(
        feature=feature,
        label=sig.class_index,
        start=start,
        end=end,
        centers=centers,
        warp_id=video_id,
        warp_knots=knots,
    )


def default_split_counts(num_classes: int) -> tuple[int, int, int]:
    n_test = max(2, round(num_classes * 0.3))
    n_val = max(1, round(num_classes * 0.15))
    n_train = num_classes - n_test - n_val
    if n_train < 1:
        raise ValueError(f"{num_classes} classes leave no train classes after the split")
    return n_train, n_val, n_test


def generate_dataset(
    num_classes: int,
    videos_per_class: int,
    dims: tuple[int, int, int, int],
    config: MisalignmentConfig,
    seed: int,
    split_counts: tuple[int, int, int] | None = None,
) -> Dataset:
    """Deterministic dataset of misaligned videos with disjoint class splits."""
    config.validate()
    if num_classes < 6:
        raise ValueError("need at least 6 classes to carve out usable splits")
    channels, frames, height, width = dims
    if min(dims) <= 0:
        raise ValueError("dims must be positive")
    if TEMPLATE_SIZE > height or TEMPLATE_SIZE > width:
        raise ValueError(
            f"actor template {TEMPLATE_SIZE}x{TEMPLATE_SIZE} does not fit a {height}x{width} grid"
        )
    counts = split_counts or default_split_counts(num_classes)
    if sum(counts) != num_classes or min(counts) < 1:
        raise ValueError(f"split counts {counts} do not partition {num_classes} classes")
    signatures = make_class_signatures(num_classes, channels, seed)
    videos = []
    vid = 0
    for sig in signatures:
        for _ in range(videos_per_class):
            videos.append(generate_video(sig, dims, config, seed, vid))
            vid += 1
    return Dataset(
        channels=channels,
        frames=frames,
        height=height,
        width=width,
        num_classes=num_classes,
        split_counts=tuple(counts),
        config=config,
        seed=seed,
        videos=videos,
    )


def noise_free_signal(dataset: Dataset, video: VideoFeature) -> Array:
    """Regenerate a video's actor signal with the noise stream silenced."""
    signatures = make_class_signatures(dataset.num_classes, dataset.channels, dataset.seed)
    quiet = replace(dataset.config, background_noise_scale=0.0)
    twin = generate_video(
        signatures[video.label], dataset.dims(), quiet, dataset.seed, video.warp_id
    )
    return twin.feature


# ---------------------------------------------------------------------------
# frame sampling and episodes


def tsn_sample(
    frames: Array, t_out: int, mode: str = "center", seed: int | None = None
) -> Array:
    """Segment-wise frame selection of a C,T_raw,H,W block down to T frames.

    The raw timeline is split into ``t_out`` contiguous segments as equal as
    possible; one frame is kept per segment (its centre in deterministic
    mode, a seeded uniform draw in stochastic mode).
    """
    t_raw = frames.shape[1]
    if t_raw < t_out:
        raise ValueError(f"cannot sample {t_out} frames from {t_raw}")
    edges = np.linspace(0, t_raw, t_out + 1).astype(int)
    if mode == "center":
        idx = [(edges[i] + edges[i + 1]) // 2 for i in range(t_out)]
    elif mode == "random":
        rng = np.random.default_rng(seed)
        idx = [int(rng.integers(edges[i], edges[i + 1])) for i in range(t_out)]
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return frames[:, idx]


def sample_episode(
    dataset: Dataset,
    split: str,
    n_way: int,
    k_shot: int,
    n_query: int,
    seed: int,
) -> Episode:
    """Draw one episode: N classes, K support + Q query videos per class.

    Support and query sets are disjoint and labels are re-indexed to the
    episode's 0..N-1 range.
    """
    class_ids = dataset.split_classes(split)
    if len(class_ids) < n_way:
        raise ValueError(f"split {split!r} has {len(class_ids)} classes, need {n_way}")
    rng = _rng(dataset.seed, 4, seed)
    chosen = [class_ids[i] for i in rng.choice(len(class_ids), size=n_way, replace=False)]
    support: list[list[VideoFeature]] = []
    query: list[VideoFeature] = []
    query_labels: list[int] = []
    for episode_label, class_id in enumerate(chosen):
        vids = dataset.videos_of_class(class_id)
        if len(vids) < k_shot + n_query:
            raise ValueError(
                f"class {class_id} has {len(vids)} videos, need {k_shot + n_query}"
            )
        picks = rng.choice(len(vids), size=k_shot + n_query, replace=False)
        support.append([vids[i] for i in picks[:k_shot]])
        for i in picks[k_shot:]:
            query.append(vids[i])
            query_labels.append(episode_label)
    return Episode(n_way, k_shot, n_query, support, query, query_labels, chosen)


# ---------------------------------------------------------------------------
# persistence (little-endian binary, magic "TA2N")


def _write(fh, fmt: str, *values) -> None:
    fh.write(struct.pack(fmt, *values))


def _read(fh, fmt: str):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise TruncatedFileError(f"expected {size} bytes, file ended early")
    return struct.unpack(fmt, raw)


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    """Atomic binary dump; layout documented in the README."""
    tmp = f"{path}.tmp"
    cfg = dataset.config
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        _write(fh, "<H", FORMAT_VERSION)
        _write(
            fh,
            "<9I",
            len(dataset.videos),
            dataset.channels,
            dataset.frames,
            dataset.height,
            dataset.width,
            dataset.num_classes,
            *dataset.split_counts,
        )
        _write(fh, "<Q", dataset.seed)
        _write(
            fh,
            "<4d",
            cfg.duration_jitter,
            cfg.evolution_severity,
            cfg.spatial_jitter,
            cfg.background_noise_scale,
        )
        for v in dataset.videos:
            _write(fh, "<2I", v.label, v.warp_id)
            _write(fh, "<2d", v.start, v.end)
            fh.write(np.ascontiguousarray(v.centers, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(v.warp_knots, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(v.feature, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _read_array(fh, count: int, shape: tuple[int, ...]) -> Array:
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise TruncatedFileError("array payload ended early")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}")
        (version,) = _read(fh, "<H")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported format version {version}")
        n_videos, channels, frames, height, width, num_classes, n_train, n_val, n_test = _read(
            fh, "<9I"
        )
        (seed,) = _read(fh, "<Q")
        dj, es, sj, noise = _read(fh, "<4d")
        dataset = Dataset(
            channels=channels,
            frames=frames,
            height=height,
            width=width,
            num_classes=num_classes,
            split_counts=(n_train, n_val, n_test),
            config=MisalignmentConfig(dj, es, sj, noise),
            seed=seed,
        )
        for _ in range(n_videos):
            label, warp_id = _read(fh, "<2I")
            start, end = _read(fh, "<2d")
            centers = _read_array(fh, frames * 2, (frames, 2))
            knots = _read_array(fh, WARP_KNOTS + 2, (WARP_KNOTS + 2,))
            feature = _read_array(
                fh, channels * frames * height * width, (channels, frames, height, width)
            )
            dataset.videos.append(
                VideoFeature(feature, label, start, end, centers, warp_id, knots)
            )
        if fh.read(1):
            raise TruncatedFileError("trailing bytes after the last record")
    return dataset
