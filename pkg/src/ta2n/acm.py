"""Second alignment stage: coordinate action evolution across a video pair.

Temporal coordination builds a row-stochastic correlation matrix between
support and query timesteps from spatially pooled projections and uses it to
rearrange the query's frames onto the support's evolution. Spatial
coordination predicts a per-frame (x, y) offset for the pair and compares
soft-masked regions around the offset (support) and its negation (query)
instead of whole frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Parameter, Tape, Var

MASK_FLOOR = 1e-6  # keeps every mask's normalizer strictly positive
DEFAULT_MASK_SLOPE = 3.0


# ---------------------------------------------------------------------------
# temporal coordination


class TemporalCoordination:
    """Attention over timesteps that rearranges the query onto the support."""

    def __init__(self, channels: int, proj_dim: int = 16, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.proj_dim = proj_dim
        s = 1.0 / np.sqrt(channels)
        self.key_w = Parameter(rng.normal(0.0, s, size=(channels, proj_dim)), "tc.key_w")
        self.key_b = Parameter(np.zeros(proj_dim), "tc.key_b")
        self.query_w = Parameter(rng.normal(0.0, s, size=(channels, proj_dim)), "tc.query_w")
        self.query_b = Parameter(np.zeros(proj_dim), "tc.query_b")
        if proj_dim == channels:
            value_w = np.eye(channels)
        else:
            value_w = rng.normal(0.0, s, size=(channels, proj_dim))
        self.value_w = Parameter(value_w, "tc.value_w")
        self.value_b = Parameter(np.zeros(proj_dim), "tc.value_b")

    def parameters(self) -> list[Parameter]:
        return [self.key_w, self.key_b, self.query_w, self.query_b, self.value_w, self.value_b]

    def correlation(self, tape: Tape, support: Var, query: Var) -> Var:
        """Row-stochastic T x T matrix; row = support timestep, column = query."""
        if support.shape != query.shape:
            raise ValueError(f"shape mismatch {support.shape} vs {query.shape}")
        g_s = ad.global_avg_pool_spatial(support)  # (C, T)
        g_q = ad.global_avg_pool_spatial(query)
        keys = ad.channel_linear(g_s, tape.param(self.key_w), tape.param(self.key_b))
        queries = ad.channel_linear(g_q, tape.param(self.query_w), tape.param(self.query_b))
        logits = ad.matmul(ad.transpose(keys, (1, 0)), queries)  # (T, T)
        logits = ad.affine(logits, 1.0 / np.sqrt(self.proj_dim))
        return ad.softmax(logits, axis=1)

    def project_values(self, tape: Tape, feature: Var) -> Var:
        return ad.channel_linear(feature, tape.param(self.value_w), tape.param(self.value_b))

    def forward(self, tape: Tape, support: Var, query: Var) -> tuple[Var, Var, Var]:
        """Value-project both maps and rearrange the query along time.

        Returns (projected support, rearranged projected query, correlation).
        The correlation is computed from pooled features but applied to the
        full-resolution projected maps, which spatial coordination consumes.
        """
        corr = self.correlation(tape, support, query)
        v_s = self.project_values(tape, support)
        v_q = self.project_values(tape, query)
        return v_s, ad.mix_time(corr, v_q), corr


def rearranged_with(corr: Var, values: Var) -> Var:
    """Apply an externally supplied correlation matrix to a value map."""
    return ad.mix_time(corr, values)


# ---------------------------------------------------------------------------
# offset masks


def generate_offset_mask(
    offset, height: int, width: int, slope: float = DEFAULT_MASK_SLOPE
) -> Array:
    """Soft window around grid centre + (x, y) offset, as a plain array.

    The profile is 1 within distance 1 of the centre along each axis, falls
    off linearly with the given slope and is exactly 0 beyond distance
    1 + 1/slope; the 2-D mask is the product of the two axis profiles.
    """
    ox, oy = float(offset[0]), float(offset[1])
    cx = (width - 1) / 2.0 + ox
    cy = (height - 1) / 2.0 + oy

    def profile(n, c):
        d = np.abs(np.arange(n) - c)
        return np.where(d < 1.0, 1.0, np.maximum(0.0, 1.0 - slope * (d - 1.0)))

    return profile(height, cy)[:, None] * profile(width, cx)[None, :]


@dataclass(frozen=True)
class PerturbSchedule:
    """Eight-direction offset perturbation with stepwise amplitude decay."""

    initial_amplitude: float = 1.0
    decay: float = 0.5
    interval_epochs: int = 40

    def amplitude(self, epoch: int) -> float:
        return self.initial_amplitude * self.decay ** (epoch // self.interval_epochs)

    def displacements(self, epoch: int) -> Array:
        """The zero displacement plus eight compass directions, scaled."""
        amp = self.amplitude(epoch)
        angles = np.arange(8) * (np.pi / 4.0)
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return np.concatenate([np.zeros((1, 2)), amp * dirs], axis=0)


def perturb_offsets(
    offsets: Array, epoch: int, schedule: PerturbSchedule, *, training: bool
) -> list[Array]:
    """Training-time exploration: the original offsets plus 8 displaced copies.

    Disabled outside training; calling it in eval mode is an error (the eval
    pipeline simply never perturbs).
    """
    if not training:
        raise RuntimeError("offset perturbation is a training-only operation")
    offsets = np.asarray(offsets, dtype=float)
    return [offsets + d for d in schedule.displacements(epoch)]


# ---------------------------------------------------------------------------
# offset predictor


class OffsetPredictor:
    """Regression head from a channel-stacked pair to per-frame offsets.

    Two {conv3d k=3 pad=1, batch norm, 2x2 spatial max pool, ReLU} blocks, a
    spatial global max pool, then two pointwise temporal layers ending in
    tanh. The tanh output is scaled to half the grid extent per axis, so a
    predicted centre can never leave the grid. The final layer starts at
    zero: an untrained head predicts zero offsets everywhere.
    """

    def __init__(
        self,
        in_channels: int,
        height: int,
        width: int,
        conv_channels: tuple[int, int] = (128, 128),
        hidden: int = 64,
        bn_momentum: float = 0.1,
        rng: np.random.Generator | None = None,
    ):
        if height < 4 or width < 4:
            raise ValueError(
                f"grid {height}x{width} too small for two 2x2 spatial pools (needs >= 4)"
            )
        rng = rng or np.random.default_rng(0)
        self.height = height
        self.width = width
        self.bn_momentum = bn_momentum
        c1, c2 = conv_channels

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        self.conv1_w = Parameter(he((c1, in_channels, 3, 3, 3), in_channels * 27), "sc.conv1_w")
        self.conv1_b = Parameter(np.zeros(c1), "sc.conv1_b")
        self.bn1_gamma = Parameter(np.ones(c1), "sc.bn1_gamma")
        self.bn1_beta = Parameter(np.zeros(c1), "sc.bn1_beta")
        self.bn1_mean = np.zeros(c1)
        self.bn1_var = np.ones(c1)
        self.conv2_w = Parameter(he((c2, c1, 3, 3, 3), c1 * 27), "sc.conv2_w")
        self.conv2_b = Parameter(np.zeros(c2), "sc.conv2_b")
        self.bn2_gamma = Parameter(np.ones(c2), "sc.bn2_gamma")
        self.bn2_beta = Parameter(np.zeros(c2), "sc.bn2_beta")
        self.bn2_mean = np.zeros(c2)
        self.bn2_var = np.ones(c2)
        self.fc1_w = Parameter(he((c2, hidden), c2), "sc.fc1_w")
        self.fc1_b = Parameter(np.zeros(hidden), "sc.fc1_b")
        self.fc2_w = Parameter(np.zeros((hidden, 2)), "sc.fc2_w")
        self.fc2_b = Parameter(np.zeros(2), "sc.fc2_b")

    def parameters(self) -> list[Parameter]:
        return [
            self.conv1_w, self.conv1_b, self.bn1_gamma, self.bn1_beta,
            self.conv2_w, self.conv2_b, self.bn2_gamma, self.bn2_beta,
            self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
        ]

    def bn_state(self) -> dict[str, Array]:
        return {
            "bn1_mean": self.bn1_mean, "bn1_var": self.bn1_var,
            "bn2_mean": self.bn2_mean, "bn2_var": self.bn2_var,
        }

    def forward(self, tape: Tape, stacked: Var, training: bool) -> Var:
        """(B, C, T, H, W) pair stack -> (B, T, 2) offsets in grid cells.

        Batch norm uses the statistics of the current block while training
        and the frozen running statistics in eval mode.
        """
        if len(stacked.shape) != 5:
            raise ValueError(f"offset predictor expects (B,C,T,H,W), got {stacked.shape}")
        x = ad.conv3d(stacked, tape.param(self.conv1_w), tape.param(self.conv1_b))
        x = ad.batchnorm_channels(
            x, tape.param(self.bn1_gamma), tape.param(self.bn1_beta),
            self.bn1_mean, self.bn1_var, training, self.bn_momentum,
        )
        x = ad.relu(ad.max_pool_spatial2(x))
        x = ad.conv3d(x, tape.param(self.conv2_w), tape.param(self.conv2_b))
        x = ad.batchnorm_channels(
            x, tape.param(self.bn2_gamma), tape.param(self.bn2_beta),
            self.bn2_mean, self.bn2_var, training, self.bn_momentum,
        )
        x = ad.relu(ad.max_pool_spatial2(x))
        g = ad.global_max_pool_spatial(x)  # (B, C, T)
        g = ad.transpose(g, (1, 0, 2))  # (C, B, T)
        h = ad.relu(ad.channel_linear(g, tape.param(self.fc1_w), tape.param(self.fc1_b)))
        raw = ad.tanh(ad.channel_linear(h, tape.param(self.fc2_w), tape.param(self.fc2_b)))
        sx = (self.width - 1) / 2.0
        sy = (self.height - 1) / 2.0
        scaled = ad.mul(raw, raw.tape.const(np.array([sx, sy]).reshape(2, 1, 1)))
        return ad.transpose(scaled, (1, 2, 0))  # (B, T, 2)


def predict_offset(
    predictor: OffsetPredictor, tape: Tape, support: Var, query: Var, training: bool = False
) -> Var:
    """Channel-concatenate one aligned pair and regress its (T, 2) offsets."""
    stacked = ad.concat_channels(support, query)
    b, t = 1, stacked.shape[1]
    out = predictor.forward(
        tape, ad.reshape(stacked, (b, *stacked.shape)), training
    )
    return ad.reshape(out, (t, 2))


# ---------------------------------------------------------------------------
# masked spatial averaging


def averaged_masks(
    tape: Tape,
    offsets: Var,
    height: int,
    width: int,
    *,
    displacements: Array | None = None,
    slope: float = DEFAULT_MASK_SLOPE,
    negate: bool = False,
) -> Var:
    """Per-frame (T,H,W) soft masks, averaged over perturbation variants.

    ``negate=True`` builds the query-side masks at the negated offsets.
    Averaging happens before any normalization downstream.
    """
    base = ad.neg(offsets) if negate else offsets
    if displacements is None:
        return ad.offset_masks(base, height, width, slope)
    k = len(displacements)
    t = offsets.shape[0]
    shifts = -displacements if negate else displacements
    variants = ad.add(
        ad.reshape(base, (1, t, 2)), tape.const(shifts.reshape(k, 1, 2))
    )
    masks = ad.offset_masks(ad.reshape(variants, (k * t, 2)), height, width, slope)
    return ad.reduce_mean(ad.reshape(masks, (k, t, height, width)), axis=0)


def masked_spatial_average(f: Var, masks: Var) -> Var:
    """Weighted spatial mean of a (d,T,H,W) map under (T,H,W) masks -> (d,T).

    A small uniform floor keeps the normalizer positive even if a mask's
    support were to vanish entirely.
    """
    if f.shape[1:] != masks.shape:
        raise ValueError(f"mask shape {masks.shape} does not match map {f.shape}")
    floored = ad.affine(masks, 1.0, MASK_FLOOR)
    num = ad.reduce_sum(ad.mul(f, floored), axis=(2, 3))  # (d, T)
    den = ad.reduce_sum(floored, axis=(1, 2))  # (T,)
    if np.any(den.value <= 0.0):
        raise ValueError("mask normalizer vanished")
    return ad.div(num, den)


def spatial_coordinate(
    tape: Tape,
    support: Var,
    query: Var,
    offsets: Var,
    *,
    displacements: Array | None = None,
    slope: float = DEFAULT_MASK_SLOPE,
) -> tuple[Var, Var]:
    """Masked spatial means of an aligned pair under predicted offsets.

    Support is pooled around +offset, query around -offset; with
    perturbation displacements the masks are averaged first and normalized
    once.
    """
    h, w = support.shape[2], support.shape[3]
    m_s = averaged_masks(tape, offsets, h, w, displacements=displacements, slope=slope)
    m_q = averaged_masks(
        tape, offsets, h, w, displacements=displacements, slope=slope, negate=True
    )
    return masked_spatial_average(support, m_s), masked_spatial_average(query, m_q)


# ---------------------------------------------------------------------------
# exhaustive integer-offset oracle


def _window_metric(a: Array, b: Array, metric: str) -> float:
    a = a.ravel()
    b = b.ravel()
    if metric == "cosine":
        na = np.linalg.norm(a)
        nb = np.linalg.norm(b)
        return 1.0 - float(a @ b) / max(na * nb, 1e-12)
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    raise ValueError(f"unknown metric {metric!r}")


def sc_enumerate_oracle(
    support: Array, query: Array, metric: str = "cosine"
) -> tuple[Array, Array]:
    """Brute-force best integer offset per frame.

    For every candidate (x, y) the grids are hard-indexed so that support
    cell s lines up with query cell s - o, and the metric distance between
    the two intersection windows (compared cell by cell) is minimized. Ties
    resolve to the smallest offset norm, then lexicographically. Returns
    ((T, 2) offsets as (x, y), (T,) distances).
    """
    support = np.asarray(support, dtype=float)
    query = np.asarray(query, dtype=float)
    if support.shape != query.shape or support.ndim != 4:
        raise ValueError(f"oracle expects matching d,T,H,W maps, got {support.shape}")
    _, t_len, h, w = support.shape
    best = np.zeros((t_len, 2), dtype=int)
    best_dist = np.full(t_len, np.inf)
    for t in range(t_len):
        chosen = None
        for oy in range(-(h - 1), h):
            for ox in range(-(w - 1), w):
                s_win = support[:, t, max(0, oy) : h + min(0, oy), max(0, ox) : w + min(0, ox)]
                q_win = query[:, t, max(0, -oy) : h + min(0, -oy), max(0, -ox) : w + min(0, -ox)]
                dist = _window_metric(s_win, q_win, metric)
                key = (ox * ox + oy * oy, ox, oy)
                if (
                    chosen is None
                    or dist < chosen[0] - 1e-12
                    or (abs(dist - chosen[0]) <= 1e-12 and key < chosen[1])
                ):
                    chosen = (dist, key, (ox, oy))
        best_dist[t] = chosen[0]
        best[t] = chosen[2]
    return best, best_dist
