"""Full alignment network: embedder, temporal transform, coordination, metric.

The episode forward pass aligns every query against every class
independently (fresh coordination per pair), collects all pairs of an
episode into one batched offset-predictor call (so batch-norm statistics are
per-episode during training) and classifies with frame-wise cosine distances
between the pooled pair representations.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import __version__
from . import acm
from . import autodiff as ad
from . import metric
from . import ttm as ttm_mod
from .acm import OffsetPredictor, PerturbSchedule, TemporalCoordination
from .autodiff import Array, Parameter, Tape, Var
from .synth import Episode

CHECKPOINT_MAGIC = b"TA2M"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class ModelConfig:
    channels: int = 16
    frames: int = 8
    height: int = 7
    width: int = 7
    proj_dim: int = 16
    ttm_hidden: int = 32
    offset_channels: tuple[int, int] = (128, 128)
    offset_hidden: int = 64
    mask_slope: float = 3.0
    use_ttm: bool = True
    use_tc: bool = True
    use_sc: bool = True
    perturb: bool = True
    perturb_amplitude: float = 1.0
    perturb_decay: float = 0.5
    perturb_interval: int = 40
    init: str = "default"  # "default" or "zero"
    init_seed: int = 0

    def schedule(self) -> PerturbSchedule:
        return PerturbSchedule(self.perturb_amplitude, self.perturb_decay, self.perturb_interval)

    def toggles(self) -> str:
        on = [n for n, f in (("ttm", self.use_ttm), ("tc", self.use_tc), ("sc", self.use_sc)) if f]
        return "+".join(on) if on else "baseline"


@dataclass
class PairRecord:
    """Per support-query pair artifacts kept for inspection/export."""

    query_index: int
    class_label: int
    correlation: Array | None = None
    offsets: Array | None = None
    pooled_query: Array | None = None
    pooled_support: Array | None = None


@dataclass
class EpisodeOutput:
    probs: list  # per query: Var of N probabilities
    logits: list
    labels: list[int]
    warps: dict[int, tuple[float, float]] = field(default_factory=dict)
    pairs: list[PairRecord] = field(default_factory=list)

    def predictions(self) -> list[int]:
        return [int(p.value.argmax()) for p in self.probs]

    def accuracy(self) -> float:
        hits = sum(int(p == l) for p, l in zip(self.predictions(), self.labels))
        return hits / len(self.labels)


class AlignmentModel:
    """Assembled network; module toggles select any ablation variant."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config.channels
        rng = np.random.default_rng(config.init_seed)
        self.embed_w = Parameter(np.eye(c), "embed.w")
        self.embed_b = Parameter(np.zeros(c), "embed.b")
        self.ttm = (
            ttm_mod.LocalizationNet(c, config.ttm_hidden, rng) if config.use_ttm else None
        )
        self.tc = (
            TemporalCoordination(c, config.proj_dim, rng) if config.use_tc else None
        )
        if config.use_sc:
            pair_channels = 2 * (config.proj_dim if config.use_tc else c)
            self.sc = OffsetPredictor(
                pair_channels,
                config.height,
                config.width,
                conv_channels=config.offset_channels,
                hidden=config.offset_hidden,
                rng=rng,
            )
        else:
            self.sc = None
        if config.init == "zero":
            for p in self.parameters():
                p.value[...] = 0.0
        elif config.init != "default":
            raise ValueError(f"unknown init scheme {config.init!r}")

    def parameters(self) -> list[Parameter]:
        params = [self.embed_w, self.embed_b]
        for module in (self.ttm, self.tc, self.sc):
            if module is not None:
                params.extend(module.parameters())
        return params

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward ----------------------------------------------------------

    def embed(self, tape: Tape, feature: Array) -> Var:
        f = ad.channel_linear(
            tape.const(feature), tape.param(self.embed_w), tape.param(self.embed_b)
        )
        return f

    def prepare_video(self, tape: Tape, feature: Array, warps_out: dict | None = None, key=None) -> Var:
        """Embed one video and, when enabled, warp it onto its action span."""
        f = self.embed(tape, feature)
        if self.ttm is not None:
            scale, shift = ttm_mod.localize(self.ttm, tape, f)
            f = ttm_mod.temporal_affine_warp(f, scale, shift)
            if warps_out is not None:
                warps_out[key] = (float(scale.value), float(shift.value))
        return f

    def _pooled(self, x: Var) -> Var:
        return ad.global_avg_pool_spatial(x)

    def episode_forward(
        self,
        tape: Tape,
        episode: Episode,
        *,
        training: bool,
        epoch: int = 0,
        rng: np.random.Generator | None = None,
        collect: bool = False,
    ) -> EpisodeOutput:
        cfg = self.config
        if episode.k_shot > 1 and cfg.use_tc and cfg.proj_dim != cfg.channels:
            raise ValueError(
                "multi-shot prototypes re-enter the coordination stage, which "
                f"requires proj_dim == channels (got {cfg.proj_dim} != {cfg.channels})"
            )
        rng = rng or np.random.default_rng(0)
        out = EpisodeOutput(probs=[], logits=[], labels=list(episode.query_labels))

        # stage one: every video through the embedder (+ temporal transform)
        query_feats = [
            self.prepare_video(tape, v.feature, out.warps, ("q", i))
            for i, v in enumerate(episode.query)
        ]
        class_reprs = []
        for label, shots in enumerate(episode.support):
            feats = [
                self.prepare_video(tape, v.feature, out.warps, ("s", label, j))
                for j, v in enumerate(shots)
            ]
            class_reprs.append(self._class_prototype(tape, feats, rng))

        # stage two: coordinate every (query, class) pair
        n_way = len(class_reprs)
        pair_support, pair_query, pair_corr = [], [], []
        for qi in range(len(query_feats)):
            for ci in range(n_way):
                if self.tc is not None:
                    v_s, v_q, corr = self.tc.forward(tape, class_reprs[ci], query_feats[qi])
                else:
                    v_s, v_q, corr = class_reprs[ci], query_feats[qi], None
                pair_support.append(v_s)
                pair_query.append(v_q)
                pair_corr.append(corr)

        pooled = self._pool_pairs(tape, pair_support, pair_query, training, epoch)

        for qi in range(len(query_feats)):
            protos, queries = [], []
            for ci in range(n_way):
                f_s, f_q = pooled[qi * n_way + ci]
                protos.append(f_s)
                queries.append(f_q)
            distances = [
                metric.frame_cosine_distance(q, p) for q, p in zip(queries, protos)
            ]
            logits = ad.neg(ad.stack_vec(distances))
            probs = ad.softmax(logits, axis=0)
            out.probs.append(probs)
            out.logits.append(logits)
            if collect:
                for ci in range(n_way):
                    k = qi * n_way + ci
                    rec = PairRecord(qi, ci)
                    if pair_corr[k] is not None:
                        rec.correlation = np.array(pair_corr[k].value)
                    if self.sc is not None:
                        rec.offsets = np.array(self._last_offsets[k])
                    f_s, f_q = pooled[k]
                    rec.pooled_support = np.array(f_s.value)
                    rec.pooled_query = np.array(f_q.value)
                    out.pairs.append(rec)
        return out

    def _class_prototype(self, tape: Tape, feats: list[Var], rng: np.random.Generator) -> Var:
        """Fuse K support features; single shots pass through untouched."""
        if len(feats) == 1:
            return feats[0]
        ref = int(rng.integers(len(feats)))
        if self.tc is not None:
            aligned = [self.tc.forward(tape, feats[ref], f)[1] for f in feats]
        else:
            aligned = feats
        total = aligned[0]
        for f in aligned[1:]:
            total = ad.add(total, f)
        return ad.affine(total, 1.0 / len(aligned))

    def _pool_pairs(
        self,
        tape: Tape,
        pair_support: list[Var],
        pair_query: list[Var],
        training: bool,
        epoch: int,
    ) -> list[tuple[Var, Var]]:
        """Spatially coordinate (or plainly pool) every pair -> (d,T) pairs."""
        if self.sc is None:
            return [
                (self._pooled(s), self._pooled(q))
                for s, q in zip(pair_support, pair_query)
            ]
        stacks = []
        for s, q in zip(pair_support, pair_query):
            both = ad.concat_channels(s, q)
            stacks.append(ad.reshape(both, (1, *both.shape)))
        stacked = ad.concat(stacks, axis=0)
        offsets_batch = self.sc.forward(tape, stacked, training)  # (B, T, 2)
        displacements = (
            self.config.schedule().displacements(epoch)
            if training and self.config.perturb
            else None
        )
        pooled = []
        self._last_offsets = []
        for k, (s, q) in enumerate(zip(pair_support, pair_query)):
            offs = ad.take(offsets_batch, k, axis=0)
            self._last_offsets.append(np.array(offs.value))
            f_s, f_q = acm.spatial_coordinate(
                tape, s, q, offs, displacements=displacements, slope=self.config.mask_slope
            )
            pooled.append((f_s, f_q))
        return pooled


# ---------------------------------------------------------------------------
# checkpoints


def _named_arrays(model: AlignmentModel) -> dict[str, Array]:
    arrays = {p.name: p.value for p in model.parameters()}
    if model.sc is not None:
        for name, arr in model.sc.bn_state().items():
            arrays[f"sc.{name}"] = arr
    return arrays


def save_checkpoint(model: AlignmentModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Versioned binary of the model config plus every parameter and buffer."""
    header = {
        "format": CHECKPOINT_VERSION,
        "package_version": __version__,
        "config": asdict(model.config),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        arrays = _named_arrays(model)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in sorted(arrays.items()):
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[AlignmentModel, dict]:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint: {e}") from e
    with fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        cfg_dict = dict(header["config"])
        cfg_dict["offset_channels"] = tuple(cfg_dict["offset_channels"])
        model = AlignmentModel(ModelConfig(**cfg_dict))
        arrays = _named_arrays(model)
        (count,) = struct.unpack("<I", fh.read(4))
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            data = np.frombuffer(fh.read(8 * int(np.prod(shape))), dtype="<f8").reshape(shape)
            if name not in arrays:
                raise CheckpointError(f"unexpected array {name!r} in checkpoint")
            if arrays[name].shape != data.shape:
                raise CheckpointError(f"shape mismatch for {name!r}")
            arrays[name][...] = data
            seen.add(name)
        missing = set(arrays) - seen
        if missing:
            raise CheckpointError(f"checkpoint is missing arrays: {sorted(missing)}")
    return model, header
