"""Episodic training with SGD + momentum, evaluation and the ablation harness.

One episode is one optimization step. All randomness flows from explicit
seeds: episode e of epoch k always sees the same sampled task for a given
config seed, so two runs with identical inputs produce bit-identical
parameter trajectories, and evaluation episodes are pre-seeded so a worker
pool returns exactly what a serial loop would.
"""

from __future__ import annotations

import logging
import multiprocessing
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metric
from .autodiff import Parameter, Tape
from .model import AlignmentModel, ModelConfig
from .synth import Dataset, sample_episode

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Episode loss became non-finite; carries the offending step."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    decay_factor: float = 0.5
    decay_interval: int = 5
    epochs: int = 30
    episodes_per_epoch: int = 200
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_interval < 1 or self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ValueError("schedule fields must be positive")
        if min(self.n_way, self.k_shot, self.n_query) < 1:
            raise ValueError("episode shape fields must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_interval)


@dataclass
class EpochStats:
    epoch: int
    episodes_seen: int
    mean_loss: float
    mean_accuracy: float
    learning_rate: float


@dataclass
class EvalReport:
    accuracy: float
    ci95: float
    episodes: int
    degenerate_ci: bool = False
    per_class: dict[int, tuple[int, int]] = field(default_factory=dict)  # id -> (hits, total)

    def per_class_accuracy(self) -> dict[int, float]:
        return {c: h / t for c, (h, t) in sorted(self.per_class.items()) if t > 0}

    def overlaps(self, other: "EvalReport") -> bool:
        return abs(self.accuracy - other.accuracy) <= self.ci95 + other.ci95


class SgdMomentum:
    """v <- mu*v - lr*grad; theta <- theta + v."""

    def __init__(self, params: list[Parameter], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v -= lr * p.grad
            p.value += v


def episode_seed(base_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1)[0])


def train(
    model: AlignmentModel,
    dataset: Dataset,
    config: TrainConfig,
    split: str = "train",
) -> list[EpochStats]:
    """Run the episodic loop; returns one stats row per epoch."""
    config.validate()
    params = model.parameters()
    opt = SgdMomentum(params, config.momentum)
    history: list[EpochStats] = []
    seen = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        losses, accs = [], []
        for index in range(config.episodes_per_epoch):
            seed = episode_seed(config.seed, epoch, index)
            episode = sample_episode(
                dataset, split, config.n_way, config.k_shot, config.n_query, seed
            )
            tape = Tape(grad=True)
            out = model.episode_forward(
                tape,
                episode,
                training=True,
                epoch=epoch,
                rng=np.random.default_rng(seed),
            )
            loss = metric.cross_entropy_loss(out.probs, out.labels)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, episode {index} (lr={lr})"
                )
            model.zero_grads()
            tape.backward(loss)
            opt.step(lr)
            seen += 1
            losses.append(loss_val / len(out.labels))
            accs.append(out.accuracy())
        stats = EpochStats(epoch, seen, float(np.mean(losses)), float(np.mean(accs)), lr)
        history.append(stats)
        log.info(
            "epoch %d: loss %.4f acc %.3f lr %.2e", epoch, stats.mean_loss,
            stats.mean_accuracy, lr,
        )
    return history


# ---------------------------------------------------------------------------
# evaluation


def _eval_episode(args) -> tuple[int, float, list[tuple[int, int]]]:
    model, dataset, split, n_way, k_shot, n_query, seed, index = args
    episode = sample_episode(dataset, split, n_way, k_shot, n_query, seed)
    tape = Tape(grad=False)
    out = model.episode_forward(
        tape, episode, training=False, rng=np.random.default_rng(seed)
    )
    preds = out.predictions()
    marks = [
        (episode.class_ids[label], int(pred == label))
        for pred, label in zip(preds, out.labels)
    ]
    return index, out.accuracy(), marks


def evaluate(
    model: AlignmentModel,
    dataset: Dataset,
    split: str,
    episodes: int,
    n_way: int,
    k_shot: int,
    n_query: int,
    seed: int,
    workers: int = 1,
) -> EvalReport:
    """Mean episode accuracy with a normal-approximation 95% interval.

    Episodes are seeded up front, so any worker count (including 1) yields
    the same report; per-class tallies use dataset class ids.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    jobs = [
        (model, dataset, split, n_way, k_shot, n_query, episode_seed(seed, 0, i), i)
        for i in range(episodes)
    ]
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_eval_episode, jobs, chunksize=max(1, episodes // (workers * 4)))
    else:
        results = [_eval_episode(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    accs = np.array([acc for _, acc, _ in results])
    per_class: dict[int, tuple[int, int]] = {}
    for _, _, marks in results:
        for class_id, hit in marks:
            h, t = per_class.get(class_id, (0, 0))
            per_class[class_id] = (h + hit, t + 1)
    degenerate = episodes < 2
    ci = 0.0 if degenerate else float(1.96 * accs.std(ddof=1) / np.sqrt(episodes))
    return EvalReport(float(accs.mean()), ci, episodes, degenerate, per_class)


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_VARIANTS: tuple[tuple[str, bool, bool, bool], ...] = (
    ("baseline", False, False, False),
    ("ttm", True, False, False),
    ("ttm+tc", True, True, False),
    ("ttm+sc", True, False, True),
    ("ttm+tc+sc", True, True, True),
    ("tc", False, True, False),
    ("tc+sc", False, True, True),
)


@dataclass
class AblationRow:
    variant: str
    use_ttm: bool
    use_tc: bool
    use_sc: bool
    report: EvalReport
    history: list[EpochStats]


def ablation_run(
    dataset: Dataset,
    train_config: TrainConfig,
    model_config: ModelConfig,
    eval_episodes: int,
    eval_split: str = "test",
    variants=ABLATION_VARIANTS,
    workers: int = 1,
) -> list[AblationRow]:
    """Train and evaluate every module-toggle variant on identical episode streams."""
    rows = []
    for name, use_ttm, use_tc, use_sc in variants:
        cfg = ModelConfig(**{**asdict(model_config), "use_ttm": use_ttm, "use_tc": use_tc, "use_sc": use_sc})
        model = AlignmentModel(cfg)
        history = train(model, dataset, train_config)
        report = evaluate(
            model, dataset, eval_split, eval_episodes,
            train_config.n_way, train_config.k_shot, train_config.n_query,
            seed=train_config.seed + 1, workers=workers,
        )
        log.info("variant %s: accuracy %.3f ± %.3f", name, report.accuracy, report.ci95)
        rows.append(AblationRow(name, use_ttm, use_tc, use_sc, report, history))
    return rows
