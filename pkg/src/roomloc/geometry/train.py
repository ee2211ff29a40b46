"""Training the geometry network with the room matching loss and Adam."""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from ..core import ObjectObservation
from ..errors import UsageError
from .features import geometric_feature
from .loss import MARGIN, pair_loss
from .network import GeometryConfig, GeometryNetParams, backward, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 256  # room pairs per step
    epochs: int = 30
    margin: float = MARGIN
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # None: one expected pass over each room's images (see epoch_steps)
    steps_per_epoch: int | None = None
    max_subset: int = 5  # images per sampled room view

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise UsageError("lr must be non-negative")
        if not 0.0 <= self.margin < 1.0:
            raise UsageError("margin must be in [0, 1)")
        if self.batch_size < 2 or self.epochs < 1 or self.max_subset < 1:
            raise UsageError("batch_size >= 2, epochs >= 1 and max_subset >= 1 required")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise UsageError("steps_per_epoch must be >= 1")


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


# room -> image -> object -> 12-d feature
RoomImages = dict[str, dict[str, dict[str, np.ndarray]]]


def index_rooms(observations: Iterable[ObjectObservation]) -> RoomImages:
    rooms: RoomImages = defaultdict(lambda: defaultdict(dict))
    for obs in observations:
        rooms[obs.room_id][obs.image_id][obs.object_id] = geometric_feature(obs.keypoints).values
    return {r: {i: dict(objs) for i, objs in imgs.items()} for r, imgs in rooms.items()}


def merge_view(images: Mapping[str, Mapping[str, np.ndarray]], image_ids: Sequence[str]) -> np.ndarray:
    """Average each object's features over the chosen images; rows in object-id order."""
    acc: dict[str, list[np.ndarray]] = defaultdict(list)
    for iid in image_ids:
        for oid, f in images[iid].items():
            acc[oid].append(f)
    return np.stack([np.mean(acc[oid], axis=0) for oid in sorted(acc)]) if acc else np.zeros((0, 0))


@dataclass
class TrainResult:
    params: GeometryNetParams
    epoch_losses: list[float]


def epoch_steps(rooms: RoomImages, max_subset: int) -> int:
    """Steps after which every image has appeared in a view once, in expectation.

    A step draws two views per room, each of 1..cap images uniformly.
    """
    n_imgs = np.mean([len(imgs) for imgs in rooms.values()])
    cap = max(1, min(max_subset, int(n_imgs) // 2))
    return max(1, int(np.ceil(n_imgs / (2 * (1 + cap) / 2))))


class _ViewSampler:
    """Draws two disjoint image subsets per room for each step."""

    def __init__(self, rooms: RoomImages, max_subset: int):
        self.rooms = {r: rooms[r] for r in sorted(rooms)}
        self.images = {r: sorted(imgs) for r, imgs in self.rooms.items()}
        self.max_subset = max_subset

    def draw(self, rng: np.random.Generator) -> list[np.ndarray]:
        views = []
        for r, imgs in self.images.items():
            cap = max(1, min(self.max_subset, len(imgs) // 2))
            s1, s2 = rng.integers(1, cap + 1, size=2)
            perm = rng.permutation(len(imgs))
            a = [imgs[i] for i in perm[:s1]]
            b = [imgs[i] for i in perm[s1 : s1 + s2]]
            views.append(merge_view(self.rooms[r], a))
            views.append(merge_view(self.rooms[r], b))
        return views


def _sample_pairs(rng: np.random.Generator, n_rooms: int, batch: int):
    """Half positive (both views of one room), half negative (views of two rooms)."""
    n_pos = batch // 2
    n_neg = batch - n_pos
    pos_rooms = rng.integers(0, n_rooms, size=n_pos)
    ra = rng.integers(0, n_rooms, size=n_neg)
    rb = (ra + rng.integers(1, n_rooms, size=n_neg)) % n_rooms
    va = 2 * ra + rng.integers(0, 2, size=n_neg)
    vb = 2 * rb + rng.integers(0, 2, size=n_neg)
    idx_p = np.concatenate([2 * pos_rooms, va])
    idx_q = np.concatenate([2 * pos_rooms + 1, vb])
    positive = np.concatenate([np.ones(n_pos, bool), np.zeros(n_neg, bool)])
    return idx_p, idx_q, positive


def train_geometry(
    train_rooms: RoomImages | Iterable[ObjectObservation],
    cfg: TrainConfig = TrainConfig(),
    net_config: GeometryConfig | None = None,
    init: GeometryNetParams | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fit the geometry network on rooms with several images each.

    Each step draws two disjoint image subsets per room; subsets of the same
    room are positives, subsets of different rooms negatives. Everything random
    (views, pairs, dropout) comes from one generator seeded by ``cfg.seed``.
    """
    rooms = train_rooms if isinstance(train_rooms, dict) else index_rooms(train_rooms)
    usable = {
        r: imgs
        for r, imgs in rooms.items()
        if len(imgs) >= 2 and len({o for objs in imgs.values() for o in objs}) >= 2
    }
    if len(usable) < 2:
        raise UsageError("training needs >= 2 rooms with >= 2 images and >= 2 objects")
    skipped = sorted(set(rooms) - set(usable))
    if skipped:
        log.warning("skipping %d rooms without enough images/objects: %s", len(skipped), skipped)

    params = init or GeometryNetParams.initialize(net_config, seed=cfg.seed)
    tensors = {k: np.array(v) for k, v in params.tensors.items()}
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    sampler = _ViewSampler(usable, cfg.max_subset)
    n_rooms = len(usable)
    steps = cfg.steps_per_epoch or epoch_steps(usable, cfg.max_subset)

    losses: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for _ in range(steps):
            views = sampler.draw(rng)
            # a view seeing < 2 objects has no embedding; its pairs are excluded by the loss
            keep = [i for i, v in enumerate(views) if len(v) >= 2]
            if not keep:
                continue
            current = GeometryNetParams(params.config, tensors)
            emb_sub, cache = forward(current, [views[i] for i in keep], training=True, rng=rng)
            emb = np.zeros((len(views), emb_sub.shape[1]))
            emb[keep] = emb_sub
            idx_p, idx_q, positive = _sample_pairs(rng, n_rooms, cfg.batch_size)
            res = pair_loss(emb, idx_p, idx_q, positive, cfg.margin)
            grads = backward(current, cache, res.grad[keep])
            opt.step(tensors, grads)
            total += res.loss / cfg.batch_size
        epoch_loss = total / steps
        if not np.isfinite(epoch_loss):
            raise FloatingPointError(f"loss became non-finite at epoch {epoch}")
        losses.append(epoch_loss)
        log.info("epoch %d loss %.6f", epoch, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)

    if losses[-1] > 0.9 * losses[0]:
        warnings.warn(
            f"final loss {losses[-1]:.4f} is above 90% of the initial {losses[0]:.4f}; "
            "training rooms may not be separable by layout",
            RuntimeWarning,
            stacklevel=2,
        )
    return TrainResult(GeometryNetParams(params.config, tensors), losses)
