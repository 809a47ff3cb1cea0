"""Batch planning and assembly: plain vs composite slots, partners, orders, axes.

All randomness is drawn from counter-based streams keyed by
(seed, epoch, step, slot, purpose), so plans and batches are reproducible
regardless of assembly order and independent across purposes: disabling one
decision (e.g. composition) never shifts the draws of another.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import images as im
from . import text as tx
from .data import Sample

MAX_PARTNER_RETRIES = 64


class Mode(enum.Enum):
    NONE = "none"
    DYNAMIC = "dynamic-random"
    FIXED = "fixed-pairing"
    STYLISTIC = "stylistic"


class Modality(enum.Enum):
    BOTH = "both"
    TEXT_ONLY = "text-only"
    IMAGE_ONLY = "image-only"


class ImageFn(enum.Enum):
    CENTER_HALF = "center-half"
    CUTMIX = "cutmix"
    MIXUP = "mixup"


@dataclass
class CompositionPolicy:
    """How composite batch slots are created."""

    mode: Mode = Mode.DYNAMIC
    rho: float = 0.3
    modality: Modality = Modality.BOTH
    image_fn: ImageFn = ImageFn.CENTER_HALF
    eda_strength: float = 0.1  # stylistic mode only
    pairing: dict[int, int] | None = None  # required for fixed mode

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if not 0.0 <= self.eda_strength <= 1.0:
            raise ValueError("eda_strength must be in [0, 1]")


@dataclass
class SlotPlan:
    """Composition decision for one batch slot."""

    slot: int
    primary_index: int
    composed: bool
    partner_index: int | None = None
    order: tx.OrderFlag | None = None
    axis: im.Axis | None = None


@dataclass
class BatchPlan:
    """Per-slot decisions plus the rng key material that produced them."""

    seed: int
    epoch: int
    step: int
    slots: list[SlotPlan]


@dataclass
class Batch:
    """Assembled tensors ready for the encoders."""

    images: np.ndarray        # B x 3 x S x S float32, normalized
    tokens: np.ndarray        # B x L int64
    composed_mask: np.ndarray  # B bool


# purpose tags for the keyed rng streams
COMPOSE = "compose"
PARTNER = "partner"
ORDER = "order"
AXIS = "axis"
AUG_A = "aug_a"
AUG_B = "aug_b"
EDA = "eda"
MIX = "mix"


def slot_rng(seed: int, epoch: int, step: int, slot: int, purpose: str) -> np.random.Generator:
    """Independent generator for one (epoch, step, slot, purpose) decision."""
    tag = zlib.crc32(purpose.encode("ascii"))
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(epoch, step, slot, tag))
    return np.random.default_rng(ss)


def epoch_rng(seed: int, epoch: int, purpose: str) -> np.random.Generator:
    """Generator for per-epoch decisions (e.g. the slot shuffle)."""
    tag = zlib.crc32(purpose.encode("ascii"))
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(epoch, tag))
    return np.random.default_rng(ss)


def build_fixed_pairing(dataset_size: int, seed: int) -> dict[int, int]:
    """Derangement-style partner map, stable across epochs.

    A seeded permutation is repaired so no index maps to itself: any fixed
    point is swapped with its cyclic neighbor's target.
    """
    if dataset_size < 2:
        raise ValueError("need at least 2 examples to build a pairing")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xF17ED,)))
    perm = rng.permutation(dataset_size)
    for i in range(dataset_size):
        if perm[i] == i:
            j = (i + 1) % dataset_size
            perm[i], perm[j] = perm[j], perm[i]
    mapping = {i: int(perm[i]) for i in range(dataset_size)}
    assert all(v != k for k, v in mapping.items())
    return mapping


def plan_batch(
    epoch: int,
    step: int,
    slot_indices: list[int] | np.ndarray,
    policy: CompositionPolicy,
    dataset_size: int,
    seed: int,
) -> BatchPlan:
    """Decide, per slot, composition, partner, caption order, and image axis.

    Fully determined by (seed, epoch, step, slot): replanning any slot in
    isolation reproduces the same decisions.
    """
    if dataset_size < 2:
        raise ValueError("dataset_size must be >= 2")
    if policy.mode is Mode.FIXED and policy.pairing is None:
        raise ValueError("fixed-pairing mode requires a partner map")

    slots: list[SlotPlan] = []
    for slot, primary in enumerate(int(i) for i in slot_indices):
        if not 0 <= primary < dataset_size:
            raise IndexError(f"slot {slot}: dataset index {primary} out of range")
        composed = False
        if policy.mode is not Mode.NONE:
            composed = bool(slot_rng(seed, epoch, step, slot, COMPOSE).random() < policy.rho)
        if not composed:
            slots.append(SlotPlan(slot=slot, primary_index=primary, composed=False))
            continue

        if policy.mode is Mode.DYNAMIC:
            rng = slot_rng(seed, epoch, step, slot, PARTNER)
            partner = int(rng.integers(dataset_size))
            retries = 0
            while partner == primary:
                retries += 1
                if retries > MAX_PARTNER_RETRIES:
                    raise RuntimeError("could not draw a partner distinct from the primary")
                partner = int(rng.integers(dataset_size))
        elif policy.mode is Mode.FIXED:
            assert policy.pairing is not None
            partner = policy.pairing[primary]
        else:  # stylistic: the partner is a re-augmented copy of the same example
            partner = primary

        order = tx.sample_order(slot_rng(seed, epoch, step, slot, ORDER))
        axis = im.sample_axis(slot_rng(seed, epoch, step, slot, AXIS))
        slots.append(
            SlotPlan(
                slot=slot,
                primary_index=primary,
                composed=True,
                partner_index=partner,
                order=order,
                axis=axis,
            )
        )
    return BatchPlan(seed=seed, epoch=epoch, step=step, slots=slots)


def _augmented(sample: Sample, aug_cfg: im.AugmentConfig, rng: np.random.Generator) -> im.ImageTensor:
    return im.random_resized_crop(im.ImageTensor.from_uint8(sample.image), aug_cfg, rng)


def assemble_batch(
    plan: BatchPlan,
    fetch: Callable[[int], Sample],
    vocab: tx.Vocabulary,
    context_length: int,
    aug_cfg: im.AugmentConfig,
    policy: CompositionPolicy,
) -> Batch:
    """Materialize a BatchPlan into normalized image and token tensors.

    ``fetch(index)`` must return the Sample for a dataset index (e.g.
    ``data.SampleCache``). Plain slots get the standard crop + tokenize
    pipeline; composed slots combine images/captions according to the
    policy's modality and image function.
    """
    n = len(plan.slots)
    images = np.empty((n, 3, aug_cfg.out_size, aug_cfg.out_size), dtype=np.float32)
    tokens = np.empty((n, context_length), dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    key = (plan.seed, plan.epoch, plan.step)

    for sp in plan.slots:
        sample_a = fetch(sp.primary_index)
        img_a = _augmented(sample_a, aug_cfg, slot_rng(*key, sp.slot, AUG_A))
        caption = sample_a.caption

        if sp.composed:
            mask[sp.slot] = True
            if policy.mode is Mode.STYLISTIC:
                sample_b = sample_a
                caption_b = tx.eda_augment(
                    sample_a.caption, slot_rng(*key, sp.slot, EDA), policy.eda_strength
                )
            else:
                sample_b = fetch(sp.partner_index)
                caption_b = sample_b.caption

            if policy.modality in (Modality.BOTH, Modality.IMAGE_ONLY):
                img_b = _augmented(sample_b, aug_cfg, slot_rng(*key, sp.slot, AUG_B))
                if policy.image_fn is ImageFn.CENTER_HALF:
                    img_a = im.compose_center_half(img_a, img_b, sp.axis)
                else:
                    mix_rng = slot_rng(*key, sp.slot, MIX)
                    omega = float(mix_rng.beta(1.0, 1.0))
                    if policy.image_fn is ImageFn.MIXUP:
                        img_a = im.mixup(img_a, img_b, omega)
                    else:
                        img_a = im.cutmix(img_a, img_b, omega, mix_rng)
            if policy.modality in (Modality.BOTH, Modality.TEXT_ONLY):
                caption = tx.compose_captions(sample_a.caption, caption_b, sp.order)

        img = im.normalize(img_a, aug_cfg.norm_mean, aug_cfg.norm_std)
        images[sp.slot] = img.data
        tokens[sp.slot] = tx.tokenize(caption, vocab, context_length).ids

    return Batch(images=images, tokens=tokens, composed_mask=mask)
