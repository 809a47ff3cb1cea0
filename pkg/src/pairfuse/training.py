"""Optimization loop: AdamW with decoupled decay, warmup+cosine schedule,
per-epoch grouped metrics, and lossless checkpoint/resume.

Every random decision in a run is keyed by (seed, epoch, step, slot), so a
resumed run replays the exact batches of an uninterrupted one; the only
state a checkpoint needs beyond parameters is the optimizer moments and the
step counters.
"""

from __future__ import annotations

import math
import os
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import sampling
from .data import DatasetManifest, SampleCache
from .errors import CheckpointMismatchError, TrainingDivergedError
from .images import AugmentConfig
from .loss import grouped_metrics, info_nce, similarity_matrix
from .model import DualEncoder, EncoderConfig, TemperatureSpec
from .text import Vocabulary

METRICS_HEADER = (
    "epoch,lr,total,i2t,t2i,composite_loss,plain_loss,composite_cossim,plain_cossim,probe_acc"
)
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization hyperparameters; defaults follow the reference recipe."""

    seed: int
    epochs: int = 40
    batch_size: int = 256
    base_lr: float = 0.003
    final_lr: float = 1e-5
    warmup_epochs: int = 5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float | None = None
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    select: str = "best"       # best-by-probe when a probe is configured, else last

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.select not in ("best", "last"):
            raise ValueError("select must be 'best' or 'last'")


@dataclass
class ProbeConfig:
    """Held-out set for per-epoch zero-shot accuracy tracking."""

    manifest: DatasetManifest
    label_indices: list[int]      # class index per manifest entry
    class_names: list[str]
    templates: list[str]
    every: int = 1
    batch_size: int = 512


@dataclass
class MetricsRecord:
    """One epoch of training diagnostics; None marks an empty group."""

    epoch: int
    lr: float
    total: float
    i2t: float
    t2i: float
    composite_loss: float | None
    plain_loss: float | None
    composite_cossim: float | None
    plain_cossim: float | None
    probe_acc: float | None

    def to_csv_row(self) -> str:
        def cell(v) -> str:
            return "" if v is None else repr(float(v))

        return ",".join(
            [str(self.epoch), cell(self.lr), cell(self.total), cell(self.i2t), cell(self.t2i),
             cell(self.composite_loss), cell(self.plain_loss), cell(self.composite_cossim),
             cell(self.plain_cossim), cell(self.probe_acc)]
        )


@dataclass
class AdamWState:
    """First/second moment accumulators and the shared step counter."""

    t: int
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]

    @classmethod
    def init(cls, params: dict[str, torch.Tensor]) -> "AdamWState":
        return cls(
            t=0,
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


@dataclass
class TrainState:
    """Everything needed to continue or evaluate a run."""

    model: DualEncoder
    opt: AdamWState
    epoch: int        # completed epochs
    global_step: int  # completed optimizer updates


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float, final_lr: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to final_lr.

    Exact at the junctions: lr_at(warmup_steps) == base_lr and
    lr_at(total_steps) == final_lr.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be < total_steps")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step == warmup_steps:
        return base_lr
    if step == total_steps:
        return final_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def optimizer_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamWState,
    lr: float,
    beta1: float,
    beta2: float,
    weight_decay: float,
    eps: float,
    no_decay: frozenset[str] | set[str] = frozenset(),
) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on the parameters.

    Decay multiplies each decayed parameter by (1 - lr * weight_decay),
    independent of the adaptive step. Parameters named in ``no_decay``
    (temperature, normalization gains) skip the decay.
    """
    state.t += 1
    bias1 = 1.0 - beta1 ** state.t
    bias2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if not bool(torch.isfinite(g).all()):
            raise TrainingDivergedError(f"non-finite gradient in parameter {name!r}")
        m, v = state.m[name], state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        if weight_decay != 0.0 and name not in no_decay:
            p.mul_(1.0 - lr * weight_decay)
        denom = (v / bias2).sqrt_().add_(eps)
        p.addcdiv_(m / bias1, denom, value=-lr)
    return state


def save_checkpoint(
    path: str | Path,
    model: DualEncoder,
    opt: AdamWState,
    epoch: int,
    global_step: int,
    train_cfg: TrainConfig,
    config_echo: dict | None = None,
) -> None:
    """Write a self-describing checkpoint; identical state gives identical bytes."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "encoder": _encoder_to_dict(model.config),
        "train": asdict(train_cfg),
        "run_config": config_echo,
        "epoch": int(epoch),
        "global_step": int(global_step),
        "adam_t": int(opt.t),
        "params": {k: p.detach().cpu().numpy().copy() for k, p in model.named_parameters()},
        "moments_m": {k: t.cpu().numpy().copy() for k, t in opt.m.items()},
        "moments_v": {k: t.cpu().numpy().copy() for k, t in opt.v.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(
            f"unsupported checkpoint version: {payload.get('format_version')}"
        )
    return payload


def _encoder_to_dict(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    return d


def encoder_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    d["temperature"] = TemperatureSpec(**d["temperature"])
    return EncoderConfig(**d)


def restore_model(ckpt: dict) -> DualEncoder:
    """Rebuild the DualEncoder a checkpoint was saved from."""
    model = DualEncoder(encoder_from_dict(ckpt["encoder"]), seed=0)
    params = dict(model.named_parameters())
    if set(params) != set(ckpt["params"]):
        raise CheckpointMismatchError("checkpoint parameter names do not match the model")
    with torch.no_grad():
        for name, arr in ckpt["params"].items():
            if tuple(params[name].shape) != arr.shape:
                raise CheckpointMismatchError(f"shape mismatch for parameter {name!r}")
            params[name].copy_(torch.from_numpy(arr))
    return model


def _restore_opt(ckpt: dict, params: dict[str, torch.Tensor]) -> AdamWState:
    m = {k: torch.from_numpy(a.copy()) for k, a in ckpt["moments_m"].items()}
    v = {k: torch.from_numpy(a.copy()) for k, a in ckpt["moments_v"].items()}
    if set(m) != set(params):
        raise CheckpointMismatchError("checkpoint moments do not match the model parameters")
    return AdamWState(t=ckpt["adam_t"], m=m, v=v)


def _mean_or_none(total: float, count: int) -> float | None:
    return total / count if count else None


def train(
    train_cfg: TrainConfig,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    context_length: int,
    aug_cfg: AugmentConfig,
    policy: sampling.CompositionPolicy,
    enc_cfg: EncoderConfig,
    out_dir: str | Path,
    probe: ProbeConfig | None = None,
    config_echo: dict | None = None,
    resume_from: str | Path | None = None,
) -> tuple[TrainState, list[MetricsRecord]]:
    """Run the full optimization loop and write metrics.csv + checkpoints.

    Deterministic for a fixed seed on a single device: rerunning produces a
    byte-identical metrics file, and resuming from an epoch checkpoint
    reproduces the remaining epochs exactly.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    os.makedirs(ckpt_dir, exist_ok=True)

    steps_per_epoch = manifest.size // train_cfg.batch_size
    if steps_per_epoch < 1:
        raise ValueError("batch_size larger than the dataset")
    total_steps = train_cfg.epochs * steps_per_epoch
    warmup_steps = train_cfg.warmup_epochs * steps_per_epoch

    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        _check_resume_compat(ckpt, train_cfg, enc_cfg)
        model = restore_model(ckpt)
        params = dict(model.named_parameters())
        opt = _restore_opt(ckpt, params)
        start_epoch = ckpt["epoch"]
        global_step = ckpt["global_step"]
    else:
        model = DualEncoder(enc_cfg, seed=train_cfg.seed)
        params = dict(model.named_parameters())
        opt = AdamWState.init(params)
        global_step = 0

    no_decay = frozenset(model.no_decay_param_names())
    fetch = SampleCache(manifest)
    probe_state = _prepare_probe(probe, enc_cfg, aug_cfg) if probe else None
    best_probe = -1.0

    metrics: list[MetricsRecord] = []
    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8") as metrics_fh:
        metrics_fh.write(METRICS_HEADER + "\n")
        for epoch in range(start_epoch, train_cfg.epochs):
            order = sampling.epoch_rng(train_cfg.seed, epoch, "shuffle").permutation(manifest.size)
            sums = {"total": 0.0, "i2t": 0.0, "t2i": 0.0}
            comp_sum = plain_sum = comp_cs_sum = plain_cs_sum = 0.0
            comp_n = plain_n = 0
            lr = 0.0

            model.train()
            for step in range(steps_per_epoch):
                slots = order[step * train_cfg.batch_size:(step + 1) * train_cfg.batch_size]
                plan = sampling.plan_batch(
                    epoch, step, slots, policy, manifest.size, train_cfg.seed
                )
                batch = sampling.assemble_batch(
                    plan, fetch, vocab, context_length, aug_cfg, policy
                )
                images = torch.from_numpy(batch.images)
                tokens = torch.from_numpy(batch.tokens)

                z_i = model.encode_images(images)
                z_t = model.encode_texts(tokens)
                S = similarity_matrix(z_i, z_t)
                tau = model.temperature()
                total, loss_i2t, loss_t2i = info_nce(S, tau)
                if not bool(torch.isfinite(total)):
                    raise TrainingDivergedError(f"non-finite loss at global step {global_step}")

                report = grouped_metrics(S.detach(), tau.detach(), batch.composed_mask)
                for p in params.values():
                    p.grad = None
                total.backward()
                if train_cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(params.values(), train_cfg.grad_clip)
                lr = lr_at(global_step + 1, total_steps, warmup_steps,
                           train_cfg.base_lr, train_cfg.final_lr)
                optimizer_step(
                    params, {k: p.grad for k, p in params.items()}, opt,
                    lr=lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                    weight_decay=train_cfg.weight_decay, eps=train_cfg.eps,
                    no_decay=no_decay,
                )
                global_step += 1

                sums["total"] += report.total
                sums["i2t"] += report.loss_i2t
                sums["t2i"] += report.loss_t2i
                if report.composite_count:
                    comp_sum += report.composite_loss * report.composite_count
                    comp_cs_sum += report.composite_cossim * report.composite_count
                    comp_n += report.composite_count
                if report.plain_count:
                    plain_sum += report.plain_loss * report.plain_count
                    plain_cs_sum += report.plain_cossim * report.plain_count
                    plain_n += report.plain_count

            probe_acc = None
            if probe_state and (epoch + 1) % probe_state["every"] == 0:
                probe_acc = _probe_accuracy(model, vocab, context_length, probe_state)
                if probe_acc > best_probe:
                    best_probe = probe_acc
                    save_checkpoint(ckpt_dir / "best", model, opt, epoch + 1, global_step,
                                    train_cfg, config_echo)

            record = MetricsRecord(
                epoch=epoch,
                lr=lr,
                total=sums["total"] / steps_per_epoch,
                i2t=sums["i2t"] / steps_per_epoch,
                t2i=sums["t2i"] / steps_per_epoch,
                composite_loss=_mean_or_none(comp_sum, comp_n),
                plain_loss=_mean_or_none(plain_sum, plain_n),
                composite_cossim=_mean_or_none(comp_cs_sum, comp_n),
                plain_cossim=_mean_or_none(plain_cs_sum, plain_n),
                probe_acc=probe_acc,
            )
            metrics.append(record)
            metrics_fh.write(record.to_csv_row() + "\n")
            metrics_fh.flush()

            if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"epoch_{epoch + 1}", model, opt, epoch + 1,
                                global_step, train_cfg, config_echo)

    save_checkpoint(ckpt_dir / "last", model, opt, train_cfg.epochs, global_step,
                    train_cfg, config_echo)
    selected = "best" if (train_cfg.select == "best" and probe_state and best_probe >= 0) else "last"
    (out_dir / "selected_checkpoint.txt").write_text(f"checkpoints/{selected}\n", encoding="utf-8")
    return TrainState(model=model, opt=opt, epoch=train_cfg.epochs, global_step=global_step), metrics


def _check_resume_compat(ckpt: dict, train_cfg: TrainConfig, enc_cfg: EncoderConfig) -> None:
    if ckpt["train"] != asdict(train_cfg):
        raise CheckpointMismatchError(
            "training configuration differs from the checkpoint's; refusing to resume"
        )
    if ckpt["encoder"] != _encoder_to_dict(enc_cfg):
        raise CheckpointMismatchError(
            "encoder configuration differs from the checkpoint's; refusing to resume"
        )
    if ckpt["epoch"] >= train_cfg.epochs:
        raise CheckpointMismatchError("checkpoint is already at or past the final epoch")


def _prepare_probe(probe: ProbeConfig, enc_cfg: EncoderConfig, aug_cfg: AugmentConfig) -> dict:
    from .evaluation import preprocess_eval_images

    images = preprocess_eval_images(
        probe.manifest, enc_cfg.image_size, aug_cfg.norm_mean, aug_cfg.norm_std
    )
    return {
        "images": torch.from_numpy(images),
        "labels": np.asarray(probe.label_indices, dtype=np.int64),
        "class_names": probe.class_names,
        "templates": probe.templates,
        "every": probe.every,
        "batch_size": probe.batch_size,
    }


def _probe_accuracy(model: DualEncoder, vocab, context_length: int, probe_state: dict) -> float:
    from .evaluation import accuracy, build_class_embeddings, encode_image_batches, zero_shot_classify

    was_training = model.training
    model.eval()
    try:
        class_emb = build_class_embeddings(
            model, vocab, context_length, probe_state["class_names"], probe_state["templates"]
        )
        z_i = encode_image_batches(model, probe_state["images"], probe_state["batch_size"])
        preds = zero_shot_classify(z_i.numpy(), class_emb.numpy())
        return accuracy(preds, probe_state["labels"])
    finally:
        if was_training:
            model.train()
