"""Pretraining orchestration.

Wires masking, model and losses into a deterministic training loop with
gradient accumulation, EMA teacher updates, checkpointing and CSV metrics.
Every random draw derives from (seed, stream tag, step/epoch, sample index),
so worker layout, accumulation and resume cannot change results.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .data import ModalityPair
from .masking import (
    MaskMap,
    MaskProbabilityMap,
    Modality,
    ModalityImage,
    SubstitutionSchedule,
    apply_cross_modal_substitution,
    assign_mask_probabilities,
    fuse_info_scores,
    patch_info_score,
    sample_masks,
    substituted_positions,
    substitution_probability,
)
from .model import (
    ModelConfig,
    PretrainModel,
    Role,
    TokenSequence,
    load_named_tensors,
    patchify,
    save_named_tensors,
)

logger = logging.getLogger(__name__)

# RNG stream tags
_AUG, _MASK, _SUBST, _NEG, _SHUFFLE = 1, 2, 3, 4, 5

METRICS_HEADER = "step,epoch,lr,rho,mask_rate_rgb,mask_rate_other,rec,align,hsic,cls,total"


@dataclass
class TrainConfig:
    base_lr: float = 1.5e-4
    warmup_lr: float = 1e-6
    warmup_epochs: int = 30
    total_epochs: int = 500
    batch_size: int = 512
    grad_accum_steps: int = 2
    ema_momentum: float = 0.996
    ema_momentum_end: float = 1.0
    seed: int = 0
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    substitution: SubstitutionSchedule = field(default_factory=SubstitutionSchedule)
    strict_paper_align: bool = False
    align_tau: float = 0.07
    align_negatives: int = 16
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    checkpoint_every: int = 1000
    # ablation switches
    use_info_masking: bool = True
    use_substitution: bool = True
    uniform_mask_prob: float = 0.52

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs and self.total_epochs > 0:
            raise ValueError("warmup_epochs must be < total_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_accum_steps < 1:
            raise ValueError("grad_accum_steps must be >= 1")

    @classmethod
    def toy(cls, seed: int = 0) -> "TrainConfig":
        return cls(
            warmup_epochs=2,
            total_epochs=20,
            batch_size=8,
            grad_accum_steps=2,
            seed=seed,
            checkpoint_every=100,
        )


@dataclass
class MetricsRow:
    step: int
    epoch: int
    lr: float
    rho: float
    mask_rate_rgb: float
    mask_rate_other: float
    rec: float
    align: float
    hsic: float
    cls: float
    total: float

    def to_csv(self) -> str:
        return ",".join(
            [str(self.step), str(self.epoch)]
            + [
                repr(v)
                for v in (
                    self.lr,
                    self.rho,
                    self.mask_rate_rgb,
                    self.mask_rate_other,
                    self.rec,
                    self.align,
                    self.hsic,
                    self.cls,
                    self.total,
                )
            ]
        )


def _stream_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at the final step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.total_epochs * steps_per_epoch
    if step < warmup_steps:
        frac = step / warmup_steps
        return cfg.warmup_lr + frac * (cfg.base_lr - cfg.warmup_lr)
    if step >= total_steps:
        return 0.0
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def ema_momentum_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine ramp from ema_momentum to ema_momentum_end over training."""
    if total_steps <= 1:
        return cfg.ema_momentum
    t = min(step / (total_steps - 1), 1.0)
    return cfg.ema_momentum_end - (cfg.ema_momentum_end - cfg.ema_momentum) * 0.5 * (
        1.0 + math.cos(math.pi * t)
    )


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class GeometricDraw:
    rot_k: int = 0
    hflip: bool = False
    vflip: bool = False
    crop: tuple[int, int, int] | None = None  # (y0, x0, side)


def sample_geometric_draw(rng: np.random.Generator, size: int) -> GeometricDraw:
    rot_k = int(rng.integers(4))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    crop = None
    if rng.random() < 0.5:
        scale = rng.uniform(0.6, 1.0)
        side = max(2, int(round(size * math.sqrt(scale))))
        if side < size:
            y0 = int(rng.integers(size - side + 1))
            x0 = int(rng.integers(size - side + 1))
            crop = (y0, x0, side)
    return GeometricDraw(rot_k, hflip, vflip, crop)


def apply_geometric(pixels: np.ndarray, draw: GeometricDraw, out_size: int) -> np.ndarray:
    x = pixels
    if draw.rot_k:
        x = np.rot90(x, draw.rot_k, axes=(0, 1))
    if draw.hflip:
        x = x[:, ::-1]
    if draw.vflip:
        x = x[::-1]
    if draw.crop is not None:
        y0, x0, side = draw.crop
        x = x[y0 : y0 + side, x0 : x0 + side]
        t = torch.from_numpy(np.ascontiguousarray(x)).permute(2, 0, 1)[None]
        t = F.interpolate(t, size=(out_size, out_size), mode="bilinear", align_corners=False)
        x = t[0].permute(1, 2, 0).numpy()
    return np.ascontiguousarray(x)


def augment_pair(pair: ModalityPair, seed: int) -> ModalityPair:
    """One geometric draw applied identically to both modalities."""
    size = pair.rgb.pixels.shape[0]
    rng = np.random.default_rng(seed)
    draw = sample_geometric_draw(rng, size)
    return ModalityPair(
        rgb=ModalityImage(
            apply_geometric(pair.rgb.pixels, draw, size), Modality.RGB, pair.rgb.patch_size
        ),
        other=ModalityImage(
            apply_geometric(pair.other.pixels, draw, size),
            Modality.OTHER,
            pair.other.patch_size,
        ),
        pair_id=pair.pair_id,
        label=pair.label,
    )


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: PretrainModel
    optimizer: torch.optim.Optimizer
    step: int
    steps_per_epoch: int
    total_steps: int


def build_train_state(
    model_config: ModelConfig, cfg: TrainConfig, steps_per_epoch: int
) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = PretrainModel(model_config).double()
    optimizer = torch.optim.AdamW(
        model.trainable_parameters(),
        lr=cfg.base_lr,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    return TrainState(
        model=model,
        optimizer=optimizer,
        step=0,
        steps_per_epoch=steps_per_epoch,
        total_steps=cfg.total_epochs * steps_per_epoch,
    )


def _to_tensor_patches(image: ModalityImage, patch_size: int) -> torch.Tensor:
    return torch.from_numpy(patchify(image, patch_size))


def _mask_probability_maps(
    pairs: list[ModalityPair], cfg: TrainConfig
) -> tuple[list[MaskProbabilityMap], list[MaskProbabilityMap]]:
    """Per-modality masking probabilities for the whole batch.

    Info-aware mode pools the fused scores across the batch for the
    quantiles; the uniform ablation assigns one flat probability.
    """
    if cfg.use_info_masking:
        fused = [
            fuse_info_scores(patch_info_score(p.rgb), patch_info_score(p.other))
            for p in pairs
        ]
        probs = assign_mask_probabilities(fused)
        return probs, [MaskProbabilityMap(p.probs.copy(), p.q20, p.q80) for p in probs]
    maps = [
        MaskProbabilityMap(
            np.full(p.rgb.grid_shape, cfg.uniform_mask_prob), 0.0, 0.0
        )
        for p in pairs
    ]
    return maps, [MaskProbabilityMap(m.probs.copy(), 0.0, 0.0) for m in maps]


def _sample_forward(
    model: PretrainModel,
    pair: ModalityPair,
    other_student_img: ModalityImage,
    m_rgb: MaskMap,
    m_other: MaskMap,
    cfg: TrainConfig,
    neg_seed: int,
    substituted: np.ndarray | None = None,
):
    """Full per-sample computation graph; returns the four loss terms."""
    patch = model.config.patch_size
    rgb_patches = _to_tensor_patches(pair.rgb, patch)
    other_patches = _to_tensor_patches(other_student_img, patch)

    s_rgb = model.student.encode(
        model.student.embed_tokens(rgb_patches, Modality.RGB), m_rgb, Role.STUDENT
    )
    s_other = model.student.encode(
        model.student.embed_tokens(other_patches, Modality.OTHER), m_other, Role.STUDENT
    )
    # teacher sees the full, un-substituted pair
    t_rgb = model.teacher.encode(
        model.teacher.embed_tokens(rgb_patches, Modality.RGB), None, Role.TEACHER
    )
    t_other = model.teacher.encode(
        model.teacher.embed_tokens(_to_tensor_patches(pair.other, patch), Modality.OTHER),
        None,
        Role.TEACHER,
    )

    fused = model.fusion(s_rgb, s_other)

    pred_rows, target_rows = [], []
    for m, teacher_seq, modality in (
        (m_rgb, t_rgb, Modality.RGB),
        (m_other, t_other, Modality.OTHER),
    ):
        targets = [int(i) for i in np.flatnonzero(m.masked.ravel())]
        if not targets:
            continue
        decoded = model.decoder(fused, targets, modality)
        pred = model.pred_head(decoded)
        pred_rows.append(pred.tokens)
        target_rows.append(teacher_seq.tokens[targets])
    if pred_rows:
        rec = L.reconstruction_loss(torch.cat(pred_rows), torch.cat(target_rows))
    else:
        rec = rgb_patches.new_zeros(())

    # alignment/HSIC pair up semantically corresponding positions, so drop
    # other-modality patches whose content was swapped out by substitution
    common = sorted(set(s_rgb.positions) & set(s_other.positions))
    if substituted is not None and substituted.any():
        swapped = set(int(i) for i in np.flatnonzero(substituted.ravel()))
        common = [p for p in common if p not in swapped]
    rgb_at = dict(zip(s_rgb.positions, s_rgb.tokens))
    other_at = dict(zip(s_other.positions, s_other.tokens))

    align = rgb_patches.new_zeros(())
    if common:
        queries = torch.stack([rgb_at[p] for p in common] + [other_at[p] for p in common])
        positives = torch.stack([other_at[p] for p in common] + [rgb_at[p] for p in common])
        pool_tokens = torch.cat([s_rgb.tokens, s_other.tokens])
        pool_pos = list(s_rgb.positions) + list(s_other.positions)
        rng = np.random.default_rng(neg_seed)
        neg_rows = []
        ok = True
        for qpos in common + common:
            cand = [i for i, pp in enumerate(pool_pos) if pp != qpos]
            if not cand:
                ok = False
                break
            picks = rng.choice(cand, size=cfg.align_negatives, replace=True)
            neg_rows.append(pool_tokens[list(picks)])
        if ok:
            align = L.alignment_loss(
                queries,
                positives,
                torch.stack(neg_rows),
                cfg.align_tau,
                include_positive=not cfg.strict_paper_align,
            )

    hsic = rgb_patches.new_zeros(())
    if len(common) >= 2:
        # L2-normalize first (as the alignment term does) so the penalty is
        # scale-stable: raw token norms grow during training and would let
        # this term dominate the objective
        x = torch.nn.functional.normalize(torch.stack([rgb_at[p] for p in common]), dim=1)
        y = torch.nn.functional.normalize(torch.stack([other_at[p] for p in common]), dim=1)
        hsic = L.hsic_loss(x, y)

    logits = model.cls_head(torch.cat([s_rgb.tokens, s_other.tokens]))
    labels = torch.cat(
        [
            torch.zeros(len(s_rgb.positions), dtype=torch.float64),
            torch.ones(len(s_other.positions), dtype=torch.float64),
        ]
    )
    cls = L.modality_bce_loss(logits, labels)
    return rec, align, hsic, cls


def _ensure_visible(mask: MaskMap, probs: MaskProbabilityMap) -> MaskMap:
    """Keep at least one patch visible per modality.

    On tiny grids a sample can end up fully masked, which would leave the
    student encoder with no input tokens. Unmask the position with the lowest
    mask probability (ties broken by lowest index).
    """
    if not mask.masked.all():
        return mask
    masked = mask.masked.copy()
    masked.ravel()[int(np.argmin(probs.probs))] = False
    return MaskMap(masked)


def train_step(
    batch: list[tuple[int, ModalityPair]],
    state: TrainState,
    epoch: int,
    cfg: TrainConfig,
) -> MetricsRow:
    """One optimizer step over a batch, accumulated over micro-batches."""
    if not batch:
        raise ValueError("empty batch")
    model = state.model
    model.train()

    aug = [
        (sid, augment_pair(pair, _stream_seed(cfg.seed, _AUG, epoch, sid)))
        for sid, pair in batch
    ]
    probs_rgb, probs_other = _mask_probability_maps([p for _, p in aug], cfg)
    rho = (
        substitution_probability(epoch, cfg.substitution) if cfg.use_substitution else 0.0
    )

    samples = []
    mask_rates = {"rgb": [], "other": []}
    for (sid, pair), pr, po in zip(aug, probs_rgb, probs_other):
        m_rgb = _ensure_visible(
            sample_masks(pr, _stream_seed(cfg.seed, _MASK, state.step, sid, 0)), pr
        )
        m_other = _ensure_visible(
            sample_masks(po, _stream_seed(cfg.seed, _MASK, state.step, sid, 1)), po
        )
        subst_seed = _stream_seed(cfg.seed, _SUBST, state.step, sid)
        other_student = apply_cross_modal_substitution(
            pair.other, m_other, rho, subst_seed
        )
        substituted = substituted_positions(m_other, rho, subst_seed)
        mask_rates["rgb"].append(m_rgb.masked_fraction)
        mask_rates["other"].append(m_other.masked_fraction)
        samples.append((sid, pair, other_student, m_rgb, m_other, substituted))

    n_total = len(samples)
    state.optimizer.zero_grad()
    sums = {"rec": 0.0, "align": 0.0, "hsic": 0.0, "cls": 0.0, "total": 0.0}
    any_masked = False
    chunks = np.array_split(np.arange(n_total), min(cfg.grad_accum_steps, n_total))
    for chunk in chunks:
        if len(chunk) == 0:
            continue
        micro_total = None
        for i in chunk:
            sid, pair, other_student, m_rgb, m_other, substituted = samples[i]
            rec, align, hsic, cls = _sample_forward(
                model,
                pair,
                other_student,
                m_rgb,
                m_other,
                cfg,
                _stream_seed(cfg.seed, _NEG, state.step, sid),
                substituted,
            )
            if m_rgb.masked.any() or m_other.masked.any():
                any_masked = True
            total = L.total_loss(rec, align, hsic, cls, cfg.loss_weights)
            for key, val in (
                ("rec", rec),
                ("align", align),
                ("hsic", hsic),
                ("cls", cls),
                ("total", total),
            ):
                sums[key] += float(val.detach())
            micro_total = total if micro_total is None else micro_total + total
        (micro_total / n_total).backward()
    if not any_masked:
        logger.warning("step %d: no masked patch in any modality; rec term is 0",
                       state.step)

    lr = lr_at(state.step, state.steps_per_epoch, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    model.ema_step(ema_momentum_at(state.step, state.total_steps, cfg))

    row = MetricsRow(
        step=state.step,
        epoch=epoch,
        lr=lr,
        rho=rho,
        mask_rate_rgb=float(np.mean(mask_rates["rgb"])),
        mask_rate_other=float(np.mean(mask_rates["other"])),
        rec=sums["rec"] / n_total,
        align=sums["align"] / n_total,
        hsic=sums["hsic"] / n_total,
        cls=sums["cls"] / n_total,
        total=sums["total"] / n_total,
    )
    state.step += 1
    return row


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


@dataclass
class CheckpointRecord:
    step: int
    epoch: int
    tensors: dict[str, torch.Tensor]
    meta: dict


def make_checkpoint(state: TrainState, epoch: int, model_config: ModelConfig,
                    cfg: TrainConfig) -> CheckpointRecord:
    model = state.model
    tensors = {f"student/{k}": v.clone() for k, v in model.trainable_modules().state_dict().items()}
    tensors.update({f"teacher/{k}": v.clone() for k, v in model.teacher.state_dict().items()})
    opt_sd = state.optimizer.state_dict()
    for pid, pstate in opt_sd["state"].items():
        for key, val in pstate.items():
            if isinstance(val, torch.Tensor):
                tensors[f"optim/{pid}/{key}"] = val.clone()
    tensors["rng/torch"] = torch.get_rng_state().clone()
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "epoch": epoch,
        "model_config": asdict(model_config),
        "train_config": asdict(cfg),
        "optim_param_groups": [
            {k: v for k, v in g.items() if k != "params"} | {"params": g["params"]}
            for g in opt_sd["param_groups"]
        ],
        "optim_state_keys": {
            str(pid): sorted(k for k, v in ps.items() if isinstance(v, torch.Tensor))
            for pid, ps in opt_sd["state"].items()
        },
    }
    # round-trip through JSON so the in-memory record equals the reloaded one
    meta = json.loads(json.dumps(meta))
    return CheckpointRecord(state.step, epoch, tensors, meta)


def save_checkpoint(record: CheckpointRecord, stem) -> Path:
    """Write <stem>.tensors + <stem>.meta.json; returns the tensors path."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_named_tensors(record.tensors, stem.with_suffix(".tensors"))
    with open(stem.with_suffix(".meta.json"), "w") as f:
        json.dump(record.meta, f, indent=1)
    return stem.with_suffix(".tensors")


def load_checkpoint(stem) -> CheckpointRecord:
    stem = Path(stem)
    if stem.suffix in (".tensors", ".json"):
        stem = stem.with_suffix("") if stem.suffix == ".tensors" else Path(str(stem)[: -len(".meta.json")])
    meta_path = stem.with_suffix(".meta.json")
    if not meta_path.exists():
        raise FileNotFoundError(f"missing checkpoint metadata {meta_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    tensors = load_named_tensors(stem.with_suffix(".tensors"))
    return CheckpointRecord(meta["step"], meta["epoch"], tensors, meta)


def restore_train_state(
    record: CheckpointRecord, model_config: ModelConfig, cfg: TrainConfig,
    steps_per_epoch: int
) -> TrainState:
    """Rebuild a TrainState from a checkpoint, verifying names and shapes."""
    state = build_train_state(model_config, cfg, steps_per_epoch)
    model = state.model
    expected = {f"student/{k}": v for k, v in model.trainable_modules().state_dict().items()}
    expected.update({f"teacher/{k}": v for k, v in model.teacher.state_dict().items()})
    for name in sorted(expected):
        if name not in record.tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        if tuple(record.tensors[name].shape) != tuple(expected[name].shape):
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint "
                f"{tuple(record.tensors[name].shape)} vs model {tuple(expected[name].shape)}"
            )
    model.trainable_modules().load_state_dict(
        {k.removeprefix("student/"): v for k, v in record.tensors.items()
         if k.startswith("student/")}
    )
    model.teacher.load_state_dict(
        {k.removeprefix("teacher/"): v for k, v in record.tensors.items()
         if k.startswith("teacher/")}
    )
    opt_state = {}
    for pid_str, keys in record.meta["optim_state_keys"].items():
        pid = int(pid_str)
        opt_state[pid] = {k: record.tensors[f"optim/{pid}/{k}"] for k in keys}
    state.optimizer.load_state_dict(
        {"state": opt_state, "param_groups": record.meta["optim_param_groups"]}
    )
    torch.set_rng_state(record.tensors["rng/torch"].to(torch.uint8))
    state.step = record.step
    return state


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------

def _epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(_stream_seed(cfg.seed, _SHUFFLE, epoch))
    return rng.permutation(n)


def run_pretraining(
    cfg: TrainConfig,
    dataset: list[ModalityPair],
    out_dir,
    model_config: ModelConfig,
    resume_from=None,
) -> CheckpointRecord:
    """Train for cfg.total_epochs over the dataset, logging and checkpointing.

    Deterministic and bit-exactly resumable in single-threaded fp64 mode.
    """
    if not dataset and cfg.total_epochs > 0:
        raise ValueError("dataset is empty")
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"

    steps_per_epoch = max(1, math.ceil(len(dataset) / cfg.batch_size)) if dataset else 1
    if resume_from is not None:
        record = load_checkpoint(resume_from)
        state = restore_train_state(record, model_config, cfg, steps_per_epoch)
        start_step = state.step
        # drop any rows logged after the checkpoint was taken
        if metrics_path.exists():
            lines = metrics_path.read_text().splitlines()
            kept = [lines[0]] + [
                ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < start_step
            ]
            metrics_path.write_text("\n".join(kept) + "\n")
        else:
            metrics_path.write_text(METRICS_HEADER + "\n")
    else:
        state = build_train_state(model_config, cfg, steps_per_epoch)
        start_step = 0
        metrics_path.write_text(METRICS_HEADER + "\n")

    def checkpoint(epoch: int, tag: str) -> CheckpointRecord:
        record = make_checkpoint(state, epoch, model_config, cfg)
        save_checkpoint(record, out_dir / tag)
        return record

    if cfg.total_epochs == 0:
        return checkpoint(0, "ckpt_final")

    total_steps = cfg.total_epochs * steps_per_epoch
    with open(metrics_path, "a") as metrics_file:
        while state.step < total_steps:
            epoch = state.step // steps_per_epoch
            order = _epoch_order(cfg, epoch, len(dataset))
            batch_idx = state.step % steps_per_epoch
            for b in range(batch_idx, steps_per_epoch):
                ids = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = [(int(i), dataset[int(i)]) for i in ids]
                row = train_step(batch, state, epoch, cfg)
                metrics_file.write(row.to_csv() + "\n")
                metrics_file.flush()
                if state.step % cfg.checkpoint_every == 0:
                    checkpoint(epoch, f"ckpt_{state.step:08d}")
    return checkpoint(cfg.total_epochs - 1, "ckpt_final")
