"""Frozen-feature extraction, linear probing, and small-scale fine-tuning.

The probe trains a multinomial logistic regression on mean-pooled encoder
tokens with a full-batch quasi-Newton solver, so accuracy numbers carry no
SGD hyperparameter noise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from scipy import optimize

from .data import ModalityPair
from .masking import Modality
from .model import Encoder, ModelConfig, Role, patchify
from .pipeline import TrainConfig, lr_at


@dataclass
class FeatureTable:
    features: np.ndarray  # n_samples x d
    labels: np.ndarray
    encoder_tag: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature/label row counts differ")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")


def params_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for _, p in sorted(module.state_dict().items()):
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def extract_features(
    encoder: Encoder, dataset: list[ModalityPair], encoder_tag: str = ""
) -> FeatureTable:
    """Mean-pooled frozen-encoder tokens of the unmasked RGB modality."""
    encoder = encoder.double().eval()
    rows, labels = [], []
    with torch.no_grad():
        for pair in dataset:
            if pair.label is None:
                raise ValueError(f"pair {pair.pair_id} has no label")
            patches = torch.from_numpy(patchify(pair.rgb, encoder.config.patch_size))
            tokens = encoder.encode(
                encoder.embed_tokens(patches, Modality.RGB), None, Role.STUDENT
            )
            rows.append(tokens.tokens.mean(dim=0).numpy())
            labels.append(pair.label)
    return FeatureTable(np.stack(rows), np.array(labels), encoder_tag)


def stratified_split(
    labels: np.ndarray, split_seed: int, test_frac: float = 0.2
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(split_seed)
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(len(idx) * test_frac)))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    return np.sort(np.array(train_idx)), np.sort(np.array(test_idx))


def _softmax_regression_fit(
    x: np.ndarray, y: np.ndarray, n_classes: int, tol: float = 1e-6, ridge: float = 1e-4
) -> np.ndarray:
    """Full-batch multinomial logistic regression; returns (d+1) x C weights."""
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.eye(n_classes)[y]

    def objective(w_flat):
        w = w_flat.reshape(d + 1, n_classes)
        z = xb @ w
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(onehot * logp).sum() / n + 0.5 * ridge * (w[:-1] ** 2).sum()
        probs = np.exp(logp)
        grad = xb.T @ (probs - onehot) / n
        grad[:-1] += ridge * w[:-1]
        return loss, grad.ravel()

    res = optimize.minimize(
        objective,
        np.zeros((d + 1) * n_classes),
        jac=True,
        method="L-BFGS-B",
        tol=tol,
        options={"maxiter": 2000},
    )
    return res.x.reshape(d + 1, n_classes)


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[t, p] += 1
    return cm


def linear_probe(
    table: FeatureTable, split_seed: int, return_confusion: bool = False
):
    """Held-out top-1 accuracy of a linear classifier on frozen features."""
    classes, counts = np.unique(table.labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    if counts.min() < 10:
        raise ValueError("need at least 10 samples per class")
    n_classes = int(classes.max()) + 1
    train_idx, test_idx = stratified_split(table.labels, split_seed)
    x_train, x_test = table.features[train_idx], table.features[test_idx]
    # standardize with train statistics for solver conditioning
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd[sd == 0] = 1.0
    x_train = (x_train - mu) / sd
    x_test = (x_test - mu) / sd
    w = _softmax_regression_fit(x_train, table.labels[train_idx], n_classes)
    logits = np.hstack([x_test, np.ones((len(x_test), 1))]) @ w
    pred = logits.argmax(axis=1)
    acc = float((pred == table.labels[test_idx]).mean())
    if return_confusion:
        return acc, confusion_matrix(table.labels[test_idx], pred, n_classes)
    return acc


class _ClassifierModel(torch.nn.Module):
    def __init__(self, encoder: Encoder, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = torch.nn.Linear(encoder.config.encoder_dim, n_classes).double()

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        tokens = self.encoder.encode(
            self.encoder.embed_tokens(patches, Modality.RGB), None, Role.STUDENT
        )
        return self.head(tokens.tokens.mean(dim=0))


def finetune_small(
    encoder: Encoder,
    dataset: list[ModalityPair],
    epochs: int,
    cfg: TrainConfig,
    split_seed: int = 0,
) -> float:
    """Unfreeze the encoder, train with a linear head, report held-out top-1."""
    torch.set_num_threads(1)
    labels = np.array([p.label for p in dataset])
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 10:
        raise ValueError("degenerate class counts")
    n_classes = int(classes.max()) + 1
    train_idx, test_idx = stratified_split(labels, split_seed)

    torch.manual_seed(cfg.seed)
    model = _ClassifierModel(encoder.double(), n_classes)
    for p in model.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    patch = encoder.config.patch_size
    patch_cache = {
        int(i): torch.from_numpy(patchify(dataset[int(i)].rgb, patch))
        for i in np.concatenate([train_idx, test_idx])
    }

    batch = cfg.batch_size
    steps_per_epoch = max(1, (len(train_idx) + batch - 1) // batch)
    sched_cfg = TrainConfig(
        base_lr=cfg.base_lr,
        warmup_lr=cfg.warmup_lr,
        warmup_epochs=min(1, max(epochs - 1, 0)),
        total_epochs=max(epochs, 1),
        batch_size=batch,
        grad_accum_steps=1,
        seed=cfg.seed,
    )
    step = 0
    model.train()
    loss_fn = torch.nn.CrossEntropyLoss()
    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 99, epoch]).generate_state(1)[0]
        ).permutation(len(train_idx))
        for b in range(steps_per_epoch):
            ids = train_idx[order[b * batch : (b + 1) * batch]]
            if len(ids) == 0:
                continue
            optimizer.zero_grad()
            loss = sum(
                loss_fn(
                    model(patch_cache[int(i)])[None],
                    torch.tensor([labels[int(i)]]),
                )
                for i in ids
            ) / len(ids)
            for g in optimizer.param_groups:
                g["lr"] = lr_at(step, steps_per_epoch, sched_cfg)
            loss.backward()
            optimizer.step()
            step += 1

    model.eval()
    with torch.no_grad():
        pred = np.array(
            [int(model(patch_cache[int(i)]).argmax()) for i in test_idx]
        )
    return float((pred == labels[test_idx]).mean())


def write_results_csv(path, rows: list[tuple[str, str, float, int]]) -> None:
    """Rows of (checkpoint_tag, protocol, accuracy, seed)."""
    with open(path, "w") as f:
        f.write("checkpoint_tag,protocol,accuracy,seed\n")
        for tag, protocol, acc, seed in rows:
            f.write(f"{tag},{protocol},{repr(acc)},{seed}\n")


def write_confusion_png(path, cm: np.ndarray, cell: int = 48) -> None:
    """Grayscale heatmap of the confusion matrix, one ``cell``-px block per entry."""
    from PIL import Image, ImageDraw

    scale = 255.0 / max(int(cm.max()), 1)
    img = Image.new("RGB", (cm.shape[1] * cell, cm.shape[0] * cell))
    draw = ImageDraw.Draw(img)
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            level = int(round(cm[i, j] * scale))
            box = (j * cell, i * cell, (j + 1) * cell - 1, (i + 1) * cell - 1)
            draw.rectangle(box, fill=(level, level, level), outline=(64, 64, 64))
            text = (0, 0, 0) if level > 127 else (255, 255, 255)
            draw.text((j * cell + 4, i * cell + 4), str(int(cm[i, j])), fill=text)
    img.save(path)
