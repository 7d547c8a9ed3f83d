"""Stage two: the mask-conditioned binary patch classifier.

The network is an 18-layer residual backbone with one extra ingredient: the
object mask passes through its own single-channel convolution whose output
matches the backbone's first convolution in channels and spatial size, and
the two feature maps are summed before the rest of the backbone. The mask
encoder is zero-initialized, so a freshly built model is exactly the
RGB-only baseline; anything the mask contributes is learned.

Training follows the reference recipe: AdamW, cosine-annealed learning rate,
a fixed validation fraction split deterministically per seed, and model
selection by best validation F1. Large effective batches are honoured on
small machines by gradient accumulation over micro-batches.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torchvision.models import resnet18

from .core import Label, ObjectRecord, crop_patch, decode_mask
from .errors import ConfigurationError, RejectedInputError
from .stain import AugmentConfig, augment_patch

log = logging.getLogger(__name__)

BACKBONE_STRIDE = 32


@dataclass(frozen=True, eq=False)
class ClassifierInput:
    """An RGB patch plus its object mask, centered on the candidate centroid."""

    rgb: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        mask = np.asarray(self.mask, dtype=bool)
        if rgb.ndim != 3 or rgb.shape[-1] != 3:
            raise RejectedInputError(f"rgb must be HxWx3, got {rgb.shape}")
        if mask.shape != rgb.shape[:2]:
            raise RejectedInputError(
                f"mask {mask.shape} does not match rgb {rgb.shape[:2]}"
            )
        if not mask.any():
            raise RejectedInputError("object mask is empty")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True, eq=False)
class LabeledPatch:
    id: str
    input: ClassifierInput
    label: int  # 1 = mitotic figure, 0 = anything else


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8000
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    val_fraction: float = 0.10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    patch_size_px: int = 64
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    micro_batch_size: int = 256
    negative_ratio: float | None = None  # negatives per positive; None keeps all
    pretrained: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigurationError(
                f"val_fraction must be in (0, 1), got {self.val_fraction}"
            )
        if not self.seeds:
            raise ConfigurationError("at least one training seed is required")

    def to_json(self) -> dict:
        obj = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "val_fraction": self.val_fraction,
            "seeds": list(self.seeds),
            "patch_size_px": self.patch_size_px,
            "micro_batch_size": self.micro_batch_size,
            "negative_ratio": self.negative_ratio,
            "pretrained": self.pretrained,
            "augment": None,
        }
        if self.augment is not None:
            obj["augment"] = {
                "sigma": self.augment.sigma,
                "flip_probability": self.augment.flip_probability,
                "rng_seed": self.augment.rng_seed,
                "scale_jitter": self.augment.scale_jitter,
                "shift_jitter": self.augment.shift_jitter,
            }
        return obj


class MaskInjectedResNet(nn.Module):
    """ResNet18 with a zero-initialized mask encoder summed after conv1."""

    def __init__(self, pretrained: bool = False):
        super().__init__()
        backbone = None
        if pretrained:
            try:
                from torchvision.models import ResNet18_Weights

                backbone = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
            except Exception as exc:  # no weights available (e.g. offline)
                warnings.warn(
                    f"pretrained backbone weights unavailable ({exc}); "
                    "falling back to random initialization"
                )
        if backbone is None:
            backbone = resnet18(weights=None)
        backbone.fc = nn.Linear(backbone.fc.in_features, 1)
        self.backbone = backbone
        first = backbone.conv1
        self.mask_encoder = nn.Conv2d(
            1,
            first.out_channels,
            kernel_size=first.kernel_size,
            stride=first.stride,
            padding=first.padding,
            bias=False,
        )
        nn.init.zeros_(self.mask_encoder.weight)

    def forward(self, rgb: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b = self.backbone
        x = b.conv1(rgb)
        if mask is not None:
            x = x + self.mask_encoder(mask)
        x = b.bn1(x)
        x = b.relu(x)
        x = b.maxpool(x)
        x = b.layer1(x)
        x = b.layer2(x)
        x = b.layer3(x)
        x = b.layer4(x)
        x = b.avgpool(x)
        x = torch.flatten(x, 1)
        return b.fc(x).squeeze(-1)


@dataclass
class ModelHandle:
    """A trained (or fresh) model plus everything needed to rebuild it."""

    model: MaskInjectedResNet
    architecture: dict
    seed: int | None = None
    history: list[dict] = field(default_factory=list)


def build_model(patch_size: int = 64, pretrained: bool = False) -> ModelHandle:
    """Construct the mask-injected classifier for a given input patch size."""
    if patch_size % BACKBONE_STRIDE != 0:
        raise ConfigurationError(
            f"patch_size must be divisible by {BACKBONE_STRIDE}, got {patch_size}"
        )
    model = MaskInjectedResNet(pretrained=pretrained)
    architecture = {
        "backbone": "resnet18",
        "head": "binary-logit",
        "mask_injection": "conv1-sum",
        "patch_size_px": patch_size,
        "pretrained": pretrained,
    }
    return ModelHandle(model=model, architecture=architecture)


def _to_tensors(
    inputs: Sequence[ClassifierInput], device: str = "cpu", dtype=torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    rgb = np.stack([np.asarray(i.rgb, dtype=np.float32) / 255.0 for i in inputs])
    mask = np.stack([np.asarray(i.mask, dtype=np.float32) for i in inputs])
    rgb_t = torch.from_numpy(rgb).permute(0, 3, 1, 2).to(device=device, dtype=dtype)
    mask_t = torch.from_numpy(mask).unsqueeze(1).to(device=device, dtype=dtype)
    return rgb_t, mask_t


def _record_patch(
    record: ObjectRecord, image: np.ndarray, patch_size: int
) -> ClassifierInput | None:
    if record.mask.foreground_pixels == 0:
        return None
    cx, cy = record.centroid_px
    rgb = crop_patch(image, cx, cy, patch_size)
    frame = np.zeros(image.shape[:2], dtype=bool)
    x0, y0, x1, y1 = record.bbox_px
    frame[y0:y1, x0:x1] = decode_mask(record.mask)
    mask = crop_patch(frame, cx, cy, patch_size)
    if not mask.any():
        return None
    return ClassifierInput(rgb=rgb, mask=mask)


def make_training_set(
    records: Sequence[ObjectRecord],
    image_root: str | Path,
    patch_size: int = 64,
) -> list[LabeledPatch]:
    """Crop labeled classifier patches from manifest records.

    MF records are positives; MLF and OTHER records (labelled mimics plus
    harvested surrounding objects) are negatives. Patches are centered on
    the record centroid and reflect-padded at image borders. Records whose
    mask is empty are skipped with a log line.
    """
    from PIL import Image

    image_root = Path(image_root)
    cache: dict[str, np.ndarray] = {}
    patches = []
    for record in records:
        if record.image_path not in cache:
            with Image.open(image_root / record.image_path) as img:
                cache[record.image_path] = np.asarray(img.convert("RGB"))
        image = cache[record.image_path]
        item = _record_patch(record, image, patch_size)
        if item is None:
            log.warning("skipping record %s: empty mask", record.id)
            continue
        patches.append(
            LabeledPatch(
                id=record.id,
                input=item,
                label=1 if record.label == Label.MF else 0,
            )
        )
    return patches


def split_ids(
    ids: Iterable[str], seed: int, val_fraction: float
) -> tuple[set[str], set[str]]:
    """Deterministic train/validation membership.

    A pure function of the id set, the seed, and the fraction; input order
    is irrelevant.
    """
    ordered = sorted(set(ids))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    n_val = max(1, int(round(len(ordered) * val_fraction)))
    val = {ordered[i] for i in perm[:n_val]}
    train = {i for i in ordered if i not in val}
    return train, val


def _binary_metrics(labels: np.ndarray, scores: np.ndarray) -> dict:
    pred = scores >= 0.5
    truth = labels.astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    accuracy = float(np.count_nonzero(pred == truth) / len(labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


def _augmented_tensors(
    batch: Sequence[LabeledPatch],
    augment: AugmentConfig | None,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    if augment is None:
        return _to_tensors([p.input for p in batch])
    items = []
    for p in batch:
        rgb, mask = augment_patch(p.input.rgb, p.input.mask, augment, rng)
        items.append(ClassifierInput(rgb=rgb, mask=mask))
    return _to_tensors(items)


@torch.no_grad()
def _score_inputs(model: MaskInjectedResNet, inputs: Sequence[ClassifierInput], micro: int = 512) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(inputs), micro):
        rgb, mask = _to_tensors(inputs[start : start + micro])
        out.append(torch.sigmoid(model(rgb, mask)).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def _train_one_seed(
    config: TrainConfig, dataset: Sequence[LabeledPatch], seed: int
) -> ModelHandle:
    train_ids, val_ids = split_ids((p.id for p in dataset), seed, config.val_fraction)
    train_set = [p for p in dataset if p.id in train_ids]
    val_set = [p for p in dataset if p.id in val_ids]

    if config.negative_ratio is not None:
        positives = [p for p in train_set if p.label == 1]
        negatives = [p for p in train_set if p.label == 0]
        keep = min(len(negatives), int(round(config.negative_ratio * len(positives))))
        rng = np.random.default_rng((seed, 0xFEED))
        chosen = rng.permutation(len(negatives))[:keep]
        train_set = positives + [negatives[i] for i in sorted(chosen)]

    torch.manual_seed(seed)
    handle = build_model(config.patch_size_px, pretrained=config.pretrained)
    model = handle.model
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    loss_fn = nn.BCEWithLogitsLoss(reduction="sum")

    best_f1 = -1.0
    best_state = None
    history = []
    for epoch in range(config.epochs):
        model.train()
        rng = np.random.default_rng((seed, epoch, 1))
        aug_seed = config.augment.rng_seed if config.augment is not None else 0
        aug_rng = np.random.default_rng((aug_seed, seed, epoch))
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            effective = [train_set[i] for i in order[start : start + config.batch_size]]
            optimizer.zero_grad()
            for mb_start in range(0, len(effective), config.micro_batch_size):
                micro = effective[mb_start : mb_start + config.micro_batch_size]
                rgb, mask = _augmented_tensors(micro, config.augment, aug_rng)
                labels = torch.tensor([p.label for p in micro], dtype=torch.float32)
                loss = loss_fn(model(rgb, mask), labels) / len(effective)
                loss.backward()
                epoch_loss += float(loss.detach())
            optimizer.step()
        scheduler.step()

        val_scores = _score_inputs(model, [p.input for p in val_set])
        val_labels = np.array([p.label for p in val_set])
        metrics = _binary_metrics(val_labels, val_scores)
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss,
                "lr": scheduler.get_last_lr()[0],
                **{f"val_{k}": v for k, v in metrics.items()},
            }
        )
        if metrics["f1"] > best_f1:
            best_f1 = metrics["f1"]
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if best_state is not None:
        model.load_state_dict(best_state)
    handle.seed = seed
    handle.history = history
    return handle


def train(config: TrainConfig, dataset: Sequence[LabeledPatch]) -> list[ModelHandle]:
    """Train one model per configured seed; each gets its own 90/10 split."""
    labels = {p.label for p in dataset}
    if not dataset or labels != {0, 1}:
        raise ConfigurationError(
            "training requires a nonempty dataset with both classes"
        )
    return [_train_one_seed(config, dataset, seed) for seed in config.seeds]


def predict(
    models: Sequence[ModelHandle],
    inputs: Sequence[ClassifierInput],
    ensemble: bool = False,
    vote: str = "mean",
) -> np.ndarray:
    """Sigmoid scores per input; with ensemble=True, the member scores are
    combined (mean by default, fraction-of-positive-votes with vote="majority").
    The 0.5 decision threshold is applied downstream."""
    if not models:
        raise ConfigurationError("at least one model is required")
    if ensemble and len(models) < 2:
        raise ConfigurationError("ensemble prediction requires at least two models")
    if not ensemble and len(models) != 1:
        raise ConfigurationError("pass a single model or set ensemble=True")
    if vote not in ("mean", "majority"):
        raise ConfigurationError(f"unknown vote mode {vote!r}")
    if not inputs:
        return np.zeros(0)
    member_scores = np.stack([_score_inputs(h.model, inputs) for h in models])
    if not ensemble:
        return member_scores[0]
    if vote == "mean":
        return member_scores.mean(axis=0)
    return (member_scores >= 0.5).mean(axis=0)


def make_scorer(models: Sequence[ModelHandle], ensemble: bool | None = None):
    """Adapt trained models to the pipeline's batch scorer interface."""
    if ensemble is None:
        ensemble = len(models) > 1

    def scorer(rgb_batch: np.ndarray, mask_batch: np.ndarray) -> np.ndarray:
        inputs = [
            ClassifierInput(rgb=rgb, mask=mask)
            for rgb, mask in zip(rgb_batch, mask_batch)
        ]
        return predict(models, inputs, ensemble=ensemble)

    return scorer


def save_models(handles: Sequence[ModelHandle], out_dir: str | Path, config: TrainConfig | None = None) -> None:
    """Write per-seed artifacts: architecture descriptor, weights blob,
    training-config snapshot, and metrics history."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for handle in handles:
        name = f"seed{handle.seed}" if handle.seed is not None else "model"
        model_dir = out_dir / name
        model_dir.mkdir(parents=True, exist_ok=True)
        (model_dir / "architecture.json").write_text(json.dumps(handle.architecture, indent=2))
        (model_dir / "history.json").write_text(json.dumps(handle.history, indent=2))
        if config is not None:
            (model_dir / "train_config.json").write_text(json.dumps(config.to_json(), indent=2))
        torch.save(handle.model.state_dict(), model_dir / "weights.pt")


def load_models(model_dir: str | Path) -> list[ModelHandle]:
    """Load every model saved under model_dir (one subdirectory per seed)."""
    model_dir = Path(model_dir)
    handles = []
    for sub in sorted(model_dir.iterdir()):
        if not (sub / "architecture.json").exists():
            continue
        architecture = json.loads((sub / "architecture.json").read_text())
        handle = build_model(architecture.get("patch_size_px", 64), pretrained=False)
        state = torch.load(sub / "weights.pt", map_location="cpu", weights_only=True)
        handle.model.load_state_dict(state)
        handle.model.eval()
        handle.architecture = architecture
        if (sub / "history.json").exists():
            handle.history = json.loads((sub / "history.json").read_text())
        if sub.name.startswith("seed"):
            try:
                handle.seed = int(sub.name[4:])
            except ValueError:
                pass
        handles.append(handle)
    if not handles:
        raise ConfigurationError(f"no model artifacts found under {model_dir}")
    return handles
