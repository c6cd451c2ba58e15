"""Human semantic parsing: ASPP head, pixel classifier, coarse grouping, metrics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .backbone import (
    Backbone,
    BackboneConfig,
    ConfigError,
    backbone_config_dict,
    backbone_config_from_dict,
    build_backbone,
)
from .layers import Conv2d, Param, ReLU, Tape, pixel_softmax_cross_entropy
from .tensor import (
    DimensionError,
    DomainError,
    bilinear_resize,
    bilinear_resize_backward,
    channel_softmax,
    l1_normalize_spatial,
)

FINE_LABELS = (
    "Background", "Hat", "Hair", "Glove", "Sunglasses", "Upper-clothes", "Dress", "Coat",
    "Socks", "Pants", "Jumpsuits", "Scarf", "Skirt", "Face", "Right-arm", "Left-arm",
    "Right-leg", "Left-leg", "Right-shoe", "Left-shoe",
)
LABEL_INDEX = {name: i for i, name in enumerate(FINE_LABELS)}
NUM_FINE = len(FINE_LABELS)

COARSE_REGIONS = ("Foreground", "Head", "Upper-body", "Lower-body", "Shoes")

DEFAULT_PARTS = {
    "Head": ("Hat", "Hair", "Sunglasses", "Face"),
    "Upper-body": ("Upper-clothes", "Dress", "Coat", "Jumpsuits", "Scarf", "Glove",
                   "Right-arm", "Left-arm"),
    "Lower-body": ("Pants", "Skirt", "Socks", "Dress", "Jumpsuits", "Right-leg", "Left-leg"),
    "Shoes": ("Right-shoe", "Left-shoe"),
}

ASPP_RATES = (3, 6, 9, 12)


@dataclass(frozen=True)
class CoarseGrouping:
    """Fine-label membership of the four body parts; Foreground is every non-Background label."""

    parts: dict = field(default_factory=lambda: dict(DEFAULT_PARTS))

    def __post_init__(self):
        if set(self.parts) != set(COARSE_REGIONS[1:]):
            raise ConfigError(f"grouping must define exactly {COARSE_REGIONS[1:]}")
        covered = set()
        for region, labels in self.parts.items():
            for label in labels:
                if label not in LABEL_INDEX:
                    raise ConfigError(f"unknown fine label {label!r} in region {region!r}")
                if label == "Background":
                    raise ConfigError("Background cannot belong to a body part")
                covered.add(label)
        missing = set(FINE_LABELS[1:]) - covered
        if missing:
            raise ConfigError(f"labels not assigned to any part: {sorted(missing)}")

    def members(self, region: str) -> tuple[str, ...]:
        if region == "Foreground":
            return FINE_LABELS[1:]
        return tuple(self.parts[region])

    def matrix(self) -> np.ndarray:
        """5 x 20 indicator matrix; row order follows ``COARSE_REGIONS``."""
        g = np.zeros((len(COARSE_REGIONS), NUM_FINE))
        for r, region in enumerate(COARSE_REGIONS):
            for label in self.members(region):
                g[r, LABEL_INDEX[label]] = 1.0
        return g

    def to_dict(self) -> dict:
        return {region: list(self.parts[region]) for region in COARSE_REGIONS[1:]}


def group_to_coarse(fine: np.ndarray, grouping: CoarseGrouping | None = None) -> np.ndarray:
    """Sum fine-label probabilities into the five coarse regions (no spatial normalization).

    Accepts ``20 x H x W`` or a batch ``N x 20 x H x W``.
    """
    grouping = grouping or CoarseGrouping()
    if fine.shape[-3] != NUM_FINE:
        raise DimensionError(f"expected {NUM_FINE} fine channels, got shape {fine.shape}")
    return np.einsum("rk,...khw->...rhw", grouping.matrix(), fine)


def coarse_pooling_maps(fine: np.ndarray, grouping: CoarseGrouping | None = None) -> np.ndarray:
    """Coarse maps, each channel l1-normalized over space (batched)."""
    coarse = group_to_coarse(fine, grouping)
    if coarse.ndim == 3:
        return l1_normalize_spatial(coarse)
    return np.stack([l1_normalize_spatial(c) for c in coarse])


def parsing_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int = NUM_FINE):
    """Overall pixel accuracy, mean per-class accuracy and mean IoU.

    Mean accuracy averages recall over classes present in ``gt``; mean IoU
    averages over classes present in ``gt`` or ``pred``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DomainError(f"{name} labels must lie in [0, {num_classes})")
    conf = np.bincount(
        gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel(),
        minlength=num_classes * num_classes,
    ).reshape(num_classes, num_classes)
    # integer counts -> exact rationals, rounded once at the end
    tp = np.diag(conf).tolist()
    gt_count = conf.sum(axis=1).tolist()
    pred_count = conf.sum(axis=0).tolist()
    overall = Fraction(sum(tp), int(conf.sum()))
    recalls = [Fraction(t, g) for t, g in zip(tp, gt_count) if g > 0]
    ious = [Fraction(t, g + p - t) for t, g, p in zip(tp, gt_count, pred_count) if g + p - t > 0]
    mean_acc = sum(recalls, Fraction(0)) / len(recalls)
    mean_iou = sum(ious, Fraction(0)) / len(ious)
    return float(overall), float(mean_acc), float(mean_iou)


class ASPP:
    """Parallel 3x3 dilated convolutions merged by sum, or by concat + 1x1 conv."""

    def __init__(self, name, in_ch, out_ch, rates=ASPP_RATES, merge="sum", rng=None):
        if merge not in ("sum", "concat"):
            raise ConfigError(f"unknown ASPP merge mode {merge!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.in_ch = in_ch
        self.merge = merge
        self.branches = [
            Conv2d(f"{name}.rate{r}", in_ch, out_ch, kernel=3, dilation=r, rng=rng) for r in rates
        ]
        self.project = None
        if merge == "concat":
            self.project = Conv2d(f"{name}.project", out_ch * len(rates), out_ch, kernel=1, rng=rng)

    def params(self) -> list[Param]:
        ps = [p for b in self.branches for p in b.params()]
        if self.project is not None:
            ps += self.project.params()
        return ps

    def __call__(self, x, tape: Tape | None = None):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(f"ASPP expects {self.in_ch} input channels, got shape {x.shape}")
        sub_tapes = [Tape() if tape is not None else None for _ in self.branches]
        outs = [b(x, t) for b, t in zip(self.branches, sub_tapes)]
        if self.merge == "sum":
            out = np.sum(outs, axis=0)
        else:
            out = np.concatenate(outs, axis=1)
        proj_tape = Tape() if tape is not None else None
        if self.project is not None:
            out = self.project(out, proj_tape)
        if tape is not None:
            widths = [o.shape[1] for o in outs]

            def backward(g):
                if self.project is not None:
                    g = proj_tape.backward(g)
                if self.merge == "sum":
                    parts = [g] * len(sub_tapes)
                else:
                    parts = np.split(g, np.cumsum(widths)[:-1], axis=1)
                return sum(t.backward(gp) for t, gp in zip(sub_tapes, parts))

            tape.record(self.name, backward)
        return out


class ParsingNet:
    """Output-stride-16 backbone, ASPP and a 1x1 classifier over the 20 fine labels."""

    def __init__(self, backbone_cfg: BackboneConfig | None = None, aspp_channels=64,
                 merge="sum", seed=0, num_classes=NUM_FINE, input_scale=1.0):
        if input_scale <= 0:
            raise ConfigError(f"input_scale must be positive, got {input_scale}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        cfg = backbone_cfg or BackboneConfig()
        if cfg.output_stride != 16:
            cfg = replace(cfg, output_stride=16)
        self.backbone: Backbone = build_backbone(cfg, rng)
        self.aspp = ASPP("aspp", self.backbone.feature_channels, aspp_channels, merge=merge, rng=rng)
        self.relu = ReLU("aspp.relu")
        self.classifier = Conv2d("classifier", aspp_channels, num_classes, kernel=1, rng=rng)
        self.num_classes = num_classes
        self.aspp_channels = aspp_channels
        self.merge = merge
        self.input_scale = float(input_scale)

    def parse_size(self, h: int, w: int) -> tuple[int, int]:
        """Resolution the backbone sees for an ``h x w`` input image."""
        return max(1, round(h * self.input_scale)), max(1, round(w * self.input_scale))

    def architecture(self) -> dict:
        return {
            "kind": "parser",
            "backbone": backbone_config_dict(self.backbone.config),
            "aspp_channels": self.aspp_channels,
            "aspp_rates": list(ASPP_RATES),
            "merge": self.merge,
            "num_classes": self.num_classes,
            "input_scale": self.input_scale,
        }

    @classmethod
    def from_architecture(cls, arch: dict, seed: int = 0) -> "ParsingNet":
        if arch.get("kind") != "parser":
            raise ConfigError(f"not a parser architecture: {arch.get('kind')!r}")
        return cls(backbone_config_from_dict(arch["backbone"]), arch["aspp_channels"],
                   arch["merge"], seed=seed, num_classes=arch["num_classes"],
                   input_scale=arch.get("input_scale", 1.0))

    def params(self) -> list[Param]:
        return self.backbone.params() + self.aspp.params() + self.classifier.params()

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def lr_scales(self, backbone=1.0, head=10.0) -> dict[str, float]:
        """Per-parameter learning-rate multipliers (backbone vs ASPP/classifier)."""
        scales = {p.name: backbone for p in self.backbone.params()}
        scales.update({p.name: head for p in self.aspp.params() + self.classifier.params()})
        return scales

    def logits(self, images, tape: Tape | None = None):
        """Fine-label logits on the output-stride-16 grid of the parse-resolution input.

        Images are bilinearly rescaled by ``input_scale`` first; the rescale is
        not differentiated (inputs are data, not parameters).
        """
        if self.input_scale != 1.0:
            images = bilinear_resize(images, *self.parse_size(*images.shape[2:]))
        feats = self.backbone(images, tape)
        return self.classifier(self.relu(self.aspp(feats, tape), tape), tape)

    def fine_probabilities(self, images, size=None):
        """Per-pixel distribution over the fine labels, optionally resized to ``size``."""
        z = self.logits(images)
        if size is not None:
            z = bilinear_resize(z, *size)
        return channel_softmax(z, axis=1)

    def predict_labels(self, images, size=None):
        return self.fine_probabilities(images, size).argmax(axis=1)

    def loss_and_grad(self, images, masks):
        """Pixel cross-entropy against ``masks`` (logits upsampled to mask size).

        Accumulates parameter gradients; returns ``(loss, pixel_accuracy)``.
        """
        tape = Tape()
        z = self.logits(images, tape)
        zh, zw = z.shape[2:]
        up = bilinear_resize(z, *masks.shape[1:])
        loss, g = pixel_softmax_cross_entropy(up, masks)
        tape.backward(bilinear_resize_backward(g, zh, zw))
        acc = float(np.mean(up.argmax(axis=1) == masks))
        return loss, acc
