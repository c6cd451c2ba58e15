"""Aggregation heads: global average pooling and semantic-map weighted pooling.

The semantic head pools backbone activations once per coarse probability map
(a matrix product over the flattened spatial axis), max-fuses the four body
part vectors and concatenates the result with the foreground and global
vectors. The parsing branch is frozen: its maps enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import (
    Backbone,
    BackboneConfig,
    ConfigError,
    backbone_config_dict,
    backbone_config_from_dict,
    build_backbone,
)
from .layers import Linear, Param, Tape, softmax_cross_entropy
from .tensor import (
    DimensionError,
    bilinear_resize,
    bilinear_resize_backward,
    matmul,
)

VARIANTS = ("baseline", "spreid_w_fg", "spreid_wo_fg")
PART_ORDER = ("head", "upper", "lower", "shoes")


@dataclass(frozen=True)
class AggregationConfig:
    variant: str = "spreid_w_fg"
    weight_sharing: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def layout(self, channels: int) -> list[tuple[str, int]]:
        """Ordered descriptor blocks ``(name, dim)``."""
        blocks = {
            "baseline": ["global"],
            "spreid_w_fg": ["fused", "foreground", "global"],
            "spreid_wo_fg": ["fused", "global"],
        }[self.variant]
        return [(b, channels) for b in blocks]

    def descriptor_dim(self, channels: int) -> int:
        return sum(d for _, d in self.layout(channels))

    @property
    def uses_maps(self) -> bool:
        return self.variant != "baseline"


@dataclass
class Descriptor:
    vector: np.ndarray
    identity: int
    camera: int
    variant: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("descriptor contains non-finite values")


def align_activations(activations: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinearly resize activations (``C x H x W`` or batched) to the map grid."""
    return bilinear_resize(activations, target_h, target_w)


def weighted_pool(activations: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Pool ``C x H x W`` activations with ``R x H x W`` weights -> ``R x C``.

    Computed as ``maps_flat @ activations_flat.T``. Both inputs must already
    share a spatial grid; see :func:`align_activations`.
    """
    if activations.ndim != 3 or maps.ndim != 3:
        raise DimensionError("weighted_pool expects C x H x W activations and R x H x W maps")
    if activations.shape[1:] != maps.shape[1:]:
        raise DimensionError(
            f"spatial mismatch: activations {activations.shape[1:]} vs maps {maps.shape[1:]}"
        )
    c = activations.shape[0]
    r = maps.shape[0]
    return matmul(maps.reshape(r, -1), activations.reshape(c, -1).T)


def weighted_pool_batch(activations: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Batched :func:`weighted_pool`: ``N x C x H x W`` with ``N x R x H x W`` -> ``N x R x C``."""
    if activations.shape[0] != maps.shape[0] or activations.shape[2:] != maps.shape[2:]:
        raise DimensionError(f"activations {activations.shape} and maps {maps.shape} do not align")
    n, c = activations.shape[:2]
    r = maps.shape[1]
    return np.matmul(maps.reshape(n, r, -1), activations.reshape(n, c, -1).transpose(0, 2, 1))


def weighted_pool_backward(grad: np.ndarray, activations: np.ndarray, maps: np.ndarray):
    """Gradients of :func:`weighted_pool_batch` w.r.t. activations and maps."""
    n, c = activations.shape[:2]
    r = maps.shape[1]
    g_act = np.matmul(grad.transpose(0, 2, 1), maps.reshape(n, r, -1)).reshape(activations.shape)
    g_maps = np.matmul(grad, activations.reshape(n, c, -1)).reshape(maps.shape)
    return g_act, g_maps


def fuse_parts(head, upper, lower, shoes):
    """Coordinatewise maximum of the four part vectors."""
    parts = [np.asarray(p) for p in (head, upper, lower, shoes)]
    if len({p.shape for p in parts}) != 1:
        raise DimensionError(f"part vectors differ in shape: {[p.shape for p in parts]}")
    return np.max(np.stack(parts), axis=0)


def assemble_descriptor(global_vec, foreground, fused, variant: str,
                        identity: int = -1, camera: int = -1) -> Descriptor:
    cfg = AggregationConfig(variant=variant)
    blocks = {"global": global_vec, "foreground": foreground, "fused": fused}
    dims = {np.asarray(v).shape for k, v in blocks.items() if v is not None}
    if len(dims) != 1:
        raise DimensionError(f"descriptor blocks have inconsistent shapes: {dims}")
    try:
        vector = np.concatenate([np.asarray(blocks[name]) for name, _ in cfg.layout(0)])
    except ValueError as exc:
        raise DimensionError(f"variant {variant!r} needs blocks that were not given") from exc
    return Descriptor(vector, identity, camera, variant)


class SPReIDModel:
    """Re-id backbone(s), an aggregation head and a linear identity classifier.

    ``forward`` takes images already at the re-id resolution and, for the
    semantic variants, coarse maps (``N x 5 x h x w``, l1-normalized per
    channel) from the frozen parser.
    """

    def __init__(self, backbone_cfg: BackboneConfig, agg: AggregationConfig, num_classes: int,
                 seed: int = 0, grouping: dict | None = None):
        if backbone_cfg.output_stride != 32:
            raise ConfigError("the re-id backbone runs at output stride 32")
        self.backbone_cfg = backbone_cfg
        self.agg = agg
        self.num_classes = num_classes
        # echoed into checkpoints only; the maps arrive already grouped
        self.grouping = grouping
        self.backbone: Backbone = build_backbone(backbone_cfg, seed)
        self.part_backbone: Backbone | None = None
        if agg.uses_maps and not agg.weight_sharing:
            self.part_backbone = build_backbone(backbone_cfg, seed)
            for p in self.part_backbone.params():
                p.name = "parts." + p.name
        c = backbone_cfg.feature_channels
        self.classifier = Linear("classifier", agg.descriptor_dim(c), num_classes,
                                 rng=np.random.default_rng([int(seed), 1]))

    @property
    def descriptor_dim(self) -> int:
        return self.agg.descriptor_dim(self.backbone_cfg.feature_channels)

    def architecture(self) -> dict:
        arch = {
            "kind": "reid",
            "backbone": backbone_config_dict(self.backbone_cfg),
            "variant": self.agg.variant,
            "weight_sharing": self.agg.weight_sharing,
            "num_classes": self.num_classes,
        }
        if self.grouping is not None:
            arch["grouping"] = self.grouping
        return arch

    @classmethod
    def from_architecture(cls, arch: dict, seed: int = 0) -> "SPReIDModel":
        if arch.get("kind") != "reid":
            raise ConfigError(f"not a re-id architecture: {arch.get('kind')!r}")
        return cls(backbone_config_from_dict(arch["backbone"]),
                   AggregationConfig(arch["variant"], arch["weight_sharing"]),
                   arch["num_classes"], seed=seed, grouping=arch.get("grouping"))

    def params(self) -> list[Param]:
        ps = self.backbone.params()
        if self.part_backbone is not None:
            ps += self.part_backbone.params()
        return ps + self.classifier.params()

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def _head(self, feats, part_feats, maps):
        """Descriptor blocks plus the cache needed for the backward pass."""
        global_vec = feats.mean(axis=(2, 3))
        if not self.agg.uses_maps:
            return global_vec, None
        if maps is None:
            raise DimensionError(f"variant {self.agg.variant} needs parsing maps")
        if maps.shape[:2] != (feats.shape[0], 5):
            raise DimensionError(f"expected N x 5 x h x w maps, got {maps.shape}")
        mh, mw = maps.shape[2:]
        aligned = align_activations(part_feats, mh, mw)
        pooled = weighted_pool_batch(aligned, maps)
        fg = pooled[:, 0]
        parts = pooled[:, 1:5]
        arg = parts.argmax(axis=1)  # ties go to the first part in head->shoes order
        fused = np.take_along_axis(parts, arg[:, None], axis=1)[:, 0]
        blocks = {"global": global_vec, "foreground": fg, "fused": fused}
        desc = np.concatenate([blocks[b] for b, _ in self.agg.layout(feats.shape[1])], axis=1)
        return desc, (part_feats.shape, aligned, maps, arg)

    def _head_backward(self, g_desc, feat_shape, cache):
        c = feat_shape[1]
        h, w = feat_shape[2:]
        names = [b for b, _ in self.agg.layout(c)]
        g = dict(zip(names, np.split(g_desc, len(names), axis=1)))
        g_global = np.broadcast_to(g["global"][:, :, None, None] / (h * w), feat_shape).copy()
        if cache is None:
            return g_global, None
        part_shape, aligned, maps, arg = cache
        n = g_desc.shape[0]
        g_pooled = np.zeros((n, 5, c))
        if "foreground" in g:
            g_pooled[:, 0] = g["foreground"]
        np.put_along_axis(g_pooled[:, 1:5], arg[:, None], g["fused"][:, None], axis=1)
        g_aligned, _ = weighted_pool_backward(g_pooled, aligned, maps)
        g_parts = bilinear_resize_backward(g_aligned, *part_shape[2:])
        return g_global, g_parts

    def descriptors(self, images, maps=None) -> np.ndarray:
        feats = self.backbone(images)
        part_feats = feats if self.part_backbone is None else self.part_backbone(images)
        desc, _ = self._head(feats, part_feats, maps)
        return desc

    def logits(self, images, maps=None) -> np.ndarray:
        return self.classifier(self.descriptors(images, maps))

    def loss_and_grad(self, images, labels, maps=None):
        """Softmax cross-entropy over identities; accumulates parameter gradients.

        Returns ``(loss, accuracy)``.
        """
        tape = Tape()
        feats = self.backbone(images, tape)
        part_tape = None
        if self.part_backbone is None:
            part_feats = feats
        else:
            part_tape = Tape()
            part_feats = self.part_backbone(images, part_tape)
        desc, cache = self._head(feats, part_feats, maps)
        cls_tape = Tape()
        logits = self.classifier(desc, cls_tape)
        loss, g = softmax_cross_entropy(logits, labels)
        g_desc = cls_tape.backward(g)
        g_global, g_parts = self._head_backward(g_desc, feats.shape, cache)
        if g_parts is None:
            tape.backward(g_global)
        elif part_tape is None:
            tape.backward(g_global + g_parts)
        else:
            tape.backward(g_global)
            part_tape.backward(g_parts)
        acc = float(np.mean(logits.argmax(axis=1) == labels))
        return loss, acc
