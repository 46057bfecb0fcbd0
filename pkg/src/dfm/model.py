"""Backbone + T flow blocks + task head, and the per-block local loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import make_backbone
from .detection import DetectionFlowBlock, DetectionHead, DetectionLossWeights
from .flow import (
    ClassEmbeddings,
    FlowBlock,
    PathSample,
    anchor_loss_classification,
    class_logits,
    combined_loss,
    flow_loss,
    make_class_target,
    sample_path,
    transported_estimate,
)
from .nn import Linear, Module
from .tensor import Tensor, linear, softmax_cross_entropy


class ClassificationHead(Module):
    task = "classification"
    flow_weight = 1.0

    def __init__(self, n_classes: int, d: int, rng: np.random.Generator):
        self.emb = ClassEmbeddings(n_classes, d, rng)
        self.n_classes = n_classes

    def targets(self, labels) -> Tensor:
        return make_class_target(labels, self.emb)

    def couple(self, z0, z1: Tensor) -> Tensor:
        return z1

    def anchor_loss(self, z1_tilde: Tensor, labels) -> Tensor:
        return anchor_loss_classification(z1_tilde, labels, self.emb)

    def logits(self, z) -> np.ndarray:
        z = z if isinstance(z, Tensor) else Tensor(z)
        return class_logits(z, self.emb).data

    def decode(self, z) -> np.ndarray:
        """argmax of W_cls^T z; np.argmax keeps the lowest class id on ties."""
        return np.argmax(self.logits(z), axis=-1)


class FlowModel(Module):
    """Shared backbone, T independent flow blocks and a task head."""

    def __init__(self, backbone: Module, blocks: list, head: Module, probe: Linear | None = None):
        self.backbone = backbone
        self.blocks = list(blocks)
        self.head = head
        self.probe = probe

    @property
    def T(self) -> int:
        return len(self.blocks)

    @property
    def task(self) -> str:
        return self.head.task

    def features(self, x) -> Tensor:
        return self.backbone(x)

    def block_params(self, k: int) -> list:
        return self.blocks[k].parameters()

    def shared_params(self) -> list:
        return self.backbone.parameters() + self.head.parameters()


def build_model(task: str, input_shape, n_classes: int, rng: np.random.Generator, *, T: int = 3, d: int = 64,
                hidden: int | None = None, backbone: str = "mlp", backbone_widths=(256, 256), M: int = 8,
                probe: bool = False, det_weights: DetectionLossWeights | None = None,
                coupling: str = "canonical") -> FlowModel:
    bb = make_backbone(backbone, input_shape, d, rng, backbone_widths)
    if task == "classification":
        blocks = [FlowBlock(d, rng, hidden, k) for k in range(T)]
        head = ClassificationHead(n_classes, d, rng)
    elif task == "detection":
        blocks = [DetectionFlowBlock(d, rng, hidden, k) for k in range(T)]
        head = DetectionHead(n_classes, d, M, rng, det_weights or DetectionLossWeights(), coupling)
    else:
        raise ValueError(f"unknown task {task!r}")
    return FlowModel(bb, blocks, head, Linear(d, n_classes, rng) if probe else None)


@dataclass
class BlockLoss:
    total: Tensor
    flow: Tensor
    anchor: Tensor


def block_loss(model: FlowModel, k: int, features: Tensor, targets, *, rng: np.random.Generator | None = None,
               z0=None, t=None, lam: float | None = None, path: PathSample | None = None) -> BlockLoss:
    """Local loss of block k: flow MSE plus lambda * anchor on the transported estimate.

    A precomputed ``path`` lets several blocks share one target/path graph.
    """
    if path is None:
        path = sample_path(model.head.targets(targets), rng, t=t, z0=z0, couple=model.head.couple)
    v_hat = model.blocks[k](path.zt, features, path.t)
    fl = flow_loss(v_hat, path.v_star)
    an = model.head.anchor_loss(transported_estimate(path.zt, v_hat, path.t), targets)
    return BlockLoss(combined_loss(fl, an, lam, flow_weight=model.head.flow_weight), fl, an)


class EndToEndStack(Module):
    """Depth-T stack of flow blocks trained by one cross-entropy through all of them.

    h_0 = f(x), h_k = block_k(h_{k-1}, f(x), t=0), logits = h_T @ W_cls.
    """

    def __init__(self, backbone: Module, blocks: list, n_classes: int, d: int, rng: np.random.Generator):
        self.backbone = backbone
        self.blocks = list(blocks)
        self.emb = ClassEmbeddings(n_classes, d, rng)

    @property
    def T(self) -> int:
        return len(self.blocks)

    def forward(self, x) -> Tensor:
        f = self.backbone(x)
        h = f
        t0 = np.zeros(f.shape[0])
        for block in self.blocks:
            h = block(h, f, t0)
        return linear(h, self.emb.W_cls)

    def loss(self, x, labels) -> Tensor:
        return softmax_cross_entropy(self.forward(x), labels)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x).data, axis=-1)


def build_baseline(input_shape, n_classes: int, rng: np.random.Generator, *, T: int = 3, d: int = 64,
                   hidden: int | None = None, backbone: str = "mlp", backbone_widths=(256, 256)) -> EndToEndStack:
    bb = make_backbone(backbone, input_shape, d, rng, backbone_widths)
    return EndToEndStack(bb, [FlowBlock(d, rng, hidden, k) for k in range(T)], n_classes, d, rng)
