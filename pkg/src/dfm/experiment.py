"""Config-driven glue: data loading, model construction, training and evaluation."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig, substream, substream_seed
from .datasets import find_mnist, load_mnist_idx, make_blobs, make_shapes, standardize
from .detection import map_at_50, nms_and_filter
from .inference import accuracy, classify, linear_probe_train_eval, multi_step, predict_latent
from .model import FlowModel, build_model
from .trainer import TrainResult, train

DATA_DIR_ENV = "DFM_DATA_DIR"


@dataclass
class DataSplit:
    X_train: np.ndarray
    y_train: object
    X_test: np.ndarray
    y_test: object
    input_shape: tuple
    n_classes: int
    task: str


def data_dir(cfg: TrainConfig) -> str:
    return cfg.data_dir or os.environ.get(DATA_DIR_ENV, "")


def load_data(cfg: TrainConfig) -> DataSplit:
    seed = substream_seed(cfg.seed, "data")
    if cfg.dataset == "blobs":
        X, y = make_blobs(cfg.n_classes, cfg.n_per_class, cfg.dim, cfg.spread, seed)
        cut = (2 * len(X)) // 3
        return DataSplit(X[:cut], y[:cut], X[cut:], y[cut:], (cfg.dim,), cfg.n_classes, "classification")
    if cfg.dataset == "mnist":
        root = data_dir(cfg)
        if not root:
            raise FileNotFoundError(f"MNIST needs data.data_dir or ${DATA_DIR_ENV}")
        Xtr, ytr = load_mnist_idx(*find_mnist(root, "train"), limit=cfg.n_train)
        Xte, yte = load_mnist_idx(*find_mnist(root, "test"), limit=cfg.n_test)
        return DataSplit(standardize(Xtr, "mnist"), ytr, standardize(Xte, "mnist"), yte, (1, 28, 28), 10,
                         "classification")
    if cfg.dataset == "shapes":
        scenes = make_shapes(cfg.n_train + cfg.n_test, cfg.max_objects, seed=seed, M=cfg.M)
        X = np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 1, 64, 64))
        Y = [s.targets for s in scenes]
        n = cfg.n_train
        return DataSplit(X[:n], Y[:n], X[n:], Y[n:], (1, 64, 64), 3, "detection")
    raise ValueError(f"unknown dataset {cfg.dataset!r}")


def make_model(cfg: TrainConfig, data: DataSplit) -> FlowModel:
    return build_model(data.task, data.input_shape, data.n_classes, substream(cfg.seed, "init"), T=cfg.T,
                       d=cfg.d, hidden=cfg.hidden_width, backbone=cfg.backbone,
                       backbone_widths=cfg.backbone_widths, M=cfg.M, coupling=cfg.coupling,
                       probe=cfg.probe_enabled and data.task == "classification")


def run_training(cfg: TrainConfig, data: DataSplit, model: FlowModel | None = None) -> TrainResult:
    model = model or make_model(cfg, data)
    return train(model, data.X_train, data.y_train, cfg,
                 path_rng=substream(cfg.seed, "path"), data_rng=substream(cfg.seed, "data-order"))


def detections_for(model: FlowModel, z) -> list:
    logits, boxes = model.head.decode(z)
    return [nms_and_filter(logits[i], boxes[i]) for i in range(len(logits))]


def evaluate(model: FlowModel, cfg: TrainConfig, data: DataSplit, modes=None) -> dict:
    """Test metric per inference mode: accuracy for classification, mAP@0.5 for detection.

    Every mode starts from the same inference-noise stream, so modes are
    compared on identical z0 draws.
    """
    modes = modes or (("probe", "single_step", "ensemble", "multi_step") if data.task == "classification"
                      else ("single_step", "ensemble", "multi_step"))
    out = {}
    for mode in modes:
        rng = substream(cfg.seed, "inference")
        if mode == "probe":
            if data.task != "classification":
                raise ValueError("the linear probe applies to classification only")
            out[mode] = linear_probe_train_eval(model.backbone, data.X_train, data.y_train, data.X_test,
                                                data.y_test, data.n_classes, rng=rng)
        elif data.task == "classification":
            out[mode] = accuracy(classify(model, data.X_test, mode, rng, cfg.single_block, cfg.votes), data.y_test)
        else:
            z = predict_latent(model, data.X_test, mode, rng, cfg.single_block)
            out[mode] = map_at_50(detections_for(model, z), data.y_test)[0]
    return out


def trajectory_metric(model: FlowModel, cfg: TrainConfig, data: DataSplit) -> list:
    """Task metric after each multi-step Euler step on the test split."""
    rng = substream(cfg.seed, "inference")
    f = model.features(data.X_test)
    shape = (len(data.X_test), model.head.emb.d) if data.task == "classification" else (
        len(data.X_test), model.head.M, model.head.emb.d)
    traj = multi_step(model.blocks, f, rng.standard_normal(shape))
    if data.task == "classification":
        return [accuracy(model.head.decode(z), data.y_test) for z in traj]
    return [map_at_50(detections_for(model, z), data.y_test)[0] for z in traj]
