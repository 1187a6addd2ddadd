"""Classification metrics, trial aggregation and Grad-CAM heatmaps."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .augment import AugmentPolicy, eval_transform
from .data import Split, batch_iterator
from .errors import InvalidInput, PersistenceError
from .model import FKTModel

HEADLINE = ("accuracy", "precision", "recall")


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    weighted_precision: float
    weighted_recall: float
    per_class_precision: list
    per_class_recall: list
    confusion: list  # rows = true class, cols = predicted class
    # classes with no true samples (recall undefined) or no predictions (precision undefined)
    zero_support: list = field(default_factory=list)
    zero_predicted: list = field(default_factory=list)

    def headline(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.macro_precision, "recall": self.macro_recall}

    def to_dict(self) -> dict:
        return {**self.headline(), "weighted_precision": self.weighted_precision,
                "weighted_recall": self.weighted_recall, "per_class_precision": self.per_class_precision,
                "per_class_recall": self.per_class_recall, "confusion": self.confusion,
                "zero_support": self.zero_support, "zero_predicted": self.zero_predicted}


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise InvalidInput("predictions and labels differ in length")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes or preds.min() < 0 or preds.max() >= num_classes):
        raise InvalidInput(f"class ids must lie in [0, {num_classes})")
    return np.bincount(labels * num_classes + preds, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def metrics_from_confusion(confusion: np.ndarray) -> MetricsReport:
    """Accuracy plus macro/weighted precision and recall.

    Undefined per-class ratios (0/0) count as 0 and the class is listed in
    ``zero_support`` / ``zero_predicted``.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    total = confusion.sum()
    if total == 0:
        raise InvalidInput("empty confusion matrix")
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    weights = support / total
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        weighted_precision=float((precision * weights).sum()),
        weighted_recall=float((recall * weights).sum()),
        per_class_precision=precision.tolist(),
        per_class_recall=recall.tolist(),
        confusion=confusion.tolist(),
        zero_support=np.flatnonzero(support == 0).tolist(),
        zero_predicted=np.flatnonzero(predicted == 0).tolist(),
    )


@torch.no_grad()
def predict(model: FKTModel, split: Split, policy: AugmentPolicy, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    preds = []
    try:
        for batch in batch_iterator(split, batch_size):
            preds.append(model(eval_transform(batch, policy).pixels).argmax(dim=1))
    finally:
        model.train(was_training)
    return torch.cat(preds).numpy()


def evaluate(model: FKTModel, split: Split, policy: AugmentPolicy, batch_size: int = 256) -> MetricsReport:
    """Argmax predictions on clean (eval-transformed) images, summarised."""
    if len(split) == 0:
        raise InvalidInput("empty test split")
    preds = predict(model, split, policy, batch_size)
    return metrics_from_confusion(confusion_matrix(preds, split.labels.numpy(), model.cfg.num_classes))


def aggregate_trials(reports: list) -> dict:
    """Mean and population standard deviation of the headline metrics."""
    if not reports:
        raise InvalidInput("no trials to aggregate")
    values = {k: np.array([r.headline()[k] for r in reports]) for k in HEADLINE}
    return {"mean": {k: float(v.mean()) for k, v in values.items()},
            "std": {k: float(v.std(ddof=0)) for k, v in values.items()}}


# ---------------------------------------------------------------- Grad-CAM

@dataclass
class CamMap:
    heatmap: torch.Tensor  # H x W in [0, 1]
    class_id: int
    sample_id: Optional[int] = None
    degenerate: bool = False
    raw_max: float = 0.0  # maximum of the map before normalisation


def grad_cam_raw(model: FKTModel, image: torch.Tensor, target_class: int, logit_scale: float = 1.0) -> torch.Tensor:
    """Rectified, gradient-weighted sum of last-block activations (feature-map resolution)."""
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            maps = model.encoder.feature_maps(image)
            pooled = torch.flatten(F.adaptive_avg_pool2d(maps, 1), 1)
            logit = model.classifier(pooled)[0, target_class] * logit_scale
            grad, = torch.autograd.grad(logit, maps)
        weights = grad.mean(dim=(2, 3), keepdim=True)
        return torch.relu((weights * maps.detach()).sum(dim=1))[0]
    finally:
        model.train(was_training)


def grad_cam(model: FKTModel, image, target_class: int, sample_id: Optional[int] = None,
             logit_scale: float = 1.0) -> CamMap:
    """Grad-CAM heatmap for one preprocessed image, upsampled to the input size.

    ``image`` is a 1 x 3 x H x W tensor or a single-image ImageBatch.
    """
    x = image.pixels if hasattr(image, "pixels") else image
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[0] != 1:
        raise InvalidInput(f"expected a single image, got shape {tuple(x.shape)}")
    if not 0 <= target_class < model.cfg.num_classes:
        raise InvalidInput(f"target class {target_class} outside [0, {model.cfg.num_classes})")
    raw = grad_cam_raw(model, x, target_class, logit_scale)
    up = F.interpolate(raw[None, None], size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    up = up.clamp_min(0.0)
    peak = float(up.max())
    if peak <= 0.0:
        return CamMap(torch.zeros_like(up), target_class, sample_id, degenerate=True, raw_max=0.0)
    return CamMap(up / peak, target_class, sample_id, raw_max=float(raw.max()))


# ---------------------------------------------------------------- overlays

CAM_COLORMAP = "jet"
CAM_ALPHA = 0.5


def colorize(heatmap: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] through the fixed 256-entry jet table to RGB floats."""
    lut = colormaps[CAM_COLORMAP].resampled(256)(np.arange(256))[:, :3]
    idx = np.clip(np.round(np.asarray(heatmap) * 255), 0, 255).astype(np.int64)
    return lut[idx]


def overlay_pixels(cam: CamMap, image) -> np.ndarray:
    """uint8 H x W x 3 blend: ``0.5 * image + 0.5 * jet(heatmap)``.

    ``image`` holds un-normalised pixels in [0, 1], shaped 3 x H x W or H x W x 3.
    """
    img = np.asarray(image.detach().cpu() if torch.is_tensor(image) else image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    heat = cam.heatmap.detach().cpu().numpy() if torch.is_tensor(cam.heatmap) else np.asarray(cam.heatmap)
    if img.shape[:2] != heat.shape:
        raise InvalidInput(f"heatmap {heat.shape} does not match image {img.shape[:2]}")
    blend = (1 - CAM_ALPHA) * img + CAM_ALPHA * colorize(heat)
    return np.clip(np.round(blend * 255), 0, 255).astype(np.uint8)


def render_cam_overlay(cam: CamMap, image, path) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    Image.fromarray(overlay_pixels(cam, image), mode="RGB").save(buf, format="PNG")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buf.getvalue())
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------- serialisation

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def metrics_document(regime: str, dataset: str, reports: list, epochs_total: int) -> dict:
    """metrics.json payload: per-trial values plus mean/std of the headline metrics."""
    agg = aggregate_trials(reports)
    return {"regime": regime, "dataset": dataset, "trials": [r.to_dict() for r in reports],
            "mean": agg["mean"], "std": agg["std"], "epochs_total": epochs_total,
            "std_estimator": "population"}
