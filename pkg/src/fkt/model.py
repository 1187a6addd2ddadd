"""Shared encoder with a contrastive projector and a classification head."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .augment import ViewPair
from .errors import CorruptCheckpoint, IncompatibleCheckpoint, InvalidConfig, InvalidInput, PersistenceError

BACKBONE_DIMS = {"resnet50": 2048, "resnet18": 512}
CHECKPOINT_FORMAT = "fkt-checkpoint/1"


@dataclass
class ModelConfig:
    backbone: str = "small_cnn"
    encoder_dim: Optional[int] = None
    projector_hidden_dim: Optional[int] = None
    projector_out_dim: int = 128
    num_classes: int = 10
    small_input_stem: bool = True

    def __post_init__(self):
        if self.backbone not in (*BACKBONE_DIMS, "small_cnn"):
            raise InvalidConfig("model.backbone", f"unknown backbone {self.backbone!r}")
        fixed = BACKBONE_DIMS.get(self.backbone)
        if self.encoder_dim is None:
            self.encoder_dim = fixed or 64
        elif fixed is not None and self.encoder_dim != fixed:
            raise InvalidConfig("model.encoder_dim", f"{self.backbone} produces {fixed}-d features, got {self.encoder_dim}")
        if self.encoder_dim < 1:
            raise InvalidConfig("model.encoder_dim", "must be positive")
        if self.projector_hidden_dim is None:
            self.projector_hidden_dim = self.encoder_dim
        if self.projector_hidden_dim < 1:
            raise InvalidConfig("model.projector_hidden_dim", "must be positive")
        if self.projector_out_dim < 2:
            raise InvalidConfig("model.projector_out_dim", "must be >= 2")
        if self.num_classes < 2:
            raise InvalidConfig("model.num_classes", "must be >= 2")


@dataclass
class EmbeddingBatch:
    features_a: torch.Tensor
    features_b: torch.Tensor
    projections_a: torch.Tensor
    projections_b: torch.Tensor
    logits_a: torch.Tensor
    logits_b: torch.Tensor


# ---------------------------------------------------------------- backbones

class SmallCNN(nn.Module):
    """Four conv-BN-ReLU blocks; two 2x max-pools keep a usable CAM resolution."""

    def __init__(self, out_dim: int):
        super().__init__()
        widths = [3, 32, 64, 128, out_dim]
        blocks = []
        for i in range(4):
            layers = [nn.Conv2d(widths[i], widths[i + 1], 3, padding=1, bias=False),
                      nn.BatchNorm2d(widths[i + 1]), nn.ReLU(inplace=True)]
            if i < 2:
                layers.append(nn.MaxPool2d(2))
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.Sequential(*blocks)

    def feature_maps(self, x):
        return self.blocks(x)


class ResNetTrunk(nn.Module):
    """torchvision ResNet without its pooling and fc layers."""

    def __init__(self, name: str, small_input_stem: bool):
        super().__init__()
        net = getattr(torchvision.models, name)(weights=None)
        if small_input_stem:
            net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
            net.maxpool = nn.Identity()
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def feature_maps(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.backbone == "small_cnn":
            self.trunk = SmallCNN(cfg.encoder_dim)
        else:
            self.trunk = ResNetTrunk(cfg.backbone, cfg.small_input_stem)

    def feature_maps(self, x):
        """Activations of the last convolutional block (used for Grad-CAM)."""
        return self.trunk.feature_maps(x)

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.feature_maps(x), 1), 1)


def _projector(cfg: ModelConfig) -> nn.Module:
    return nn.Sequential(nn.Linear(cfg.encoder_dim, cfg.projector_hidden_dim), nn.ReLU(inplace=True),
                         nn.Linear(cfg.projector_hidden_dim, cfg.projector_out_dim))


class FKTModel(nn.Module):
    """Encoder f, projector g and linear classifier h on the encoder features."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(cfg)
            self.projector = _projector(cfg)
            self.classifier = nn.Linear(cfg.encoder_dim, cfg.num_classes)
        self.reset_heads("init")

    def reset_heads(self, stream: str):
        """Re-initialise projector and classifier from a seed derived from (seed, stream)."""
        digest = hashlib.sha256(f"{self.seed}:{stream}".encode()).digest()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int.from_bytes(digest[:8], "little"))
            for module in (*self.projector.modules(), self.classifier):
                if isinstance(module, nn.Linear):
                    module.reset_parameters()

    def forward(self, x):
        return self.classifier(self.encoder(x))


def build_model(cfg: ModelConfig, rng_seed: int = 0) -> FKTModel:
    if not isinstance(cfg, ModelConfig):
        raise InvalidConfig("model", f"expected ModelConfig, got {type(cfg).__name__}")
    return FKTModel(cfg, rng_seed)


def _check_images(model: FKTModel, x: torch.Tensor):
    if x.ndim != 4 or x.shape[1] != 3:
        raise InvalidInput(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise InvalidInput("empty input batch")


def encode_views(model: FKTModel, pair: ViewPair) -> tuple:
    """Run both views through the shared encoder in one pass."""
    if pair.view_a.shape != pair.view_b.shape:
        raise InvalidInput(f"view shapes differ: {tuple(pair.view_a.shape)} vs {tuple(pair.view_b.shape)}")
    _check_images(model, pair.view_a)
    n = pair.view_a.shape[0]
    features = model.encoder(torch.cat([pair.view_a, pair.view_b], dim=0))
    return features[:n], features[n:]


def forward_joint(model: FKTModel, pair: ViewPair) -> EmbeddingBatch:
    """Features, projections and logits for both views, with the graph intact."""
    fa, fb = encode_views(model, pair)
    pa, pb = model.projector(torch.cat([fa, fb])).chunk(2)
    la, lb = model.classifier(torch.cat([fa, fb])).chunk(2)
    return EmbeddingBatch(fa, fb, pa, pb, la, lb)


def forward_classify(model: FKTModel, images) -> torch.Tensor:
    x = images.pixels if hasattr(images, "pixels") else images
    _check_images(model, x)
    return model(x)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    header: dict
    tensors: dict = field(repr=False)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def export_parameters(model: FKTModel, **header_extra) -> Checkpoint:
    """Snapshot every parameter and buffer with a header describing the architecture."""
    model_cfg = asdict(model.cfg)
    header = {"format": CHECKPOINT_FORMAT, **model_cfg, "seed": model.seed,
              "model_config_hash": config_hash(model_cfg), **header_extra}
    tensors = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(header, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"header": ckpt.header, "tensors": ckpt.tensors}, path)
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "header" not in blob or "tensors" not in blob:
        raise CorruptCheckpoint(f"{path} is not an fkt checkpoint")
    if blob["header"].get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"{path}: unsupported format {blob['header'].get('format')!r}")
    return Checkpoint(blob["header"], blob["tensors"])


def _check_compatible(model: FKTModel, header: dict, keys=("backbone", "encoder_dim", "small_input_stem")):
    for key in keys:
        if header.get(key) != getattr(model.cfg, key):
            raise IncompatibleCheckpoint(
                f"checkpoint {key}={header.get(key)!r} does not match model {key}={getattr(model.cfg, key)!r}")


def _copy_state(model: FKTModel, tensors: dict, prefix: str):
    own = {k: v for k, v in model.state_dict().items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(tensors))
    if missing:
        raise CorruptCheckpoint(f"checkpoint is missing {len(missing)} tensors, e.g. {missing[:3]}")
    with torch.no_grad():
        for k, v in own.items():
            src = tensors[k]
            if src.shape != v.shape:
                raise IncompatibleCheckpoint(f"{k}: shape {tuple(src.shape)} vs model {tuple(v.shape)}")
            v.copy_(src)


def load_encoder(model: FKTModel, ckpt: Checkpoint) -> FKTModel:
    """Copy encoder weights only; projector and classifier start from fresh weights."""
    _check_compatible(model, ckpt.header)
    _copy_state(model, ckpt.tensors, "encoder.")
    model.reset_heads("downstream")
    return model


def load_full(model: FKTModel, ckpt: Checkpoint) -> FKTModel:
    """Restore every tensor, heads included (for evaluation and CAM)."""
    _check_compatible(model, ckpt.header, ("backbone", "encoder_dim", "small_input_stem",
                                           "projector_out_dim", "num_classes"))
    _copy_state(model, ckpt.tensors, "")
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> FKTModel:
    keys = ("backbone", "encoder_dim", "projector_hidden_dim", "projector_out_dim", "num_classes", "small_input_stem")
    try:
        cfg = ModelConfig(**{k: ckpt.header[k] for k in keys})
    except KeyError as exc:
        raise CorruptCheckpoint(f"checkpoint header lacks {exc.args[0]!r}") from None
    return load_full(build_model(cfg, ckpt.header.get("seed", 0)), ckpt)
