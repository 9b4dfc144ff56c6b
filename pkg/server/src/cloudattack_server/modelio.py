"""Model bundle I/O and dataset loading.

A bundle is a single torch file holding the backbone's state dict plus a
manifest (labels, architecture, input size). Labels follow the lexicographic
directory convention shared with the attack harness, so the label indices a
campaign derives from a dataset tree match the server's.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torchvision import models as tv_models

SUPPORTED_ARCHS = ("resnet18",)


@dataclass
class ModelBundle:
    model: torch.nn.Module
    labels: list
    arch: str
    input_size: int


def build_backbone(arch: str, num_classes: int, pretrained: bool = False):
    if arch not in SUPPORTED_ARCHS:
        raise ValueError(f"unsupported arch {arch!r}; supported: {SUPPORTED_ARCHS}")
    weights = None
    if pretrained:
        try:
            weights = tv_models.ResNet18_Weights.DEFAULT
        except Exception:
            weights = None
    try:
        model = tv_models.resnet18(weights=weights)
    except Exception as exc:
        # pretrained weights need a download; fall back to random init
        print(f"warning: pretrained weights unavailable ({exc}); using random init")
        model = tv_models.resnet18(weights=None)
    model.fc = torch.nn.Linear(model.fc.in_features, num_classes)
    return model


def save_bundle(bundle: ModelBundle, path) -> None:
    torch.save({
        "state_dict": bundle.model.state_dict(),
        "labels": list(bundle.labels),
        "arch": bundle.arch,
        "input_size": bundle.input_size,
    }, path)


def load_bundle(path) -> ModelBundle:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    labels = [str(s) for s in blob["labels"]]
    model = build_backbone(blob["arch"], len(labels), pretrained=False)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return ModelBundle(model=model, labels=labels, arch=blob["arch"],
                       input_size=int(blob["input_size"]))


def load_dataset_dir(path):
    """(image paths, labels, class names) from a class-per-subdirectory tree."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{path} has no class subdirectories")
    paths, labels = [], []
    for idx, d in enumerate(class_dirs):
        for png in sorted(d.glob("*.png")):
            paths.append(png)
            labels.append(idx)
    if not paths:
        raise ValueError(f"{path} has no PNG images")
    return paths, labels, [d.name for d in class_dirs]
