"""Fine-tuning the backbone on a class-per-subdirectory dataset.

Defaults follow the standard transfer recipe: SGD momentum 0.9, weight decay
5e-4, lr 1e-4, batch 64, random horizontal/vertical flips, 80/20 split.
Starting from random init (the only option without downloadable pretrained
weights) usually wants a larger lr; pass one explicitly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image as PILImage
from torch.utils.data import DataLoader, Dataset

from .modelio import ModelBundle, build_backbone, load_dataset_dir, save_bundle


@dataclass
class TrainSettings:
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    input_size: int = 224
    arch: str = "resnet18"
    pretrained: bool = False
    seed: int = 0
    holdout_fraction: float = 0.2


class _FolderDataset(Dataset):
    def __init__(self, paths, labels, input_size, augment, rng_seed):
        self.paths = paths
        self.labels = labels
        self.input_size = input_size
        self.augment = augment
        self.rng = np.random.default_rng(rng_seed)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, idx):
        with PILImage.open(self.paths[idx]) as pil:
            pil = pil.convert("RGB")
            if pil.size != (self.input_size, self.input_size):
                pil = pil.resize((self.input_size, self.input_size), PILImage.BILINEAR)
            arr = np.asarray(pil, dtype=np.float32) / 255.0
        if self.augment:
            if self.rng.random() < 0.5:
                arr = arr[:, ::-1]
            if self.rng.random() < 0.5:
                arr = arr[::-1, :]
        tensor = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)
        return tensor, self.labels[idx]


def finetune(dataset_dir, out_path, settings: TrainSettings | None = None) -> dict:
    """Train the backbone and write the weights bundle; returns a summary."""
    settings = settings or TrainSettings()
    if torch.cuda.is_available():
        device = torch.device("cuda")
    else:
        device = torch.device("cpu")
        print("warning: CUDA unavailable, training on CPU")
    torch.manual_seed(settings.seed)

    paths, labels, class_names = load_dataset_dir(dataset_dir)
    if len(paths) < 2 * len(class_names):
        raise ValueError(f"dataset too small: {len(paths)} images for "
                         f"{len(class_names)} classes")
    rng = np.random.default_rng(settings.seed)
    order = rng.permutation(len(paths))
    n_holdout = max(1, int(len(paths) * settings.holdout_fraction))
    val_idx, train_idx = order[:n_holdout], order[n_holdout:]

    def subset(indices, augment):
        return _FolderDataset([paths[i] for i in indices],
                              [labels[i] for i in indices],
                              settings.input_size, augment, settings.seed)

    train_loader = DataLoader(subset(train_idx, True),
                              batch_size=settings.batch_size, shuffle=True,
                              generator=torch.Generator().manual_seed(settings.seed))
    val_loader = DataLoader(subset(val_idx, False), batch_size=settings.batch_size)

    model = build_backbone(settings.arch, len(class_names),
                           pretrained=settings.pretrained).to(device)
    optimizer = torch.optim.SGD(model.parameters(), lr=settings.lr,
                                momentum=settings.momentum,
                                weight_decay=settings.weight_decay)
    criterion = torch.nn.CrossEntropyLoss()

    started = time.time()
    for epoch in range(settings.epochs):
        model.train()
        total, correct, loss_sum = 0, 0, 0.0
        for images, targets in train_loader:
            images, targets = images.to(device), targets.to(device)
            optimizer.zero_grad()
            logits = model(images)
            loss = criterion(logits, targets)
            loss.backward()
            optimizer.step()
            loss_sum += float(loss) * len(targets)
            correct += int((logits.argmax(1) == targets).sum())
            total += len(targets)
        print(f"epoch {epoch + 1}/{settings.epochs}: "
              f"loss={loss_sum / total:.4f} train_acc={correct / total:.3f}")

    model.eval()
    val_total, val_correct = 0, 0
    with torch.no_grad():
        for images, targets in val_loader:
            logits = model(images.to(device))
            val_correct += int((logits.argmax(1).cpu() == targets).sum())
            val_total += len(targets)
    val_acc = val_correct / val_total
    print(f"held-out accuracy: {val_acc:.3f} ({val_correct}/{val_total})")

    bundle = ModelBundle(model=model.cpu(), labels=class_names,
                         arch=settings.arch, input_size=settings.input_size)
    save_bundle(bundle, out_path)
    return {
        "classes": class_names,
        "holdout_accuracy": val_acc,
        "train_images": len(train_idx),
        "holdout_images": len(val_idx),
        "seconds": time.time() - started,
    }
