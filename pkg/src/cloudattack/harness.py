"""Campaign orchestration, ASR/AQ metrics, transfer and defense evaluation,
and report emission.

A campaign classifies every image, skips the ones the model already gets
wrong, attacks the rest, and writes four artifacts into the output
directory: report.json (aggregates + config snapshot), records.csv (one row
per image), confusion.csv (true label x post-attack prediction over attacked
images), and the clean/adversarial PNGs with per-attack JSON records.
Records CSVs contain no timestamps, so sequential re-runs with the same seed
are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models as models_mod
from .attack import AttackConfig, attack
from .imaging import Image, jpeg_roundtrip, load_png, save_png
from .models import RemoteModel, ToyClassifier, synth_dataset
from .pggn import GeneratorWeights

MSE_CONVENTION = "pixels*channels"  # divisor convention used by the MSE loss


@dataclass
class ImageRecord:
    image_id: str
    true_label: int
    pre_attack_prediction: int
    skipped: bool
    success: bool
    queries: int
    post_attack_prediction: int
    clean_path: str = ""
    adv_path: str = ""


@dataclass
class CampaignReport:
    config: dict
    class_names: list
    records: list
    asr: float | None
    aq: float | None
    confusion: np.ndarray
    wall_clock: dict


def asr(records) -> float | None:
    """Attack success rate in percent: 100 * n_adv / (n_total - n_misclassified).

    Pre-misclassified images need no adversarial example and leave the
    denominator; returns None when nothing remains to attack.
    """
    n_total = len(records)
    n_mis = sum(1 for r in records if r.skipped)
    if n_total - n_mis == 0:
        return None
    n_adv = sum(1 for r in records if r.success)
    return 100.0 * n_adv / (n_total - n_mis)


def aq(records) -> float | None:
    """Average queries over successful attacks only; None without successes."""
    wins = [r.queries for r in records if r.success]
    if not wins:
        return None
    return sum(wins) / len(wins)


def confusion_matrix(records, n_classes: int) -> np.ndarray:
    """true label x post-attack prediction counts over attacked images."""
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    for r in records:
        if not r.skipped:
            mat[r.true_label, r.post_attack_prediction] += 1
    return mat


# ---------------------------------------------------------------------------
# Dataset / model resolution


def load_dataset_dir(path):
    """Directory of labeled PNGs, one subdirectory per class.

    Class names sorted lexicographically define the label indices, matching
    common scene-classification corpus layouts.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{path} contains no class subdirectories")
    class_names = [d.name for d in class_dirs]
    entries = []
    for label, d in enumerate(class_dirs):
        for png in sorted(d.glob("*.png")):
            entries.append((f"{d.name}/{png.stem}", png, label))
    if not entries:
        raise ValueError(f"{path} contains no PNG images")
    return entries, class_names


def resolve_model(spec):
    """Model spec: 'toy:<weights path>' or 'remote:<url>' (or a model object)."""
    if hasattr(spec, "classify"):
        return spec
    if not isinstance(spec, str) or ":" not in spec:
        raise ValueError(f"model spec must be toy:<path> or remote:<url>, got {spec!r}")
    kind, _, arg = spec.partition(":")
    if kind == "toy":
        return ToyClassifier.load(arg)
    if kind == "remote":
        return RemoteModel(arg)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class CampaignConfig:
    dataset: str                      # directory path or "synthetic"
    model: str                        # toy:<path> | remote:<url>
    out_dir: str
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0
    limit: int | None = None          # randomly sample this many images (seeded)
    synthetic_images: int = 10        # per class, when dataset == "synthetic"
    synthetic_size: int = 64


def _config_snapshot(cfg: CampaignConfig) -> dict:
    snap = dataclasses.asdict(cfg)
    snap["mse_convention"] = MSE_CONVENTION
    return json.loads(json.dumps(snap, default=str))


def _sanitize(image_id: str) -> str:
    return image_id.replace("/", "__")


def _image_seed(campaign_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([campaign_seed, index]).generate_state(1)[0])


def run_campaign(cfg: CampaignConfig, model=None, gen: GeneratorWeights | None = None,
                 gen_path=None) -> CampaignReport:
    """Attack every correctly-classified image of the dataset and write reports.

    Deterministic for a fixed seed in the sequential mode implemented here:
    per-image attack seeds derive from (campaign seed, image index). Partial
    results are flushed if an attack raises.
    """
    if gen is None:
        if gen_path is None:
            raise ValueError("need generator weights (gen or gen_path)")
        from .pggn import load_weights
        gen = load_weights(gen_path)
        if not isinstance(gen, GeneratorWeights):
            raise ValueError(f"{gen_path} does not contain generator weights")
    model = resolve_model(model if model is not None else cfg.model)

    if cfg.dataset == "synthetic":
        ds = synth_dataset(cfg.synthetic_images, size=cfg.synthetic_size,
                           seed=_image_seed(cfg.seed, 0x5D))
        entries = [(f"{ds.class_names[lab]}/synthetic_{i:04d}", img, int(lab))
                   for i, (img, lab) in enumerate(zip(ds.images, ds.labels))]
        class_names = list(ds.class_names)
    else:
        disk_entries, class_names = load_dataset_dir(cfg.dataset)
        entries = [(eid, load_png(p), lab) for eid, p, lab in disk_entries]

    if model.label_count != len(class_names):
        raise ValueError(f"model has {model.label_count} labels but dataset has "
                         f"{len(class_names)} classes")

    indexed = list(enumerate(entries))
    if cfg.limit is not None and cfg.limit < len(indexed):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCA11]))
        chosen = sorted(rng.choice(len(indexed), size=cfg.limit, replace=False))
        indexed = [indexed[i] for i in chosen]

    out = Path(cfg.out_dir)
    for sub in ("adv", "clean", "attacks"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    records = []
    started = time.time()
    attack_seconds = []
    try:
        for index, (image_id, img, true_label) in indexed:
            pre_probs = model.classify(img)
            pre_pred = int(np.argmax(pre_probs))
            safe = _sanitize(image_id)
            if pre_pred != true_label:
                records.append(ImageRecord(
                    image_id=image_id, true_label=true_label,
                    pre_attack_prediction=pre_pred, skipped=True, success=False,
                    queries=0, post_attack_prediction=pre_pred))
                continue

            clean_rel = f"clean/{safe}.png"
            adv_rel = f"adv/{safe}.png"
            save_png(img, out / clean_rel)
            seed = _image_seed(cfg.seed, index)
            t0 = time.time()
            result = attack(img, true_label, model, gen,
                            dataclasses.replace(cfg.attack, seed=seed))
            attack_seconds.append(time.time() - t0)
            save_png(result.adv_image, out / adv_rel)
            with open(out / "attacks" / f"{safe}.json", "w") as fh:
                json.dump({
                    "image_id": image_id,
                    "true_label": true_label,
                    "predicted_label": result.predicted_label,
                    "success": result.success,
                    "queries": result.queries,
                    "generations": result.generations,
                    "l_f": result.l_f,
                    "l_adv": result.l_adv,
                    "l_mse": result.l_mse,
                    "seed": seed,
                    "params": [float(v) for v in result.params],
                }, fh, indent=1)
            records.append(ImageRecord(
                image_id=image_id, true_label=true_label,
                pre_attack_prediction=pre_pred, skipped=False,
                success=result.success, queries=result.queries,
                post_attack_prediction=result.predicted_label,
                clean_path=clean_rel, adv_path=adv_rel))
    finally:
        # partial results still land on disk if an attack aborts the loop
        report = CampaignReport(
            config=_config_snapshot(cfg),
            class_names=class_names,
            records=records,
            asr=asr(records) if records else None,
            aq=aq(records),
            confusion=confusion_matrix(records, len(class_names)),
            wall_clock={
                "total_seconds": time.time() - started,
                "attacks": len(attack_seconds),
                "mean_attack_seconds": (sum(attack_seconds) / len(attack_seconds))
                if attack_seconds else None,
            },
        )
        write_report(report, out)
    return report


# ---------------------------------------------------------------------------
# Report I/O


RECORD_FIELDS = ["image_id", "true_label", "pre_attack_prediction", "skipped",
                 "success", "queries", "post_attack_prediction",
                 "clean_path", "adv_path"]


def write_report(report: CampaignReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        writer.writeheader()
        for r in report.records:
            row = dataclasses.asdict(r)
            row["skipped"] = int(r.skipped)
            row["success"] = int(r.success)
            writer.writerow(row)
    with open(out / "confusion.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted"] + list(report.class_names))
        for name, row in zip(report.class_names, report.confusion):
            writer.writerow([name] + [int(v) for v in row])
    n_skipped = sum(1 for r in report.records if r.skipped)
    n_success = sum(1 for r in report.records if r.success)
    with open(out / "report.json", "w") as fh:
        json.dump({
            "config": report.config,
            "class_names": list(report.class_names),
            "metrics": {
                "asr": report.asr,
                "aq": report.aq,
                "n_total": len(report.records),
                "n_misclassified": n_skipped,
                "n_success": n_success,
                "n_failed": len(report.records) - n_skipped - n_success,
            },
            "confusion": [[int(v) for v in row] for row in report.confusion],
            "wall_clock": report.wall_clock,
        }, fh, indent=1)


def read_records(out_dir) -> list:
    path = Path(out_dir) / "records.csv"
    if not path.exists():
        raise FileNotFoundError(f"no records.csv under {out_dir}")
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(ImageRecord(
                image_id=row["image_id"],
                true_label=int(row["true_label"]),
                pre_attack_prediction=int(row["pre_attack_prediction"]),
                skipped=bool(int(row["skipped"])),
                success=bool(int(row["success"])),
                queries=int(row["queries"]),
                post_attack_prediction=int(row["post_attack_prediction"]),
                clean_path=row["clean_path"],
                adv_path=row["adv_path"]))
    return records


def verify_report(out_dir) -> list:
    """Recompute every aggregate from records.csv and diff against report.json.

    Returns a list of mismatch descriptions; empty means the report is
    self-consistent.
    """
    out = Path(out_dir)
    records = read_records(out)
    with open(out / "report.json") as fh:
        published = json.load(fh)
    problems = []

    def check(name, got, want):
        if got != want:
            problems.append(f"{name}: records say {got!r}, report says {want!r}")

    metrics = published["metrics"]
    n_skipped = sum(1 for r in records if r.skipped)
    n_success = sum(1 for r in records if r.success)
    check("asr", asr(records) if records else None, metrics["asr"])
    check("aq", aq(records), metrics["aq"])
    check("n_total", len(records), metrics["n_total"])
    check("n_misclassified", n_skipped, metrics["n_misclassified"])
    check("n_success", n_success, metrics["n_success"])
    check("n_failed", len(records) - n_skipped - n_success, metrics["n_failed"])
    mat = confusion_matrix(records, len(published["class_names"]))
    check("confusion", [[int(v) for v in row] for row in mat], published["confusion"])
    if len(records) != metrics["n_misclassified"] + metrics["n_success"] + metrics["n_failed"]:
        problems.append("totals identity n_total = n_mis + n_success + n_failed violated")
    return problems


# ---------------------------------------------------------------------------
# Transfer and defense evaluation (consume saved PNG artifacts, not floats)


@dataclass
class TransferResult:
    tasr: float | None
    transferred: int      # surrogate-successful examples considered
    clean_correct: int    # of those, target classifies the clean form correctly
    misclassified: int    # of the clean-correct ones, adv form fools the target


def transfer_eval(adv_dir, model) -> TransferResult:
    """Replay surrogate-successful adversarial PNGs against another model.

    Only examples the target classifies correctly in their clean form enter
    the denominator; only surrogate-successful examples are transferred.
    """
    out = Path(adv_dir)
    model = resolve_model(model)
    records = [r for r in read_records(out) if r.success]
    clean_correct = 0
    fooled = 0
    for r in records:
        clean = load_png(out / r.clean_path)
        if int(np.argmax(model.classify(clean))) != r.true_label:
            continue
        clean_correct += 1
        adv = load_png(out / r.adv_path)
        if int(np.argmax(model.classify(adv))) != r.true_label:
            fooled += 1
    tasr = 100.0 * fooled / clean_correct if clean_correct else None
    return TransferResult(tasr=tasr, transferred=len(records),
                          clean_correct=clean_correct, misclassified=fooled)


@dataclass
class DefenseResult:
    defense: str
    original_asr: float | None
    post_defense_asr: float | None
    surviving: int
    attacked: int


def defense_eval(adv_dir, defense: str, model) -> DefenseResult:
    """Re-classify saved adversarial examples after a defense transform.

    Supported defense spec: "jpeg:<quality>". Only originally-successful
    examples can count as surviving, so defending clean images can never
    manufacture successes. Both rates share the original denominator
    (n_total - n_misclassified).
    """
    kind, _, arg = defense.partition(":")
    if kind != "jpeg":
        raise ValueError(f"unknown defense {defense!r} (expected jpeg:<quality>)")
    quality = int(arg) if arg else 50
    out = Path(adv_dir)
    model = resolve_model(model)
    records = read_records(out)
    attacked = sum(1 for r in records if not r.skipped)
    surviving = 0
    for r in records:
        if not r.success:
            continue
        defended = jpeg_roundtrip(load_png(out / r.adv_path), quality)
        if int(np.argmax(model.classify(defended))) != r.true_label:
            surviving += 1
    original = asr(records) if records else None
    post = 100.0 * surviving / attacked if attacked else None
    return DefenseResult(defense=f"jpeg:{quality}", original_asr=original,
                         post_defense_asr=post, surviving=surviving, attacked=attacked)


def sweep_q(q_values, cfg: CampaignConfig, gen_paths) -> list:
    """One campaign per latent dimensionality; returns [(q, asr, aq), ...].

    gen_paths maps each q to its generator weight file; every q needs one.
    """
    from .pggn import load_weights

    rows = []
    for q in q_values:
        path = gen_paths(q) if callable(gen_paths) else gen_paths[q]
        if not Path(path).exists():
            raise FileNotFoundError(f"no generator weights for q={q} at {path}")
        gen = load_weights(path)
        sub = dataclasses.replace(
            cfg,
            out_dir=str(Path(cfg.out_dir) / f"q_{q}"),
            attack=dataclasses.replace(cfg.attack, q=int(q)),
        )
        report = run_campaign(sub, gen=gen)
        rows.append((int(q), report.asr, report.aq))
    with open(Path(cfg.out_dir) / "sweep_q.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["q", "asr", "aq"])
        for row in rows:
            writer.writerow(row)
    return rows
