"""Command line interface.

Subcommands cover the whole workflow: synthesize a dataset, train the toy
classifier and the grid generator, attack single images or whole campaigns,
then replay saved artifacts for transfer, defense, and report verification.

Options can come from three places with precedence flags > config file >
built-in defaults. The config file is a flat JSON object whose keys match the
long flag names with dashes replaced by underscores, e.g.
{"np": 100, "cr": 0.8, "f": 0.5, "alpha": 0.25, "mq": 3000, "seed": 7}.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, attack
from .de import DEConfig
from .harness import (CampaignConfig, defense_eval, resolve_model,
                      run_campaign, sweep_q, transfer_eval, verify_report)
from .imaging import load_png, save_png
from .models import synth_dataset, toy_train
from .pggn import (GeneratorWeights, TrainConfig, load_weights, save_weights,
                   train)

ATTACK_DEFAULTS = {
    "np": 100, "cr": 0.80, "f": 0.50, "alpha": 0.25, "mq": 3000,
    "q": 52, "seed": 0,
}


def _add_attack_flags(p: argparse.ArgumentParser):
    p.add_argument("--np", type=int, help="population size")
    p.add_argument("--cr", type=float, help="crossover probability")
    p.add_argument("--f", type=float, help="differential weight")
    p.add_argument("--alpha", type=float, help="fitness balance factor")
    p.add_argument("--mq", type=int, help="max model queries per image")
    p.add_argument("--q", type=int, help="latent dimensionality")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--config", help="JSON config file (flags override it)")


def _merge(args, defaults: dict) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    merged = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        with open(cfg_path) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise SystemExit(f"config file {cfg_path} must hold a JSON object")
        merged.update({k: v for k, v in file_cfg.items() if k in merged})
    for key in merged:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            merged[key] = flag_val
    return merged


def _attack_config(values: dict) -> AttackConfig:
    return AttackConfig(
        alpha=values["alpha"],
        de=DEConfig(np=values["np"], cr=values["cr"], f=values["f"],
                    max_evals=values["mq"]),
        q=values["q"],
        seed=values["seed"],
    )


def cmd_synth_data(args):
    ds = synth_dataset(args.n_per_class, size=args.size, seed=args.seed or 0)
    root = Path(args.out)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    counters = {}
    for img, label in zip(ds.images, ds.labels):
        name = ds.class_names[label]
        i = counters.get(name, 0)
        counters[name] = i + 1
        save_png(img, root / name / f"{name}_{i:04d}.png")
    print(f"wrote {len(ds.images)} images over {len(ds.class_names)} classes to {root}")


def cmd_train_toy(args):
    from .harness import load_dataset_dir

    entries, class_names = load_dataset_dir(args.dataset)
    from .models import SyntheticDataset

    images = [load_png(p) for _, p, _ in entries]
    labels = np.array([lab for _, _, lab in entries])
    ds = SyntheticDataset(images=images, labels=labels,
                          class_names=tuple(class_names), seed=args.seed or 0)
    clf = toy_train(ds, epochs=args.epochs, lr=args.lr, seed=args.seed or 0)
    clf.save(args.out)
    correct = sum(int(np.argmax(clf.classify(img))) == lab
                  for img, lab in zip(images, labels))
    print(f"trained on {len(images)} images, train accuracy "
          f"{100.0 * correct / len(images):.1f}%, weights -> {args.out}")


def cmd_train_pggn(args):
    values = _merge(args, ATTACK_DEFAULTS)
    if args.frozen_random:
        gen = GeneratorWeights.random_init(q=values["q"], seed=values["seed"])
        save_weights(gen, args.out)
        print(f"frozen-random generator (q={values['q']}) -> {args.out}")
        return
    cfg = TrainConfig(grids_per_size=args.grids, epochs=args.epochs,
                      batch_size=args.batch, q=values["q"], seed=values["seed"],
                      saturating=args.saturating)
    gen, disc, history = train(cfg)
    save_weights(gen, args.out)
    if args.disc_out:
        save_weights(disc, args.disc_out)
    last = history[-1]
    print(f"trained {cfg.epochs} epochs; final d_loss={last['d_loss']:.4f} "
          f"g_loss={last['g_loss']:.4f}; generator -> {args.out}")


def cmd_attack(args):
    values = _merge(args, ATTACK_DEFAULTS)
    model = resolve_model(args.model)
    gen = load_weights(args.gen)
    img = load_png(args.image)
    probs = model.classify(img)
    label = int(np.argmax(probs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = attack(img, label, model, gen, _attack_config(values))
    adv_path = out / "adversarial.png"
    save_png(result.adv_image, adv_path)
    record = {
        "image": str(args.image),
        "original_label": result.original_label,
        "predicted_label": result.predicted_label,
        "success": result.success,
        "queries": result.queries,
        "generations": result.generations,
        "l_f": result.l_f, "l_adv": result.l_adv, "l_mse": result.l_mse,
        "seed": values["seed"],
        "params": [float(v) for v in result.params],
    }
    with open(out / "attack.json", "w") as fh:
        json.dump(record, fh, indent=1)
    status = "SUCCESS" if result.success else "FAILED"
    print(f"{status}: label {result.original_label} -> {result.predicted_label} "
          f"in {result.queries} queries; artifacts in {out}")


def cmd_campaign(args):
    values = _merge(args, ATTACK_DEFAULTS)
    cfg = CampaignConfig(
        dataset=args.dataset, model=args.model, out_dir=args.out,
        attack=_attack_config(values), seed=values["seed"], limit=args.limit,
        synthetic_images=args.synthetic_images, synthetic_size=args.synthetic_size)
    report = run_campaign(cfg, gen_path=args.gen)
    asr_s = "null" if report.asr is None else f"{report.asr:.2f}"
    aq_s = "null" if report.aq is None else f"{report.aq:.1f}"
    print(f"campaign done: {len(report.records)} images, ASR={asr_s}% AQ={aq_s}; "
          f"reports in {args.out}")


def cmd_transfer(args):
    res = transfer_eval(args.adv_dir, args.model)
    tasr_s = "null" if res.tasr is None else f"{res.tasr:.2f}"
    print(f"TASR={tasr_s}% ({res.misclassified}/{res.clean_correct} clean-correct "
          f"of {res.transferred} transferred)")


def cmd_defend(args):
    res = defense_eval(args.adv_dir, args.defense, args.model)
    orig = "null" if res.original_asr is None else f"{res.original_asr:.2f}"
    post = "null" if res.post_defense_asr is None else f"{res.post_defense_asr:.2f}"
    print(f"{res.defense}: original ASR={orig}% post-defense ASR={post}% "
          f"({res.surviving}/{res.attacked} attacked images still adversarial)")


def cmd_sweep_q(args):
    values = _merge(args, ATTACK_DEFAULTS)
    q_values = [int(s) for s in args.q_list.split(",")]
    cfg = CampaignConfig(
        dataset=args.dataset, model=args.model, out_dir=args.out,
        attack=_attack_config(values), seed=values["seed"], limit=args.limit,
        synthetic_images=args.synthetic_images, synthetic_size=args.synthetic_size)
    rows = sweep_q(q_values, cfg, lambda q: args.gen_pattern.format(q=q))
    for q, a, av in rows:
        asr_s = "null" if a is None else f"{a:.2f}"
        aq_s = "null" if av is None else f"{av:.1f}"
        print(f"q={q}: ASR={asr_s}% AQ={aq_s}")
    print(f"table -> {Path(args.out) / 'sweep_q.csv'}")


def cmd_verify_report(args):
    problems = verify_report(args.report_dir)
    if problems:
        for p in problems:
            print(f"MISMATCH {p}")
        raise SystemExit(1)
    print("report is self-consistent")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudattack", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a procedural texture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-toy", help="train the toy softmax classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("train-pggn", help="train (or freeze) the grid generator")
    p.add_argument("--out", required=True)
    p.add_argument("--disc-out", help="also save discriminator weights here")
    p.add_argument("--grids", type=int, default=500)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--frozen-random", action="store_true",
                   help="skip training; save a seeded random-init generator")
    p.add_argument("--saturating", action="store_true",
                   help="use the literal generator objective instead of the "
                        "non-saturating form")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_train_pggn)

    p = sub.add_parser("attack", help="attack a single image")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--out", required=True)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("campaign", help="attack a dataset and emit reports")
    p.add_argument("--dataset", required=True,
                   help="class-per-subdirectory PNG tree, or 'synthetic'")
    p.add_argument("--model", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--synthetic-images", type=int, default=10)
    p.add_argument("--synthetic-size", type=int, default=64)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("transfer", help="replay saved adversarials on another model")
    p.add_argument("--adv-dir", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("defend", help="measure ASR after a defense transform")
    p.add_argument("--adv-dir", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--defense", default="jpeg:50")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("sweep-q", help="one campaign per latent dimensionality")
    p.add_argument("--q-list", default="52,56")
    p.add_argument("--gen-pattern", required=True,
                   help="generator weight path pattern with {q}, e.g. runs/gen_q{q}.bin")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--synthetic-images", type=int, default=10)
    p.add_argument("--synthetic-size", type=int, default=64)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_sweep_q)

    p = sub.add_parser("verify-report", help="recompute a report from its records")
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_verify_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
