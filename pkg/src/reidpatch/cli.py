"""Command-line entry point.

    reidpatch make-fixture --out DIR [--identities N] [--images-per-identity M] [--seed S]
    reidpatch {train-embedder,train-generator,evaluate,sweep,explain} --config FILE
              [--seed S] [--set key.path=value ...]

Every config-driven command writes under ``<out>/<command>/<timestamp>/``
together with ``resolved_config.yaml``. ``REIDPATCH_OUT`` overrides the
output root. Exit codes: 0 success, 1 runtime failure, 2 config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import config as cfgmod
from .composer import TransformSpec, center_placement, compose_batch, sample_placement
from .data import load_batch, load_image, scan_dataset
from .embedders import register_embedder
from .errors import ConfigError, ReidPatchError
from .objectives import LossWeights
from .patchgen import BackboneSpec

log = logging.getLogger("reidpatch")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _run_dir(cfg, command) -> Path:
    root = Path(os.environ.get("REIDPATCH_OUT") or cfg["out"])
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = root / command / stamp
    k = 1
    while run.exists():
        run = root / command / f"{stamp}-{k}"
        k += 1
    run.mkdir(parents=True)
    (run / "resolved_config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return run


def train_config(cfg) -> "TrainConfig":
    from .trainer import TrainConfig

    g = cfg["generator"]
    t = g["transform"]
    return TrainConfig(
        epochs=g["epochs"], lr=float(g["lr"]), batch_size=g["batch_size"], optimizer=g["optimizer"],
        schedule=g["schedule"], seed=cfg["seed"],
        loss=LossWeights(g["lambda_pull"], g["lambda_push"], g["tau"], g["mode"], g["push_form"]),
        transform=TransformSpec(tuple(t["rotation"]), tuple(t["scale"]), t["perspective"],
                                tuple(t["blur_sigma"]), tuple(t["brightness"]), tuple(t["contrast"])),
        patch_size=tuple(g["patch_size"]), image_size=tuple(cfg["data"]["image_size"]),
        naturalistic=g["naturalistic"], natural_method=g["natural_method"], latent_weight=g["latent_weight"],
        lambda_adv=g["lambda_adv"], backbone=BackboneSpec(**g["backbone"]), checkpoint_every=g["checkpoint_every"],
    )


def _index(cfg):
    return scan_dataset(cfg["data"]["root"], cfg["data"]["layout"])


def _whitebox(cfg):
    e = cfg["embedder"]
    return register_embedder({"arch": e["arch"], "weights": e["weights"], "seed": cfg["seed"],
                              "input_size": tuple(cfg["data"]["image_size"]), "role": "target_whitebox"})


def _blackbox(cfg):
    b = cfg["blackbox"]
    if b["weights"] is None:
        return None
    return register_embedder({"arch": b["arch"], "weights": b["weights"], "seed": cfg["seed"],
                              "input_size": tuple(cfg["data"]["image_size"]), "role": "auxiliary_blackbox"})


def _naturalizer_inputs(cfg):
    g, nat = cfg["generator"], cfg["naturalizer"]
    if not (g["naturalistic"] and g["natural_method"] == "diffusion"):
        return None, None
    from .naturalizer import encode_reference, load_latent_pipeline

    pipe = load_latent_pipeline(nat["pipeline_dir"])
    ref = load_image(nat["reference_image"], *g["patch_size"])
    return pipe, (ref, encode_reference(pipe, ref, g["patch_size"]))


def _attacker(cfg):
    from .patchgen import load_generator

    pipe, ref = _naturalizer_inputs(cfg)
    return load_generator(cfg["generator"]["checkpoint"], pipe, None if ref is None else ref[1])


def cmd_train_embedder(cfg, run: Path) -> dict:
    from .trainer import EmbedderTrainConfig, train_embedder

    e = cfg["embedder"]
    tc = EmbedderTrainConfig(arch=e["arch"], embedding_dim=e["embedding_dim"], epochs=e["epochs"], lr=float(e["lr"]),
                             ids_per_batch=e["ids_per_batch"], images_per_id=e["images_per_id"],
                             triplet_margin=e["triplet_margin"], erasing_prob=e["erasing_prob"], seed=cfg["seed"],
                             image_size=tuple(cfg["data"]["image_size"]))
    path = run / f"{e['arch']}.pt"
    train_embedder(tc, _index(cfg), out_path=path)
    return {"weights": str(path)}


def cmd_train_generator(cfg, run: Path) -> dict:
    from .trainer import train_generator

    pipe, ref = _naturalizer_inputs(cfg)
    idx = _index(cfg)
    crops = None
    g = cfg["generator"]
    if g["naturalistic"] and g["natural_method"] == "gan":
        # real samples for the discriminator: training images resized to the patch size
        train = [r for r in idx.split("train") if not r.is_junk][:256]
        crops = torch.from_numpy(load_batch(train, *g["patch_size"]))
    ckpt = train_generator(train_config(cfg), idx, _whitebox(cfg), out_dir=run, pipeline=pipe,
                           reference_image=None if ref is None else ref[0], natural_crops=crops)
    return {"checkpoint": str(ckpt.path), "epoch_means": ckpt.epoch_means}


def _targets_for(records, pool, seed):
    rng = np.random.default_rng(seed)
    out = []
    for r in records:
        others = [p for p in pool if p.identity != r.identity and not p.is_junk]
        out.append(others[rng.integers(len(others))])
    return out


def cmd_evaluate(cfg, run: Path) -> dict:
    from .evalkit import (
        AttackConfig,
        RetrievalProtocol,
        attack_success_rate,
        embed_queries,
        evaluate_retrieval,
        pair_cosines,
        save_retrieval_strip,
        similarity,
        write_reports,
    )

    idx = _index(cfg)
    queries, gallery = idx.split("query"), idx.split("gallery")
    ev = cfg["evaluate"]
    protocol = RetrievalProtocol.for_layout(idx.layout, ev["metric"])
    white, black = _whitebox(cfg), _blackbox(cfg)
    attacker = None
    if set(ev["conditions"]) - {"no_patch", "random_patch"}:
        attacker = _attacker(cfg)
    targets = None
    if attacker is not None and attacker.conditioning == "targeted":
        targets = _targets_for(queries, gallery, cfg["seed"])

    def attack_for(cond):
        if cond == "no_patch":
            return None
        return AttackConfig(cond, attacker, ev["placement"], cfg["seed"], targets=targets,
                            patch_size=tuple(cfg["generator"]["patch_size"]) if attacker is None else None)

    reports = []
    for box, handle in (("white", white), ("black", black)):
        if handle is None:
            continue
        g_feats = embed_queries(handle, gallery)
        for cond in ev["conditions"]:
            reports.append(evaluate_retrieval(queries, gallery, handle, protocol, attack_for(cond), box, g_feats))
    write_reports(reports, run / "report.csv")

    # ranked-retrieval strips, clean vs attacked, white-box model
    H, W = white.input_size
    g_feats = embed_queries(white, gallery)
    for i, q in enumerate(queries[: ev["strips"]]):
        for cond in ("no_patch", ev["conditions"][-1]):
            att = attack_for(cond)
            x = torch.from_numpy(load_batch([q], H, W))
            if att is not None:
                from .evalkit import apply_attack

                x = apply_attack(att, x, i)
            z = white.embed_batch(x).numpy()
            order = np.argsort(-similarity(z, g_feats, protocol.metric)[0], kind="stable")
            save_retrieval_strip(x[0].permute(1, 2, 0).numpy(), gallery, order, q.identity,
                                 run / f"strip_{i:02d}_{cond}.png", (H, W))

    summary = {"reports": [r.row() for r in reports]}
    if attacker is not None and attacker.conditioning == "targeted":
        summary["asr"] = _asr_summary(cfg, idx, attacker, white, ev, attack_success_rate, pair_cosines)
        with open(run / "asr.csv", "w") as fh:
            fh.write("condition,asr,mean_cos_target,num_pairs,tau_asr\n")
            for k, v in summary["asr"].items():
                fh.write(f"{k},{v['asr']:.6f},{v['mean_cos_target']:.6f},{v['num_pairs']},{ev['tau_asr']}\n")
    return summary


def sample_asr_pairs(records, n, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n:
        s = records[rng.integers(len(records))]
        others = [r for r in records if r.identity != s.identity]
        pairs.append((s, others[rng.integers(len(others))]))
    return pairs


def targeted_trial_embeddings(attacker, handle, pairs, seed=0, batch_size=25, placement="center"):
    """(adv, source, target) embeddings for (source, target) record pairs."""
    H, W = handle.input_size
    h, w = attacker.patch_size
    rng = np.random.default_rng([seed, 7])
    adv, src, tgt = [], [], []
    attacker.generator.eval()
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        xs = torch.from_numpy(load_batch([p[0] for p in chunk], H, W))
        xt = torch.from_numpy(load_batch([p[1] for p in chunk], H, W))
        with torch.no_grad():
            patches = attacker.patches_from_images(xs, xt)
        if placement == "center":
            origins = [center_placement(H, W, h, w)] * len(chunk)
        else:
            origins = [sample_placement(H, W, h, w, rng) for _ in chunk]
        adv.append(handle.embed_batch(compose_batch(xs, patches, origins)).numpy())
        src.append(handle.embed_batch(xs).numpy())
        tgt.append(handle.embed_batch(xt).numpy())
    return np.concatenate(adv), np.concatenate(src), np.concatenate(tgt)


def _asr_summary(cfg, idx, attacker, handle, ev, asr_fn, cos_fn):
    pool = [r for r in idx.split("query") + idx.split("gallery") if not r.is_junk]
    pairs = sample_asr_pairs(pool, ev["num_pairs"], cfg["seed"])
    adv, src, tgt = targeted_trial_embeddings(attacker, handle, pairs, cfg["seed"], placement=ev["placement"])
    return {
        "no_patch": {"asr": asr_fn(src, tgt, ev["tau_asr"]), "mean_cos_target": float(cos_fn(src, tgt).mean()),
                     "num_pairs": len(pairs)},
        "adversarial_patch": {"asr": asr_fn(adv, tgt, ev["tau_asr"]),
                              "mean_cos_target": float(cos_fn(adv, tgt).mean()), "num_pairs": len(pairs)},
    }


def cmd_sweep(cfg, run: Path) -> dict:
    from dataclasses import replace

    from .evalkit import AttackConfig, RetrievalProtocol, patch_size_sweep, write_reports
    from .trainer import train_generator

    idx = _index(cfg)
    white = _whitebox(cfg)
    attacker = _attacker(cfg)
    sw = cfg["sweep"]
    base = train_config(cfg)

    def retrain(size):
        return train_generator(replace(base, patch_size=tuple(size)), idx, white).attacker

    targets = _targets_for(idx.split("query"), idx.split("gallery"), cfg["seed"]) \
        if attacker.conditioning == "targeted" else None
    attack = AttackConfig("adversarial_patch", attacker, cfg["evaluate"]["placement"], cfg["seed"], targets=targets)
    reports = patch_size_sweep(sw["sizes"], idx.split("query"), idx.split("gallery"), white,
                               RetrievalProtocol.for_layout(idx.layout, cfg["evaluate"]["metric"]), attack,
                               sw["mode"], retrain)
    with open(run / "sweep.csv", "w") as fh:
        fh.write("size,condition,mAP,rank10,rank1,box\n")
        for size, r in zip(sw["sizes"], reports):
            row = r.row()
            fh.write(f"{size},{row['condition']},{row['mAP']},{row['rank10']},{row['rank1']},{row['box']}\n")
    return {"mAP": [r.mAP for r in reports]}


def explain_run(attacker, handle, queries, gallery, num, seed, layer="last"):
    """Activation maps (clean/attacked) and the four-group PCA inputs."""
    from .explain import activation_map, window_mass_fraction

    H, W = handle.input_size
    h, w = attacker.patch_size
    rng = np.random.default_rng(seed)
    qs = queries[:num]
    same = []
    for q in qs:
        cands = [g for g in gallery if g.identity == q.identity] or [q]
        same.append(cands[0])
    targets = _targets_for(qs, gallery, seed)
    xs = torch.from_numpy(load_batch(qs, H, W))
    xt = torch.from_numpy(load_batch(targets, H, W))
    attacker.generator.eval()
    with torch.no_grad():
        patches = attacker.patches_from_images(xs, xt if attacker.conditioning == "targeted" else None)
    origins = [sample_placement(H, W, h, w, rng) for _ in qs]
    adv = compose_batch(xs, patches, origins)
    level = -1 if layer == "last" else int(layer)
    clean_maps = [activation_map(f.numpy(), str(layer)) for f in handle.pyramid_batch(xs)[level]]
    adv_maps = [activation_map(f.numpy(), str(layer)) for f in handle.pyramid_batch(adv)[level]]
    fractions = [window_mass_fraction(m.A, (H, W), x, y, h, w) for m, (x, y) in zip(adv_maps, origins)]
    emb = {
        "source": handle.embed_batch(xs).numpy(),
        "clean_same_id": handle.embed_batch(torch.from_numpy(load_batch(same, H, W))).numpy(),
        "target": handle.embed_batch(xt).numpy(),
        "attacked": handle.embed_batch(adv).numpy(),
    }
    return {"images": xs, "adv": adv, "clean_maps": clean_maps, "adv_maps": adv_maps, "origins": origins,
            "fractions": np.array(fractions), "area_fraction": h * w / (H * W), "embeddings": emb}


def cmd_explain(cfg, run: Path) -> dict:
    from PIL import Image

    from .explain import heatmap_overlay, pca_project, save_projection_plot, write_projection_csv

    idx = _index(cfg)
    white = _whitebox(cfg)
    attacker = _attacker(cfg)
    ex = cfg["explain"]
    res = explain_run(attacker, white, idx.split("query"), idx.split("gallery"), ex["num_samples"], cfg["seed"],
                      ex["layer"])
    for i, (cm, am) in enumerate(zip(res["clean_maps"], res["adv_maps"])):
        left = heatmap_overlay(res["images"][i].permute(1, 2, 0).numpy(), cm)
        right = heatmap_overlay(res["adv"][i].permute(1, 2, 0).numpy(), am)
        Image.fromarray(np.concatenate([left, right], axis=1)).save(run / f"activation_{i:02d}.png")
    groups = list(res["embeddings"])
    X = np.concatenate([res["embeddings"][g] for g in groups])
    labels = [g for g in groups for _ in range(len(res["embeddings"][g]))]
    proj = pca_project(X, labels, k=2)
    write_projection_csv(proj, run / "projection.csv")
    save_projection_plot(proj, run / "projection.png")
    summary = {
        "mass_fraction_mean": float(res["fractions"].mean()),
        "area_fraction": res["area_fraction"],
        "share_concentrated": float((res["fractions"] > res["area_fraction"]).mean()),
        "explained_variance_ratio": proj.explained_variance_ratio.tolist(),
    }
    (run / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


COMMANDS = {
    "train-embedder": cmd_train_embedder,
    "train-generator": cmd_train_generator,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reidpatch", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    fx = sub.add_parser("make-fixture", help="render a synthetic Market-1501-style dataset")
    fx.add_argument("--out", required=True)
    fx.add_argument("--identities", type=int, default=16)
    fx.add_argument("--images-per-identity", type=int, default=8)
    fx.add_argument("--seed", type=int, default=0)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. generator.epochs=5")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "make-fixture":
        from .fixture import make_fixture

        try:
            root = make_fixture(args.out, args.identities, args.images_per_identity, args.seed)
        except (ReidPatchError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(root)
        return EXIT_OK

    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = cfgmod.load_config(args.config, overrides)
        cfgmod.validate(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if cfg["deterministic"]:
        torch.set_num_threads(1)
    torch.manual_seed(cfg["seed"])
    try:
        run = _run_dir(cfg, args.command)
        result = COMMANDS[args.command](cfg, run)
        (run / "result.json").write_text(json.dumps(result, indent=2, default=str))
    except Exception as exc:  # runtime failures map to exit 1
        log.exception("%s failed", args.command)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(run)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
