"""Command line entry point: ``dfm train | eval | validate``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
The MNIST cache directory comes from ``data.data_dir`` or ``$DFM_DATA_DIR``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, load_state_dict, save_checkpoint, state_dict
from .config import ConfigError, TrainConfig, load_config, parse_assignments, substream
from .datasets import FormatError
from .detection import map_at_50, write_detections_csv
from .experiment import detections_for, evaluate, load_data, make_model, run_training
from .inference import CurvePoint, ExactField, accuracy, multi_step, predict_latent, write_curve_csv
from .metrics import feature_spread, intrinsic_dimension, write_metrics_csv
from .model import build_baseline, build_model
from .trainer import (
    NonFiniteLossError,
    backbone_activation_width,
    gradient_variance_probe,
    linear_fit,
    measure_baseline_memory,
    measure_parallel_memory,
    measure_step_memory,
    predict_activation_memory,
    write_telemetry_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfm", description="Blockwise discriminative flow matching.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "validate"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="config file of 'section.key = value' lines")
        s.add_argument("--set", action="append", default=[], metavar="K=V", help="override one key (repeatable)")
        s.add_argument("--out", default="runs/default", help="output directory")
        s.add_argument("--force", action="store_true", help="overwrite an existing run")
        s.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
        if name == "eval":
            s.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
            s.add_argument("--mode", default="all",
                           choices=("all", "probe", "single_step", "ensemble", "multi_step"))
        if name == "validate":
            s.add_argument("--prop", required=True, choices=("p1", "p2", "p3", "p4"))
            s.add_argument("--checkpoint", help="trained checkpoint for p1/p2")
            s.add_argument("--oracle", action="store_true", help="p1/p2: use the exact-field oracle")
    return p


def _config(args) -> TrainConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed = {args.seed}")
    return load_config(args.config, overrides)


def _prepare_out(args, cfg: TrainConfig, command: str) -> Path:
    out = Path(args.out)
    manifest = out / f"manifest_{command}.json"
    if manifest.exists() and not args.force:
        old = json.loads(manifest.read_text())
        same = old.get("config_hash") == cfg.digest()
        what = "an identical config" if same else "a different config"
        raise UsageError(f"{out} already holds a {command} run of {what}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    manifest.write_text(json.dumps({"command": command, "config": cfg.to_text(), "config_hash": cfg.digest(),
                                    "out": str(out), "artifacts": []}, indent=2) + "\n")
    return manifest


def _add_artifacts(manifest: Path, *paths) -> None:
    data = json.loads(manifest.read_text())
    data["artifacts"].extend(str(p) for p in paths)
    manifest.write_text(json.dumps(data, indent=2) + "\n")


def _load_trained(path, args) -> tuple:
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig(**parse_assignments(meta.splitlines(), str(path)))
    if args.set or args.seed is not None:
        extra = parse_assignments(args.set, "--set")
        if args.seed is not None:
            extra["seed"] = args.seed
        cfg = cfg.replace(**extra)
    data = load_data(cfg)
    model = make_model(cfg, data)
    load_state_dict(model, tensors)
    return cfg, data, model


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = _prepare_out(args, cfg, "train")
    data = load_data(cfg)
    model = make_model(cfg, data)
    result = run_training(cfg, data, model)
    out = Path(args.out)
    write_telemetry_csv(out / "telemetry.csv", result.telemetry)
    save_checkpoint(out / "model.ckpt", state_dict(model), cfg.to_text())
    _add_artifacts(manifest, out / "telemetry.csv", out / "model.ckpt")
    print(f"trained {result.steps} steps; telemetry and checkpoint in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    cfg, data, model = _load_trained(ckpt, args)
    if args.mode == "probe" and data.task != "classification":
        raise UsageError("probe mode applies to classification checkpoints only")
    manifest = _prepare_out(args, cfg, "eval")
    modes = None if args.mode == "all" else (args.mode,)
    results = evaluate(model, cfg, data, modes)
    run_id = cfg.digest()[:12]
    metric = "accuracy" if data.task == "classification" else "map50"
    cols = list(results)
    print(" | ".join(f"{c:>11}" for c in cols))
    print(" | ".join(f"{results[c]:11.4f}" for c in cols))
    rows = {f"{metric}_{c}": v for c, v in results.items()}
    artifacts = [out / "metrics.csv"]
    if data.task == "detection":
        z = predict_latent(model, data.X_test, "multi_step" if args.mode == "all" else args.mode,
                           substream(cfg.seed, "inference"), cfg.single_block)
        dets = detections_for(model, z)
        _, per_class = map_at_50(dets, data.y_test)
        rows.update({f"ap50_class{c}": v for c, v in per_class.items()})
        write_detections_csv(out / "detections.csv", dets)
        artifacts.append(out / "detections.csv")
    else:
        feats = model.features(data.X_test).data
        rows["intrinsic_dimension"] = intrinsic_dimension(feats)
        rows["feature_spread"] = feature_spread(feats, seed=cfg.seed)
    write_metrics_csv(out / "metrics.csv", run_id, rows)
    _add_artifacts(manifest, *artifacts)
    return EXIT_OK


def _refinement(args, cfg: TrainConfig) -> tuple[int, Path]:
    out = Path(args.out)
    if args.oracle:
        data = load_data(cfg)
        if data.task != "classification":
            raise UsageError("--oracle runs on a classification dataset")
        model = make_model(cfg, data)
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else None
        if ckpt is None or not ckpt.exists():
            raise UsageError(f"{args.prop} needs --checkpoint of a trained model (or --oracle)")
        cfg, data, model = _load_trained(ckpt, args)
    manifest = _prepare_out(args, cfg, f"validate_{args.prop}")
    rng = substream(cfg.seed, "inference")
    f = model.features(data.X_test)
    z1 = model.head.targets(data.y_test).data
    z0 = rng.standard_normal(z1.shape)
    blocks = [ExactField(z0, z1)] * model.T if args.oracle else model.blocks
    traj = multi_step(blocks, f, z0)
    if args.oracle:
        # untrained readout is arbitrary; decode to the nearest target embedding instead
        E = model.head.emb.W_embed.data
        values = [accuracy(np.argmin(((z[:, None, :] - E[None]) ** 2).sum(-1), axis=1), data.y_test) for z in traj]
    elif data.task == "classification":
        values = [accuracy(model.head.decode(z), data.y_test) for z in traj]
    else:
        values = [map_at_50(detections_for(model, z), data.y_test)[0] for z in traj]
    curve = [CurvePoint(k, k / model.T, v) for k, v in enumerate(values)]
    path = out / f"refinement_{args.prop}.csv"
    write_curve_csv(path, curve)
    deltas = np.diff(values)
    if args.prop == "p1":
        ok = bool(np.all(deltas >= 0)) or values[-1] >= values[0]
        print(f"p1 monotone={bool(np.all(deltas >= 0))} first={values[0]:.4f} final={values[-1]:.4f}")
    else:
        ok = values[-1] >= values[0] and float(deltas.mean()) >= 0
        print(f"p2 final>=first={values[-1] >= values[0]} mean_delta={float(deltas.mean()):.4f}")
    _add_artifacts(manifest, path)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else 1


def _p3(args, cfg: TrainConfig) -> tuple[bool, Path]:
    data = load_data(cfg)
    if data.task != "classification":
        raise UsageError("p3 runs on a classification dataset")
    rows = []
    ratios = {}
    for T in (2, 4, 6):
        init = substream(cfg.seed, f"init-T{T}")
        fm = build_model("classification", data.input_shape, data.n_classes, init, T=T, d=cfg.d,
                         hidden=cfg.hidden_width, backbone=cfg.backbone, backbone_widths=cfg.backbone_widths)
        base = build_baseline(data.input_shape, data.n_classes, substream(cfg.seed, f"init-T{T}"), T=T, d=cfg.d,
                              hidden=cfg.hidden_width, backbone=cfg.backbone, backbone_widths=cfg.backbone_widths)
        for name, model in (("fm", fm), ("baseline", base)):
            var = gradient_variance_probe(model, data.X_train, data.y_train, 200, batch_size=cfg.batch_size,
                                          seed=cfg.seed)
            ratios[(name, T)] = var[0] / var[-1] if var[-1] > 0 else float("inf")
            rows.extend((name, T, k, v) for k, v in enumerate(var))
    path = Path(args.out) / "grad_variance_p3.csv"
    with open(path, "w") as fh:
        fh.write("method,T,block,grad_var\n")
        for name, T, k, v in rows:
            fh.write(f"{name},{T},{k},{v:.17g}\n")
    ok = ratios[("fm", 6)] >= 0.3 and ratios[("baseline", 6)] <= 0.2
    for (name, T), r in sorted(ratios.items()):
        print(f"p3 {name:8s} T={T} var(block1)/var(blockT)={r:.4g}")
    return ok, path


def _p4(args, cfg: TrainConfig) -> tuple[bool, Path]:
    data = load_data(cfg)
    if data.task != "classification":
        raise UsageError("p4 runs on a classification dataset")
    B = min(cfg.batch_size, len(data.X_train))
    Xb, yb = data.X_train[:B], data.y_train[:B]
    Ts = (2, 4, 8, 16)
    rows = []
    for T in Ts:
        model = build_model("classification", data.input_shape, data.n_classes, substream(cfg.seed, "init"), T=T,
                            d=cfg.d, hidden=cfg.hidden_width, backbone=cfg.backbone,
                            backbone_widths=cfg.backbone_widths)
        width = backbone_activation_width(model.backbone)
        for mode in ("local", "endtoend"):
            measured = measure_step_memory(model, Xb, yb, mode, cfg.seed)
            predicted = predict_activation_memory(B, cfg.d, width, T, mode, hidden=cfg.hidden_width,
                                                  n_classes=data.n_classes)
            rows.append((mode, T, measured, predicted))
        rows.append(("parallel", T, measure_parallel_memory(model, Xb, yb, cfg.seed), rows[-2][3]))
        base = build_baseline(data.input_shape, data.n_classes, substream(cfg.seed, "init"), T=T, d=cfg.d,
                              hidden=cfg.hidden_width, backbone=cfg.backbone, backbone_widths=cfg.backbone_widths)
        rows.append(("baseline", T, measure_baseline_memory(base, Xb, yb), -1))
    path = Path(args.out) / "memory_p4.csv"
    with open(path, "w") as fh:
        fh.write("mode,T,peak_retained,predicted\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    local = [m for mode, _, m, _ in rows if mode == "local"]
    e2e = [m for mode, _, m, _ in rows if mode == "endtoend"]
    slope, _, r2 = linear_fit(Ts, e2e)
    exact = all(m == p for mode, _, m, p in rows if mode in ("local", "endtoend"))
    ok = len(set(local)) == 1 and slope > 0 and r2 > 0.99 and exact
    print(f"p4 local peaks={local} endtoend peaks={e2e} slope={slope:.6g} R2={r2:.6f} closed_form_exact={exact}")
    return ok, path


def cmd_validate(args) -> int:
    cfg = _config(args)
    if args.prop in ("p1", "p2"):
        return _refinement(args, cfg)
    manifest = _prepare_out(args, cfg, f"validate_{args.prop}")
    ok, path = (_p3 if args.prop == "p3" else _p4)(args, cfg)
    _add_artifacts(manifest, path)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "validate": cmd_validate}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, CheckpointError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
