"""Command-line harness over dataset generation, training, and scoring.

Commands
--------
gen-data   synthesize a dataset directory: world, splits, guidance, frozen encoder
train      optimize the prompt stack on one split; per-epoch checkpoints + metrics
eval       score a checkpoint on the test scenes; predictions + report
gradcheck  finite-difference audit of every trainable group (64-bit only)
ablate     cumulative component ladder over three seeds, mean +/- sd per split

Exit codes: 0 success, 2 refused input (bad config, occupied output directory,
checkpoint identity mismatch), 1 internal failure. Every artifact is written
atomically (temp file + rename) and each run directory gets a fully resolved
config echo, so a result can always be traced back to the exact settings.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import engine
from .config import (ConfigError, MODES, TOGGLE_FIELDS, load_config)
from .data import (DataError, _atomic_write, generate_dataset, dataset_files,
                   load_world, write_jsonl)
from .detector import build_model
from .evaluate import evaluate_predictions, summarize
from .training import (TrainingError, focal_loss, relation_loss, total_loss,
                       load_checkpoint, save_checkpoint, train_model)

GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5

# cumulative ladder order; row k of the ablation enables the first k entries
LADDER_ORDER = ("intra_fusion", "visual_adapter", "llm_guide", "utpl",
                "inter_fusion", "vlm_guide")


# ------------------------------------------------------------- shared helpers

def _resolve_data_dir(args):
    path = args.data_dir or os.environ.get("EZHOI_DATA_DIR")
    if not path:
        raise ConfigError("no dataset directory: pass --data-dir or set EZHOI_DATA_DIR")
    return path


def _build_cfg(args, force_precision=None):
    overrides = {}
    for pair in args.toggle or ():
        if "=" not in pair:
            raise ConfigError(f"--toggle expects name=on|off, got {pair!r}")
        name, raw = pair.split("=", 1)
        name = name.strip()
        if name not in TOGGLE_FIELDS:
            raise ConfigError(f"unknown toggle {name!r}; choose from {TOGGLE_FIELDS}")
        lowered = raw.strip().lower()
        if lowered not in ("on", "off"):
            raise ConfigError(f"--toggle {name} must be on or off, got {raw!r}")
        overrides[name] = lowered == "on"
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "precision", None) is not None:
        overrides["precision"] = args.precision
    if force_precision is not None:
        overrides["precision"] = force_precision
    return load_config(getattr(args, "config", None), overrides)


def _claim_out_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(f"{path} is not empty; pass --force to write into it")
    os.makedirs(path, exist_ok=True)


def _echo_config(out_dir, cfg):
    _atomic_write(os.path.join(out_dir, "config.txt"), cfg.to_text().encode())


def _write_json(path, payload):
    _atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def _finite_or_none(x):
    x = float(x)
    return x if np.isfinite(x) else None


# ------------------------------------------------------------------- gen-data

def cmd_gen_data(args):
    data_dir = _resolve_data_dir(args)
    cfg = _build_cfg(args)
    _claim_out_dir(data_dir, args.force)
    checksums = generate_dataset(cfg, data_dir, cfg.seed)
    _echo_config(data_dir, cfg)
    for name in dataset_files():
        print(f"{name} {checksums[name]}")
    return 0


# ---------------------------------------------------------------------- train

def _best_epoch(history, delta):
    """Replay the early-stopping rule to name the epoch whose state survived."""
    best, best_epoch = -np.inf, -1
    for h in history:
        v = h["val_seen_mAP"]
        if not np.isnan(v) and v > best + delta:
            best, best_epoch = v, h["epoch"]
    return best_epoch if best_epoch >= 0 else history[-1]["epoch"]


def cmd_train(args):
    data_dir = _resolve_data_dir(args)
    cfg = _build_cfg(args)
    out_dir = args.out or os.path.join(data_dir, f"train.{cfg.mode}.seed{cfg.seed}")
    _claim_out_dir(out_dir, args.force)
    world = load_world(data_dir, cfg.mode)
    model = build_model(cfg, world)
    _echo_config(out_dir, cfg)
    print(f"frozen encoder {model.frozen_digest}")
    print(f"training on {len(world.train_scenes)} scenes, mode={cfg.mode}, "
          f"seed={cfg.seed}, precision={cfg.precision}")

    def on_epoch(m, epoch, stats):
        save_checkpoint(os.path.join(out_dir, f"epoch{epoch:03d}.ckpt"),
                        m, cfg, epoch)
        print(f"epoch {epoch}: loss={stats['loss']:.6f} "
              f"focal={stats['focal']:.6f} relation={stats['relation']:.6f} "
              f"val_seen_mAP={stats['val_seen_mAP']:.4f}", flush=True)

    history = train_model(model, world.train_scenes, cfg, on_epoch=on_epoch)
    best = _best_epoch(history, cfg.early_stop_delta)
    save_checkpoint(os.path.join(out_dir, "model.ckpt"), model, cfg, best)
    records = [{k: _finite_or_none(v) if k != "epoch" else int(v)
                for k, v in h.items()} for h in history]
    write_jsonl(os.path.join(out_dir, "metrics.jsonl"), records)
    print(f"kept epoch {best}; artifacts in {out_dir}")
    return 0


# ----------------------------------------------------------------------- eval

def cmd_eval(args):
    data_dir = _resolve_data_dir(args)
    cfg = _build_cfg(args)
    ckpt = args.checkpoint
    out_dir = args.out or os.path.join(
        os.path.dirname(os.path.abspath(ckpt)), f"eval.{cfg.mode}")
    _claim_out_dir(out_dir, args.force)
    world = load_world(data_dir, cfg.mode)
    model = build_model(cfg, world)
    load_checkpoint(ckpt, model, cfg)
    if args.tau is not None:
        # inference-only temperature; applied after the identity check so a
        # sweep over tau can reuse one checkpoint
        cfg = cfg.replace(tau_infer=args.tau)
        model.cfg = cfg
    preds = model.predict_scenes(world.test_scenes)
    res = evaluate_predictions(preds, world.test_scenes, world.classes)
    agg = summarize(res["ap"], res["n_gt"], world.seen_ids, world.unseen_ids)
    unseen = set(world.unseen_ids)
    report = {k: _finite_or_none(v) for k, v in agg.items()}
    report["per_class"] = [
        {"class_id": c, "verb": v, "object": o,
         "ap": _finite_or_none(res["ap"][c]), "n_gt": int(res["n_gt"][c]),
         "unseen": c in unseen}
        for c, (v, o) in enumerate(world.classes)]
    write_jsonl(os.path.join(out_dir, "preds.jsonl"), preds)
    _write_json(os.path.join(out_dir, "report.json"), report)
    _echo_config(out_dir, cfg)
    print(f"{len(preds)} predictions over {len(world.test_scenes)} scenes")
    for key in ("mAP", "seen_mAP", "unseen_mAP"):
        print(f"{key} {report[key]:.6f}")
    return 0


# ------------------------------------------------------------------ gradcheck

# group label -> parameter name prefixes
GRADCHECK_GROUPS = (
    ("prompt.base", ("prompt.base.",)),
    ("prompt.proj", ("prompt.proj_w.", "prompt.proj_b.")),
    ("prompt.llm", ("prompt.llm.",)),
    ("prompt.vlm", ("prompt.vlm.",)),
    ("prompt.utpl", ("prompt.utpl.",)),
    ("head.intra", ("head.intra.",)),
    ("head.inter", ("head.inter.",)),
    ("visual.adapter", ("adapter.",)),
)

_FAULT_RULES = ("tanh", "sigmoid", "gelu")


def _self_test_fixture(rng):
    params = {name: engine.Tensor(rng.normal(0.4, 0.3, size=4), requires_grad=True)
              for name in _FAULT_RULES}

    def loss_fn():
        terms = [engine.reduce_mean(getattr(engine, name)(params[name]))
                 for name in _FAULT_RULES]
        return terms[0] + terms[1] + terms[2]

    return params, loss_fn


def run_self_test(tol=GRADCHECK_TOL, step=GRADCHECK_STEP):
    """Prove the checker catches a planted bug in a single backward rule.

    Three parameter groups route through exactly one activation each. A
    sign-flipped backward must fail its own group and leave the other two
    green, for every rule in turn; a clean pass follows once restored.
    Returns a list of printable result lines; raises TrainingError if the
    checker misses a planted fault or flags a healthy rule.
    """
    params, loss_fn = _self_test_fixture(np.random.default_rng(7))
    lines = []
    for name in _FAULT_RULES:
        helper = f"_{name}_bwd"
        orig = getattr(engine, helper)
        setattr(engine, helper, lambda *a, _o=orig: -_o(*a))
        try:
            errs = engine.finite_difference_check(
                loss_fn, list(params.items()), np.random.default_rng(3), step=step)
        finally:
            setattr(engine, helper, orig)
        caught = errs[name] >= tol
        clean = all(errs[o] < tol for o in _FAULT_RULES if o != name)
        if not (caught and clean):
            raise TrainingError(
                f"self-test broken: flipped {name} backward, caught={caught}, "
                f"others clean={clean}, errors={errs}")
        lines.append(f"self-test: flipped {name} backward, its group failed "
                     f"({errs[name]:.2e}), others passed")
    errs = engine.finite_difference_check(
        loss_fn, list(params.items()), np.random.default_rng(3), step=step)
    if max(errs.values()) >= tol:
        raise TrainingError(f"self-test broken: clean pass failed, errors={errs}")
    lines.append(f"self-test: rules restored, clean pass ok "
                 f"(max err {max(errs.values()):.2e})")
    return lines


def _micro_batch(model, scenes, cfg):
    """Smallest scene prefix whose forward pass yields interaction pairs."""
    for size in (4, 8, 16, len(scenes)):
        batch = scenes[:size]
        scores, targets, sel_rows = model.forward_train(batch)
        if scores is not None:
            return batch
    raise TrainingError("no scene in the training split produces a pair")


def cmd_gradcheck(args):
    if args.precision == 32:
        raise ConfigError("gradient checking runs in 64-bit only; drop --precision 32")
    for line in run_self_test():
        print(line)
    if args.self_test:
        return 0

    data_dir = _resolve_data_dir(args)
    cfg = _build_cfg(args, force_precision=64)
    world = load_world(data_dir, cfg.mode)
    model = build_model(cfg, world)
    batch = _micro_batch(model, world.train_scenes, cfg)

    def loss_fn():
        scores, targets, sel_rows = model.forward_train(batch)
        l_foc = focal_loss(scores, targets, cfg.focal_gamma, cfg.focal_alpha)
        l_rel = relation_loss(sel_rows, world.class_text[model.selected])
        return total_loss(l_foc, l_rel, cfg.relation_weight)

    # a few real steps first: zero-initialized up-projections and residual
    # gates block their partners' gradients until the optimizer moves them
    params = model.named_params()
    opt = engine.AdamW([p for _, p in sorted(params.items())],
                       lr=cfg.lr, weight_decay=0.0)
    for _ in range(3):
        opt.zero_grad()
        loss_fn().backward()
        opt.step()
    opt.zero_grad()

    rng = np.random.default_rng(cfg.seed)
    failed = []
    for label, prefixes in GRADCHECK_GROUPS:
        group = sorted((n, p) for n, p in params.items()
                       if n.startswith(prefixes))
        if not group:
            print(f"{label:16s} absent (toggled off)")
            continue
        errs = engine.finite_difference_check(loss_fn, group, rng,
                                              step=GRADCHECK_STEP)
        worst = max(errs.values())
        ok = worst < GRADCHECK_TOL
        print(f"{label:16s} {'PASS' if ok else 'FAIL'} "
              f"max rel err {worst:.3e} over {len(group)} tensors")
        if not ok:
            failed.append(label)
    print(f"frozen.text      no-grad ({len(model.text_enc.named_parameters())} tensors)")
    print(f"frozen.visual    no-grad ({len(model.vis_enc.named_parameters())} tensors)")
    if failed:
        print(f"gradcheck FAILED for {', '.join(failed)}")
        return 1
    print("gradcheck passed for every trainable group")
    return 0


# --------------------------------------------------------------------- ablate

def _ladder_rows():
    rows = [("baseline", ())]
    for k in range(1, len(LADDER_ORDER) + 1):
        rows.append((f"+{LADDER_ORDER[k - 1]}", LADDER_ORDER[:k]))
    return rows


def _run_single(cfg, world):
    model = build_model(cfg, world)
    train_model(model, world.train_scenes, cfg)
    preds = model.predict_scenes(world.test_scenes)
    res = evaluate_predictions(preds, world.test_scenes, world.classes)
    return summarize(res["ap"], res["n_gt"], world.seen_ids, world.unseen_ids)


def cmd_ablate(args):
    data_dir = _resolve_data_dir(args)
    cfg = _build_cfg(args)
    out_dir = args.out or os.path.join(data_dir, f"ablate.{cfg.mode}.seed{cfg.seed}")
    _claim_out_dir(out_dir, args.force)
    world = load_world(data_dir, cfg.mode)
    _echo_config(out_dir, cfg)
    seeds = [cfg.seed + k for k in range(3)]
    keys = ("mAP", "seen_mAP", "unseen_mAP")
    results = []
    for label, enabled in _ladder_rows():
        toggles = {t: t in enabled for t in TOGGLE_FIELDS}
        per_seed = []
        for s in seeds:
            run_cfg = cfg.replace(seed=s, **toggles)
            agg = _run_single(run_cfg, world)
            per_seed.append({k: float(agg[k]) for k in keys})
            print(f"{label} seed {s}: " +
                  " ".join(f"{k}={agg[k]:.4f}" for k in keys), flush=True)
        stats = {k: {"mean": float(np.mean([r[k] for r in per_seed])),
                     "sd": float(np.std([r[k] for r in per_seed], ddof=1))}
                 for k in keys}
        results.append({"row": label, "toggles": toggles,
                        "per_seed": per_seed, **stats})
    _write_json(os.path.join(out_dir, "results.json"),
                {"mode": cfg.mode, "seeds": seeds, "rows": results})

    width = max(len(r["row"]) for r in results) + 2
    header = f"{'row':<{width}}" + "".join(f"{k:>20}" for k in keys)
    print(header)
    for r in results:
        cells = "".join(f"{r[k]['mean']:>11.4f} +/-{r[k]['sd']:.4f}" for k in keys)
        print(f"{r['row']:<{width}}{cells}")
    print(f"table written to {os.path.join(out_dir, 'results.json')}")
    return 0


# ----------------------------------------------------------------- entrypoint

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--toggle", action="append", metavar="NAME=on|off",
                        help="flip one model component (repeatable)")
    common.add_argument("--precision", type=int, choices=(32, 64),
                        help="float width for the trainable stack")
    common.add_argument("--data-dir",
                        help="dataset directory (default: $EZHOI_DATA_DIR)")
    common.add_argument("--force", action="store_true",
                        help="write into a non-empty directory")
    moded = argparse.ArgumentParser(add_help=False)
    moded.add_argument("--mode", choices=MODES, help="zero-shot split")

    parser = argparse.ArgumentParser(
        prog="ezhoi",
        description="zero-shot human-object interaction detection sandbox")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="synthesize a dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common, moded],
                       help="train the prompt stack on one split")
    p.add_argument("--out", help="run directory (default: under the data dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, moded],
                       help="score a checkpoint on the test scenes")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--out", help="report directory (default: beside checkpoint)")
    p.add_argument("--tau", type=float,
                   help="override the inference gate temperature")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common, moded],
                       help="finite-difference audit of trainable groups")
    p.add_argument("--self-test", action="store_true",
                   help="only prove the checker catches planted faults")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common, moded],
                       help="cumulative component ladder over three seeds")
    p.add_argument("--out", help="results directory (default: under the data dir)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - last-resort mapping  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
